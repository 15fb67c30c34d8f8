use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn holoprop(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_holoprop"));
    c.args(args);
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Value of `key` in the trailing `summary` line.
fn summary(o: &Output, key: &str) -> Option<String> {
    let out = stdout(o);
    let line = out.lines().rev().find(|l| l.starts_with("summary "))?;
    line.split_whitespace().find_map(|kv| kv.strip_prefix(&format!("{key}=")).map(str::to_string))
}

const SYNTHETIC: &str = r#"
seed = 1
[network]
input = [8]
layers = [{ type = "dense", units = 6 }, { type = "dense", units = 3 }]
activation = "shifted-sigmoid"
[data]
kind = "synthetic"
n = 60
classes = 3
seed = 5
val_fraction = 0.25
[phases]
t_free = 60
t_nudge = 20
[train]
batch_size = 10
learning_rate = 0.1
epochs = 2
eval_steps = 60
estimator = { kind = "holomorphic", radius = 0.4, n_points = 4 }
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn shipped_configs_resolve() {
    let mut n = 0;
    for entry in fs::read_dir(configs()).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "cfg") {
            let o = holoprop(&["grad-check", "--config", p.to_str().unwrap(), "--dry-run"], &[]);
            assert!(o.status.success(), "{}: {}", p.display(), String::from_utf8_lossy(&o.stderr));
            assert!(stdout(&o).contains("[network]"));
            n += 1;
        }
    }
    assert!(n >= 10);
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = holoprop(&["grad-check"], &[]);
    assert_eq!(o.status.code(), Some(1));
    let cfg = write_config(dir.path(), &format!("bogus = 1\n{SYNTHETIC}"));
    let o = holoprop(&["train", "--config", &cfg], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));
    assert_eq!(summary(&o, "status").as_deref(), Some("error"));
    let cfg = write_config(dir.path(), SYNTHETIC);
    let o = holoprop(&["train", "--config", &cfg, "--workers", "0"], &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = SYNTHETIC.replace(
        "kind = \"synthetic\"\nn = 60\nclasses = 3\nseed = 5\n",
        &format!("kind = \"mnist\"\ndir = \"{}\"\n", dir.path().join("absent").display()),
    );
    let cfg = write_config(dir.path(), &text.replace("input = [8]", "input = [784]").replace("val_fraction = 0.25\n", ""));
    let o = holoprop(&["train", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn grad_check_matches_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc");
    let cfg = configs().join("grad_check.cfg");
    let o = holoprop(&["grad-check", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cos: f64 = summary(&o, "hep_cosine").unwrap().parse().unwrap();
    assert!(cos > 0.9999, "{cos}");
    let fd: f64 = summary(&o, "fd_relative_error").unwrap().parse().unwrap();
    assert!(fd < 1e-6, "{fd}");
    let csv = fs::read_to_string(out.join("grad_check.csv")).unwrap();
    assert!(csv.starts_with("estimator,layer,cosine\n"));
    assert!(out.join("resolved.toml").exists());
}

#[test]
fn stability_map_and_orbit_write_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("stability_map.cfg");
    let out = dir.path().join("map");
    let o = holoprop(
        &["stability-map", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[("HOLOPROP_STABILITY__GRID__RESOLUTION", "9")],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(summary(&o, "cells").as_deref(), Some("81"));
    for ext in ["csv", "pgm", "txt"] {
        assert!(out.join(format!("stability_map.{ext}")).exists());
    }
    let cfg = configs().join("orbit.cfg");
    let out = dir.path().join("orbit");
    let o = holoprop(&["orbit", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success());
    let rows = fs::read_to_string(out.join("orbit.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 2 * 64);
}

#[test]
fn sweep_depends_on_seed_not_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("sweep_npoints.cfg");
    let run = |name: &str, seed: &str, workers: &str| {
        let out = dir.path().join(name);
        let o = holoprop(
            &["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", seed, "--workers", workers],
            &[("HOLOPROP_SWEEP__VALUES", "[4, 8]")],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(out.join("sweep.csv")).unwrap()
    };
    let a = run("a", "7", "1");
    assert_eq!(a, run("b", "7", "3"));
    assert_ne!(a, run("c", "8", "1"));
}

#[test]
fn train_resume_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SYNTHETIC);
    let out = dir.path().join("o");
    let out_s = out.to_str().unwrap();
    let o = holoprop(&["train", "--config", &cfg, "--out", out_s], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(summary(&o, "epochs").as_deref(), Some("2"));
    let ckpt = out.join("checkpoint.hckpt");
    let o = holoprop(
        &["train", "--config", &cfg, "--out", out_s, "--resume", ckpt.to_str().unwrap()],
        &[("HOLOPROP_TRAIN__EPOCHS", "3")],
    );
    assert!(o.status.success());
    assert_eq!(summary(&o, "epochs").as_deref(), Some("3"));
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);

    // Same three epochs in one go give the same weights.
    let fresh = dir.path().join("f");
    let o = holoprop(&["train", "--config", &cfg, "--out", fresh.to_str().unwrap()], &[("HOLOPROP_TRAIN__EPOCHS", "3")]);
    assert!(o.status.success());
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(fresh.join("checkpoint.hckpt")).unwrap());

    let o = holoprop(&["eval", "--config", &cfg, "--out", out_s, "--checkpoint", ckpt.to_str().unwrap()], &[]);
    assert!(o.status.success());
    let err: f64 = summary(&o, "val_err").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&err));

    let other = write_config(dir.path(), &SYNTHETIC.replace("units = 6", "units = 5"));
    let o = holoprop(&["eval", "--config", &other, "--out", out_s, "--checkpoint", ckpt.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn divergence_exits_2_with_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SYNTHETIC.replace("shifted-sigmoid", "identity"));
    let out = dir.path().join("o");
    let o = holoprop(&["train", "--config", &cfg, "--out", out.to_str().unwrap()], &[("HOLOPROP_NETWORK__INIT_GAIN", "1000")]);
    assert_eq!(o.status.code(), Some(2), "{}", stdout(&o));
    assert!(out.join("diverged.hckpt").exists());
}
