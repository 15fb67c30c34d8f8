//! `holoprop` command-line entry point.

mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use holoprop::estimators::{imag_projection_estimate, real_projection_estimate, sample_path};
use holoprop::experiments::{SweepAxis, SweepSettings, UnitId};
use holoprop::oracle::{finite_difference_gradient, relative_error, sample_coordinates};
use holoprop::trainer::{evaluate, load_mnist, synth_dataset, train, Checkpoint, Dataset, EpochLog, TrainError};
use holoprop::*;
use log::info;

use config::{ConfigError, DataConfig, RunConfig, SweepAxisName};

#[derive(Parser)]
#[command(name = "holoprop", version, about = "Holomorphic equilibrium propagation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Size of the worker pool.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Validate and print the resolved config without computing.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Subcommand, Clone, Debug)]
enum Command {
    /// Compare estimators against the unrolled adjoint gradient.
    GradCheck,
    /// Convergence map over complex beta.
    StabilityMap,
    /// Nudged fixed points of selected units along the circle.
    Orbit,
    /// Cosine similarity against the oracle along one axis.
    Sweep,
    /// Online estimate quality after each oscillation period.
    OnlineCurve,
    /// Train with the configured estimator.
    Train {
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Validation error of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GradCheck => "grad-check",
            Command::StabilityMap => "stability-map",
            Command::Orbit => "orbit",
            Command::Sweep => "sweep",
            Command::OnlineCurve => "online-curve",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
        }
    }
}

enum Failure {
    Config(String),
    Diverged(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Diverged(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn reason(&self) -> &str {
        match self {
            Failure::Config(s) | Failure::Diverged(s) | Failure::Io(s) => s,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<EstimatorError> for Failure {
    fn from(e: EstimatorError) -> Self {
        match e {
            EstimatorError::Invalid(s) => Failure::Config(s),
            e => Failure::Diverged(e.to_string()),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Diverged => Failure::Diverged(e.to_string()),
            e => Failure::Config(e.to_string()),
        }
    }
}

impl From<holoprop::trainer::DataError> for Failure {
    fn from(e: holoprop::trainer::DataError) -> Self {
        use holoprop::trainer::DataError;
        match e {
            DataError::Invalid(s) => Failure::Config(s),
            e => Failure::Io(e.to_string()),
        }
    }
}

impl From<holoprop::trainer::CheckpointError> for Failure {
    fn from(e: holoprop::trainer::CheckpointError) -> Self {
        use holoprop::trainer::CheckpointError;
        match e {
            CheckpointError::SpecMismatch(s) => Failure::Config(format!("checkpoint does not match the network: {s}")),
            e => Failure::Io(e.to_string()),
        }
    }
}

type Outcome = Result<Vec<(String, String)>, Failure>;

fn kv(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
    net: Network,
}

impl Run {
    fn params(&self) -> Params {
        self.net.init_params(self.cfg.network.init_gain, self.cfg.init_seed())
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>, Failure> {
        let p = self.out.join(name);
        File::create(&p).map(BufWriter::new).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))
    }

    /// The whole dataset, before any split.
    fn dataset(&self) -> Result<Dataset, Failure> {
        let input = &self.cfg.network.input;
        let classes = self.net.n_classes();
        let d = match &self.cfg.data {
            DataConfig::Fixed { inputs, labels } => {
                Dataset::new(input.clone(), inputs.concat(), labels.clone(), classes)?
            }
            DataConfig::Mnist { dir, .. } => {
                let d = load_mnist(dir)?;
                if d.sample_shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(Failure::Config(format!("MNIST samples have {} values, network expects {input:?}", d.dim())));
                }
                Dataset { sample_shape: input.clone(), ..d }
            }
            DataConfig::Synthetic { n, classes: c, seed, .. } => synth_dataset(*n, input, *c, *seed)?,
        };
        if d.n_classes > classes {
            return Err(Failure::Config(format!("data has {} classes, readout has {classes}", d.n_classes)));
        }
        Ok(d)
    }

    /// Batch used by the gradient experiments.
    fn batch(&self) -> Result<(RealTensor, Vec<usize>), Failure> {
        let d = self.dataset()?;
        let idx: Vec<usize> = match &self.cfg.data {
            DataConfig::Mnist { first, count, .. } => (*first..(*first + *count).min(d.len())).collect(),
            _ => (0..d.len()).collect(),
        };
        if idx.is_empty() {
            return Err(Failure::Config("empty batch".into()));
        }
        Ok(d.batch(&idx))
    }

    fn split(&self) -> Result<(Dataset, Dataset), Failure> {
        let d = self.dataset()?;
        match &self.cfg.data {
            DataConfig::Mnist { validation, limit, .. } => {
                if *validation >= d.len() {
                    return Err(Failure::Config(format!("validation {validation} leaves no training data out of {}", d.len())));
                }
                let (tr, va) = d.split(*validation);
                let n = limit.unwrap_or(tr.len()).min(tr.len());
                Ok((tr.subset(0..n), va))
            }
            DataConfig::Synthetic { val_fraction, .. } => Ok(d.split((d.len() as f64 * val_fraction).round() as usize)),
            DataConfig::Fixed { .. } => Ok(d.split(0)),
        }
    }
}

fn write_similarity(w: &mut impl Write, name: &str, r: &SimilarityReport) -> std::io::Result<()> {
    let f = |v: Option<f64>| v.map_or("nan".into(), |c| format!("{c}"));
    writeln!(w, "{name},total,{}", f(r.total))?;
    for (l, c) in r.per_layer.iter().enumerate() {
        writeln!(w, "{name},{},{}", l + 1, f(*c))?;
    }
    Ok(())
}

fn grad_check(run: &Run) -> Outcome {
    let (x, y) = run.batch()?;
    let p = NetProblem::new(&run.net, run.params(), &x, &y)?;
    let oracle = unrolled_adjoint_gradient(&p, run.cfg.oracle.steps);
    let phases = run.cfg.phases();
    let path = NudgePath::new(run.cfg.path.radius, run.cfg.path.n_points)?;
    let gc = &run.cfg.grad_check;
    let mut csv = run.create("grad_check.csv")?;
    writeln!(csv, "estimator,layer,cosine")?;
    let mut summary = vec![];
    println!("{:<22} {:>12}  per-layer", "estimator", "total");
    for &kind in &gc.estimators {
        let grad = match kind {
            EstimatorKind::ClassicEp => {
                classic_ep(&p, gc.classic_beta.unwrap_or(run.cfg.path.radius), &phases, gc.classic_realizations)?.grad
            }
            EstimatorKind::Holomorphic => {
                let e = hep_estimate(&p, &path, &phases)?;
                summary.push(kv("hep_imag_ratio", format!("{:e}", e.imag_residual / e.grad.norm())));
                e.grad
            }
            EstimatorKind::RealProjection => real_projection_estimate(&sample_path(&p, &path, &phases)?.samples, path.radius)?,
            EstimatorKind::ImagProjection => imag_projection_estimate(&sample_path(&p, &path, &phases)?.samples, path.radius)?,
            EstimatorKind::Online => {
                let o = OnlineConfig {
                    t_osc: 400,
                    t_plas: 4000,
                    radius: path.radius,
                    settle_first: true,
                    off_boundary: false,
                };
                online_estimate(&p, &o, &phases, None)?.estimate.grad
            }
        };
        let r = cosine_similarity(&grad, &oracle.grad);
        write_similarity(&mut csv, kind.name(), &r)?;
        let layers: Vec<String> = r.per_layer.iter().map(|c| c.map_or("nan".into(), |v| format!("{v:.6}"))).collect();
        let total = r.total.unwrap_or(f64::NAN);
        println!("{:<22} {:>12.8}  {}", kind.name(), total, layers.join(" "));
        summary.push(kv(&format!("{}_cosine", kind.name().replace('-', "_")), format!("{total:.8}")));
    }
    if gc.fd_coordinates > 0 {
        let coords = sample_coordinates(p.params(), gc.fd_coordinates, run.cfg.seed);
        let fd = finite_difference_gradient(&p, gc.fd_step, Some(&coords), &SettleConfig::steps(run.cfg.oracle.steps))
            .map_err(|e| Failure::Diverged(e.to_string()))?;
        let err = relative_error(&oracle.grad, &fd.grad, Some(&coords));
        println!("adjoint vs finite differences on {} coordinates: relative error {err:.3e}", coords.len());
        summary.push(kv("fd_relative_error", format!("{err:e}")));
    }
    csv.flush()?;
    Ok(summary)
}

fn stability(run: &Run) -> Outcome {
    let (x, y) = run.batch()?;
    let p = NetProblem::new(&run.net, run.params(), &x, &y)?;
    let s = run.cfg.stability;
    let map = stability_map(&p, s.grid, s.steps, s.settled_tol);
    map.save(&run.out, "stability_map")?;
    let unstable = (0..map.residual.len()).filter(|&i| map.unstable(i)).count();
    let hits = map.circle_hits_unstable(run.cfg.path.radius);
    Ok(vec![
        kv("cells", map.residual.len()),
        kv("unstable", unstable),
        kv("diverged", map.diverged.iter().filter(|d| **d).count()),
        kv("path_hits_unstable", hits),
    ])
}

fn orbit(run: &Run) -> Outcome {
    let (x, y) = run.batch()?;
    let p = NetProblem::new(&run.net, run.params(), &x, &y)?;
    let path = NudgePath::new(run.cfg.path.radius, run.cfg.path.n_points)?;
    let units: Vec<UnitId> = run.cfg.orbit.units.iter().map(|u| (u[0], u[1])).collect();
    for &(l, u) in &units {
        let hidden = run.net.depth() - 1;
        if l >= hidden || u >= run.net.layers[l].shape.iter().product::<usize>() {
            return Err(Failure::Config(format!("no hidden unit ({l}, {u})")));
        }
    }
    let t = orbit_trace(&p, &path, &units, &run.cfg.phases())?;
    let mut w = run.create("orbit.csv")?;
    t.write_csv(&mut w)?;
    w.flush()?;
    let mut s = run.create("orbit_real_series.csv")?;
    writeln!(s, "layer,unit,t,s_re")?;
    for (i, &(l, u)) in units.iter().enumerate() {
        for (k, v) in t.real_series(i).iter().enumerate() {
            writeln!(s, "{l},{u},{k},{v}")?;
        }
    }
    s.flush()?;
    Ok(vec![kv("units", units.len()), kv("points", path.n_points)])
}

fn sweep(run: &Run) -> Outcome {
    let sc = run.cfg.sweep.as_ref().ok_or_else(|| Failure::Config("missing [sweep] table".into()))?;
    let (x, y) = run.batch()?;
    let p = NetProblem::new(&run.net, run.params(), &x, &y)?;
    let oracle = unrolled_adjoint_gradient(&p, run.cfg.oracle.steps).grad;
    let whole = |v: &f64| -> Result<usize, Failure> {
        if *v >= 1.0 && v.fract() == 0.0 {
            Ok(*v as usize)
        } else {
            Err(Failure::Config(format!("axis value {v} must be a positive integer")))
        }
    };
    let axis = match sc.axis {
        SweepAxisName::Radius => SweepAxis::Radius(sc.values.clone()),
        SweepAxisName::NPoints => SweepAxis::NPoints(sc.values.iter().map(whole).collect::<Result<_, _>>()?),
        SweepAxisName::TOsc => SweepAxis::TOsc(sc.values.iter().map(whole).collect::<Result<_, _>>()?),
    };
    let settings = SweepSettings {
        radius: run.cfg.path.radius,
        n_points: run.cfg.path.n_points,
        t_osc: sc.t_osc,
        periods: sc.periods,
        phases: run.cfg.phases(),
        classic_realizations: sc.classic_realizations,
    };
    let r = cosine_sweep(&p, &oracle, &sc.estimators, &axis, &settings);
    let mut w = run.create("sweep.csv")?;
    r.write_csv(&mut w)?;
    w.flush()?;
    let failed = r.rows.iter().filter(|row| row.report.is_none()).count();
    for row in r.rows.iter().filter(|row| row.error.is_some()) {
        info!("{} at {}: {}", row.estimator.name(), row.value, row.error.as_deref().unwrap_or(""));
    }
    Ok(vec![kv("axis", r.axis), kv("rows", r.rows.len()), kv("failed_rows", failed)])
}

fn online_curve(run: &Run) -> Outcome {
    let oc = run.cfg.online.as_ref().ok_or_else(|| Failure::Config("missing [online] table".into()))?;
    let (x, y) = run.batch()?;
    let p = NetProblem::new(&run.net, run.params(), &x, &y)?;
    let oracle = unrolled_adjoint_gradient(&p, run.cfg.oracle.steps).grad;
    let mut w = run.create("online_curve.csv")?;
    writeln!(w, "t_osc,period,cosine")?;
    let mut summary = vec![];
    for &t in &oc.t_osc {
        let r = online_estimate(&p, &oc.online(t), &run.cfg.phases(), None)?;
        let mut last = f64::NAN;
        for (k, g) in r.per_period.iter().enumerate() {
            last = cosine_similarity(g, &oracle).total.unwrap_or(f64::NAN);
            writeln!(w, "{t},{},{last}", k + 1)?;
        }
        println!("T_osc {t:>6}: cosine after {} periods {last:.6}", r.per_period.len());
        summary.push(kv(&format!("cosine_t{t}"), format!("{last:.6}")));
    }
    w.flush()?;
    Ok(summary)
}

fn train_cmd(run: &Run, resume: Option<&Path>) -> Outcome {
    let tc = run.cfg.train.clone().ok_or_else(|| Failure::Config("missing [train] table".into()))?;
    let (tr, va) = run.split()?;
    let start = resume.map(Checkpoint::load).transpose()?;
    let log_path = run.out.join("train_log.csv");
    let fresh = start.is_none() || !log_path.exists();
    let mut log = fs::OpenOptions::new().create(true).append(true).truncate(false).open(&log_path)?;
    if fresh {
        log.set_len(0)?;
        writeln!(log, "epoch,train_err,val_err,mean_imag_residual,wall_seconds")?;
    }
    let ckpt = run.out.join("checkpoint.hckpt");
    let on_epoch = |e: &EpochLog, c: &Checkpoint| -> std::io::Result<()> {
        writeln!(log, "{},{},{},{},{}", e.epoch, e.train_err, e.val_err, e.mean_imag_residual, e.wall_seconds)?;
        log.flush()?;
        println!("epoch {:>3}  train_err {:.4}  val_err {:.4}  {:.1}s", e.epoch, e.train_err, e.val_err, e.wall_seconds);
        c.save(&ckpt).map_err(std::io::Error::other)
    };
    // The seed in a resumed checkpoint wins, so the continued run is the same run.
    match train(&run.net, &tr, &va, &tc, start, on_epoch) {
        Ok((logs, c)) => {
            c.save(&ckpt)?;
            let last = logs.last().map(|l| l.val_err).unwrap_or(f64::NAN);
            Ok(vec![kv("epochs", c.epoch), kv("train_size", tr.len()), kv("val_size", va.len()), kv("final_val_err", last)])
        }
        Err(TrainError::Diverged { epoch, batch, source, checkpoint }) => {
            let p = run.out.join("diverged.hckpt");
            checkpoint.save(&p)?;
            Err(Failure::Diverged(format!(
                "epoch {} minibatch {batch}: {source}; last good state saved to {}",
                epoch + 1,
                p.display()
            )))
        }
        Err(TrainError::Config(s)) => Err(Failure::Config(s)),
        Err(TrainError::Model(e)) => Err(e.into()),
        Err(TrainError::Checkpoint(e)) => Err(e.into()),
        Err(TrainError::Io(e)) => Err(e.into()),
    }
}

fn eval_cmd(run: &Run, checkpoint: Option<&Path>) -> Outcome {
    let path = checkpoint
        .map(Path::to_path_buf)
        .or_else(|| run.cfg.eval.checkpoint.clone())
        .ok_or_else(|| Failure::Config("no checkpoint given (--checkpoint or [eval] checkpoint)".into()))?;
    let c = Checkpoint::load(&path)?;
    c.check_spec(&run.net.spec)?;
    let steps = run.cfg.eval.steps.or(run.cfg.train.as_ref().map(|t| t.eval_steps)).unwrap_or(200);
    let (_, va) = run.split()?;
    let err = evaluate(&run.net, &c.params, &va, steps)?;
    println!("validation error {:.2}% on {} samples", 100.0 * err, va.len());
    Ok(vec![kv("epoch", c.epoch), kv("val_size", va.len()), kv("val_err", err)])
}

fn execute(cli: &Cli) -> Outcome {
    let path = cli.config.as_ref().ok_or_else(|| Failure::Config("--config is required".into()))?;
    let mut cfg = config::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.sync_train();
    }
    let out = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    cfg.out = Some(out.clone());
    if cli.dry_run {
        print!("{}", cfg.to_toml());
        return Ok(vec![kv("dry_run", true)]);
    }
    if let Some(k) = cli.workers {
        if k == 0 {
            return Err(Failure::Config("--workers must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(k).build_global().map_err(|e| Failure::Config(e.to_string()))?;
    }
    fs::create_dir_all(&out).map_err(|e| Failure::Io(format!("{}: {e}", out.display())))?;
    fs::write(out.join("resolved.toml"), cfg.to_toml()).map_err(|e| Failure::Io(format!("{}: {e}", out.display())))?;
    let net = Network::new(cfg.network.spec())?;
    let run = Run { cfg, out, net };
    let mut summary = match &cli.command {
        Command::GradCheck => grad_check(&run),
        Command::StabilityMap => stability(&run),
        Command::Orbit => orbit(&run),
        Command::Sweep => sweep(&run),
        Command::OnlineCurve => online_curve(&run),
        Command::Train { resume } => train_cmd(&run, resume.as_deref()),
        Command::Eval { checkpoint } => eval_cmd(&run, checkpoint.as_deref()),
    }?;
    summary.push(kv("out", run.out.display()));
    Ok(summary)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(fields) => {
            let body: Vec<String> = fields.iter().map(|(k, v)| format!("{k}={v}")).collect();
            println!("summary command={} status=ok {}", cli.command.name(), body.join(" "));
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.reason().lines().next().unwrap_or(""));
            println!("summary command={} status=error exit={}", cli.command.name(), f.code());
            ExitCode::from(f.code())
        }
    }
}
