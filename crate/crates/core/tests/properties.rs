use std::f64::consts::PI;

use holoprop::dynamics::settle;
use holoprop::model::{softmax_pool, total_energy};
use holoprop::oracle::relative_error;
use holoprop::tensor::{conv2d, conv2d_transpose, real_matmul, ConvGeometry};
use holoprop::trainer::Checkpoint;
use holoprop::*;
use proptest::prelude::*;

fn vec_of(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #[test]
    fn roots_of_unity_sums(n in 2usize..=16, p_frac in 0.0f64..1.0) {
        let p = 1 + (p_frac * (3 * n - 1) as f64) as usize;
        let s: C64 = (0..n).map(|k| C64::from_polar(1.0, 2.0 * PI * (p * k) as f64 / n as f64)).sum();
        if p.is_multiple_of(n) {
            prop_assert!((s - C64::new(n as f64, 0.0)).norm() < 1e-12);
        } else {
            prop_assert!(s.norm() < 1e-12);
        }
    }

    #[test]
    fn conv_transpose_is_adjoint(
        ci in 1usize..3, co in 1usize..3, k in 1usize..4, h in 3usize..7, w in 3usize..7,
        stride in 1usize..3, padding in 0usize..2, batch in 1usize..3, seed in any::<u64>(),
    ) {
        prop_assume!(h + 2 * padding >= k && w + 2 * padding >= k);
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut rand = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let geom = ConvGeometry { stride, padding };
        let kern = RealTensor::from_vec(&[co, ci, k, k], rand(co * ci * k * k)).unwrap();
        let x = RealTensor::from_vec(&[ci, h, w, batch], rand(ci * h * w * batch)).unwrap();
        let y = conv2d(&kern, &x, geom).unwrap();
        let g = RealTensor::from_vec(y.shape(), rand(y.len())).unwrap();
        let back = conv2d_transpose(&kern, &g, geom, (h, w)).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0));
    }

    #[test]
    fn real_inputs_stay_real(a in vec_of(12), b in vec_of(12), w in vec_of(12)) {
        let ta = ComplexTensor::from_real(&RealTensor::from_vec(&[3, 4], a).unwrap());
        let tb = ComplexTensor::from_real(&RealTensor::from_vec(&[3, 4], b).unwrap());
        let m = ComplexTensor::from_real(&RealTensor::from_vec(&[4, 3], w.clone()).unwrap());
        for t in [ta.add(&tb).unwrap(), ta.mul(&tb).unwrap(), ta.matmul(&m).unwrap(), real_matmul(&RealTensor::from_vec(&[3, 4], w).unwrap(), &tb.transpose().unwrap(), false).unwrap()] {
            prop_assert!(t.data().iter().all(|z| z.im.to_bits() == 0.0f64.to_bits() || z.im == 0.0));
        }
    }

    #[test]
    fn activations_satisfy_cauchy_riemann(x in -3.0f64..3.0, y in -0.6f64..0.6, which in 0usize..3) {
        let act = [Activation::ShiftedSigmoid, Activation::Dsilu, Activation::Identity][which];
        let f = |z: C64| act.apply(z).unwrap();
        let z = C64::new(x, y);
        let h = 1e-5;
        let dx = (f(z + h) - f(z - h)) / (2.0 * h);
        let dy = (f(z + C64::new(0.0, h)) - f(z - C64::new(0.0, h))) / (2.0 * h);
        let wirtinger = 0.5 * (dx + C64::i() * dy);
        prop_assert!(wirtinger.norm() < 1e-6, "{act:?} at {z}: {wirtinger}");
        let d = act.derivative(z).unwrap();
        prop_assert!((d - dx).norm() < 1e-6);
    }

    #[test]
    fn softmax_pool_limits(vals in prop::collection::vec(-5i32..5, 16)) {
        let x = RealTensor::from_vec(&[1, 4, 4], vals.iter().map(|&v| v as f64).collect()).unwrap();
        let pool = PoolSpec { window: 2, stride: 2 };
        let mean = softmax_pool(&x, pool, 1e9).unwrap().output;
        let max = softmax_pool(&x, pool, 1e-3).unwrap().output;
        for (o, (i, j)) in [(0, 0), (0, 2), (2, 0), (2, 2)].into_iter().enumerate() {
            let win = [x.data()[i * 4 + j], x.data()[i * 4 + j + 1], x.data()[(i + 1) * 4 + j], x.data()[(i + 1) * 4 + j + 1]];
            prop_assert!((mean.data()[o] - win.iter().sum::<f64>() / 4.0).abs() < 1e-6);
            prop_assert!((max.data()[o] - win.iter().cloned().fold(f64::MIN, f64::max)).abs() < 1e-9);
        }
    }

    #[test]
    fn toy_estimators_match_closed_forms(theta in -3.0f64..3.0, y in -3.0f64..3.0, r in 0.05f64..0.9, half_n in 1usize..6) {
        let n = 2 * half_n;
        let toy = ToyModel::new(theta, y);
        let cfg = PhaseConfig::default();
        let hep = hep_estimate(&toy, &NudgePath::new(r, n).unwrap(), &cfg).unwrap().grad.layers[0].bias.data()[0];
        prop_assert!((hep - (theta - y) / (1.0 - r.powi(n as i32))).abs() < 1e-10);
        let ep = classic_ep(&toy, r, &cfg, 1).unwrap().grad.layers[0].bias.data()[0];
        prop_assert!((ep - (theta - y) / (1.0 + r)).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn total_energy_is_affine_in_beta(seed in any::<u64>(), b1 in -1.0f64..1.0, b2 in -1.0f64..1.0, i1 in -1.0f64..1.0) {
        let net = Network::new(NetworkSpec::mlp(&[5, 4, 3], Activation::ShiftedSigmoid)).unwrap();
        let params = net.init_params(1.0, seed);
        let x = RealTensor::from_vec(&[5, 2], (0..10).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let labels = [0, 2];
        let p = NetProblem::new(&net, params.clone(), &x, &labels).unwrap();
        let state = settle(&p, C64::new(0.05, 0.02), &SettleConfig::steps(50), None, 0).state;
        let f = |b: C64| total_energy(&net, &params, &x, &state, b, &labels).unwrap();
        let (b1, b2) = (C64::new(b1, i1), C64::new(b2, 0.0));
        let l = holoprop::model::loss(&state, &labels).unwrap();
        let lhs = f(b1) + f(b2) - f(C64::new(0.0, 0.0)) * 2.0;
        prop_assert!((lhs - (b1 + b2) * l).norm() < 1e-12 * (1.0 + lhs.norm()));
    }

    #[test]
    fn conjugate_beta_gives_conjugate_fixed_point(seed in 0u64..1000, re in -0.3f64..0.3, im in -0.3f64..0.3) {
        let net = Network::new(NetworkSpec::mlp(&[6, 4, 4, 4], Activation::ShiftedSigmoid)).unwrap();
        let x = RealTensor::from_vec(&[6, 1], vec![0.3, -1.2, 0.8, 0.05, -0.4, 1.5]).unwrap();
        let labels = [2];
        let p = NetProblem::new(&net, net.init_params(1.0, seed), &x, &labels).unwrap();
        let beta = C64::new(re, im);
        let cfg = SettleConfig::tol(2000, 1e-12);
        let a = settle(&p, beta, &cfg, None, 0).state;
        let b = settle(&p, beta.conj(), &cfg, None, 0).state;
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            for (u, v) in la.act.data().iter().zip(lb.act.data()) {
                prop_assert!((u - v.conj()).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn hep_estimate_is_real_on_converged_runs(seed in 0u64..1000, n in 3usize..12) {
        let net = Network::new(NetworkSpec::mlp(&[6, 4, 4, 4], Activation::ShiftedSigmoid)).unwrap();
        let x = RealTensor::from_vec(&[6, 1], vec![0.3, -1.2, 0.8, 0.05, -0.4, 1.5]).unwrap();
        let labels = [1];
        let p = NetProblem::new(&net, net.init_params(1.0, seed), &x, &labels).unwrap();
        let path = NudgePath::new(0.1, n).unwrap();
        let warm = PhaseConfig::converged(2000, 1e-12);
        let e = hep_estimate(&p, &path, &warm).unwrap();
        // A branch point inside the circle shows up as warm and cold starts disagreeing.
        let cold = hep_estimate(&p, &path, &PhaseConfig { warm_start: false, ..warm }).unwrap();
        prop_assume!(relative_error(&e.grad, &cold.grad, None) < 1e-8);
        prop_assert!(e.imag_residual / e.grad.norm() < 1e-6);
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), epoch in 0usize..100) {
        let spec = NetworkSpec::mlp(&[7, 5, 3], Activation::Dsilu);
        let net = Network::new(spec.clone()).unwrap();
        let params = net.init_params(1.0, seed);
        let ck = Checkpoint { spec, velocity: params.scale(0.5), params, epoch, rng_seed: seed };
        prop_assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }
}
