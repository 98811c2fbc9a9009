use mfsgd::harness::{Experiment, ExperimentConfig, Scale};
use mfsgd::*;
use proptest::prelude::*;

fn activation() -> impl Strategy<Value = ActivationSpec> {
    prop_oneof![Just(ActivationSpec::ramp()), (0.01f64..0.45).prop_map(ActivationSpec::smooth_ramp)]
}

proptest! {
    #[test]
    fn activation_is_monotone_and_bounded(act in activation(), a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (fa, fb) = (act.eval(lo), act.eval(hi));
        prop_assert!(fa <= fb);
        for v in [fa, fb] {
            prop_assert!((act.lo..=act.hi).contains(&v));
        }
        prop_assert!(act.derivative(a) >= 0.0);
        prop_assert!(act.derivative(a) <= act.sup_derivative());
    }

    #[test]
    fn smooth_ramp_only_differs_inside_the_blend(h in 0.01f64..0.45, t in -5.0f64..5.0) {
        let smooth = ActivationSpec::smooth_ramp(h);
        let ramp = ActivationSpec::ramp();
        let near = |k: f64| (t - k).abs() < h;
        if !near(ramp.t_lo) && !near(ramp.t_hi) {
            prop_assert_eq!(smooth.eval(t), ramp.eval(t));
        }
    }

    #[test]
    fn silent_step_only_advances_the_counter(n in 1usize..30, d in 1usize..4, seed in any::<u64>(), batch in 1usize..5) {
        let mut cfg = SgdConfig::new(n, d);
        cfg.alpha = 0.0;
        cfg.noise_std = 0.0;
        cfg.batch = BatchSchedule::Fixed(batch);
        cfg.seed = seed;
        let model = DataModel::two_scale_mixture(d);
        let mut streams = RunStreams::new(seed, 0);
        let mut state = NetworkState::initialize(&cfg, &mut streams.init);
        let before = state.weights().to_vec();
        sgd_step(&cfg, &mut state, &model, &ActivationSpec::ramp(), &mut streams).unwrap();
        prop_assert_eq!(state.weights(), &before[..]);
        prop_assert_eq!(state.step(), 1);
    }

    #[test]
    fn step_commutes_with_relabelling_neurons(n in 2usize..20, d in 1usize..4, seed in any::<u64>(), act in activation()) {
        let mut cfg = SgdConfig::new(n, d);
        cfg.beta = f64::INFINITY;
        cfg.batch = BatchSchedule::Fixed(3);
        let model = DataModel::two_scale_mixture(d);
        let mut streams = RunStreams::new(seed, 0);
        let state = NetworkState::initialize(&cfg, &mut streams.init);
        let mut x = Batch::new(d);
        x.resample(&model, 3, &mut streams.batch);
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut a = state.clone();
        let mut b = state.permuted(&perm);
        apply_step(&cfg, &mut a, &act, &x, &[], &mut StepScratch::default()).unwrap();
        apply_step(&cfg, &mut b, &act, &x, &[], &mut StepScratch::default()).unwrap();
        let a = a.permuted(&perm);
        for (u, v) in a.weights().iter().zip(b.weights()) {
            prop_assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn quadratic_decomposition_is_exact(n in 1usize..40, d in 1usize..4, seed in any::<u64>(), beta in 0.6f64..3.0) {
        let mut cfg = SgdConfig::new(n, d);
        cfg.beta = beta;
        cfg.batch = BatchSchedule::Fixed(2);
        let model = DataModel::two_scale_mixture(d);
        let mut streams = RunStreams::new(seed, 1);
        let state = NetworkState::initialize(&cfg, &mut streams.init);
        let mut quad = Batch::new(d);
        quad.resample(&model, 16, &mut streams.batch);
        let (_, dec) = decompose_step(
            &cfg, &state, &model, &ActivationSpec::ramp(), &TestFunction::Square, &quad, &mut streams,
        )
        .unwrap();
        prop_assert!(dec.remainder_exact);
        prop_assert!(dec.residual().abs() <= 1e-10);
    }

    #[test]
    fn particles_move_no_faster_than_the_speed_bound(p in 1usize..40, d in 1usize..4, seed in any::<u64>(), alpha in 0.01f64..1.0) {
        let act = ActivationSpec::ramp();
        let model = DataModel::two_scale_mixture(d);
        let quad = QuadratureSample::draw(&model, 64, seed).unwrap();
        let mut streams = RunStreams::new(seed, 2);
        let init = InitSpec::default_for(d).sample(p, d, &mut streams.init);
        let c0 = quad.speed_bound(&act, alpha);
        let opts = IntegrateOptions { t_end: 0.5, dt: 0.05, integrator: Integrator::Rk4, stride: 1 };
        let traj = integrate(&init, d, &quad, &act, alpha, opts).unwrap();
        for j in 1..traj.times.len() {
            let dt = traj.times[j] - traj.times[j - 1];
            for (a, b) in traj.snapshots[j].chunks(d).zip(traj.snapshots[j - 1].chunks(d)) {
                let dist = a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
                prop_assert!(dist <= c0 * dt * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn config_survives_a_round_trip(
        n in 1usize..100_000,
        alpha in 1e-6f64..10.0,
        beta in prop_oneof![0.5001f64..10.0, Just(f64::INFINITY)],
        noise in 0.0f64..1.0,
        seed in any::<u64>(),
        reps in 1usize..5000,
    ) {
        let mut cfg = ExperimentConfig::preset(Experiment::SingleRun, Scale::Desk);
        cfg.sgd.n = n;
        cfg.sgd.alpha = alpha;
        cfg.sgd.beta = beta;
        cfg.sgd.noise_std = noise;
        cfg.sgd.seed = seed;
        cfg.replications = reps;
        cfg.validate().unwrap();
        let back = ExperimentConfig::parse(&cfg.serialize(), Experiment::SingleRun, Scale::Desk).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
