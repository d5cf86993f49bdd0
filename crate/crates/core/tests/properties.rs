use incdyn_core::classify::{
    conv_forward, correlation, diag_gd_run, induced_frequency_profile, sparse_dataset, ClassifierRun, ConvNetSpec,
    DiagonalNetSpec, LossFn,
};
use incdyn_core::dynamics::{
    alpha_time, closed_form_sigma, empirical_threshold, flow_threshold_bounds, infinite_depth_time, integrate_flow,
    integrate_flow_at, Depth, IncrementalQuery, StepControl, ToyModelSpec,
};
use incdyn_core::gd::{gd_run, gd_threshold_exponents, max_no_overshoot_rate, GdConfig};
use incdyn_core::harness::ExperimentConfig;
use incdyn_core::quadratic::{squared_flow, squared_flow_rhs, variance_matrix_flow, QuadraticNetSpec};
use incdyn_core::rng::stream;
use incdyn_core::sensing::{planted_target, sensing_factor_flow, sensing_gd_run, InitScheme, SensingProblem, SensingRun};
use incdyn_core::sparse::{deep_select, omp_select, DeepSelectConfig, PursuitProblem};
use proptest::prelude::*;
use rand::Rng;

fn depth_strategy() -> impl Strategy<Value = Depth> {
    prop_oneof![Just(Depth::Finite(2)), Just(Depth::Finite(3)), Just(Depth::Finite(4)), Just(Depth::Infinite)]
}

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        failure_persistence: None,
        rng_seed: proptest::test_runner::RngSeed::Fixed(0x1dc5),
        ..ProptestConfig::default()
    }
}

fn grid(t_end: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|k| t_end * k as f64 / n as f64).collect()
}

proptest! {
    #![proptest_config(cases(20))]

    #[test]
    fn integrator_matches_closed_forms(depth in 1u32..=2, target in 0.5f64..5.0, frac in 1e-4f64..0.5) {
        let rtol = 1e-8;
        let s0 = frac * target;
        let spec = ToyModelSpec::new(Depth::Finite(depth), s0, vec![target]).unwrap();
        let t_end = if depth == 1 { 12.0 } else { 3.0 * ((target / s0).ln() + 5.0) / target };
        let ctrl = StepControl { samples: 100, ..StepControl::with_rtol(rtol) };
        let traj = integrate_flow(&spec, t_end, &ctrl).unwrap();
        prop_assert_eq!(traj.len(), 101);
        for (t, v) in traj.times.iter().zip(&traj.values) {
            let exact = closed_form_sigma(&spec, 0, *t).unwrap();
            prop_assert!((v[0] - exact).abs() <= 10.0 * rtol, "t = {}: {} vs {}", t, v[0], exact);
        }
    }

    #[test]
    fn infinite_depth_trajectory_satisfies_implicit_relation(target in 0.5f64..4.0, frac in 1e-3f64..0.3) {
        let s0 = frac * target;
        let spec = ToyModelSpec::new(Depth::Infinite, s0, vec![target]).unwrap();
        let t_end = alpha_time(&spec, 0, 0.99).unwrap().time;
        let traj = integrate_flow(&spec, t_end, &StepControl { samples: 100, ..StepControl::with_rtol(1e-10) }).unwrap();
        for (t, v) in traj.times.iter().zip(&traj.values).skip(1) {
            let implied = infinite_depth_time(s0, target, v[0]);
            prop_assert!((implied - t).abs() <= 1e-5 * t, "t = {}, implied {}", t, implied);
        }
    }

    #[test]
    fn larger_targets_overtake_once_in_relative_progress(
        depth in depth_strategy(),
        small in 0.2f64..2.0,
        ratio in 1.05f64..8.0,
        frac in 1e-3f64..0.5,
    ) {
        let large = small * ratio;
        let spec = ToyModelSpec::new(depth, frac * small, vec![large, small]).unwrap();
        let t_end = 2.0 * alpha_time(&spec, 1, 0.99).unwrap().time;
        let ctrl = StepControl { samples: 200, ..StepControl::default() };
        let traj = integrate_flow(&spec, t_end, &ctrl).unwrap();
        // Both saturate at 1 up to the integrator tolerance.
        let ahead: Vec<bool> = traj.values.iter().map(|v| v[0] / large >= v[1] / small - 10.0 * ctrl.rtol).collect();
        let first = ahead.iter().position(|&a| a);
        prop_assert!(first.is_some(), "never overtakes");
        prop_assert!(ahead[first.unwrap()..].iter().all(|&a| a), "falls behind again: {:?}", ahead);
    }

    #[test]
    fn alpha_time_is_strictly_increasing(depth in depth_strategy(), target in 0.2f64..5.0, frac in 1e-4f64..0.3, a in 0.35f64..0.95, gap in 0.01f64..0.04) {
        let spec = ToyModelSpec::new(depth, frac * target, vec![target]).unwrap();
        let lo = alpha_time(&spec, 0, a).unwrap();
        let hi = alpha_time(&spec, 0, a + gap).unwrap();
        prop_assert!(!lo.degenerate && hi.time > lo.time, "{:?} {:?}", lo, hi);
    }

    #[test]
    fn descent_at_the_safe_rate_never_overshoots(
        depth in prop_oneof![Just(2u32), Just(3), Just(5)],
        optimal in prop::collection::vec(0.1f64..5.0, 1..5),
        frac in 1e-3f64..0.9,
    ) {
        let floor = optimal.iter().copied().fold(f64::INFINITY, f64::min);
        let spec = ToyModelSpec::new(Depth::Finite(depth), frac * floor, optimal.clone()).unwrap();
        let eta = max_no_overshoot_rate(&spec).unwrap();
        let traj = gd_run(&GdConfig::new(spec, eta, 100_000).unwrap(), 1).unwrap();
        for row in &traj.values {
            for (v, o) in row.iter().zip(&optimal) {
                // One rounding step of slack at the fixed point.
                prop_assert!(*v <= o * (1.0 + 2.0 * f64::EPSILON), "{} > {}", v, o);
            }
        }
    }

    #[test]
    fn exponent_deviation_grows_with_rate_factor(r in 1.5f64..8.0) {
        let cs = [1e-4, 1e-3, 1e-2, 0.05, 0.1, 0.2];
        let devs: Vec<(f64, f64)> = cs
            .iter()
            .map(|&c| {
                let e = gd_threshold_exponents(c, 1.0, 1.0 / r).unwrap();
                ((e.a - r).abs(), (e.b - r).abs())
            })
            .collect();
        prop_assert!(devs[0].0 <= 0.01 * r && devs[0].1 <= 0.01 * r);
        for w in devs.windows(2) {
            prop_assert!(w[1].0 > w[0].0 && w[1].1 > w[0].1, "{:?}", devs);
        }
    }
}

#[test]
fn small_rate_descent_tracks_the_flow() {
    let eta = 1e-4;
    for n in [1u32, 2, 4] {
        let spec = ToyModelSpec::new(Depth::Finite(n), 0.05, vec![2.0, 1.0, 0.4]).unwrap();
        let steps = 100_000;
        let every = 5_000;
        let gd = gd_run(&GdConfig::new(spec.clone(), eta, steps).unwrap(), every).unwrap();
        let times: Vec<f64> = gd.times.iter().map(|k| k * eta).collect();
        let flow = integrate_flow_at(&spec, &times, &StepControl::default()).unwrap();
        let gap = gd
            .values
            .iter()
            .zip(&flow.values)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        assert!(gap <= 1e-3, "N = {n}: gap {gap}");
    }
}

#[test]
fn thresholds_rise_strictly_with_depth() {
    for (r, s, f) in [(4.0, 0.1, 0.9), (2.0, 0.2, 0.8), (8.0, 0.1, 0.8)] {
        let query = IncrementalQuery::with_ratio(r, s, f).unwrap();
        let at = |n: u32| {
            let depth = Depth::Finite(n);
            let lower = flow_threshold_bounds(&query, 1.0, depth).unwrap().lower;
            let template = query.pair_spec(depth, 0.5 * s, 1.0).unwrap();
            empirical_threshold(&template, &query, (0.5 * lower, 0.999 * s), &StepControl::default()).unwrap()
        };
        let (two, three, four) = (at(2), at(3), at(4));
        assert!(two < three && three < four, "r={r} s={s} f={f}: {two} {three} {four}");
    }
}

fn identity_problem(seed: u64, depth: u32, spectrum: &[f64], scale: f64) -> SensingProblem {
    let target = planted_target(&mut stream(seed, 0), spectrum.len(), spectrum).unwrap();
    SensingProblem::new(depth, target, InitScheme::Identity { scale }, None).unwrap()
}

proptest! {
    #![proptest_config(cases(8))]

    #[test]
    fn identity_init_descent_is_per_eigenvalue_toy_descent(seed in any::<u64>(), depth in 1u32..=3) {
        let spectrum = [3.0, 2.0, 1.0, 0.5];
        let problem = identity_problem(seed, depth, &spectrum, 1e-2);
        let run = SensingRun { learning_rate: 0.01, steps: 2_000, record_every: 100, top_k: 4, track_alignment: false };
        let traj = sensing_gd_run(&problem, &run, &mut stream(seed, 1)).unwrap();
        let toy = ToyModelSpec::new(Depth::Finite(depth), 1e-2, spectrum.to_vec()).unwrap();
        let reference = gd_run(&GdConfig::new(toy, 0.01, 2_000).unwrap(), 100).unwrap();
        prop_assert_eq!(traj.len(), reference.len());
        for (a, b) in traj.values.iter().zip(&reference.values) {
            let mut b = b.clone();
            b.sort_by(|x, y| y.total_cmp(x));
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-6, "{:?} vs {:?}", a, b);
            }
        }
    }

    #[test]
    fn identity_init_flow_stays_in_the_target_eigenbasis(seed in any::<u64>(), depth in 2u32..=3) {
        let spectrum = [3.0, 1.5, 0.7, 0.2];
        let problem = identity_problem(seed, depth, &spectrum, 1e-3);
        let times = grid(60.0, 120);
        let flow = sensing_factor_flow(&problem, &times, &StepControl::default(), &mut stream(seed, 1)).unwrap();
        let worst = flow.leakage.iter().copied().fold(0.0, f64::max);
        prop_assert!(worst <= 1e-8, "leakage {}", worst);

        let f = 0.5;
        let order = problem.target_spectrum();
        let hits: Vec<Option<usize>> = (0..order.len())
            .map(|i| flow.eigen_diagonal.iter().position(|row| row[i] >= f * order[i]))
            .collect();
        for i in 1..order.len() {
            match (hits[i - 1], hits[i]) {
                (Some(a), Some(b)) => prop_assert!(a <= b, "{:?}", hits),
                (None, Some(_)) => prop_assert!(false, "{:?}", hits),
                _ => {}
            }
        }
        prop_assert!(hits[0].is_some());
    }

    #[test]
    fn variance_flow_preserves_the_eigenbasis_and_follows_depth_two(seed in any::<u64>(), s0 in 1e-4f64..1e-2) {
        let spectrum = [2.0, 1.2, 0.5];
        let spec = QuadraticNetSpec::planted(&mut stream(seed, 0), 3, &spectrum, s0).unwrap();
        let times = grid(40.0, 80);
        let flow = variance_matrix_flow(&spec, &times, &StepControl::with_rtol(1e-10), &mut stream(seed, 1)).unwrap();
        let worst = flow.leakage.iter().copied().fold(0.0, f64::max);
        prop_assert!(worst <= 1e-8, "leakage {}", worst);
        let toy = ToyModelSpec::new(Depth::Finite(2), s0, spec.target_spectrum().to_vec()).unwrap();
        for (t, row) in times.iter().zip(&flow.eigen_diagonal) {
            for (i, v) in row.iter().enumerate() {
                let exact = closed_form_sigma(&toy, i, *t).unwrap();
                prop_assert!((v - exact).abs() <= 1e-7, "t = {}: {} vs {}", t, v, exact);
            }
        }
    }

    #[test]
    fn bias_moves_before_small_eigenvalues(b_star in 0.5f64..3.0, s0 in 1e-9f64..1e-6) {
        let optimal = [2.0, 1.0, 0.5];
        // The bias relaxes at unit rate towards b* + Σ(σ* - σ); compare over
        // that transient.
        let times = grid(1.0, 100);
        let flow = squared_flow(&optimal, s0, Some((0.0, b_star)), &times, &StepControl::default()).unwrap();
        for (sigma, b) in flow.spectrum.values.iter().zip(&flow.bias).skip(1) {
            let (ds, db) = squared_flow_rhs(sigma, &optimal, Some((*b, b_star))).unwrap();
            let db = db.unwrap();
            for i in 0..optimal.len() {
                prop_assert!(sigma[i] < 0.1 * optimal[i]);
                prop_assert!((ds[i] / db).abs() < 10.0 * sigma[i], "σ = {:?}, b = {}", sigma, b);
            }
        }
        let long = squared_flow(&optimal, s0, Some((0.0, b_star)), &grid(8.0, 80), &StepControl::default()).unwrap();
        let k = long.bias.iter().zip(&long.spectrum.values).position(|(b, sigma)| {
            let goal = b_star + optimal.iter().zip(sigma).map(|(o, v)| o - v).sum::<f64>();
            (b - goal).abs() <= 0.05 * goal
        });
        let k = k.expect("bias settles");
        let sigma = &long.spectrum.values[k];
        prop_assert!(sigma.iter().zip(&optimal).all(|(v, o)| *v < 0.1 * o), "{:?}", sigma);
    }

    #[test]
    fn spatial_and_fourier_forward_passes_agree(seed in any::<u64>(), d in prop_oneof![Just(4usize), Just(8), Just(16)], depth in 1u32..=3) {
        let mut rng = stream(seed, 0);
        let kernels = ConvNetSpec::new(depth, 0.5).unwrap().initial_kernels(&mut rng, d);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let profile = induced_frequency_profile(&kernels);
        let step = std::f64::consts::TAU / d as f64;
        let fourier: f64 = (0..d)
            .map(|k| {
                let w: f64 = profile
                    .iter()
                    .enumerate()
                    .map(|(f, c)| {
                        let phase = step * (f * k) as f64;
                        c.re * phase.cos() - c.im * phase.sin()
                    })
                    .sum::<f64>()
                    / d as f64;
                w * x[k]
            })
            .sum();
        let spatial = conv_forward(&kernels, &x).unwrap();
        prop_assert!((spatial - fourier).abs() <= 1e-10, "{} vs {}", spatial, fourier);
    }

    #[test]
    fn off_support_coordinates_stay_attenuated(seed in 0u64..1_000, depth in 2u32..=3) {
        let data = sparse_dataset(&mut stream(seed, 0), 30, 60, 2).unwrap();
        let s0 = 1e-3;
        let eta = if depth == 2 { 0.2 } else { 0.1 };
        let run = ClassifierRun { record_every: 1, ..ClassifierRun::new(LossFn::Exponential, eta, 5_000) };
        let trace = diag_gd_run(&DiagonalNetSpec::new(depth, s0).unwrap(), &data, &run).unwrap();
        let truth = data.truth.weights();
        let support: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] != 0.0).collect();
        let top = *support.iter().max_by(|&&a, &&b| truth[a].abs().total_cmp(&truth[b].abs())).unwrap();
        let half = 0.5 * trace.final_predictor()[top].abs();
        let until = trace.predictor.values.iter().position(|row| row[top].abs() >= half).unwrap();
        for row in &trace.predictor.values[..=until] {
            for (i, v) in row.iter().enumerate() {
                if !support.contains(&i) {
                    prop_assert!(v.abs() < 10.0 * s0, "coordinate {} reached {}", i, v);
                }
            }
        }
    }

    #[test]
    fn omp_residuals_fall_strictly_over_distinct_features(seed in any::<u64>(), s in 1usize..=5) {
        let problem = PursuitProblem::generate(&mut stream(seed, 0), 20, 50, s).unwrap();
        let record = omp_select(&problem, 20).unwrap();
        let mut seen = record.indices.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), record.indices.len());
        prop_assert_eq!(record.residuals.len(), record.indices.len() + 1);
        for w in record.residuals.windows(2) {
            prop_assert!(w[1] < w[0], "{:?}", record.residuals);
        }
    }

    #[test]
    fn config_hash_ignores_field_order(
        lines in Just(vec![
            "d = 12",
            "samples = 30",
            "sparsity = 2",
            "depths = [1, 2]",
            "init_scales = 1e-3",
            "learning_rates = 0.2",
            "max_steps = 400",
        ]).prop_shuffle(),
        header_first in any::<bool>(),
    ) {
        let canonical = "kind = \"diag-classify\"\nschema_version = 1\nseed = 4\n\n[params]\nd = 12\nsamples = 30\nsparsity = 2\ndepths = [1, 2]\ninit_scales = 1e-3\nlearning_rates = 0.2\nmax_steps = 400\n";
        let head = if header_first {
            "kind = \"diag-classify\"\nschema_version = 1\nseed = 4\n"
        } else {
            "seed = 4\nschema_version = 1\nkind = \"diag-classify\"\n"
        };
        let shuffled = format!("{head}\n[params]\n{}\n", lines.join("\n"));
        let a = ExperimentConfig::from_toml(canonical).unwrap();
        let b = ExperimentConfig::from_toml(&shuffled).unwrap();
        prop_assert_eq!(a.hash(), b.hash());
    }
}

#[test]
fn small_init_gives_sparser_deep_classifiers() {
    let seeds = 6;
    let mut small = 0.0;
    let mut large = 0.0;
    for seed in 0..seeds {
        let data = sparse_dataset(&mut stream(seed, 0), 100, 200, 4).unwrap();
        let truth = data.truth.weights();
        let corr = |s0: f64, eta: f64, steps: usize| {
            let run = ClassifierRun { record_every: 10_000, ..ClassifierRun::new(LossFn::Exponential, eta, steps) };
            let trace = diag_gd_run(&DiagonalNetSpec::new(3, s0).unwrap(), &data, &run).unwrap();
            correlation(trace.final_predictor(), truth)
        };
        small += corr(1e-4, 0.05, 80_000);
        large += corr(1e-1, 0.1, 40_000);
    }
    assert!(small > large, "mean correlation {} at 1e-4 vs {} at 1e-1", small / seeds as f64, large / seeds as f64);
}

#[test]
fn selection_order_is_robust_to_the_crossing_threshold() {
    let s = 3;
    for trial in 0..4 {
        let problem = PursuitProblem::generate(&mut stream(trial, 7), 80, 1000, s).unwrap();
        let base = DeepSelectConfig { stop_after: Some(s), ..DeepSelectConfig::default() };
        let top = 0.01 * problem.coefficients.amax();
        let floor = 10.0 * base.init_scale;
        let orders: Vec<Vec<usize>> = [floor, (floor * top).sqrt(), top]
            .iter()
            .map(|&t| deep_select(&problem, &DeepSelectConfig { threshold: Some(t), ..base }).unwrap().indices)
            .collect();
        assert!(top / floor >= 10.0);
        assert_eq!(orders[0], orders[1], "trial {trial}");
        assert_eq!(orders[1], orders[2], "trial {trial}");
    }
}
