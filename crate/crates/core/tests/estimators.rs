use drnets::drscores::{make_folds, CateObservation, DteObservation, Predictor};
use drnets::estimators::{
    cate_from_halves, estimate_ate, estimate_cate, estimate_cde, estimate_dte, estimate_mu_dr, estimate_plugin_cate,
    Learner, LearnerSpec,
};
use drnets::nnet::MlpConfig;
use drnets::simlab::{gen_cate, gen_dte, presets, test_grid, DgpConfig, DgpKind};
use drnets::{seed, Error};
use proptest::prelude::*;
use rand::Rng;

const Z975: f64 = 1.959_963_984_540_054;

fn fixed(p: Predictor<f64>) -> Learner {
    Learner::fixed(p)
}

fn constant(v: f64) -> Learner {
    fixed(Predictor::constant(v))
}

/// Fixed learners reproducing the exact CATE nuisances.
fn cate_oracle(cfg: &DgpConfig) -> LearnerSpec {
    let t = drnets::simlab::cate_truth(cfg).unwrap();
    LearnerSpec::lasso().with_pi(fixed(t.pi)).with_arm_mu(fixed(t.mu0), fixed(t.mu1))
}

/// Fixed learners reproducing the exact sequential nuisances.
fn sequential_oracle(cfg: &DgpConfig) -> LearnerSpec {
    let t = drnets::simlab::sequential_truth_of(cfg).unwrap();
    LearnerSpec::lasso().with_pi(fixed(t.pi)).with_rho(fixed(t.rho)).with_nu(fixed(t.nu)).with_mu(fixed(t.mu))
}

#[test]
fn ate_interval_width_is_quantile_arithmetic() {
    let (data, _) = gen_cate(&DgpConfig::new(DgpKind::CateLinear), 600, 4).unwrap();
    let r = estimate_ate(&data, &LearnerSpec::lasso(), 5, 0.05, 9).unwrap();
    let expected = 2.0 * Z975 * r.sigma_hat / (r.n as f64).sqrt();
    assert!((r.ci_width() - expected).abs() <= 1e-9);
    assert!(r.ci_lower() <= r.theta_hat && r.theta_hat <= r.ci_upper());
}

#[test]
fn ate_is_centred_on_a_null_effect() {
    let cfg = DgpConfig::new(DgpKind::CateLinear);
    let reps = 200;
    let within = (0..reps)
        .filter(|&r| {
            let (data, truth) = gen_cate(&cfg, 1000, seed::derive(77, &[r])).unwrap();
            assert_eq!(truth.ate, 0.0);
            let rep = estimate_ate(&data, &LearnerSpec::lasso(), 5, 0.05, r).unwrap();
            rep.theta_hat.abs() <= 4.0 * rep.sigma_hat / (rep.n as f64).sqrt()
        })
        .count();
    assert!(within as f64 >= 0.95 * reps as f64, "{within} of {reps}");
}

#[test]
fn ate_oracle_shortcut_on_deterministic_data() {
    let mut rng = seed::rng(5);
    let data: Vec<_> = (0..300)
        .map(|_| {
            let t = rng.random_bool(0.5);
            CateObservation {
                s: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                t,
                y: f64::from(u8::from(t)),
            }
        })
        .collect();
    let spec = LearnerSpec::uniform(constant(0.5)).with_arm_mu(constant(0.0), constant(1.0));
    let r = estimate_ate(&data, &spec, 5, 0.05, 1).unwrap();
    assert!((r.theta_hat - 1.0).abs() <= 1e-10);
    assert_eq!(r.sigma_hat, 0.0);
}

#[test]
fn cate_prediction_is_the_half_average() {
    let (data, _) = gen_cate(&DgpConfig::new(DgpKind::CateSparseSmooth), 300, 2).unwrap();
    let fin = MlpConfig::new(1, 8).with_epochs(20);
    let est = estimate_cate(&data, &LearnerSpec::lasso(), &fin, 3).unwrap();
    for s in test_grid(&DgpConfig::new(DgpKind::CateSparseSmooth), 50, 1) {
        let avg = (est.model_half1.predict(&s).unwrap() + est.model_half2.predict(&s).unwrap()) / 2.0;
        assert_eq!(est.predict(&s), avg);
    }
}

#[test]
fn cate_with_oracle_nuisances_recovers_a_null_effect() {
    let cfg = DgpConfig::new(DgpKind::CateLinear).with_signal(1.0, 0.0).with_noise(1.0);
    let (data, truth) = gen_cate(&cfg, 4000, 11).unwrap();
    let est = estimate_cate(&data, &cate_oracle(&cfg), &presets::cate_final_stage(), 12).unwrap();
    let grid = test_grid(&cfg, 2000, 13);
    let mse = grid.iter().map(|s| (est.predict(s) - truth.cate.predict(s)).powi(2)).sum::<f64>() / grid.len() as f64;
    assert!(mse <= 0.05, "mse {mse}");
}

#[test]
fn cate_halves_are_exchangeable() {
    let (data, _) = gen_cate(&DgpConfig::new(DgpKind::CateLinear), 200, 8).unwrap();
    let first: Vec<usize> = (0..100).collect();
    let second: Vec<usize> = (100..200).collect();
    let fin = MlpConfig::new(1, 6).with_epochs(15);
    let a = cate_from_halves(&data, &first, &second, &LearnerSpec::lasso(), &fin, 4).unwrap();
    let b = cate_from_halves(&data, &second, &first, &LearnerSpec::lasso(), &fin, 4).unwrap();
    for s in test_grid(&DgpConfig::new(DgpKind::CateLinear), 100, 2) {
        assert_eq!(a.predict(&s), b.predict(&s));
    }
}

#[test]
fn cate_needs_four_rows_and_both_arms() {
    let (data, _) = gen_cate(&DgpConfig::new(DgpKind::CateLinear), 3, 1).unwrap();
    assert!(matches!(estimate_cate(&data, &LearnerSpec::lasso(), &MlpConfig::default(), 0), Err(Error::Config(_))));
    let one_arm: Vec<_> = (0..20).map(|i| CateObservation { s: vec![i as f64 / 20.0], t: true, y: 1.0 }).collect();
    assert!(matches!(estimate_cate(&one_arm, &LearnerSpec::lasso(), &MlpConfig::default(), 0), Err(Error::Split(_))));
}

#[test]
fn dr_learner_beats_plug_in_on_rough_outcomes() {
    let cfg = DgpConfig::new(DgpKind::CateRoughOutcome);
    let grid = test_grid(&cfg, 2000, 99);
    let fin = presets::cate_final_stage();
    // Flexible outcome regressions: the plug-in contrast inherits their roughness.
    let mu = MlpConfig::new(2, 32);
    let spec = LearnerSpec::lasso().with_mu(Learner::mlp(mu));
    let reps = 50u64;
    let wins = (0..reps)
        .filter(|&r| {
            let (data, truth) = gen_cate(&cfg, 4000, seed::derive(31, &[r])).unwrap();
            let dr = estimate_cate(&data, &spec, &fin, r).unwrap();
            let plug = estimate_plugin_cate(&data, &spec, r).unwrap();
            let mse = |f: &dyn Fn(&[f64]) -> f64| {
                grid.iter().map(|s| (f(s) - truth.cate.predict(s)).powi(2)).sum::<f64>() / grid.len() as f64
            };
            mse(&|s| dr.predict(s)) < mse(&|s| plug.predict(s))
        })
        .count();
    assert!(wins as f64 >= 0.8 * reps as f64, "{wins} of {reps}");
}

#[test]
fn nested_regression_with_oracle_stage_two_recovers_a_constant() {
    let c = 1.3;
    let cfg = DgpConfig::new(DgpKind::DteLinear).with_signal(c, 0.0).with_noise(0.02);
    let (data, _) = gen_dte(&cfg, 4000, 21).unwrap();
    let spec = sequential_oracle(&cfg);
    let fin = MlpConfig::new(1, 4).with_epochs(300).with_batch_size(64);
    let mu = estimate_mu_dr(&data, &spec, &fin, 22).unwrap();
    let mut rng = seed::rng(23);
    let sup = (0..2000)
        .map(|_| {
            let s: Vec<f64> = (0..cfg.d).map(|_| rng.random_range(-1.0..1.0)).collect();
            (mu.predict(&s) - c).abs()
        })
        .fold(0.0, f64::max);
    assert!(sup <= 0.05, "sup error {sup}");
}

#[test]
fn nested_regression_without_first_exposure_is_a_stratum_error() {
    let (mut data, _) = gen_dte(&DgpConfig::new(DgpKind::DteLinear), 100, 1).unwrap();
    data.iter_mut().for_each(|o| o.t1 = false);
    assert!(matches!(estimate_mu_dr(&data, &LearnerSpec::lasso(), &MlpConfig::default(), 0), Err(Error::Stratum(_))));
}

#[test]
fn nested_regression_respects_the_clamp() {
    let cfg = DgpConfig::new(DgpKind::DteLinear);
    let (data, _) = gen_dte(&cfg, 400, 3).unwrap();
    let bound = 0.25;
    let fin = MlpConfig::new(2, 8).with_epochs(10).with_clamp_bound(bound);
    let mu = estimate_mu_dr(&data, &LearnerSpec::lasso(), &fin, 4).unwrap();
    let mut rng = seed::rng(6);
    for _ in 0..2000 {
        let s: Vec<f64> = (0..cfg.d).map(|_| rng.random_range(-3.0..3.0)).collect();
        assert!(mu.predict(&s).abs() <= bound);
    }
}

#[test]
fn dte_oracle_shortcut_on_deterministic_data() {
    let c = 2.75;
    let cfg = DgpConfig::new(DgpKind::DteLinear).with_signal(c, 0.0).with_noise(0.0);
    let (data, truth) = gen_dte(&cfg, 500, 2).unwrap();
    assert_eq!(truth.theta, c);
    let r = estimate_dte(&data, &sequential_oracle(&cfg), 5, 0.05, 3).unwrap();
    assert!((r.theta_hat - c).abs() <= 1e-10);
    assert_eq!(r.sigma_hat, 0.0);
}

#[test]
fn dte_is_stable_across_fold_seeds() {
    let cfg = DgpConfig::new(DgpKind::DteLinear);
    for pair in 0..20u64 {
        let (data, _) = gen_dte(&cfg, 1000, seed::derive(41, &[pair])).unwrap();
        let a = estimate_dte(&data, &LearnerSpec::lasso(), 5, 0.05, 2 * pair).unwrap();
        let b = estimate_dte(&data, &LearnerSpec::lasso(), 5, 0.05, 2 * pair + 1).unwrap();
        assert_ne!(make_folds(1000, 5, 2 * pair).unwrap(), make_folds(1000, 5, 2 * pair + 1).unwrap());
        let bound = 6.0 * a.sigma_hat / (a.n as f64).sqrt();
        assert!((a.theta_hat - b.theta_hat).abs() <= bound, "pair {pair}: {} vs {}", a.theta_hat, b.theta_hat);
    }
}

#[test]
fn dte_rejects_more_folds_than_rows() {
    let (data, _) = gen_dte(&DgpConfig::new(DgpKind::DteLinear), 4, 1).unwrap();
    assert!(matches!(estimate_dte(&data, &LearnerSpec::lasso(), 5, 0.05, 0), Err(Error::Config(_))));
}

/// Mediator independent of everything, `Y(t, m) = t` plus noise.
fn independent_mediator(n: usize, noise: f64, s: u64) -> Vec<DteObservation<f64>> {
    let mut rng = seed::rng(s);
    (0..n)
        .map(|_| {
            let s1: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s2: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t1 = rng.random_bool(0.5);
            let m = rng.random_bool(0.5);
            let e: f64 = if noise > 0.0 { noise * rng.random_range(-1.7..1.7) } else { 0.0 };
            DteObservation { s1, s2, t1, t2: m, y: f64::from(u8::from(t1)) + e, m: Some(i64::from(m)) }
        })
        .collect()
}

#[test]
fn controlled_direct_effect_of_an_inert_mediator() {
    let data = independent_mediator(2000, 1.0, 8);
    for m in [0, 1] {
        let r1 = estimate_cde(&data, (true, m), &LearnerSpec::lasso(), 5, 0.05, 1).unwrap();
        let r0 = estimate_cde(&data, (false, m), &LearnerSpec::lasso(), 5, 0.05, 1).unwrap();
        let se = ((r1.sigma_hat.powi(2) + r0.sigma_hat.powi(2)) / data.len() as f64).sqrt();
        assert!((r1.theta_hat - r0.theta_hat - 1.0).abs() <= 4.0 * se, "m={m}");
    }
}

#[test]
fn controlled_direct_effect_outside_mediator_support_is_a_stratum_error() {
    let data = independent_mediator(200, 1.0, 3);
    assert!(matches!(estimate_cde(&data, (true, 2), &LearnerSpec::lasso(), 5, 0.05, 0), Err(Error::Stratum(_))));
}

#[test]
fn controlled_direct_effect_oracle_has_zero_variance() {
    let data = independent_mediator(300, 0.0, 4);
    let one = |v: f64| Learner::fixed(Predictor::constant(v));
    let spec = LearnerSpec::uniform(one(0.5)).with_mu(one(1.0)).with_nu(one(1.0));
    let r = estimate_cde(&data, (true, 1), &spec, 5, 0.05, 2).unwrap();
    assert!((r.theta_hat - 1.0).abs() <= 1e-10);
    assert_eq!(r.sigma_hat, 0.0);
}

#[test]
fn report_serializes_documented_fields() {
    let (data, _) = gen_cate(&DgpConfig::new(DgpKind::CateLinear), 200, 1).unwrap();
    let r = estimate_ate(&data, &LearnerSpec::lasso(), 4, 0.1, 5).unwrap();
    let v = serde_json::to_value(&r).unwrap();
    for key in ["estimand", "theta_hat", "sigma_hat", "ci", "alpha", "K", "n", "seed", "per_fold", "learner_configs"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["per_fold"].as_array().unwrap().len(), 4);
}

/// `z` with `P(Z > z) = tail`, by bisection on the normal survival function.
fn upper_quantile_by_bisection(tail: f64) -> f64 {
    let survival = |z: f64| 0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2);
    let (mut lo, mut hi) = (0.0, 10.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if survival(mid) > tail {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn folds_never_leak_into_their_own_training_set(n in 2usize..300, k in 2usize..10, s in any::<u64>()) {
        prop_assume!(k <= n);
        let plan = make_folds(n, k, s).unwrap();
        let mut seen = vec![0usize; n];
        for f in 0..k {
            let (eval, train) = (plan.fold(f), plan.complement(f));
            prop_assert_eq!(eval.len() + train.len(), n);
            prop_assert!(eval.iter().all(|i| !train.contains(i)));
            eval.iter().for_each(|&i| seen[i] += 1);
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let sizes = plan.fold_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn interval_reproduces_the_normal_quantile(s in 0u64..1000, alpha in 0.01f64..0.5) {
        let (data, _) = gen_cate(&DgpConfig::new(DgpKind::CateLinear), 120, s).unwrap();
        let r = estimate_ate(&data, &LearnerSpec::lasso().with_mu(Learner::Constant), 3, alpha, s).unwrap();
        let z = drnets::stats::two_sided_z(alpha);
        prop_assert!((z - upper_quantile_by_bisection(alpha / 2.0)).abs() <= 1e-9);
        let half = z * r.sigma_hat / (r.n as f64).sqrt();
        prop_assert!((r.ci[0] - (r.theta_hat - half)).abs() <= 1e-12);
        prop_assert!((r.ci[1] - (r.theta_hat + half)).abs() <= 1e-12);
    }
}
