use drnets::nnet::{mlp_fit, mlp_init, Loss, MlpConfig, MlpModel, WeightedSample};
use drnets::seed;
use proptest::prelude::*;
use rand::Rng;

const FD_STEP: f64 = 1e-6;
const KINK_MARGIN: f64 = 1e-4;

fn random_batch(rng: &mut impl Rng, p: usize, n: usize, loss: Loss) -> Vec<WeightedSample<f64>> {
    (0..n)
        .map(|_| {
            let x = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = match loss {
                Loss::Square => rng.random_range(-2.0..2.0),
                Loss::Logistic => f64::from(rng.random_bool(0.5)),
            };
            WeightedSample::new(x, y, rng.random_range(0.0..2.0))
        })
        .collect()
}

/// Central differences of the batch loss, one parameter at a time.
fn numeric_gradient(model: &MlpModel<f64>, batch: &[WeightedSample<f64>]) -> Vec<f64> {
    let theta = model.parameters();
    (0..theta.len())
        .map(|j| {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[j] += FD_STEP;
            minus[j] -= FD_STEP;
            let lp = model.with_parameters(&plus).unwrap().loss_grad(batch).unwrap().loss;
            let lm = model.with_parameters(&minus).unwrap().loss_grad(batch).unwrap().loss;
            (lp - lm) / (2.0 * FD_STEP)
        })
        .collect()
}

fn near_kink(model: &MlpModel<f64>, batch: &[WeightedSample<f64>]) -> bool {
    batch.iter().any(|s| model.min_abs_preactivation(&s.x).unwrap() < KINK_MARGIN)
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = seed::rng(2024);
    let mut checked = 0;
    while checked < 20 {
        let loss = if checked % 2 == 0 { Loss::Square } else { Loss::Logistic };
        let (depth, width, p) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..5));
        let cfg = MlpConfig::new(depth, width).with_loss(loss).with_clamp_bound(1e3).with_seed(rng.random());
        let model = mlp_init(&cfg, p).unwrap();
        let batch = random_batch(&mut rng, p, 8, loss);
        if near_kink(&model, &batch) {
            continue;
        }
        let analytic = model.loss_grad(&batch).unwrap().grad.flatten();
        let numeric = numeric_gradient(&model, &batch);
        for (a, n) in analytic.iter().zip(&numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
            assert!(rel <= 1e-5, "analytic {a} vs numeric {n}");
        }
        checked += 1;
    }
}

#[test]
fn different_seeds_give_different_serialized_weights() {
    let a = mlp_init(&MlpConfig::<f64>::new(2, 4).with_seed(7), 3).unwrap();
    let b = mlp_init(&MlpConfig::<f64>::new(2, 4).with_seed(8), 3).unwrap();
    let weights = |m: &MlpModel<f64>| serde_json::to_value(m).unwrap()["weights"].clone();
    assert_ne!(weights(&a), weights(&b));
    assert_eq!(weights(&a), weights(&mlp_init(&MlpConfig::<f64>::new(2, 4).with_seed(7), 3).unwrap()));
}

#[test]
fn serialized_model_has_documented_fields() {
    let m = mlp_init(&MlpConfig::<f64>::new(1, 2).with_seed(1), 2).unwrap();
    let v = serde_json::to_value(&m).unwrap();
    for key in ["config", "input_dim", "weights", "biases"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
}

fn toy_samples(n: usize, p: usize, s: u64) -> Vec<WeightedSample<f64>> {
    let mut rng = seed::rng(s);
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = x[0].sin() + 0.3 * rng.random_range(-1.0..1.0);
            WeightedSample::new(x, y, rng.random_range(0.1..2.0))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fitted_output_respects_the_clamp(s in 0u64..10_000, bound in 0.05f64..3.0, scale in 1.0f64..50.0) {
        let samples: Vec<_> = toy_samples(40, 3, s)
            .into_iter()
            .map(|mut w| { w.target *= scale; w })
            .collect();
        let cfg = MlpConfig::new(2, 6).with_seed(s).with_epochs(5).with_clamp_bound(bound);
        let m = mlp_fit(&samples, &cfg).unwrap();
        let mut rng = seed::rng(s ^ 0xabc);
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-20.0..20.0)).collect();
            prop_assert!(m.predict(&x).unwrap().abs() <= bound);
        }
    }

    #[test]
    fn fitting_is_byte_reproducible(s in 0u64..10_000) {
        let samples = toy_samples(60, 2, s);
        let cfg = MlpConfig::new(2, 5).with_seed(s).with_epochs(8).with_batch_size(7);
        let a = mlp_fit(&samples, &cfg).unwrap().to_json().unwrap();
        let b = mlp_fit(&samples, &cfg).unwrap().to_json().unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn rescaling_all_weights_leaves_the_fit_unchanged(s in 0u64..10_000, e in -6i32..6) {
        let samples = toy_samples(50, 2, s);
        let c = 2f64.powi(e);
        let scaled: Vec<_> = samples.iter().map(|w| WeightedSample::new(w.x.clone(), w.target, w.weight * c)).collect();
        let cfg = MlpConfig::new(1, 6).with_seed(s).with_epochs(10).with_clamp_bound(5.0);
        prop_assert_eq!(mlp_fit(&samples, &cfg).unwrap(), mlp_fit(&scaled, &cfg).unwrap());
    }

    #[test]
    fn rescaling_by_arbitrary_factor_is_numerically_invisible(s in 0u64..10_000, c in 0.01f64..100.0) {
        let samples = toy_samples(50, 2, s);
        let scaled: Vec<_> = samples.iter().map(|w| WeightedSample::new(w.x.clone(), w.target, w.weight * c)).collect();
        let cfg = MlpConfig::new(1, 6).with_seed(s).with_epochs(10).with_clamp_bound(5.0);
        let a = mlp_fit(&samples, &cfg).unwrap().parameters();
        let b = mlp_fit(&scaled, &cfg).unwrap().parameters();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() <= 1e-9 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn parameter_count_follows_topology(l in 1usize..5, h in 1usize..12, p in 1usize..10) {
        let m = mlp_init(&MlpConfig::<f64>::new(l, h), p).unwrap();
        prop_assert_eq!(m.parameter_count(), h * (p + 1) + (l - 1) * h * (h + 1) + (h + 1));
        prop_assert_eq!(m.parameters().len(), m.parameter_count());
        let shapes = m.layer_shapes();
        prop_assert_eq!(shapes.len(), l + 1);
        prop_assert_eq!(shapes[0], (h, p));
        prop_assert_eq!(shapes[l], (1, h));
    }
}
