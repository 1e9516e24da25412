use rand::Rng;
use ris_dml::nn::{compute_gradients, ArchConfig, Batch, FeatureMap, Gating, ModelParams, Objective, ParamGroup};
use ris_dml::rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn tiny_model(seed: u64) -> ModelParams {
    let mut arch = ArchConfig::new((2, 2), 4, 2);
    arch.expert_width = 3;
    arch.classifier_width = 3;
    let mut m = ModelParams::init(arch, seed).unwrap();
    // non-trivial affine and bias values so every path carries gradient
    let mut r = rng::stream(seed, &[77]);
    for (_, trainable, t) in m.tensors_mut() {
        if trainable {
            t.iter_mut().for_each(|v| *v += r.random_range(-0.3..0.3));
        }
    }
    m
}

pub fn batch_data(n: usize, seed: u64) -> (FeatureMap, Vec<f64>, Vec<usize>) {
    let mut r = rng::stream(seed, &[78]);
    let x: Vec<f64> = (0..n * 8).map(|_| r.random_range(-1.0..1.0)).collect();
    let t: Vec<f64> = (0..n * 8).map(|_| r.random_range(-1.0..1.0)).collect();
    let regions = (0..n).map(|i| 1 + i % 2).collect();
    (FeatureMap::from_vec(n, 2, 2, 2, x), t, regions)
}

/// Finite-difference comparison over every trainable parameter the
/// objective optimizes.
pub struct GradientCheck {
    /// Largest relative error among differences above the roundoff bound.
    pub worst: f64,
    pub max_diff: f64,
    pub noise: f64,
    pub checked: usize,
    pub failed: usize,
}

pub fn check(model: &ModelParams, objective: Objective, n: usize, seed: u64) -> GradientCheck {
    let trained = |g: ParamGroup| match objective {
        Objective::Classification => g == ParamGroup::Classifier,
        Objective::Estimation { gating: Gating::Soft, train_gate: true } => true,
        Objective::Estimation { .. } => g == ParamGroup::Estimator,
    };
    let (x, t, regions) = batch_data(n, seed);
    let batch = Batch { inputs: &x, targets: Some(&t), regions: Some(&regions) };
    let analytic = compute_gradients(model, &batch, objective, 1.0).unwrap();
    let grads: Vec<Vec<f64>> = analytic.params.tensors().into_iter().map(|(_, _, v)| v.clone()).collect();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut failed = 0;
    // central-difference roundoff: disagreement below this carries no signal
    let noise = 64.0 * f64::EPSILON * analytic.loss.abs().max(1.0) / STEP;
    let mut max_diff: f64 = 0.0;
    let mut probe = model.clone();
    let count = probe.tensors().len();
    for ti in 0..count {
        let (group, trainable, _) = probe.tensors()[ti];
        if !trainable || !trained(group) {
            continue;
        }
        let len = probe.tensors()[ti].2.len();
        for i in 0..len {
            let orig = probe.tensors()[ti].2[i];
            probe.tensors_mut()[ti].2[i] = orig + STEP;
            let lp = compute_gradients(&probe, &batch, objective, 1.0).unwrap().loss;
            probe.tensors_mut()[ti].2[i] = orig - STEP;
            let lm = compute_gradients(&probe, &batch, objective, 1.0).unwrap().loss;
            probe.tensors_mut()[ti].2[i] = orig;
            let numeric = (lp - lm) / (2.0 * STEP);
            let a = grads[ti][i];
            let diff = (a - numeric).abs();
            max_diff = max_diff.max(diff);
            let rel = if diff <= noise { 0.0 } else { diff / a.abs().max(numeric.abs()) };
            if rel > TOL {
                failed += 1;
            }
            worst = worst.max(rel);
            checked += 1;
        }
    }
    GradientCheck { worst, max_diff, noise, checked, failed }
}
