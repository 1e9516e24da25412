//! Optimizers over [`ModelParams`]-shaped gradients.

use serde::{Deserialize, Serialize};

use super::model::{ModelParams, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments for every trainable tensor, plus the step index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .into_iter()
            .filter(|(_, t, _)| *t)
            .map(|(_, _, v)| vec![0.0; v.len()])
            .collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update of the trainable tensors in `group`
/// (all groups when `None`).
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, lr: f64, group: Option<ParamGroup>) {
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let grads = grads.tensors();
    let mut slot = 0;
    for ((g, trainable, p), (_, _, gr)) in params.tensors_mut().into_iter().zip(grads) {
        if !trainable {
            continue;
        }
        if group.is_none_or(|x| x == g) {
            let (m, v) = (&mut state.m[slot], &mut state.v[slot]);
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gr[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * gr[i] * gr[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        slot += 1;
    }
}

/// Plain gradient step `p ← p − lr·g` on the trainable tensors in `group`.
pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, lr: f64, group: Option<ParamGroup>) {
    let grads = grads.tensors();
    for ((g, trainable, p), (_, _, gr)) in params.tensors_mut().into_iter().zip(grads) {
        if trainable && group.is_none_or(|x| x == g) {
            for (pi, gi) in p.iter_mut().zip(gr) {
                *pi -= lr * gi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchConfig;

    fn tiny() -> ModelParams {
        let mut a = ArchConfig::new((2, 2), 4, 2);
        a.expert_width = 3;
        a.classifier_width = 2;
        ModelParams::init(a, 1).unwrap()
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = tiny();
        let before = p.clone();
        let g = p.zeros_like();
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &g, &mut s, 1e-3, None);
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = tiny();
        let before = p.to_flat();
        let mut g = p.zeros_like();
        for (_, t, v) in g.tensors_mut() {
            if t {
                v.iter_mut().for_each(|x| *x = 0.37);
            }
        }
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &g, &mut s, 1e-3, None);
        let after = p.to_flat();
        let mut moved = 0;
        for (a, b) in after.iter().zip(&before) {
            if a != b {
                assert!(((b - a) - 1e-3).abs() < 1e-9);
                moved += 1;
            }
        }
        assert_eq!(moved, p.parameter_count(None));
    }

    #[test]
    fn group_restriction() {
        let mut p = tiny();
        let before = p.clone();
        let mut g = p.zeros_like();
        for (_, t, v) in g.tensors_mut() {
            if t {
                v.iter_mut().for_each(|x| *x = 1.0);
            }
        }
        sgd_step(&mut p, &g, 0.1, Some(ParamGroup::Estimator));
        assert_eq!(p.classifier, before.classifier);
        assert_ne!(p.mapper, before.mapper);
    }
}
