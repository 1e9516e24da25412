mod common;

use ris_dml::nn::{
    compute_gradients, mac_count, route_groups, ArchConfig, Batch, FeatureMap, GateOutput, Gating, Mode, ModelParams,
    Objective, Probe,
};
use ris_dml::rng;
use rand::Rng;

fn small_arch(regions: usize) -> ArchConfig {
    ArchConfig { classifier_width: 4, expert_width: 5, ..ArchConfig::new((4, 2), 6, regions) }
}

fn inputs(n: usize, arch: &ArchConfig, seed: u64) -> FeatureMap {
    let mut r = rng::stream(seed, &[3]);
    let (q1, q2) = arch.q_shape;
    FeatureMap::from_vec(n, q1, q2, 2, (0..n * q1 * q2 * 2).map(|_| r.random_range(-1.0..1.0)).collect())
}

fn perturb(m: &mut ModelParams, seed: u64) {
    let mut r = rng::stream(seed, &[4]);
    for (_, _, t) in m.tensors_mut() {
        t.iter_mut().for_each(|v| *v += r.random_range(-0.2..0.2));
    }
    // keep running variances positive
    for e in &mut m.experts {
        for b in &mut e.blocks {
            b.bn.running_var.iter_mut().for_each(|v| *v = v.abs() + 0.5);
        }
    }
    for b in &mut m.classifier.blocks {
        b.bn.running_var.iter_mut().for_each(|v| *v = v.abs() + 0.5);
    }
}

#[test]
fn single_expert_hard_and_soft_agree() {
    let arch = small_arch(1);
    let mut m = ModelParams::init(arch, 1).unwrap();
    perturb(&mut m, 1);
    let x = inputs(7, &arch, 1);
    let hard = m.estimator_forward(&x, Gating::Hard, Mode::Eval, &mut Probe::default()).unwrap().0;
    let soft = m.estimator_forward(&x, Gating::Soft, Mode::Eval, &mut Probe::default()).unwrap().0;
    assert_eq!(hard, soft);
}

#[test]
fn one_hot_gate_makes_soft_equal_hard() {
    let arch = small_arch(3);
    let mut m = ModelParams::init(arch, 2).unwrap();
    perturb(&mut m, 2);
    // a huge head bias saturates the softmax onto expert 2
    m.classifier.head.weight.iter_mut().for_each(|w| *w = 0.0);
    m.classifier.head.bias = vec![0.0, 1e4, 0.0];
    let x = inputs(5, &arch, 2);
    let (hard, gates) = m.estimator_forward(&x, Gating::Hard, Mode::Eval, &mut Probe::default()).unwrap();
    assert!(gates.iter().all(|g| g.hard_choice == 2 && g.probabilities == vec![0.0, 1.0, 0.0]));
    let soft = m.estimator_forward(&x, Gating::Soft, Mode::Eval, &mut Probe::default()).unwrap().0;
    assert_eq!(hard, soft);
}

#[test]
fn identical_experts_make_the_gate_irrelevant() {
    let arch = small_arch(3);
    let mut m = ModelParams::init(arch, 3).unwrap();
    perturb(&mut m, 3);
    let e = m.experts[0].clone();
    m.experts = vec![e.clone(), e.clone(), e];
    let x = inputs(9, &arch, 3);
    let hard = m.estimator_forward(&x, Gating::Hard, Mode::Eval, &mut Probe::default()).unwrap().0;
    let soft = m.estimator_forward(&x, Gating::Soft, Mode::Eval, &mut Probe::default()).unwrap().0;
    for (a, b) in hard.iter().zip(&soft) {
        assert!((a - b).abs() <= 1e-10);
    }
}

#[test]
fn equal_logits_give_uniform_gate_and_first_expert() {
    let g = GateOutput::from_probabilities(vec![1.0 / 3.0; 3]);
    assert_eq!(g.hard_choice, 1);
    let arch = small_arch(3);
    let mut m = ModelParams::init(arch, 4).unwrap();
    m.classifier.head.weight.iter_mut().for_each(|w| *w = 0.0);
    m.classifier.head.bias.iter_mut().for_each(|b| *b = 0.0);
    let x = inputs(2, &arch, 4);
    for g in m.classifier_forward(&x, Mode::Eval, &mut Probe::default()).unwrap() {
        assert_eq!(g.hard_choice, 1);
        assert!(g.probabilities.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
    }
}

#[test]
fn hard_gating_runs_exactly_one_expert_per_sample() {
    let arch = small_arch(3);
    let mut m = ModelParams::init(arch, 5).unwrap();
    perturb(&mut m, 5);
    let x = inputs(40, &arch, 5);
    let mut probe = Probe::default();
    let (_, gates) = m.estimator_forward(&x, Gating::Hard, Mode::Eval, &mut probe).unwrap();
    assert_eq!(probe.expert_samples.iter().sum::<u64>(), 40);
    for e in 0..3 {
        let routed = gates.iter().filter(|g| g.hard_choice == e + 1).count() as u64;
        assert_eq!(probe.expert_samples.get(e).copied().unwrap_or(0), routed);
    }
    let per = mac_count(&arch);
    assert_eq!(probe.total_macs(), 40 * per.total());
}

#[test]
fn instrumented_macs_match_the_analytic_count() {
    for (q_shape, d, regions) in [((8, 4), 256, 3), ((8, 4), 1024, 3), ((4, 4), 64, 2), ((16, 4), 256, 1), ((1, 1), 4, 2)] {
        let arch = ArchConfig::new(q_shape, d, regions);
        let m = ModelParams::init(arch, 6).unwrap();
        let x = inputs(3, &arch, 6);
        let mut probe = Probe::default();
        m.estimator_forward(&x, Gating::Hard, Mode::Eval, &mut probe).unwrap();
        let r = mac_count(&arch);
        assert_eq!(probe.classifier_macs, 3 * r.classifier);
        assert_eq!(probe.expert_macs, 3 * r.expert);
        assert_eq!(probe.mapper_macs, 3 * r.mapper());
        let mut soft = Probe::default();
        m.estimator_forward(&x, Gating::Soft, Mode::Eval, &mut soft).unwrap();
        assert_eq!(soft.total_macs(), 3 * r.total_soft(regions));
    }
}

#[test]
fn doubling_q1_doubles_every_spatial_term() {
    let a = mac_count(&ArchConfig::new((8, 4), 256, 3));
    let b = mac_count(&ArchConfig::new((16, 4), 256, 3));
    assert_eq!(b.expert, 2 * a.expert);
    assert_eq!(b.mapper_mix, 2 * a.mapper_mix);
    assert_eq!(b.mapper_dense, 2 * a.mapper_dense);
}

#[test]
fn expert_output_shapes_and_zero_input() {
    let arch = ArchConfig::new((8, 4), 256, 3);
    let mut m = ModelParams::init(arch, 7).unwrap();
    for b in &mut m.experts[0].blocks {
        b.conv.bias.iter_mut().for_each(|v| *v = 0.0);
        b.bn.beta.iter_mut().for_each(|v| *v = 0.0);
        b.bn.running_mean.iter_mut().for_each(|v| *v = 0.0);
    }
    let x = FeatureMap::zeros(2, 8, 4, 2);
    let z = m.expert_forward(0, &x, Mode::Eval, &mut Probe::default()).unwrap();
    assert_eq!((z.n, z.h, z.w, z.c), (2, 8, 4, 32));
    assert!(z.data.iter().all(|&v| v == 0.0));
    // 1×1 spatial input is valid
    let arch1 = ArchConfig::new((1, 1), 4, 2);
    let m1 = ModelParams::init(arch1, 7).unwrap();
    let z1 = m1.expert_forward(1, &FeatureMap::zeros(1, 1, 1, 2), Mode::Eval, &mut Probe::default()).unwrap();
    assert_eq!(z1.data.len(), 32);
    // mapper is linear without biases
    m.mapper.mix.bias.iter_mut().for_each(|b| *b = 0.0);
    m.mapper.dense.bias.iter_mut().for_each(|b| *b = 0.0);
    let mut r = rng::stream(7, &[]);
    let feat = FeatureMap::from_vec(1, 8, 4, 32, (0..8 * 4 * 32).map(|_| r.random_range(-1.0..1.0)).collect());
    let base = m.mapper_forward(&feat, &mut Probe::default()).unwrap();
    assert_eq!(base.len(), 512);
    let scaled = FeatureMap::from_vec(1, 8, 4, 32, feat.data.iter().map(|v| -2.5 * v).collect());
    let out = m.mapper_forward(&scaled, &mut Probe::default()).unwrap();
    for (a, b) in base.iter().zip(&out) {
        assert!((-2.5 * a - b).abs() < 1e-10);
    }
    let zero = m.mapper_forward(&FeatureMap::zeros(1, 8, 4, 32), &mut Probe::default()).unwrap();
    assert!(zero.iter().all(|&v| v == 0.0));
}

#[test]
fn batch_statistics_update_running_estimates() {
    let arch = small_arch(2);
    let mut m = ModelParams::init(arch, 8).unwrap();
    perturb(&mut m, 8);
    let x = inputs(16, &arch, 8);
    let t: Vec<f64> = (0..16 * arch.output_len()).map(|i| (i as f64 * 0.37).sin()).collect();
    let batch = Batch { inputs: &x, targets: Some(&t), regions: None };
    let g = compute_gradients(&m, &batch, Objective::Estimation { gating: Gating::Hard, train_gate: false }, 1.0).unwrap();
    let before = m.clone();
    m.apply_batch_stats(&[(1.0, &g.bn_stats)]);
    // classifier statistics are untouched under a frozen gate
    assert_eq!(m.classifier, before.classifier);
    let mut changed = 0;
    for (e, (a, b)) in m.experts.iter().zip(&before.experts).enumerate() {
        if a != b {
            changed += 1;
            let stats = g.bn_stats.layers[arch.classifier_depth + e * arch.expert_depth].as_ref().unwrap();
            let bn = &a.blocks[0].bn;
            let old = &b.blocks[0].bn;
            for k in 0..bn.running_mean.len() {
                let want = 0.9 * old.running_mean[k] + 0.1 * stats.mean[k];
                assert!((bn.running_mean[k] - want).abs() < 1e-15);
            }
        }
    }
    assert!(changed >= 1);
}

#[test]
fn perfect_fit_has_zero_estimation_gradient() {
    let arch = small_arch(2);
    let mut m = ModelParams::init(arch, 9).unwrap();
    perturb(&mut m, 9);
    let x = inputs(6, &arch, 9);
    // train-mode forward output used as its own target
    let obj = Objective::Estimation { gating: Gating::Hard, train_gate: false };
    let gates = m.classifier_forward(&x, Mode::Eval, &mut Probe::default()).unwrap();
    let ol = arch.output_len();
    let mut out = vec![0.0; 6 * ol];
    for (e, idx) in route_groups(&gates, 2).iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let z = m.expert_forward(e, &x.gather(idx), Mode::Train, &mut Probe::default()).unwrap();
        let y = m.mapper_forward(&z, &mut Probe::default()).unwrap();
        for (j, &i) in idx.iter().enumerate() {
            out[i * ol..(i + 1) * ol].copy_from_slice(&y[j * ol..(j + 1) * ol]);
        }
    }
    let batch = Batch { inputs: &x, targets: Some(&out), regions: None };
    let g = compute_gradients(&m, &batch, obj, 1.0).unwrap();
    assert!(g.loss < 1e-24, "{}", g.loss);
    assert!(g.max_abs() < 1e-12, "{}", g.max_abs());
}
