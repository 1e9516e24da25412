//! Invariants that must hold for every input.

mod common;

use common::*;
use proptest::prelude::*;
use ris_dml::channel::{generate_user, ArrayGeometry};
use ris_dml::config::ExperimentConfig;
use ris_dml::estimators::nmse;
use ris_dml::harness::Scenario;
use ris_dml::linalg::{vectorize, CVector};
use ris_dml::nn::layers::softmax_rows;
use ris_dml::nn::{ArchConfig, Gating, Mode, ModelParams, Probe};
use ris_dml::pilots::{decode_tensor, encode_tensor, make_grouping};
use std::f64::consts::FRAC_PI_2;

fn angle() -> impl Strategy<Value = f64> {
    (-FRAC_PI_2 + 1e-9)..(FRAC_PI_2 - 1e-9)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn steering_vectors_have_unit_norm(rows in 1usize..10, cols in 1usize..10, spacing in 0.1f64..2.0, az in angle(), el in angle()) {
        let g = ArrayGeometry::with_spacing(rows, cols, spacing).unwrap();
        let a = g.steering_vector(az, el);
        prop_assert_eq!(a.len(), rows * cols);
        prop_assert!((a.norm() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn grouping_rows_sum_to_group_size_and_columns_to_one(br in 1usize..4, bc in 1usize..4, tr in 1usize..4, tc in 1usize..4) {
        let geom = ArrayGeometry::new(br * tr, bc * tc).unwrap();
        let g = br * bc;
        let s = make_grouping(&geom, g).unwrap().matrix();
        prop_assert_eq!(s.nrows() * g, geom.total());
        for r in s.row_iter() {
            prop_assert_eq!(r.sum(), g as f64);
        }
        for c in s.column_iter() {
            prop_assert_eq!(c.sum(), 1.0);
        }
    }

    #[test]
    fn softmax_lands_on_the_simplex(logits in prop::collection::vec(-700.0f64..700.0, 1..8)) {
        let r = logits.len();
        let p = softmax_rows(&logits, r);
        prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn nmse_is_scale_invariant(seed in 0u64..1000, re in -5.0f64..5.0, im in -5.0f64..5.0) {
        prop_assume!(re.abs() + im.abs() > 1e-3);
        let h = random_vector(12, seed);
        let e = random_vector(12, seed + 1);
        let k = c(re, im);
        let a = nmse(&e, &h).unwrap();
        let b = nmse(&(e * k), &(h * k)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn tensor_encoding_is_a_bijection(q1 in 1usize..9, q2 in 1usize..9, seed in 0u64..1000) {
        let raw = random_vector(q1 * q2, seed);
        let t = encode_tensor(&raw, (q1, q2)).unwrap();
        prop_assert_eq!(t.len(), 2 * q1 * q2);
        prop_assert_eq!(decode_tensor(&t, (q1, q2)).unwrap(), raw);
    }

    #[test]
    fn gate_probabilities_stay_on_the_simplex(seed in 0u64..50, scale in 0.0f64..100.0) {
        let arch = ArchConfig { classifier_width: 3, expert_width: 3, ..ArchConfig::new((2, 2), 4, 3) };
        let m = ModelParams::init(arch, seed).unwrap();
        let x: Vec<f64> = random_vector(8 * 3, seed).iter().flat_map(|z| [z.re * scale, z.im * scale]).collect();
        let x = m.input_batch(x).unwrap();
        for g in m.classifier_forward(&x, Mode::Eval, &mut Probe::default()).unwrap() {
            prop_assert!((g.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(g.probabilities.iter().all(|p| *p >= 0.0));
            prop_assert!(g.hard_choice >= 1 && g.hard_choice <= 3);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generation_is_deterministic_under_seed(seed in 0u64..u64::MAX, region in 1usize..4) {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        let scn = Scenario::build(&cfg).unwrap();
        let run = || generate_user(&scn.channel, scn.grouping.as_ref(), scn.frozen.as_ref(), seed, region, 2, 3).unwrap();
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(&x.cascaded, &y.cascaded);
            prop_assert_eq!(&x.grouped, &y.grouped);
        }
        let again = Scenario::build(&cfg).unwrap();
        prop_assert_eq!(&scn.clients[4].short.psi, &again.clients[4].short.psi);
    }

    #[test]
    fn grouped_observation_is_a_reparameterization(seed in 0u64..1000) {
        // φ = Sᵀφ̄ gives φᴴ H w = φ̄ᴴ (S H) w exactly
        let cfg = grouped_config(1);
        let s = cfg.grouping().unwrap().unwrap();
        let ch = &grouped_channels(seed, 1 + (seed % 3) as usize, 1)[0];
        let phi_bar = random_vector(16, seed).map(|z| z / z.norm());
        let phi = s.expand(&phi_bar);
        let w = random_vector(16, seed + 7);
        let physical = (phi.adjoint() * &ch.cascaded * &w)[(0, 0)];
        let grouped = (phi_bar.adjoint() * ch.grouped.as_ref().unwrap() * &w)[(0, 0)];
        prop_assert!((physical - grouped).norm() <= 1e-9 * physical.norm().max(1.0));
        prop_assert_eq!(ch.grouped.as_ref().unwrap(), &s.apply(&ch.cascaded));
        prop_assert_eq!(vectorize(ch.grouped.as_ref().unwrap()), ch.target());
    }

    #[test]
    fn eval_forward_is_pure(seed in 0u64..100) {
        let arch = ArchConfig { classifier_width: 3, expert_width: 3, ..ArchConfig::new((2, 2), 4, 2) };
        let m = ModelParams::init(arch, seed).unwrap();
        let x: Vec<f64> = random_vector(4 * 4, seed).iter().flat_map(|z| [z.re, z.im]).collect();
        let x = m.input_batch(x).unwrap();
        let a = m.estimator_forward(&x, Gating::Hard, Mode::Eval, &mut Probe::default()).unwrap().0;
        let b = m.estimator_forward(&x, Gating::Hard, Mode::Eval, &mut Probe::default()).unwrap().0;
        prop_assert_eq!(a, b);
    }
}

#[test]
fn zero_vector_is_rejected_by_nmse() {
    assert!(nmse(&CVector::zeros(3), &CVector::zeros(3)).is_err());
}
