mod common;

use common::*;
use ris_dml::estimators::{
    fit_covariance, identifiability_report, nmse, CovarianceModel, LsEstimator, MmseEstimator,
};
use ris_dml::linalg::{vectorize, CMatrix, CVector};
use ris_dml::pilots::{noise_variance, observe_vector};
use ris_dml::rng;

#[test]
fn ls_recovers_grouped_channels_exactly_without_noise() {
    let chans = grouped_channels(3, 2, 5);
    // seed 74: the complex SVD alone reconstructs this Ψ only to ~5e-8
    for seed in (0..5).chain([74]) {
        let psi = grouped_psi(256, seed);
        let ls = LsEstimator::new(&psi);
        assert_eq!(ls.rank(), 256);
        for ch in &chans {
            let h = ch.target();
            let est = ls.estimate(&(&psi * &h));
            assert!(((est - &h).norm() / h.norm()) <= 1e-8);
        }
    }
}

#[test]
fn ls_error_energy_follows_noise_law() {
    let psi = grouped_psi(256, 11);
    let ls = LsEstimator::new(&psi);
    let nv = noise_variance(10.0);
    let chans = grouped_channels(4, 1, 2000);
    let mut err = 0.0;
    let mut energy = 0.0;
    for (i, ch) in chans.iter().enumerate() {
        let h = ch.target();
        let y = observe_vector(&psi, &h, nv, &mut rng::stream(5, &[i as u64]));
        err += (ls.estimate(&y) - &h).norm_squared();
        energy += h.norm_squared();
    }
    let empirical = err / energy;
    let oracle = noise_law(&psi, nv) / (energy / chans.len() as f64);
    assert!((empirical / oracle - 1.0).abs() < 0.1, "{empirical} vs {oracle}");
}

#[test]
fn mmse_beats_ls_with_matched_covariance() {
    // correlated prior: h = L z with a fixed random L
    let d = 24;
    let q = 24;
    let l = CMatrix::from_fn(d, 4, |i, j| {
        let v = random_vector(1, (i * 7 + j) as u64)[0];
        v * (1.0 + j as f64)
    });
    let cov = CovarianceModel { matrix: &l * l.adjoint(), sample_count: 0, loading: 0.0 };
    let mut r = rng::stream(8, &[]);
    let psi = CMatrix::from_fn(q, d, |_, _| rng::complex_gaussian(&mut r, 1.0));
    let nv = 1.0;
    let ls = LsEstimator::new(&psi);
    let mmse = MmseEstimator::new(&psi, &cov, nv).unwrap();
    let (mut e_ls, mut e_mmse) = (0.0, 0.0);
    let trials = 10_000;
    for t in 0..trials {
        let mut g = rng::stream(9, &[t]);
        let z = CVector::from_fn(4, |_, _| rng::complex_gaussian(&mut g, 1.0));
        let h = &l * z;
        let y = observe_vector(&psi, &h, nv, &mut g);
        e_ls += nmse(&ls.estimate(&y), &h).unwrap();
        e_mmse += nmse(&mmse.estimate(&y), &h).unwrap();
    }
    assert!(e_mmse < 0.5 * e_ls, "mmse {} ls {}", e_mmse / trials as f64, e_ls / trials as f64);
}

#[test]
fn random_pilot_designs_are_generically_full_rank() {
    for &q in &[16usize, 32, 256] {
        let mut full = 0;
        for seed in 0..100 {
            let r = identifiability_report(&grouped_psi(q, 1000 + seed));
            assert!(r.rank <= q.min(256));
            if r.rank == q.min(256) {
                full += 1;
            }
        }
        assert!(full >= 99, "Q={q}: {full}/100 full rank");
    }
}

#[test]
fn underdetermined_design_is_flagged() {
    let r = identifiability_report(&grouped_psi(32, 3));
    assert_eq!(r.rank, 32);
    assert!(r.underdetermined);
    assert!(r.gram_condition.is_none());
}

#[test]
fn short_budget_ls_only_recovers_the_measured_subspace() {
    // min-norm LS keeps the projection onto the Q-dimensional row space, so
    // for a generic design the NMSE sits near 1 − Q/D at high SNR
    let psi = grouped_psi(32, 21);
    let ls = LsEstimator::new(&psi);
    let chans = grouped_channels(6, 2, 400);
    let mut acc = 0.0;
    for (i, ch) in chans.iter().enumerate() {
        let h = ch.target();
        let y = observe_vector(&psi, &h, 0.1, &mut rng::stream(2, &[i as u64]));
        acc += nmse(&ls.estimate(&y), &h).unwrap();
    }
    let m = acc / chans.len() as f64;
    let projection = 1.0 - 32.0 / 256.0;
    assert!((m - projection).abs() < 0.06, "{m}");
    assert!(10.0 * m.log10() > -1.0);
}

#[test]
fn covariance_of_iid_entries_is_near_identity() {
    let d = 16;
    let mut r = rng::stream(4, &[]);
    let xs: Vec<CVector> = (0..100_000).map(|_| CVector::from_fn(d, |_, _| rng::complex_gaussian(&mut r, 1.0))).collect();
    let cov = fit_covariance(&xs, 0.0).unwrap();
    for i in 0..d {
        for j in 0..d {
            let target = if i == j { 1.0 } else { 0.0 };
            assert!((cov.matrix[(i, j)] - c(target, 0.0)).norm() < 0.05);
        }
    }
}

#[test]
fn observation_stacks_slotwise_model() {
    // y_q = θ_qᵀ H̄ w_q for every slot
    let p = grouped_pilots(32, 4);
    let psi = ris_dml::pilots::measurement_matrix(&p);
    let ch = &grouped_channels(1, 3, 1)[0];
    let hg = ch.grouped.as_ref().unwrap();
    let y = &psi * vectorize(hg);
    for q in 0..32 {
        let theta = p.phases.row(q);
        let w = p.precoders.row(q).transpose();
        let slot = (theta * hg * w)[(0, 0)];
        assert!((slot - y[q]).norm() < 1e-10);
    }
}

#[test]
fn noise_only_observation_has_requested_variance() {
    let psi = grouped_psi(32, 1);
    let zero = CVector::zeros(256);
    let mut acc = 0.0;
    let n = 4000;
    for i in 0..n {
        let y = observe_vector(&psi, &zero, 0.1, &mut rng::stream(3, &[i]));
        acc += y.norm_squared();
    }
    let var = acc / (n as f64 * 32.0);
    assert!((var - 0.1).abs() < 0.005, "{var}");
}
