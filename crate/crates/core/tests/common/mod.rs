#![allow(dead_code)]

pub mod gradient;

use num_complex::Complex64;
use ris_dml::channel::{generate_user, ChannelRealization};
use ris_dml::config::ExperimentConfig;
use ris_dml::harness::Scenario;
use ris_dml::linalg::{CMatrix, CVector};
use ris_dml::pilots::{make_pilot_config, measurement_matrix, PilotAlphabet, PilotConfig, PrecoderMode};
use ris_dml::rng;

/// Default arrays with a small dataset.
pub fn grouped_config(samples: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.channel.samples_per_user = samples;
    c
}

pub fn grouped_channels(seed: u64, region: usize, n: usize) -> Vec<ChannelRealization> {
    let cfg = grouped_config(n);
    let scn = Scenario::build(&cfg).unwrap();
    generate_user(&scn.channel, scn.grouping.as_ref(), scn.frozen.as_ref(), seed, region, 1, n).unwrap()
}

/// Random ±1 grouped pilots (N' = 16, M = 16) with per-slot precoders.
pub fn grouped_pilots(q: usize, seed: u64) -> PilotConfig {
    let cfg = grouped_config(1);
    make_pilot_config(
        (q, 1),
        16,
        16,
        PilotAlphabet::Bpsk,
        PrecoderMode::PerSlot,
        cfg.grouping().unwrap(),
        false,
        &mut rng::stream(seed, &[1]),
        &mut rng::stream(seed, &[2]),
    )
    .unwrap()
}

pub fn grouped_psi(q: usize, seed: u64) -> CMatrix {
    measurement_matrix(&grouped_pilots(q, seed))
}

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn random_vector(n: usize, seed: u64) -> CVector {
    let mut r = rng::stream(seed, &[99]);
    CVector::from_fn(n, |_, _| rng::complex_gaussian(&mut r, 1.0))
}

/// `σ² tr((ΨᴴΨ)⁻¹)` from a Cholesky inverse of the Gram, independent of the
/// SVD used by the estimator.
pub fn noise_law(psi: &CMatrix, noise_var: f64) -> f64 {
    let gram = psi.adjoint() * psi;
    let inv = gram.cholesky().expect("full rank").inverse();
    noise_var * inv.diagonal().iter().map(|v| v.re).sum::<f64>()
}
