//! Training losses and the packed real/imaginary output layout.

use num_complex::Complex64;

use crate::linalg::CVector;
use crate::{Error, Result};

/// Probabilities below this are clamped before taking the logarithm.
pub const CE_CLAMP: f64 = 1e-12;

/// Mean over samples of `‖ĥ − h‖² / ‖h‖²` on packed rows of length `len`.
pub fn estimation_loss(estimates: &[f64], targets: &[f64], len: usize) -> Result<f64> {
    if estimates.len() != targets.len() || len == 0 || targets.len() % len != 0 || targets.is_empty() {
        return Err(Error::input("estimate and target batches differ in shape"));
    }
    let mut total = 0.0;
    for (e, t) in estimates.chunks_exact(len).zip(targets.chunks_exact(len)) {
        let energy: f64 = t.iter().map(|v| v * v).sum();
        if energy == 0.0 {
            return Err(Error::input("zero-energy target channel"));
        }
        total += e.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / energy;
    }
    Ok(total / (targets.len() / len) as f64)
}

/// `−mean log p_true` with probabilities clamped at [`CE_CLAMP`]; regions
/// are 1-based.
pub fn classification_loss(probabilities: &[f64], regions: &[usize], r: usize) -> Result<f64> {
    if probabilities.len() != regions.len() * r || regions.is_empty() {
        return Err(Error::input("probability and label batches differ in shape"));
    }
    let mut total = 0.0;
    for (p, &t) in probabilities.chunks_exact(r).zip(regions) {
        if t == 0 || t > r {
            return Err(Error::input(format!("region label {t} outside 1..={r}")));
        }
        total -= p[t - 1].max(CE_CLAMP).ln();
    }
    Ok(total / regions.len() as f64)
}

/// `[re(h); im(h)]`.
pub fn pack(h: &CVector) -> Vec<f64> {
    h.iter().map(|z| z.re).chain(h.iter().map(|z| z.im)).collect()
}

pub fn unpack(packed: &[f64]) -> CVector {
    let d = packed.len() / 2;
    CVector::from_iterator(d, (0..d).map(|i| Complex64::new(packed[i], packed[d + i])))
}
