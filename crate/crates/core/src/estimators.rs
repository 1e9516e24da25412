//! Least-squares and linear MMSE baselines, NMSE metrics and
//! identifiability diagnostics for the stacked model `y = Ψ h + n`.

use num_complex::Complex64;

use crate::linalg::{self, CMatrix, CVector};
use crate::{Error, Result};

/// NMSE values at or below this are reported as the dB floor.
pub const NMSE_DB_FLOOR: f64 = -300.0;

/// Minimum-norm least-squares estimator with a precomputed pseudoinverse.
///
/// The pseudoinverse comes from an SVD truncated at
/// `σ_max · max(Q, D) · ε`; for full column rank `Ψ` it equals
/// `(ΨᴴΨ)⁻¹Ψᴴ`.
#[derive(Debug, Clone)]
pub struct LsEstimator {
    pinv: CMatrix,
    rank: usize,
}

impl LsEstimator {
    pub fn new(psi: &CMatrix) -> Self {
        let (pinv, rank) = linalg::pseudo_inverse(psi);
        Self { pinv, rank }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn estimate(&self, y: &CVector) -> CVector {
        &self.pinv * y
    }

    pub fn pseudo_inverse(&self) -> &CMatrix {
        &self.pinv
    }
}

pub fn ls_estimate(y: &CVector, psi: &CMatrix) -> CVector {
    LsEstimator::new(psi).estimate(y)
}

/// Sample covariance of zero-mean channel vectors with diagonal loading.
#[derive(Debug, Clone)]
pub struct CovarianceModel {
    pub matrix: CMatrix,
    pub sample_count: usize,
    /// Absolute loading added to the diagonal.
    pub loading: f64,
}

/// Running `Σ h hᴴ` over batches of channel vectors.
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    sum: CMatrix,
    count: usize,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { sum: CMatrix::zeros(dim, dim), count: 0 }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add(&mut self, channels: &[CVector]) -> Result<()> {
        let d = self.sum.nrows();
        if channels.iter().any(|h| h.len() != d) {
            return Err(Error::input("channel vectors differ in length"));
        }
        if channels.is_empty() {
            return Ok(());
        }
        let mut x = CMatrix::zeros(d, channels.len());
        for (j, h) in channels.iter().enumerate() {
            x.set_column(j, h);
        }
        self.sum += &x * x.adjoint();
        self.count += channels.len();
        Ok(())
    }

    pub fn merge(&mut self, other: &CovarianceAccumulator) {
        self.sum += &other.sum;
        self.count += other.count;
    }

    /// `C = (1/K) Σ h hᴴ + loading_rel·(tr/D)·I`.
    pub fn finish(&self, loading_rel: f64) -> Result<CovarianceModel> {
        if self.count == 0 {
            return Err(Error::input("covariance needs at least one sample"));
        }
        if loading_rel < 0.0 {
            return Err(Error::config("loading must be nonnegative"));
        }
        let d = self.sum.nrows();
        let mut c = &self.sum / Complex64::new(self.count as f64, 0.0);
        // enforce exact Hermitian symmetry
        for i in 0..d {
            c[(i, i)] = Complex64::new(c[(i, i)].re, 0.0);
            for j in 0..i {
                let v = (c[(i, j)] + c[(j, i)].conj()) * 0.5;
                c[(i, j)] = v;
                c[(j, i)] = v.conj();
            }
        }
        let trace: f64 = (0..d).map(|i| c[(i, i)].re).sum();
        let loading = loading_rel * trace / d as f64;
        for i in 0..d {
            c[(i, i)] += loading;
        }
        Ok(CovarianceModel { matrix: c, sample_count: self.count, loading })
    }
}

/// `C = (1/K) Σ h hᴴ + loading_rel·(tr/D)·I`.
pub fn fit_covariance(channels: &[CVector], loading_rel: f64) -> Result<CovarianceModel> {
    let Some(first) = channels.first() else {
        return Err(Error::input("covariance needs at least one sample"));
    };
    let mut acc = CovarianceAccumulator::new(first.len());
    acc.add(channels)?;
    acc.finish(loading_rel)
}

/// The noise-independent parts of an LMMSE design, `ΨC` and `ΨCΨᴴ`, so a
/// sweep over SNR only repeats the final solve.
#[derive(Debug, Clone)]
pub struct MmseDesign {
    psi_c: CMatrix,
    inner: CMatrix,
}

impl MmseDesign {
    pub fn new(psi: &CMatrix, cov: &CovarianceModel) -> Result<Self> {
        let d = cov.matrix.nrows();
        if psi.ncols() != d {
            return Err(Error::input(format!(
                "measurement width {} does not match covariance size {d}",
                psi.ncols()
            )));
        }
        let psi_c = psi * &cov.matrix;
        let inner = &psi_c * psi.adjoint();
        Ok(Self { psi_c, inner })
    }

    pub fn estimator(&self, noise_var: f64) -> Result<MmseEstimator> {
        if noise_var < 0.0 {
            return Err(Error::input("noise variance must be nonnegative"));
        }
        let mut inner = self.inner.clone();
        for i in 0..inner.nrows() {
            inner[(i, i)] += noise_var;
        }
        // gain = C Ψᴴ A⁻¹ = (A⁻¹ Ψ C)ᴴ for Hermitian A and C
        let (solved, used_pinv_fallback) = match linalg::hpd_solve(&inner, &self.psi_c) {
            Some(x) if x.iter().all(|v| v.re.is_finite() && v.im.is_finite()) => (x, false),
            _ => {
                let (pinv, _) = linalg::pseudo_inverse(&inner);
                (pinv * &self.psi_c, true)
            }
        };
        Ok(MmseEstimator { gain: solved.adjoint(), used_pinv_fallback })
    }
}

/// Linear MMSE estimator `ĥ = C Ψᴴ (Ψ C Ψᴴ + σ² I)⁻¹ y` for a fixed `Ψ`.
#[derive(Debug, Clone)]
pub struct MmseEstimator {
    gain: CMatrix,
    /// Whether the Cholesky solve failed and the pseudoinverse was used.
    pub used_pinv_fallback: bool,
}

impl MmseEstimator {
    pub fn new(psi: &CMatrix, cov: &CovarianceModel, noise_var: f64) -> Result<Self> {
        MmseDesign::new(psi, cov)?.estimator(noise_var)
    }

    pub fn estimate(&self, y: &CVector) -> CVector {
        &self.gain * y
    }

    pub fn gain(&self) -> &CMatrix {
        &self.gain
    }
}

pub fn mmse_estimate(
    y: &CVector,
    psi: &CMatrix,
    cov: &CovarianceModel,
    noise_var: f64,
) -> Result<CVector> {
    Ok(MmseEstimator::new(psi, cov, noise_var)?.estimate(y))
}

/// `‖ĥ − h‖²/‖h‖²`.
pub fn nmse(estimate: &CVector, truth: &CVector) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::input("estimate and truth differ in length"));
    }
    let energy = truth.norm_squared();
    if energy == 0.0 {
        return Err(Error::input("nmse undefined for a zero channel"));
    }
    Ok((estimate - truth).norm_squared() / energy)
}

/// Mean of per-sample NMSE ratios.
pub fn batch_nmse<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a CVector, &'a CVector)>,
{
    let mut acc = 0.0;
    let mut n = 0usize;
    for (e, t) in pairs {
        acc += nmse(e, t)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::input("empty batch"));
    }
    Ok(acc / n as f64)
}

/// `10·log10(value)`, floored at [`NMSE_DB_FLOOR`].
pub fn to_db(value: f64) -> f64 {
    if value <= 0.0 {
        return NMSE_DB_FLOOR;
    }
    (10.0 * value.log10()).max(NMSE_DB_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentifiabilityReport {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub tolerance: f64,
    /// `rank < cols`: the channel is not identifiable from these pilots.
    pub underdetermined: bool,
    /// 2-norm condition number of `ΨᴴΨ`, when `Ψ` has full column rank.
    pub gram_condition: Option<f64>,
}

pub fn identifiability_report(psi: &CMatrix) -> IdentifiabilityReport {
    let (rows, cols) = psi.shape();
    let s = linalg::singular_values(psi);
    let smax = s.first().copied().unwrap_or(0.0);
    let tolerance = linalg::rank_tolerance(smax, rows, cols);
    let rank = if smax == 0.0 {
        0
    } else {
        s.iter().filter(|&&x| x > tolerance).count()
    };
    let full = rank == cols && cols > 0;
    let gram_condition = full.then(|| {
        let smin = s[cols - 1];
        (smax / smin).powi(2)
    });
    IdentifiabilityReport {
        rows,
        cols,
        rank,
        tolerance,
        underdetermined: rank < cols,
        gram_condition,
    }
}
