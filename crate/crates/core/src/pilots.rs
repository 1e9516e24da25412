//! Pilot phase patterns, RIS grouping, measurement matrices and noisy
//! stacked observations.
//!
//! Slot `q` measures `θ_qᵀ H w_q + n_q`, where row `q` of the phase matrix
//! holds the combining vector `θ_q = conj(φ_q)` of the RIS configuration
//! `φ_q`. With one precoder for every slot this is `Ψ = wᵀ ⊗ Θ` acting on
//! `vec(H)`; per-slot precoders replace each row by `w_qᵀ ⊗ θ_qᵀ`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{ArrayGeometry, ChannelRealization};
use crate::linalg::{self, CMatrix, CVector};
use crate::rng::{self, SimRng};
use crate::{Error, Result};

/// Selection operator `S ∈ {0,1}^{N'×N}` tying `g` RIS elements to one
/// control phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingOperator {
    group_size: usize,
    /// Group index of each physical element.
    assignment: Vec<usize>,
    groups: usize,
}

impl GroupingOperator {
    pub fn identity(n: usize) -> Self {
        Self {
            group_size: 1,
            assignment: (0..n).collect(),
            groups: n,
        }
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    /// Number of control units `N'`.
    pub fn groups(&self) -> usize {
        self.groups
    }

    /// Number of physical elements `N`.
    pub fn elements(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.groups, self.elements());
        for (n, &g) in self.assignment.iter().enumerate() {
            s[(g, n)] = 1.0;
        }
        s
    }

    /// `S·H` for an `N × M` matrix.
    pub fn apply(&self, h: &CMatrix) -> CMatrix {
        assert_eq!(h.nrows(), self.elements(), "grouping expects N rows");
        let mut out = CMatrix::zeros(self.groups, h.ncols());
        for (n, &g) in self.assignment.iter().enumerate() {
            for m in 0..h.ncols() {
                out[(g, m)] += h[(n, m)];
            }
        }
        out
    }

    /// Physical phase vector `Sᵀ φ̄` of a grouped configuration.
    pub fn expand(&self, grouped: &CVector) -> CVector {
        CVector::from_iterator(self.elements(), self.assignment.iter().map(|&g| grouped[g]))
    }
}

/// Splits the RIS grid into contiguous rectangular blocks of `group_size`
/// elements. The block shape is the most square factorization that tiles
/// the grid (2×2 for `g = 4`).
pub fn make_grouping(ris: &ArrayGeometry, group_size: usize) -> Result<GroupingOperator> {
    let n = ris.total();
    if group_size == 0 || n % group_size != 0 {
        return Err(Error::config(format!(
            "group size {group_size} does not divide N = {n}"
        )));
    }
    let shape = (1..=group_size)
        .filter(|br| group_size % br == 0)
        .map(|br| (br, group_size / br))
        .filter(|&(br, bc)| ris.rows % br == 0 && ris.cols % bc == 0)
        .min_by_key(|&(br, bc)| (br.abs_diff(bc), usize::MAX - br));
    let (br, bc) = shape.ok_or_else(|| {
        Error::config(format!(
            "group size {group_size} cannot tile a {}x{} RIS with rectangles",
            ris.rows, ris.cols
        ))
    })?;
    let blocks_per_col = ris.rows / br;
    let mut assignment = vec![0; n];
    for c in 0..ris.cols {
        for r in 0..ris.rows {
            assignment[c * ris.rows + r] = (c / bc) * blocks_per_col + r / br;
        }
    }
    Ok(GroupingOperator {
        group_size,
        assignment,
        groups: n / group_size,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PilotAlphabet {
    /// Entries in {−1, +1}.
    Bpsk,
    /// Entries `e^{jθ}` with θ uniform.
    UnitCircle,
}

/// How the BS precoder behaves across the pilot slots of one observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrecoderMode {
    /// One unit-norm `w` for all slots.
    Fixed,
    /// An independent unit-norm `w_q` in every slot.
    PerSlot,
}

/// Q × `width` matrix of i.i.d. unit-modulus entries.
pub fn gen_pilots(q: usize, width: usize, alphabet: PilotAlphabet, rng: &mut SimRng) -> CMatrix {
    CMatrix::from_fn(q, width, |_, _| match alphabet {
        PilotAlphabet::Bpsk => {
            if rng.random::<bool>() {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::new(-1.0, 0.0)
            }
        }
        PilotAlphabet::UnitCircle => {
            Complex64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU))
        }
    })
}

/// Unit-norm vector uniformly distributed on the complex sphere.
pub fn gen_precoder(m: usize, rng: &mut SimRng) -> CVector {
    loop {
        let v = CVector::from_fn(m, |_, _| rng::complex_gaussian(rng, 1.0));
        let norm = v.norm();
        if norm > 0.0 {
            return v / Complex64::new(norm, 0.0);
        }
    }
}

/// Q × M matrix whose row `q` is `w_qᵀ`.
pub fn gen_precoders(q: usize, m: usize, mode: PrecoderMode, rng: &mut SimRng) -> CMatrix {
    let mut out = CMatrix::zeros(q, m);
    match mode {
        PrecoderMode::Fixed => {
            let w = gen_precoder(m, rng);
            for i in 0..q {
                out.row_mut(i).copy_from(&w.transpose());
            }
        }
        PrecoderMode::PerSlot => {
            for i in 0..q {
                let w = gen_precoder(m, rng);
                out.row_mut(i).copy_from(&w.transpose());
            }
        }
    }
    out
}

/// Pilot design shared by every estimator that consumes an observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotConfig {
    /// `Q × width` unit-modulus combining rows (`width = N` or `N'`).
    pub phases: CMatrix,
    /// `Q × M`, row `q` is the precoder of slot `q`.
    pub precoders: CMatrix,
    pub q_shape: (usize, usize),
    pub grouping: Option<GroupingOperator>,
    pub normalize_by_sqrt_q: bool,
}

impl PilotConfig {
    pub fn validate(&self) -> Result<()> {
        let q = self.phases.nrows();
        if q == 0 {
            return Err(Error::config("pilot budget must be positive"));
        }
        if self.precoders.nrows() != q {
            return Err(Error::config("one precoder row per pilot slot"));
        }
        if self.q_shape.0 * self.q_shape.1 != q {
            return Err(Error::config(format!(
                "q shape {}x{} does not factor Q = {q}",
                self.q_shape.0, self.q_shape.1
            )));
        }
        if let Some(s) = &self.grouping {
            if s.groups() != self.phases.ncols() {
                return Err(Error::config("grouped pilots must have N' columns"));
            }
        }
        for x in self.phases.iter() {
            if (x.norm() - 1.0).abs() > 1e-12 {
                return Err(Error::config("pilot entries must be unit modulus"));
            }
        }
        for row in self.precoders.row_iter() {
            if (row.norm() - 1.0).abs() > 1e-12 {
                return Err(Error::config("precoders must be unit norm"));
            }
        }
        Ok(())
    }

    pub fn q(&self) -> usize {
        self.phases.nrows()
    }

    /// Columns of the unknown channel matrix (`N` or `N'`).
    pub fn width(&self) -> usize {
        self.phases.ncols()
    }

    pub fn antennas(&self) -> usize {
        self.precoders.ncols()
    }

    /// Length of the unknown channel vector.
    pub fn channel_dim(&self) -> usize {
        self.width() * self.antennas()
    }

    /// Physical RIS phase vector of slot `q`; grouped configurations are
    /// expanded through `Sᵀ`.
    pub fn ris_phases(&self, q: usize) -> CVector {
        let grouped = self.phases.row(q).transpose().map(|x| x.conj());
        match &self.grouping {
            Some(s) => s.expand(&grouped),
            None => grouped,
        }
    }
}

/// Draws a pilot configuration.
#[allow(clippy::too_many_arguments)]
pub fn make_pilot_config(
    q_shape: (usize, usize),
    width: usize,
    antennas: usize,
    alphabet: PilotAlphabet,
    mode: PrecoderMode,
    grouping: Option<GroupingOperator>,
    normalize_by_sqrt_q: bool,
    phase_rng: &mut SimRng,
    precoder_rng: &mut SimRng,
) -> Result<PilotConfig> {
    let q = q_shape.0 * q_shape.1;
    let cfg = PilotConfig {
        phases: gen_pilots(q, width, alphabet, phase_rng),
        precoders: gen_precoders(q, antennas, mode, precoder_rng),
        q_shape,
        grouping,
        normalize_by_sqrt_q,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Sylvester-Hadamard entry `(-1)^{popcount(i & j)}`.
fn hadamard(i: usize, j: usize) -> f64 {
    if (i & j).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Long-pilot design with `ΨᴴΨ = width·I`, `Q = width·M`.
///
/// Slot `(i, j)` pairs column `i` of a random unitary `M × M` matrix with
/// row `j` of a `width × width` Hadamard matrix whose columns carry random
/// signs. Phases stay in {±1}. `width` must be a power of two.
pub fn orthogonal_pilot_config(
    width: usize,
    antennas: usize,
    grouping: Option<GroupingOperator>,
    rng: &mut SimRng,
) -> Result<PilotConfig> {
    if !width.is_power_of_two() {
        return Err(Error::config(format!("orthogonal pilots need a power-of-two width, got {width}")));
    }
    let signs: Vec<f64> = (0..width).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let gaussian = CMatrix::from_fn(antennas, antennas, |_, _| rng::complex_gaussian(rng, 1.0));
    let unitary = gaussian.qr().q();
    let q = width * antennas;
    let mut phases = CMatrix::zeros(q, width);
    let mut precoders = CMatrix::zeros(q, antennas);
    for i in 0..antennas {
        for j in 0..width {
            let slot = i * width + j;
            for n in 0..width {
                phases[(slot, n)] = Complex64::new(hadamard(j, n) * signs[n], 0.0);
            }
            for m in 0..antennas {
                precoders[(slot, m)] = unitary[(m, i)];
            }
        }
    }
    // unit norm up to rounding in the QR
    for mut row in precoders.row_iter_mut() {
        let norm = row.norm();
        row /= Complex64::new(norm, 0.0);
    }
    let cfg = PilotConfig { phases, precoders, q_shape: (q, 1), grouping, normalize_by_sqrt_q: false };
    cfg.validate()?;
    Ok(cfg)
}

/// `Ψ`: Q × (width·M), column `m·width + n` of row `q` is `w_q[m]·θ_q[n]`.
/// With a fixed precoder this is exactly `wᵀ ⊗ Θ`.
pub fn measurement_matrix(cfg: &PilotConfig) -> CMatrix {
    let q = cfg.q();
    let width = cfg.width();
    let m = cfg.antennas();
    let mut psi = CMatrix::zeros(q, width * m);
    for j in 0..m {
        for n in 0..width {
            let col = j * width + n;
            for i in 0..q {
                psi[(i, col)] = cfg.precoders[(i, j)] * cfg.phases[(i, n)];
            }
        }
    }
    psi
}

/// A stacked pilot observation and its estimator input encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Unscaled `yᵖ`.
    pub raw: CVector,
    /// `Q1 × Q2 × 2`, row-major, channel 0 real and channel 1 imaginary.
    pub tensor: Vec<f64>,
    pub q_shape: (usize, usize),
    pub snr_linear: f64,
    /// (region, user, sample) of the realization that produced it.
    pub source: (usize, usize, usize),
}

/// Noise variance for a linear SNR (`SNR = 1/σ²`); infinite SNR is noiseless.
pub fn noise_variance(snr_linear: f64) -> f64 {
    if snr_linear.is_infinite() {
        0.0
    } else {
        1.0 / snr_linear
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// `Ψ h + n` with `n ~ CN(0, σ² I)`.
pub fn observe_vector(psi: &CMatrix, h: &CVector, noise_var: f64, rng: &mut SimRng) -> CVector {
    let mut y = psi * h;
    if noise_var > 0.0 {
        for v in y.iter_mut() {
            *v += rng::complex_gaussian(rng, noise_var);
        }
    }
    y
}

/// Observes a realization through `cfg`. The tensor is built from
/// `yᵖ/√Q` when `normalize_by_sqrt_q` is set; `raw` is never scaled.
pub fn observe(
    realization: &ChannelRealization,
    cfg: &PilotConfig,
    snr_linear: f64,
    rng: &mut SimRng,
) -> Result<Observation> {
    if !(snr_linear > 0.0) {
        return Err(Error::input("snr must be positive"));
    }
    let h = match (&cfg.grouping, &realization.grouped) {
        (Some(_), Some(hg)) => linalg::vectorize(hg),
        (None, None) => linalg::vectorize(&realization.cascaded),
        _ => {
            return Err(Error::input(
                "grouping in pilot config does not match the realization",
            ))
        }
    };
    if h.len() != cfg.channel_dim() {
        return Err(Error::input(format!(
            "channel dimension {} does not match measurement width {}",
            h.len(),
            cfg.channel_dim()
        )));
    }
    let psi = measurement_matrix(cfg);
    let raw = observe_vector(&psi, &h, noise_variance(snr_linear), rng);
    let tensor = encode_observation(&raw, cfg)?;
    Ok(Observation {
        raw,
        tensor,
        q_shape: cfg.q_shape,
        snr_linear,
        source: (realization.region, realization.user, realization.sample),
    })
}

/// Tensor encoding of `raw` under the config's normalization.
pub fn encode_observation(raw: &CVector, cfg: &PilotConfig) -> Result<Vec<f64>> {
    if cfg.normalize_by_sqrt_q {
        let s = 1.0 / (cfg.q() as f64).sqrt();
        encode_tensor(&(raw * Complex64::new(s, 0.0)), cfg.q_shape)
    } else {
        encode_tensor(raw, cfg.q_shape)
    }
}

/// Row-major reshape to `Q1 × Q2 × 2` (channel 0 real, channel 1 imaginary).
pub fn encode_tensor(raw: &CVector, q_shape: (usize, usize)) -> Result<Vec<f64>> {
    if q_shape.0 * q_shape.1 != raw.len() {
        return Err(Error::input(format!(
            "cannot reshape {} pilots to {}x{}",
            raw.len(),
            q_shape.0,
            q_shape.1
        )));
    }
    let mut out = Vec::with_capacity(raw.len() * 2);
    for v in raw.iter() {
        out.push(v.re);
        out.push(v.im);
    }
    Ok(out)
}

/// Inverse of [`encode_tensor`].
pub fn decode_tensor(tensor: &[f64], q_shape: (usize, usize)) -> Result<CVector> {
    let q = q_shape.0 * q_shape.1;
    if tensor.len() != 2 * q {
        return Err(Error::input("tensor length does not match q shape"));
    }
    Ok(CVector::from_iterator(
        q,
        tensor.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::numerical_rank;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn grouping_table_one_shape() {
        let ris = ArrayGeometry::new(8, 8).unwrap();
        let s = make_grouping(&ris, 4).unwrap();
        let m = s.matrix();
        assert_eq!(m.shape(), (16, 64));
        for i in 0..16 {
            assert_eq!(m.row(i).sum(), 4.0);
        }
        for j in 0..64 {
            assert_eq!(m.column(j).sum(), 1.0);
        }
        // element (r, c) = (1, 1) joins the block of (0, 0)
        assert_eq!(s.assignment()[8 + 1], s.assignment()[0]);
        // (2, 0) starts a new block
        assert_ne!(s.assignment()[2], s.assignment()[0]);
    }

    #[test]
    fn grouping_edge_cases() {
        let ris = ArrayGeometry::new(8, 8).unwrap();
        let id = make_grouping(&ris, 1).unwrap();
        assert_eq!(id.matrix(), DMatrix::identity(64, 64));
        let tiny = make_grouping(&ArrayGeometry::new(2, 2).unwrap(), 4).unwrap();
        assert_eq!(tiny.matrix(), DMatrix::from_element(1, 4, 1.0));
        assert!(matches!(make_grouping(&ris, 3), Err(Error::Config(_))));
        assert!(make_grouping(&ArrayGeometry::new(3, 5).unwrap(), 5).is_ok());
        assert!(make_grouping(&ArrayGeometry::new(6, 1).unwrap(), 4).is_err());
    }

    #[test]
    fn pilot_alphabets() {
        let mut rng = rng::stream(1, &[]);
        let p = gen_pilots(32, 16, PilotAlphabet::Bpsk, &mut rng);
        assert_eq!(p.shape(), (32, 16));
        assert!(p.iter().all(|x| *x == c(1.0, 0.0) || *x == c(-1.0, 0.0)));
        let one = gen_pilots(1, 1, PilotAlphabet::UnitCircle, &mut rng);
        assert!((one[(0, 0)].norm() - 1.0).abs() < 1e-12);
        let u = gen_pilots(64, 64, PilotAlphabet::UnitCircle, &mut rng);
        assert!(u.iter().all(|x| (x.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn measurement_matrix_shapes_and_identity_factor() {
        let mut rng = rng::stream(2, &[]);
        let phases = gen_pilots(32, 64, PilotAlphabet::Bpsk, &mut rng);
        let precoders = gen_precoders(32, 16, PrecoderMode::Fixed, &mut rng);
        let cfg = PilotConfig {
            phases: phases.clone(),
            precoders,
            q_shape: (8, 4),
            grouping: None,
            normalize_by_sqrt_q: true,
        };
        assert_eq!(measurement_matrix(&cfg).shape(), (32, 1024));

        let single = PilotConfig {
            phases: phases.clone(),
            precoders: CMatrix::from_element(32, 1, c(1.0, 0.0)),
            q_shape: (8, 4),
            grouping: None,
            normalize_by_sqrt_q: false,
        };
        assert_eq!(measurement_matrix(&single), phases);
    }

    #[test]
    fn measurement_matrix_hand_kronecker() {
        let cfg = PilotConfig {
            phases: CMatrix::from_row_slice(1, 2, &[c(1.0, 0.0), c(-1.0, 0.0)]),
            precoders: CMatrix::from_row_slice(1, 2, &[c(1.0, 0.0), c(0.0, 0.0)]),
            q_shape: (1, 1),
            grouping: None,
            normalize_by_sqrt_q: false,
        };
        let psi = measurement_matrix(&cfg);
        let expect = [c(1.0, 0.0), c(-1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)];
        assert_eq!(psi.as_slice(), &expect);
    }

    #[test]
    fn fixed_precoder_matches_kronecker_and_is_rank_limited() {
        let mut rng = rng::stream(3, &[]);
        let theta = gen_pilots(40, 16, PilotAlphabet::Bpsk, &mut rng);
        let precoders = gen_precoders(40, 16, PrecoderMode::Fixed, &mut rng);
        let w = CMatrix::from_row_slice(1, 16, precoders.row(0).clone_owned().as_slice());
        let cfg = PilotConfig {
            phases: theta.clone(),
            precoders,
            q_shape: (8, 5),
            grouping: None,
            normalize_by_sqrt_q: false,
        };
        let psi = measurement_matrix(&cfg);
        let k = linalg::kron(&w, &theta);
        assert!((&psi - k).norm() < 1e-14);
        // rank(wᵀ ⊗ Θ) = rank(Θ) ≤ width
        assert_eq!(numerical_rank(&psi), 16);
    }

    #[test]
    fn encode_hand_case() {
        let raw = CVector::from_vec(vec![c(1.0, 1.0), c(2.0, 0.0), c(0.0, 3.0), c(-1.0, 0.0)]);
        let t = encode_tensor(&raw, (2, 2)).unwrap();
        let ch0: Vec<f64> = t.iter().step_by(2).copied().collect();
        let ch1: Vec<f64> = t.iter().skip(1).step_by(2).copied().collect();
        assert_eq!(ch0, vec![1.0, 2.0, 0.0, -1.0]);
        assert_eq!(ch1, vec![1.0, 0.0, 3.0, 0.0]);
        assert!(matches!(encode_tensor(&raw, (3, 1)), Err(Error::Input(_))));
        let big = CVector::from_element(32, c(0.5, 0.0));
        let t = encode_tensor(&big, (8, 4)).unwrap();
        assert_eq!(t.len(), 8 * 4 * 2);
        assert!(t.iter().skip(1).step_by(2).all(|&x| x == 0.0));
    }

    #[test]
    fn snr_conversion() {
        assert!((noise_variance(db_to_linear(10.0)) - 0.1).abs() < 1e-15);
        assert_eq!(noise_variance(f64::INFINITY), 0.0);
    }

    #[test]
    fn orthogonal_design_has_scaled_identity_gram() {
        let mut rng = rng::stream(8, &[]);
        let cfg = orthogonal_pilot_config(8, 4, None, &mut rng).unwrap();
        assert_eq!(cfg.q(), 32);
        let psi = measurement_matrix(&cfg);
        let gram = psi.adjoint() * &psi;
        let err = (gram - CMatrix::identity(32, 32) * Complex64::new(8.0, 0.0)).norm();
        assert!(err < 1e-10, "{err}");
        assert!(orthogonal_pilot_config(6, 4, None, &mut rng).is_err());
    }
}
