//! Saleh–Valenzuela geometric channels for the BS–RIS and RIS–user links,
//! the cascaded channel and region-constrained dataset generation.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_6, PI};
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{CMatrix, CVector};
use crate::pilots::GroupingOperator;
use crate::rng::{self, SimRng};
use crate::{Error, Result};

/// Uniform planar array: `rows × cols` elements at a common spacing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub rows: usize,
    pub cols: usize,
    /// Element spacing in wavelengths (d/λ).
    pub spacing_over_wavelength: f64,
}

impl ArrayGeometry {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        Self::with_spacing(rows, cols, 0.5)
    }

    pub fn with_spacing(rows: usize, cols: usize, spacing_over_wavelength: f64) -> Result<Self> {
        let geom = Self {
            rows,
            cols,
            spacing_over_wavelength,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::config(format!(
                "array must have at least one row and column, got {}x{}",
                self.rows, self.cols
            )));
        }
        if !(self.spacing_over_wavelength > 0.0 && self.spacing_over_wavelength.is_finite()) {
            return Err(Error::config("element spacing must be positive"));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.rows * self.cols
    }

    /// Unit-norm UPA response.
    ///
    /// The result is `(1/√total) · r_cols ⊗ r_rows` where `r_cols[c] =
    /// exp(-j2π(d/λ)·c·sinψ·cosϑ)` and `r_rows[r] = exp(-j2π(d/λ)·r·cosψ)`,
    /// so element `(r, c)` of the grid sits at index `c·rows + r`.
    pub fn steering_vector(&self, azimuth: f64, elevation: f64) -> CVector {
        let k = 2.0 * PI * self.spacing_over_wavelength;
        let u = k * elevation.sin() * azimuth.cos();
        let v = k * elevation.cos();
        let scale = 1.0 / (self.total() as f64).sqrt();
        let mut a = CVector::zeros(self.total());
        for c in 0..self.cols {
            for r in 0..self.rows {
                let phase = -(u * c as f64 + v * r as f64);
                a[c * self.rows + r] = Complex64::from_polar(scale, phase);
            }
        }
        a
    }
}

/// Propagation direction in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub azimuth: f64,
    pub elevation: f64,
}

/// Open angular interval `(low, high)` in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleInterval {
    pub low: f64,
    pub high: f64,
}

impl AngleInterval {
    pub const FULL: AngleInterval = AngleInterval {
        low: -FRAC_PI_2,
        high: FRAC_PI_2,
    };

    pub fn new(low: f64, high: f64) -> Result<Self> {
        let iv = Self { low, high };
        iv.validate()?;
        Ok(iv)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.low < self.high) || !self.low.is_finite() || !self.high.is_finite() {
            return Err(Error::config(format!(
                "empty angle interval ({}, {})",
                self.low, self.high
            )));
        }
        if self.low < -FRAC_PI_2 - 1e-12 || self.high > FRAC_PI_2 + 1e-12 {
            return Err(Error::config(format!(
                "angle interval ({}, {}) leaves (-pi/2, pi/2)",
                self.low, self.high
            )));
        }
        Ok(())
    }

    pub fn contains(&self, x: f64) -> bool {
        x > self.low && x < self.high
    }
}

/// Elevation partition of (−π/2, π/2) into `R` ordered, disjoint regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPartition {
    intervals: Vec<AngleInterval>,
}

impl RegionPartition {
    /// Builds a partition from its interior boundaries, e.g. `[-π/6, π/6]`
    /// for three regions.
    pub fn from_boundaries(inner: &[f64]) -> Result<Self> {
        let mut edges = Vec::with_capacity(inner.len() + 2);
        edges.push(-FRAC_PI_2);
        edges.extend_from_slice(inner);
        edges.push(FRAC_PI_2);
        let intervals = edges
            .windows(2)
            .map(|w| AngleInterval::new(w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { intervals })
    }

    /// `(−π/2, −π/6)`, `(−π/6, π/6)`, `(π/6, π/2)`.
    pub fn three_sector() -> Self {
        Self::from_boundaries(&[-FRAC_PI_6, FRAC_PI_6]).expect("static partition")
    }

    /// `count` equal-width regions.
    pub fn uniform(count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::config("partition needs at least one region"));
        }
        let width = PI / count as f64;
        let inner: Vec<f64> = (1..count).map(|i| -FRAC_PI_2 + width * i as f64).collect();
        Self::from_boundaries(&inner)
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    /// Interval of a 1-based region label.
    pub fn interval(&self, region: usize) -> Result<AngleInterval> {
        region
            .checked_sub(1)
            .and_then(|i| self.intervals.get(i))
            .copied()
            .ok_or_else(|| Error::input(format!("region {region} outside 1..={}", self.len())))
    }

    pub fn intervals(&self) -> &[AngleInterval] {
        &self.intervals
    }

    /// 1-based region containing `elevation`; shared boundaries go to the
    /// lower-indexed region.
    pub fn region_of(&self, elevation: f64) -> Result<usize> {
        if !(elevation > -FRAC_PI_2 && elevation < FRAC_PI_2) {
            return Err(Error::input(format!(
                "elevation {elevation} outside (-pi/2, pi/2)"
            )));
        }
        for (i, iv) in self.intervals.iter().enumerate() {
            if elevation <= iv.high {
                return Ok(i + 1);
            }
        }
        Ok(self.intervals.len())
    }
}

/// Per-path gains and directions of one multipath channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub gains: Vec<Complex64>,
    pub directions: Vec<Direction>,
}

impl PathSet {
    pub fn count(&self) -> usize {
        self.gains.len()
    }
}

/// Draws `count` paths with CN(0,1) gains, azimuths uniform on (−π/2, π/2)
/// and elevations uniform on `elevation`.
pub fn draw_paths(count: usize, elevation: AngleInterval, rng: &mut SimRng) -> Result<PathSet> {
    if count == 0 {
        return Err(Error::config("path count must be positive"));
    }
    elevation.validate()?;
    let mut gains = Vec::with_capacity(count);
    let mut directions = Vec::with_capacity(count);
    for _ in 0..count {
        gains.push(rng::complex_gaussian(rng, 1.0));
        let azimuth = rng::open_uniform(rng, -FRAC_PI_2, FRAC_PI_2);
        let elevation = rng::open_uniform(rng, elevation.low, elevation.high);
        directions.push(Direction { azimuth, elevation });
    }
    Ok(PathSet { gains, directions })
}

/// Draws departure directions (full range) for the BS side of `G`.
pub fn draw_directions(count: usize, rng: &mut SimRng) -> Vec<Direction> {
    (0..count)
        .map(|_| Direction {
            azimuth: rng::open_uniform(rng, -FRAC_PI_2, FRAC_PI_2),
            elevation: rng::open_uniform(rng, -FRAC_PI_2, FRAC_PI_2),
        })
        .collect()
}

/// BS–RIS channel `G = √(MN/L) Σ α_l a(AoA_l) b(AoD_l)ᴴ`, `N × M`.
///
/// Gains and arrival angles come from `arrivals`; `departures` holds the
/// per-path BS-side angles.
pub fn gen_bs_ris(
    ris: &ArrayGeometry,
    bs: &ArrayGeometry,
    arrivals: &PathSet,
    departures: &[Direction],
) -> CMatrix {
    assert_eq!(arrivals.count(), departures.len(), "one departure per path");
    let n = ris.total();
    let m = bs.total();
    let l = arrivals.count() as f64;
    let scale = ((m * n) as f64 / l).sqrt();
    let mut g = CMatrix::zeros(n, m);
    for ((alpha, aoa), aod) in arrivals
        .gains
        .iter()
        .zip(&arrivals.directions)
        .zip(departures)
    {
        let a = ris.steering_vector(aoa.azimuth, aoa.elevation);
        let b = bs.steering_vector(aod.azimuth, aod.elevation);
        g += (a * b.adjoint()) * (*alpha * scale);
    }
    g
}

/// RIS–user channel `f = √(N/L) Σ α_l a(ϑ_l, ψ_l)`.
pub fn gen_ris_user(ris: &ArrayGeometry, paths: &PathSet) -> CVector {
    let n = ris.total();
    let scale = (n as f64 / paths.count() as f64).sqrt();
    let mut f = CVector::zeros(n);
    for (alpha, dir) in paths.gains.iter().zip(&paths.directions) {
        f += ris.steering_vector(dir.azimuth, dir.elevation) * (*alpha * scale);
    }
    f
}

/// Cascaded channel `H = diag(fᴴ)·G`, i.e. `H[n, m] = conj(f[n])·G[n, m]`.
pub fn cascade(g: &CMatrix, f: &CVector) -> CMatrix {
    assert_eq!(g.nrows(), f.len(), "G rows must match f length");
    let mut h = g.clone();
    for (n, mut row) in h.row_iter_mut().enumerate() {
        row *= f[n].conj();
    }
    h
}

/// Geometry and statistics of the channel ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub ris: ArrayGeometry,
    pub bs: ArrayGeometry,
    pub paths_bs_ris: usize,
    pub paths_ris_user: usize,
    pub partition: RegionPartition,
    pub users_per_region: usize,
    pub samples_per_user: usize,
    /// Draw one quasi-static `G` for the whole dataset instead of one per sample.
    pub freeze_bs_ris: bool,
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        self.ris.validate()?;
        self.bs.validate()?;
        if self.paths_bs_ris == 0 || self.paths_ris_user == 0 {
            return Err(Error::config("path counts must be positive"));
        }
        if self.partition.is_empty() {
            return Err(Error::config("region partition is empty"));
        }
        if self.users_per_region == 0 {
            return Err(Error::config("need at least one user per region"));
        }
        Ok(())
    }

    pub fn regions(&self) -> usize {
        self.partition.len()
    }
}

/// One draw of the BS–RIS, RIS–user, cascaded and (optionally) grouped channels.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    pub bs_ris: Arc<CMatrix>,
    pub ris_user: CVector,
    pub cascaded: CMatrix,
    pub grouped: Option<CMatrix>,
    /// 1-based region label.
    pub region: usize,
    /// 1-based user index within the region.
    pub user: usize,
    pub sample: usize,
    pub paths_g: PathSet,
    pub departures_g: Vec<Direction>,
    pub paths_f: PathSet,
}

impl ChannelRealization {
    /// The estimation target: `vec(H̄)` when grouped, else `vec(H)`.
    pub fn target(&self) -> CVector {
        let m = self.grouped.as_ref().unwrap_or(&self.cascaded);
        crate::linalg::vectorize(m)
    }
}

/// A quasi-static `G` and the paths that produced it.
#[derive(Debug, Clone)]
pub struct BsRisDraw {
    pub matrix: Arc<CMatrix>,
    pub arrivals: PathSet,
    pub departures: Vec<Direction>,
}

fn draw_bs_ris(cfg: &ChannelConfig, rng: &mut SimRng) -> Result<BsRisDraw> {
    let arrivals = draw_paths(cfg.paths_bs_ris, AngleInterval::FULL, rng)?;
    let departures = draw_directions(cfg.paths_bs_ris, rng);
    let matrix = Arc::new(gen_bs_ris(&cfg.ris, &cfg.bs, &arrivals, &departures));
    Ok(BsRisDraw {
        matrix,
        arrivals,
        departures,
    })
}

/// The dataset-wide `G` used when `freeze_bs_ris` is set.
pub fn frozen_bs_ris(cfg: &ChannelConfig, seed: u64) -> Result<BsRisDraw> {
    draw_bs_ris(cfg, &mut rng::stream(seed, &[rng::tag::BS_RIS]))
}

/// Realizations of one (region, user) client, deterministic in `seed`.
pub fn generate_user(
    cfg: &ChannelConfig,
    grouping: Option<&GroupingOperator>,
    frozen: Option<&BsRisDraw>,
    seed: u64,
    region: usize,
    user: usize,
    samples: usize,
) -> Result<Vec<ChannelRealization>> {
    generate_user_range(cfg, grouping, frozen, seed, region, user, 0..samples)
}

/// Samples `range` of one client; sample `s` is identical to the `s`-th
/// realization of [`generate_user`].
pub fn generate_user_range(
    cfg: &ChannelConfig,
    grouping: Option<&GroupingOperator>,
    frozen: Option<&BsRisDraw>,
    seed: u64,
    region: usize,
    user: usize,
    range: std::ops::Range<usize>,
) -> Result<Vec<ChannelRealization>> {
    let interval = cfg.partition.interval(region)?;
    range
        .map(|s| {
            let path = [region as u64, user as u64, s as u64];
            let g = match frozen {
                Some(d) => d.clone(),
                None => draw_bs_ris(
                    cfg,
                    &mut rng::stream(seed, &[rng::tag::BS_RIS, path[0], path[1], path[2]]),
                )?,
            };
            let mut frng = rng::stream(seed, &[rng::tag::RIS_USER, path[0], path[1], path[2]]);
            let paths_f = draw_paths(cfg.paths_ris_user, interval, &mut frng)?;
            let f = gen_ris_user(&cfg.ris, &paths_f);
            let cascaded = cascade(&g.matrix, &f);
            let grouped = grouping.map(|s| s.apply(&cascaded));
            Ok(ChannelRealization {
                bs_ris: g.matrix,
                ris_user: f,
                cascaded,
                grouped,
                region,
                user,
                sample: s,
                paths_g: g.arrivals,
                departures_g: g.departures,
                paths_f,
            })
        })
        .collect()
}

/// Every (region, user) client's realizations, ordered by region then user.
pub fn generate_dataset(
    cfg: &ChannelConfig,
    grouping: Option<&GroupingOperator>,
    seed: u64,
) -> Result<Vec<ChannelRealization>> {
    cfg.validate()?;
    let frozen = if cfg.freeze_bs_ris {
        Some(frozen_bs_ris(cfg, seed)?)
    } else {
        None
    };
    let clients: Vec<(usize, usize)> = (1..=cfg.regions())
        .flat_map(|r| (1..=cfg.users_per_region).map(move |k| (r, k)))
        .collect();
    let parts = clients
        .par_iter()
        .map(|&(r, k)| {
            generate_user(cfg, grouping, frozen.as_ref(), seed, r, k, cfg.samples_per_user)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}
