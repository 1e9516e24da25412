//! Test-time NMSE of the trained estimator and the LS/MMSE baselines.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::data::{generate_labels, Covariances, TestSet};
use super::report::{RegionRow, ResultRow};
use super::{ls_for, Scenario};
use crate::estimators::{nmse, to_db, LsEstimator, MmseDesign, MmseEstimator};
use crate::linalg::{CMatrix, CVector};
use crate::nn::{unpack, Mode, ModelParams, Probe};
use crate::pilots::{db_to_linear, encode_observation, noise_variance};
use crate::rng::{self, tag};
use crate::{Error, Result};

const BATCH: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Dml,
    Ls,
    Mmse,
    /// The training label itself used as the estimate.
    Label,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Dml => "dml",
            Method::Ls => "ls",
            Method::Mmse => "mmse",
            Method::Label => "label",
        })
    }
}

/// A method at a pilot budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MethodKey {
    pub method: Method,
    pub q: usize,
}

impl MethodKey {
    pub fn new(method: Method, q: usize) -> Self {
        Self { method, q }
    }
}

/// Which estimators to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MethodSet {
    pub dml: bool,
    /// LS and MMSE on the short pilots fed to the network.
    pub short_baselines: bool,
    /// LS and MMSE on the long baseline pilots.
    pub long_baselines: bool,
    pub label: bool,
}

impl MethodSet {
    pub fn all() -> Self {
        Self { dml: true, short_baselines: true, long_baselines: true, label: false }
    }

    pub fn baselines() -> Self {
        Self { dml: false, ..Self::all() }
    }

    pub fn dml_only() -> Self {
        Self { dml: true, short_baselines: false, long_baselines: false, label: false }
    }
}

/// Per-sample NMSE of one method on one client at one SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalEntry {
    pub key: MethodKey,
    pub snr_db: f64,
    pub region: usize,
    pub user: usize,
    pub nmse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub grouped: bool,
    pub seed: u64,
    pub snr_db: Vec<f64>,
    pub entries: Vec<EvalEntry>,
}

fn mean(xs: impl Iterator<Item = f64>) -> (f64, usize) {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (if n == 0 { f64::NAN } else { s / n as f64 }, n)
}

impl EvalReport {
    pub fn keys(&self) -> Vec<MethodKey> {
        let mut k: Vec<MethodKey> = self.entries.iter().map(|e| e.key).collect();
        k.sort();
        k.dedup();
        k
    }

    /// Linear mean NMSE, optionally restricted to one region.
    pub fn mean_nmse(&self, key: MethodKey, snr_db: f64, region: Option<usize>) -> f64 {
        mean(
            self.entries
                .iter()
                .filter(|e| e.key == key && e.snr_db == snr_db && region.is_none_or(|r| e.region == r))
                .flat_map(|e| e.nmse.iter().copied()),
        )
        .0
    }

    pub fn mean_db(&self, key: MethodKey, snr_db: f64, region: Option<usize>) -> f64 {
        to_db(self.mean_nmse(key, snr_db, region))
    }

    /// Median over the SNR grid of the mean-NMSE curve in dB.
    pub fn median_db(&self, key: MethodKey, region: Option<usize>) -> f64 {
        let mut v: Vec<f64> = self.snr_db.iter().map(|&s| self.mean_db(key, s, region)).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            return f64::NAN;
        }
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }

    /// One row per (method, Q, SNR), averaged over every test sample.
    pub fn rows(&self) -> Vec<ResultRow> {
        let mut out = Vec::new();
        for key in self.keys() {
            for &s in &self.snr_db {
                let (m, n) = mean(
                    self.entries.iter().filter(|e| e.key == key && e.snr_db == s).flat_map(|e| e.nmse.iter().copied()),
                );
                if n > 0 {
                    out.push(ResultRow::new(key, self.grouped, s, to_db(m), n, self.seed));
                }
            }
        }
        out
    }

    pub fn region_rows(&self) -> Vec<RegionRow> {
        let mut groups: BTreeMap<(MethodKey, usize, usize), Vec<f64>> = BTreeMap::new();
        for e in &self.entries {
            let si = self.snr_db.iter().position(|&s| s == e.snr_db).unwrap_or(0);
            groups.entry((e.key, e.region, si)).or_default().extend(&e.nmse);
        }
        groups
            .into_iter()
            .map(|((key, region, si), v)| {
                let (m, n) = mean(v.into_iter());
                RegionRow::new(key, self.grouped, region, self.snr_db[si], to_db(m), n, self.seed)
            })
            .collect()
    }

    /// One row per test sample (`n = 1`).
    pub fn sample_rows(&self) -> Vec<ResultRow> {
        let mut out = Vec::new();
        for e in &self.entries {
            for &v in &e.nmse {
                out.push(ResultRow::new(e.key, self.grouped, e.snr_db, to_db(v), 1, self.seed));
            }
        }
        out
    }
}

fn column_nmse(est: &CMatrix, truth: &[CVector]) -> Result<Vec<f64>> {
    truth.iter().enumerate().map(|(i, h)| nmse(&est.column(i).clone_owned(), h)).collect()
}

fn estimates_nmse(est: &[CVector], truth: &[CVector]) -> Result<Vec<f64>> {
    est.iter().zip(truth).map(|(e, h)| nmse(e, h)).collect()
}

/// `Ψ h + n` for every test channel, one noise stream per sample.
fn observe_all(psi: &CMatrix, truth: &[CVector], nv: f64, seed: u64, path: [u64; 3], branch: u64) -> CMatrix {
    let mut y = psi * CMatrix::from_columns(truth);
    if nv > 0.0 {
        for (s, mut col) in y.column_iter_mut().enumerate() {
            let mut r = rng::stream(seed, &[tag::TEST_NOISE, path[0], path[1], path[2], s as u64, branch]);
            for v in col.iter_mut() {
                *v += rng::complex_gaussian(&mut r, nv);
            }
        }
    }
    y
}

fn dml_nmse(model: &ModelParams, scn: &Scenario, ci: usize, y: &CMatrix, truth: &[CVector]) -> Result<Vec<f64>> {
    let pilots = &scn.clients[ci].short.pilots;
    let mut out = Vec::with_capacity(truth.len());
    for start in (0..truth.len()).step_by(BATCH) {
        let end = (start + BATCH).min(truth.len());
        let mut input = Vec::new();
        for s in start..end {
            input.extend(encode_observation(&y.column(s).clone_owned(), pilots)?);
        }
        let x = model.input_batch(input)?;
        let (est, _) = model.estimator_forward(&x, scn.config.eval.gating, Mode::Eval, &mut Probe::default())?;
        let ol = model.arch.output_len();
        for (j, h) in truth[start..end].iter().enumerate() {
            out.push(nmse(&unpack(&est[j * ol..(j + 1) * ol]), h)?);
        }
    }
    Ok(out)
}

type MmseKey = (*const CMatrix, Option<usize>);

/// MMSE precomputations shared by every client with the same design and
/// covariance.
struct MmseCache<'a> {
    covs: &'a Covariances,
    designs: HashMap<MmseKey, Arc<MmseDesign>>,
    gains: HashMap<(MmseKey, u64), Arc<MmseEstimator>>,
}

impl<'a> MmseCache<'a> {
    fn new(covs: &'a Covariances) -> Self {
        Self { covs, designs: HashMap::new(), gains: HashMap::new() }
    }

    fn get(&mut self, psi: &Arc<CMatrix>, region: usize, scn: &Scenario, nv: f64) -> Result<Arc<MmseEstimator>> {
        let (cov, which) = self.covs.for_region(region, scn.config.eval.covariance);
        let key = (Arc::as_ptr(psi), which);
        if let Some(g) = self.gains.get(&(key, nv.to_bits())) {
            return Ok(g.clone());
        }
        let design = match self.designs.get(&key) {
            Some(d) => d.clone(),
            None => {
                let d = Arc::new(MmseDesign::new(psi, cov)?);
                self.designs.insert(key, d.clone());
                d
            }
        };
        let g = Arc::new(design.estimator(nv)?);
        self.gains.insert((key, nv.to_bits()), g.clone());
        Ok(g)
    }
}

/// Runs the selected estimators over the test set at every SNR of the
/// evaluation grid. `model` is required for DML and `covs` for MMSE.
pub fn run_eval(
    scn: &Scenario,
    model: Option<&ModelParams>,
    test: &TestSet,
    covs: Option<&Covariances>,
    methods: MethodSet,
) -> Result<EvalReport> {
    let cfg = &scn.config;
    if methods.dml && model.is_none() {
        return Err(Error::config("evaluating the neural estimator requires a model"));
    }
    if let Some(m) = model {
        if m.arch != scn.arch() {
            return Err(Error::config("model architecture does not match the configuration"));
        }
    }
    let with_mmse = methods.short_baselines || methods.long_baselines;
    if with_mmse && covs.is_none() {
        return Err(Error::config("MMSE baselines require fitted covariances"));
    }
    let idx: Vec<usize> = test.clients.iter().map(|c| c.client).collect();
    let short_ls: Vec<Arc<LsEstimator>> = if methods.short_baselines {
        ls_for(idx.iter().map(|&i| &scn.clients[i].short).collect())?
    } else {
        Vec::new()
    };
    let long_ls: Vec<Arc<LsEstimator>> = if methods.long_baselines {
        ls_for(idx.iter().map(|&i| &scn.clients[i].baseline).collect())?
    } else {
        Vec::new()
    };
    let label_ls: Vec<Arc<LsEstimator>> = if methods.label {
        ls_for(idx.iter().map(|&i| &scn.clients[i].label).collect())?
    } else {
        Vec::new()
    };
    let mut mmse = covs.map(MmseCache::new);
    let seed = rng::derive_seed(cfg.seed, &[tag::TEST]);
    let q = cfg.q();
    let qb = cfg.baseline_q();
    let mut entries = Vec::new();
    for (j, tc) in test.clients.iter().enumerate() {
        if tc.truth.is_empty() {
            continue;
        }
        let c = &scn.clients[tc.client];
        let labels = if methods.label {
            let l = generate_labels(&tc.truth, &c.label, &label_ls[j], cfg.pilots.label_snr_db, seed, c.region, c.user, 0)?;
            Some(estimates_nmse(&l, &tc.truth)?)
        } else {
            None
        };
        let mut push = |key: MethodKey, snr_db: f64, nmse: Vec<f64>| {
            entries.push(EvalEntry { key, snr_db, region: c.region, user: c.user, nmse });
        };
        for (si, &snr_db) in cfg.eval.snr_db.iter().enumerate() {
            let nv = noise_variance(db_to_linear(snr_db));
            let path = [si as u64, c.region as u64, c.user as u64];
            if methods.dml || methods.short_baselines {
                let y = observe_all(&c.short.psi, &tc.truth, nv, seed, path, 0);
                if let Some(m) = model.filter(|_| methods.dml) {
                    push(MethodKey::new(Method::Dml, q), snr_db, dml_nmse(m, scn, tc.client, &y, &tc.truth)?);
                }
                if methods.short_baselines {
                    let est = short_ls[j].pseudo_inverse() * &y;
                    push(MethodKey::new(Method::Ls, q), snr_db, column_nmse(&est, &tc.truth)?);
                    let g = mmse.as_mut().expect("checked above").get(&c.short.psi, c.region, scn, nv)?;
                    push(MethodKey::new(Method::Mmse, q), snr_db, column_nmse(&apply(&g, &y), &tc.truth)?);
                }
            }
            if methods.long_baselines {
                let y = observe_all(&c.baseline.psi, &tc.truth, nv, seed, path, 1);
                let est = long_ls[j].pseudo_inverse() * &y;
                push(MethodKey::new(Method::Ls, qb), snr_db, column_nmse(&est, &tc.truth)?);
                let g = mmse.as_mut().expect("checked above").get(&c.baseline.psi, c.region, scn, nv)?;
                push(MethodKey::new(Method::Mmse, qb), snr_db, column_nmse(&apply(&g, &y), &tc.truth)?);
            }
            if let Some(l) = &labels {
                push(MethodKey::new(Method::Label, cfg.label_q()), snr_db, l.clone());
            }
        }
    }
    Ok(EvalReport { grouped: cfg.grouped(), seed: cfg.seed, snr_db: cfg.eval.snr_db.clone(), entries })
}

fn apply(g: &MmseEstimator, y: &CMatrix) -> CMatrix {
    g.gain() * y
}
