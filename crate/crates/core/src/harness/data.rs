//! Training observations, LS labels, test channels and covariance fits.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;

use super::{ls_for, Design, Scenario};
use crate::channel::generate_user_range;
use crate::config::{CovarianceScope, LabelSource};
use crate::estimators::{CovarianceAccumulator, CovarianceModel, LsEstimator};
use crate::federated::{ClientDataset, ValidationSet};
use crate::linalg::{CMatrix, CVector};
use crate::nn::pack;
use crate::pilots::{db_to_linear, encode_observation, noise_variance, observe_vector};
use crate::rng::{self, tag};
use crate::{Error, Result};

/// Realizations are synthesized in chunks of this many samples.
const CHUNK: usize = 1000;

/// Stage-two inputs: one dataset per training client plus the pooled
/// validation split.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub clients: Vec<ClientDataset>,
    pub val: ValidationSet,
}

impl TrainingData {
    pub fn samples(&self) -> usize {
        self.clients.iter().map(ClientDataset::len).sum()
    }
}

fn train_count(scn: &Scenario) -> usize {
    let n = scn.channel.samples_per_user;
    let val = (scn.config.training.val_fraction * n as f64).round() as usize;
    n - val.min(n.saturating_sub(1))
}

/// LS labels from long-pilot observations of `truth` at `snr_db`; sample
/// `first + i` of client (`region`, `user`) uses its own noise stream.
#[allow(clippy::too_many_arguments)]
pub fn generate_labels(
    truth: &[CVector],
    design: &Design,
    ls: &LsEstimator,
    snr_db: f64,
    seed: u64,
    region: usize,
    user: usize,
    first: usize,
) -> Result<Vec<CVector>> {
    let d = design.pilots.channel_dim();
    if design.q() < d {
        return Err(Error::config(format!("label pilot budget {} is below the channel dimension {d}", design.q())));
    }
    if truth.is_empty() {
        return Ok(Vec::new());
    }
    let nv = noise_variance(db_to_linear(snr_db));
    let mut noise = CMatrix::zeros(design.q(), truth.len());
    for i in 0..truth.len() {
        let mut r = rng::stream(seed, &[tag::LABEL_NOISE, region as u64, user as u64, (first + i) as u64]);
        for v in noise.column_mut(i).iter_mut() {
            *v = rng::complex_gaussian(&mut r, nv);
        }
    }
    let h = CMatrix::from_columns(truth);
    // with full column rank, pinv (Ψh + n) = h + pinv n
    let est = if ls.rank() == d {
        h + ls.pseudo_inverse() * noise
    } else {
        ls.pseudo_inverse() * (&*design.psi * h + noise)
    };
    Ok(est.column_iter().map(|c| c.clone_owned()).collect())
}

/// Observations, labels and the validation split for every training client.
pub fn build_training_data(scn: &Scenario) -> Result<TrainingData> {
    let cfg = &scn.config;
    let ids = scn.training_clients();
    let label_ls = match cfg.pilots.label_source {
        LabelSource::Ls => Some(ls_for(ids.iter().map(|&i| &scn.clients[i].label).collect())?),
        LabelSource::Truth => None,
    };
    let n = scn.channel.samples_per_user;
    let n_train = train_count(scn);
    let snrs = &cfg.training.snr_db;
    let parts = ids
        .par_iter()
        .enumerate()
        .map(|(j, &ci)| {
            let c = &scn.clients[ci];
            let (r, k) = (c.region, c.user);
            let gate = scn.gate_label(r);
            let mut data = ClientDataset {
                region: r,
                user: k,
                gate_label: gate,
                q_shape: cfg.pilots.q_shape,
                target_len: 2 * cfg.channel_dim(),
                inputs: Vec::new(),
                targets: Vec::new(),
            };
            let mut val = ValidationSet { q_shape: cfg.pilots.q_shape, target_len: 2 * cfg.channel_dim(), ..Default::default() };
            for start in (0..n).step_by(CHUNK) {
                let end = (start + CHUNK).min(n);
                let truth: Vec<CVector> = generate_user_range(
                    &scn.channel,
                    scn.grouping.as_ref(),
                    scn.frozen.as_ref(),
                    cfg.seed,
                    r,
                    k,
                    start..end,
                )?
                .iter()
                .map(|x| x.target())
                .collect();
                let labels = match &label_ls {
                    Some(ls) => generate_labels(&truth, &c.label, &ls[j], cfg.pilots.label_snr_db, cfg.seed, r, k, start)?,
                    None => truth.clone(),
                };
                for (i, (h, label)) in truth.iter().zip(&labels).enumerate() {
                    let s = start + i;
                    let path = [r as u64, k as u64, s as u64];
                    let snr_db = snrs[rng::stream(cfg.seed, &[&[tag::TRAIN_SNR][..], &path].concat()).random_range(0..snrs.len())];
                    let mut nrng = rng::stream(cfg.seed, &[&[tag::NOISE][..], &path].concat());
                    let y = observe_vector(&c.short.psi, h, noise_variance(db_to_linear(snr_db)), &mut nrng);
                    let tensor = encode_observation(&y, &c.short.pilots)?;
                    if s < n_train {
                        data.inputs.extend_from_slice(&tensor);
                        data.targets.extend(pack(label));
                    } else {
                        val.push(&tensor, &pack(h), gate);
                    }
                }
            }
            Ok((data, val))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut val = ValidationSet { q_shape: cfg.pilots.q_shape, target_len: 2 * cfg.channel_dim(), ..Default::default() };
    let mut clients = Vec::with_capacity(parts.len());
    for (d, v) in parts {
        val.inputs.extend(v.inputs);
        val.truth.extend(v.truth);
        val.regions.extend(v.regions);
        clients.push(d);
    }
    Ok(TrainingData { clients, val })
}

/// Ground-truth channels of one client's test samples.
#[derive(Debug, Clone)]
pub struct TestClient {
    /// Index into [`Scenario::clients`].
    pub client: usize,
    pub truth: Vec<CVector>,
}

/// Independent test channels spread evenly over every client of every region.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub clients: Vec<TestClient>,
}

impl TestSet {
    pub fn len(&self) -> usize {
        self.clients.iter().map(|c| c.truth.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn generate_test_set(scn: &Scenario) -> Result<TestSet> {
    let total = scn.config.eval.test_samples;
    let c = scn.clients.len();
    let seed = rng::derive_seed(scn.config.seed, &[tag::TEST]);
    let clients = (0..c)
        .into_par_iter()
        .map(|ci| {
            let n = total / c + usize::from(ci < total % c);
            let p = &scn.clients[ci];
            let truth = generate_user_range(
                &scn.channel,
                scn.grouping.as_ref(),
                scn.frozen.as_ref(),
                seed,
                p.region,
                p.user,
                0..n,
            )?
            .iter()
            .map(|x| x.target())
            .collect();
            Ok(TestClient { client: ci, truth })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TestSet { clients })
}

/// Sample covariances of the training channels, pooled and per region.
#[derive(Debug, Clone)]
pub struct Covariances {
    pub pooled: CovarianceModel,
    pub per_region: BTreeMap<usize, CovarianceModel>,
}

impl Covariances {
    /// The covariance the MMSE baseline uses for a client in `region`.
    /// Regions without training data fall back to the pooled fit.
    pub fn for_region(&self, region: usize, scope: CovarianceScope) -> (&CovarianceModel, Option<usize>) {
        match scope {
            CovarianceScope::PerRegion => match self.per_region.get(&region) {
                Some(c) => (c, Some(region)),
                None => (&self.pooled, None),
            },
            CovarianceScope::Pooled => (&self.pooled, None),
        }
    }
}

/// Fits covariances on the training split of the training clients, using at
/// most `eval.covariance_samples` channels in total (0 = all).
pub fn fit_covariances(scn: &Scenario) -> Result<Covariances> {
    let cfg = &scn.config;
    let ids = scn.training_clients();
    let n_train = train_count(scn);
    let budget = cfg.eval.covariance_samples;
    let per_client = if budget == 0 { n_train } else { budget.div_ceil(ids.len()).min(n_train) };
    let d = cfg.channel_dim();
    let parts = ids
        .par_iter()
        .map(|&ci| {
            let c = &scn.clients[ci];
            let mut acc = CovarianceAccumulator::new(d);
            for start in (0..per_client).step_by(CHUNK) {
                let end = (start + CHUNK).min(per_client);
                let truth: Vec<CVector> = generate_user_range(
                    &scn.channel,
                    scn.grouping.as_ref(),
                    scn.frozen.as_ref(),
                    cfg.seed,
                    c.region,
                    c.user,
                    start..end,
                )?
                .iter()
                .map(|x| x.target())
                .collect();
                acc.add(&truth)?;
            }
            Ok((c.region, acc))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pooled = CovarianceAccumulator::new(d);
    let mut regions: BTreeMap<usize, CovarianceAccumulator> = BTreeMap::new();
    for (r, acc) in parts {
        pooled.merge(&acc);
        regions.entry(r).or_insert_with(|| CovarianceAccumulator::new(d)).merge(&acc);
    }
    let loading = cfg.eval.loading_rel;
    Ok(Covariances {
        pooled: pooled.finish(loading)?,
        per_region: regions.into_iter().map(|(r, a)| Ok((r, a.finish(loading)?))).collect::<Result<_>>()?,
    })
}
