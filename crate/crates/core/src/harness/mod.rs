//! Experiment orchestration: pilot designs per client, training data and
//! labels, evaluation against LS/MMSE, reporting and artifact directories.

mod data;
mod eval;
mod experiment;
mod report;

pub use data::{
    build_training_data, fit_covariances, generate_labels, generate_test_set, Covariances, TestClient, TestSet,
    TrainingData,
};
pub use eval::{run_eval, EvalEntry, EvalReport, Method, MethodKey, MethodSet};
pub use experiment::{
    complexity_report, fed_config, load_model, pretrain_stage, run_baselines, run_experiment, train_stage,
    write_complexity_csv, ArtifactPaths, ComplexityRow, Manifest, RunOptions,
};
pub use report::{read_results_csv, write_region_csv, write_results_csv, write_sample_csv, ResultRow, RegionRow};

use std::collections::HashMap;
use std::sync::Arc;

use crate::channel::{frozen_bs_ris, BsRisDraw, ChannelConfig};
use crate::config::{ExperimentConfig, ExperimentKind, LabelDesign, PilotSharing};
use crate::estimators::LsEstimator;
use crate::linalg::CMatrix;
use crate::pilots::{make_pilot_config, measurement_matrix, orthogonal_pilot_config, GroupingOperator, PilotConfig};
use crate::rng::{self, tag};
use crate::Result;

/// A pilot design with its measurement matrix.
#[derive(Debug, Clone)]
pub struct Design {
    pub pilots: Arc<PilotConfig>,
    pub psi: Arc<CMatrix>,
}

impl Design {
    fn new(pilots: PilotConfig) -> Self {
        let psi = measurement_matrix(&pilots);
        Self { pilots: Arc::new(pilots), psi: Arc::new(psi) }
    }

    pub fn q(&self) -> usize {
        self.pilots.q()
    }
}

/// Pilot designs of one (region, user) client.
#[derive(Debug, Clone)]
pub struct ClientPilots {
    pub region: usize,
    pub user: usize,
    /// Short pilots feeding the neural estimator (and same-pilot baselines).
    pub short: Design,
    /// Long pilots whose LS estimates serve as training labels.
    pub label: Design,
    /// Long pilots for the high-budget LS/MMSE baselines.
    pub baseline: Design,
}

/// Everything fixed for an experiment before any sample is drawn.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ExperimentConfig,
    pub channel: ChannelConfig,
    pub grouping: Option<GroupingOperator>,
    pub frozen: Option<BsRisDraw>,
    pub clients: Vec<ClientPilots>,
}

impl Scenario {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let channel = config.channel_config()?;
        let grouping = config.grouping()?;
        let frozen = if channel.freeze_bs_ris { Some(frozen_bs_ris(&channel, config.seed)?) } else { None };
        let seed = config.seed;
        let p = &config.pilots;
        let width = config.width();
        let m = config.antennas();
        let designs = |ids: &[u64]| -> Result<(Design, Design, Design)> {
            let path = |t: u64| [&[t][..], ids].concat();
            let short = make_pilot_config(
                p.q_shape,
                width,
                m,
                p.alphabet,
                p.precoder_mode,
                grouping.clone(),
                p.normalize_by_sqrt_q,
                &mut rng::stream(seed, &path(tag::PILOTS)),
                &mut rng::stream(seed, &path(tag::PRECODER)),
            )?;
            let mut lrng = rng::stream(seed, &path(tag::LABEL_PILOTS));
            let label = match p.label_design {
                LabelDesign::Orthogonal => orthogonal_pilot_config(width, m, grouping.clone(), &mut lrng)?,
                LabelDesign::Random => {
                    let mut prng = rng::stream(seed, &[&path(tag::LABEL_PILOTS)[..], &[1]].concat());
                    make_pilot_config(
                        (config.label_q(), 1),
                        width,
                        m,
                        p.alphabet,
                        p.precoder_mode,
                        grouping.clone(),
                        false,
                        &mut lrng,
                        &mut prng,
                    )?
                }
            };
            let baseline = make_pilot_config(
                (config.baseline_q(), 1),
                width,
                m,
                p.alphabet,
                p.precoder_mode,
                grouping.clone(),
                false,
                &mut rng::stream(seed, &path(tag::BASELINE_PILOTS)),
                &mut rng::stream(seed, &[&path(tag::BASELINE_PILOTS)[..], &[1]].concat()),
            )?;
            Ok((Design::new(short), Design::new(label), Design::new(baseline)))
        };
        let shared = match p.sharing {
            PilotSharing::Shared => Some(designs(&[])?),
            PilotSharing::PerUser => None,
        };
        let mut clients = Vec::new();
        for r in 1..=channel.regions() {
            for k in 1..=channel.users_per_region {
                let (short, label, baseline) = match &shared {
                    Some(d) => d.clone(),
                    None => designs(&[r as u64, k as u64])?,
                };
                clients.push(ClientPilots { region: r, user: k, short, label, baseline });
            }
        }
        Ok(Self { config: config.clone(), channel, grouping, frozen, clients })
    }

    /// Indices of clients whose data trains the model.
    pub fn training_clients(&self) -> Vec<usize> {
        let only = match self.config.kind {
            ExperimentKind::SingleRegion => Some(self.config.training.train_region),
            _ => None,
        };
        (0..self.clients.len()).filter(|&i| only.is_none_or(|r| self.clients[i].region == r)).collect()
    }

    /// Region label in gate space: the single-region model has one expert.
    pub fn gate_label(&self, region: usize) -> usize {
        match self.config.kind {
            ExperimentKind::SingleRegion => 1,
            _ => region,
        }
    }

    pub fn arch(&self) -> crate::nn::ArchConfig {
        let mut a = self.config.arch();
        if self.config.kind == ExperimentKind::SingleRegion {
            a.regions = 1;
        }
        a
    }
}

/// Builds one value per distinct matrix (shared designs are computed once).
pub(crate) fn per_design<T, F>(designs: Vec<&Design>, f: F) -> Result<Vec<Arc<T>>>
where
    F: Fn(&Design) -> Result<T>,
{
    let mut cache: HashMap<*const CMatrix, Arc<T>> = HashMap::new();
    let mut out = Vec::with_capacity(designs.len());
    for d in designs {
        let key = Arc::as_ptr(&d.psi);
        let v = match cache.get(&key) {
            Some(v) => v.clone(),
            None => {
                let v = Arc::new(f(d)?);
                cache.insert(key, v.clone());
                v
            }
        };
        out.push(v);
    }
    Ok(out)
}

pub(crate) fn ls_for(designs: Vec<&Design>) -> Result<Vec<Arc<LsEstimator>>> {
    per_design(designs, |d| Ok(LsEstimator::new(&d.psi)))
}
