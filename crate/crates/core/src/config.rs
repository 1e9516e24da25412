//! Experiment configuration: every simulation parameter in one TOML file.
//!
//! Missing fields take the defaults below, which reproduce the reference
//! setup (4×4 BS, 8×8 RIS, g = 4, Q = 32 as 8×4, three elevation regions
//! with three users each, 20,000 samples per user, Adam at 1e-3 halved
//! every 30 of 100 epochs, LS labels at 10 dB).

use std::f64::consts::FRAC_PI_6;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{ArrayGeometry, ChannelConfig, RegionPartition};
use crate::nn::{ArchConfig, Gating};
use crate::pilots::{make_grouping, GroupingOperator, PilotAlphabet, PrecoderMode};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Full-resolution channel (`D = NM`), DML over all regions.
    Ungrouped,
    /// Grouped channel, trained on one region, evaluated on all.
    SingleRegion,
    /// Grouped channel, DML over all regions.
    GroupedDml,
    /// LS/MMSE only; no training.
    BaselineOnly,
}

/// Whether pilot designs are drawn per (region, user) client or shared by
/// all clients. One estimator serves every client, so it can only learn a
/// common inverse when the short pilots are shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PilotSharing {
    PerUser,
    Shared,
}

/// Pilot design used to produce long-pilot LS training labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelDesign {
    /// i.i.d. pilots and precoders, like every other pilot block.
    Random,
    /// Sign-randomized Hadamard phases paired with the columns of a random
    /// unitary precoder matrix; the measurement Gram is a scaled identity.
    Orthogonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSource {
    /// LS estimate from a long-pilot observation.
    Ls,
    /// Noise-free ground truth.
    Truth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// `ϑ ← ϑ − η Σ p g`.
    Plain,
    /// Adam applied at the server to `Σ p g`.
    Adam,
}

/// On-disk layout of generated channel datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchiveFormat {
    Binary,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceScope {
    Pooled,
    PerRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArraysSection {
    pub bs_rows: usize,
    pub bs_cols: usize,
    pub ris_rows: usize,
    pub ris_cols: usize,
    pub spacing_over_wavelength: f64,
    /// Carrier frequency. Only the spacing-to-wavelength ratio enters the model.
    pub carrier_ghz: f64,
}

impl Default for ArraysSection {
    fn default() -> Self {
        Self { bs_rows: 4, bs_cols: 4, ris_rows: 8, ris_cols: 8, spacing_over_wavelength: 0.5, carrier_ghz: 28.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PilotSection {
    pub q_shape: (usize, usize),
    pub group_size: usize,
    pub alphabet: PilotAlphabet,
    pub precoder_mode: PrecoderMode,
    pub sharing: PilotSharing,
    pub normalize_by_sqrt_q: bool,
    pub label_source: LabelSource,
    pub label_design: LabelDesign,
    pub label_snr_db: f64,
    pub baseline_q_grouped: usize,
    pub baseline_q_ungrouped: usize,
}

impl Default for PilotSection {
    fn default() -> Self {
        Self {
            q_shape: (8, 4),
            group_size: 4,
            alphabet: PilotAlphabet::Bpsk,
            precoder_mode: PrecoderMode::PerSlot,
            sharing: PilotSharing::Shared,
            normalize_by_sqrt_q: true,
            label_source: LabelSource::Ls,
            label_design: LabelDesign::Orthogonal,
            label_snr_db: 10.0,
            baseline_q_grouped: 256,
            baseline_q_ungrouped: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSection {
    pub paths_bs_ris: usize,
    pub paths_ris_user: usize,
    /// Interior elevation boundaries (radians) splitting (−π/2, π/2).
    pub region_boundaries: Vec<f64>,
    pub users_per_region: usize,
    pub samples_per_user: usize,
    pub freeze_bs_ris: bool,
    pub archive_format: ArchiveFormat,
}

impl Default for ChannelSection {
    fn default() -> Self {
        Self {
            paths_bs_ris: 3,
            paths_ris_user: 3,
            region_boundaries: vec![-FRAC_PI_6, FRAC_PI_6],
            users_per_region: 3,
            samples_per_user: 20_000,
            freeze_bs_ris: true,
            archive_format: ArchiveFormat::Binary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_halving_epochs: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    pub aggregation: Aggregation,
    /// Local optimizer steps per round; 1 sends a single mini-batch gradient.
    pub local_steps: usize,
    pub local_learning_rate: f64,
    pub gating: Gating,
    /// Observation SNRs (dB) for training inputs, drawn uniformly per sample.
    pub snr_db: Vec<f64>,
    pub classifier_epochs: usize,
    pub classifier_learning_rate: f64,
    pub classifier_batch_size: usize,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every_epochs: usize,
    /// Region used by the single-region regime.
    pub train_region: usize,
    pub expert_width: usize,
    pub classifier_width: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 1e-3,
            lr_halving_epochs: 30,
            epochs: 100,
            val_fraction: 0.1,
            aggregation: Aggregation::Adam,
            local_steps: 1,
            local_learning_rate: 1e-3,
            gating: Gating::Hard,
            snr_db: vec![10.0],
            classifier_epochs: 30,
            classifier_learning_rate: 3e-3,
            classifier_batch_size: 64,
            checkpoint_every_epochs: 0,
            train_region: 1,
            expert_width: 32,
            classifier_width: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub snr_db: Vec<f64>,
    pub test_samples: usize,
    pub covariance: CovarianceScope,
    pub loading_rel: f64,
    /// Training channels used to fit the MMSE covariance (0 = all).
    pub covariance_samples: usize,
    pub gating: Gating,
    /// Also emit one row per test sample.
    pub per_sample_rows: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            snr_db: vec![-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0],
            test_samples: 10_000,
            covariance: CovarianceScope::Pooled,
            loading_rel: 1e-6,
            covariance_samples: 20_000,
            gating: Gating::Hard,
            per_sample_rows: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub kind: ExperimentKind,
    pub arrays: ArraysSection,
    pub pilots: PilotSection,
    pub channel: ChannelSection,
    pub training: TrainingSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            kind: ExperimentKind::GroupedDml,
            arrays: ArraysSection::default(),
            pilots: PilotSection::default(),
            channel: ChannelSection::default(),
            training: TrainingSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Hash of everything that shapes a trained model, i.e. the
    /// configuration with the evaluation section reset. Checkpoints carry
    /// this so a model can be re-evaluated on a different SNR grid.
    pub fn model_hash(&self) -> String {
        let mut c = self.clone();
        c.eval = EvalSection::default();
        c.hash()
    }

    pub fn grouped(&self) -> bool {
        self.kind != ExperimentKind::Ungrouped
    }

    pub fn q(&self) -> usize {
        self.pilots.q_shape.0 * self.pilots.q_shape.1
    }

    pub fn ris(&self) -> Result<ArrayGeometry> {
        ArrayGeometry::with_spacing(self.arrays.ris_rows, self.arrays.ris_cols, self.arrays.spacing_over_wavelength)
    }

    pub fn bs(&self) -> Result<ArrayGeometry> {
        ArrayGeometry::with_spacing(self.arrays.bs_rows, self.arrays.bs_cols, self.arrays.spacing_over_wavelength)
    }

    pub fn channel_config(&self) -> Result<ChannelConfig> {
        let c = &self.channel;
        let cfg = ChannelConfig {
            ris: self.ris()?,
            bs: self.bs()?,
            paths_bs_ris: c.paths_bs_ris,
            paths_ris_user: c.paths_ris_user,
            partition: RegionPartition::from_boundaries(&c.region_boundaries)?,
            users_per_region: c.users_per_region,
            samples_per_user: c.samples_per_user,
            freeze_bs_ris: c.freeze_bs_ris,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn regions(&self) -> usize {
        self.channel.region_boundaries.len() + 1
    }

    pub fn grouping(&self) -> Result<Option<GroupingOperator>> {
        if self.grouped() {
            Ok(Some(make_grouping(&self.ris()?, self.pilots.group_size)?))
        } else {
            Ok(None)
        }
    }

    /// Columns of the unknown channel (`N'` grouped, `N` otherwise).
    pub fn width(&self) -> usize {
        let n = self.arrays.ris_rows * self.arrays.ris_cols;
        if self.grouped() {
            n / self.pilots.group_size
        } else {
            n
        }
    }

    pub fn antennas(&self) -> usize {
        self.arrays.bs_rows * self.arrays.bs_cols
    }

    pub fn channel_dim(&self) -> usize {
        self.width() * self.antennas()
    }

    pub fn baseline_q(&self) -> usize {
        if self.grouped() {
            self.pilots.baseline_q_grouped
        } else {
            self.pilots.baseline_q_ungrouped
        }
    }

    /// Long-pilot budget used for LS labels: exactly the channel dimension.
    pub fn label_q(&self) -> usize {
        self.channel_dim()
    }

    pub fn arch(&self) -> ArchConfig {
        let mut a = ArchConfig::new(self.pilots.q_shape, self.channel_dim(), self.regions());
        a.expert_width = self.training.expert_width;
        a.classifier_width = self.training.classifier_width;
        a
    }

    pub fn validate(&self) -> Result<()> {
        let ris = self.ris()?;
        self.bs()?;
        self.channel_config()?;
        let (q1, q2) = self.pilots.q_shape;
        if q1 == 0 || q2 == 0 {
            return Err(Error::config("q_shape entries must be positive"));
        }
        if self.grouped() {
            make_grouping(&ris, self.pilots.group_size)?;
        }
        if self.channel.samples_per_user == 0 {
            return Err(Error::config("samples_per_user must be positive"));
        }
        let t = &self.training;
        if t.batch_size == 0 || t.classifier_batch_size == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if !(t.learning_rate > 0.0) || !(t.classifier_learning_rate > 0.0) || !(t.local_learning_rate > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if t.lr_halving_epochs == 0 {
            return Err(Error::config("lr_halving_epochs must be positive"));
        }
        if !(0.0..1.0).contains(&t.val_fraction) {
            return Err(Error::config("val_fraction must lie in [0, 1)"));
        }
        if t.local_steps == 0 {
            return Err(Error::config("local_steps must be at least 1"));
        }
        if t.snr_db.is_empty() || t.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::config("training snr_db must be a non-empty list of finite values"));
        }
        if t.train_region == 0 || t.train_region > self.regions() {
            return Err(Error::config(format!("train_region {} outside 1..={}", t.train_region, self.regions())));
        }
        self.arch().validate()?;
        if self.eval.snr_db.is_empty() || self.eval.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::config("eval snr_db must be a non-empty list of finite values"));
        }
        if self.eval.loading_rel < 0.0 {
            return Err(Error::config("loading_rel must be nonnegative"));
        }
        if self.pilots.label_snr_db.is_nan() {
            return Err(Error::config("label_snr_db is NaN"));
        }
        if self.baseline_q() == 0 {
            return Err(Error::config("baseline pilot budget must be positive"));
        }
        if self.pilots.label_design == LabelDesign::Orthogonal && !self.width().is_power_of_two() {
            return Err(Error::config(format!(
                "orthogonal label pilots need a power-of-two channel width, got {}",
                self.width()
            )));
        }
        Ok(())
    }
}
