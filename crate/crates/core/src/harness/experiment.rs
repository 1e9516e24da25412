//! End-to-end regimes and the artifact directory they produce.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::{build_training_data, fit_covariances, generate_test_set, TrainingData};
use super::eval::{run_eval, EvalReport, MethodSet};
use super::report::{write_region_csv, write_results_csv, write_sample_csv};
use super::Scenario;
use crate::config::{ExperimentConfig, ExperimentKind};
use crate::dataset::write_dataset;
use crate::federated::{
    pretrain_classifier, train, write_log_csv, FedConfig, LogRow, PretrainConfig, PretrainReport,
};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nn::{mac_count, Gating, Mode, ModelParams, Probe};
use crate::{Error, Result};

/// File names inside an artifact directory.
#[derive(Debug, Clone)]
pub struct ArtifactPaths {
    pub root: PathBuf,
}

impl ArtifactPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn create(&self) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        Ok(())
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.bin")
    }

    pub fn classifier(&self) -> PathBuf {
        self.root.join("classifier.ckpt")
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.root.join(format!("model_epoch{epoch:04}.ckpt"))
    }

    pub fn training_log(&self) -> PathBuf {
        self.root.join("training_log.csv")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn results_by_region(&self) -> PathBuf {
        self.root.join("results_by_region.csv")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("results_per_sample.csv")
    }

    pub fn complexity(&self) -> PathBuf {
        self.root.join("complexity.csv")
    }
}

/// Lineage record written last into every artifact directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub config_hash: String,
    /// Hash stored in checkpoints (configuration without the eval section).
    pub model_hash: String,
    /// SHA-256 of each artifact file, by file name.
    pub files: BTreeMap<String, String>,
    pub classifier_accuracy: Option<f64>,
    /// Median over the SNR grid of each method's NMSE curve, by `method@Q`.
    pub median_nmse_db: BTreeMap<String, f64>,
    pub elapsed_seconds: f64,
}

pub fn fed_config(cfg: &ExperimentConfig) -> FedConfig {
    let t = &cfg.training;
    FedConfig {
        epochs: t.epochs,
        rounds: None,
        batch_size: t.batch_size,
        base_lr: t.learning_rate,
        halve_every_epochs: t.lr_halving_epochs,
        aggregation: t.aggregation,
        local_steps: t.local_steps,
        local_lr: t.local_learning_rate,
        gating: t.gating,
        val_every_rounds: 0,
    }
}

/// Stage one: a freshly initialized model with a trained classifier.
pub fn pretrain_stage(scn: &Scenario, data: &TrainingData) -> Result<(ModelParams, PretrainReport)> {
    let t = &scn.config.training;
    let mut model = ModelParams::init(scn.arch(), scn.config.seed)?;
    let cfg = PretrainConfig { epochs: t.classifier_epochs, batch_size: t.classifier_batch_size, lr: t.classifier_learning_rate };
    let report = pretrain_classifier(&mut model, &data.clients, &cfg, Some(&data.val), scn.config.seed)?;
    Ok((model, report))
}

/// Stage two: FedAvg over the training clients. With `paths`, periodic
/// checkpoints are written as configured.
pub fn train_stage(
    scn: &Scenario,
    data: &TrainingData,
    model: ModelParams,
    paths: Option<&ArtifactPaths>,
    verbose: bool,
) -> Result<(ModelParams, Vec<LogRow>)> {
    let cfg = fed_config(&scn.config);
    let every = scn.config.training.checkpoint_every_epochs;
    let hash = scn.config.model_hash();
    let start = Instant::now();
    let mut hook = |epoch: usize, m: &ModelParams| -> Result<()> {
        if verbose {
            eprintln!("epoch {epoch}/{} done after {:.1}s", cfg.epochs, start.elapsed().as_secs_f64());
        }
        if let Some(p) = paths {
            if every > 0 && epoch % every == 0 {
                save_checkpoint(&p.epoch_checkpoint(epoch), m, &hash)?;
            }
        }
        Ok(())
    };
    train(model, &data.clients, &cfg, Some(&data.val), scn.config.seed, Some(&mut hook))
}

/// Loads a checkpoint and checks it against `scn`.
pub fn load_model(path: &Path, scn: &Scenario) -> Result<ModelParams> {
    let (header, model) = load_checkpoint(path)?;
    if header.config_hash != scn.config.model_hash() {
        return Err(Error::Lineage(format!("{} was trained under a different configuration", path.display())));
    }
    if model.arch != scn.arch() {
        return Err(Error::Lineage(format!("{} does not match the configured architecture", path.display())));
    }
    Ok(model)
}

/// LS and MMSE on the short and long pilots; no training.
pub fn run_baselines(scn: &Scenario) -> Result<EvalReport> {
    let test = generate_test_set(scn)?;
    let covs = fit_covariances(scn)?;
    run_eval(scn, None, &test, Some(&covs), MethodSet::baselines())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub module: String,
    pub macs: u64,
    /// Measured by an instrumented forward pass, where separable.
    pub instrumented: Option<u64>,
}

/// Analytic MACs per module for one hard-gated inference, checked against an
/// instrumented forward pass.
pub fn complexity_report(config: &ExperimentConfig) -> Result<Vec<ComplexityRow>> {
    let arch = if config.kind == ExperimentKind::SingleRegion {
        let mut a = config.arch();
        a.regions = 1;
        a
    } else {
        config.arch()
    };
    let report = mac_count(&arch);
    let model = ModelParams::init(arch, config.seed)?;
    let x = model.input_batch(vec![0.5; arch.input_len()])?;
    let mut probe = Probe::default();
    model.estimator_forward(&x, Gating::Hard, Mode::Eval, &mut probe)?;
    let measured = [probe.classifier_macs, probe.expert_macs, probe.mapper_macs, probe.total_macs()];
    let analytic = [report.classifier, report.expert, report.mapper(), report.total()];
    if measured != analytic {
        return Err(Error::Input(format!("MAC count mismatch: analytic {analytic:?}, instrumented {measured:?}")));
    }
    let row = |m: &str, v: u64, i: Option<u64>| ComplexityRow { module: m.into(), macs: v, instrumented: i };
    Ok(vec![
        row("classifier", report.classifier, Some(measured[0])),
        row("expert", report.expert, Some(measured[1])),
        row("mapper_mix", report.mapper_mix, None),
        row("mapper_dense", report.mapper_dense, None),
        row("mapper", report.mapper(), Some(measured[2])),
        row("total", report.total(), Some(measured[3])),
    ])
}

pub fn write_complexity_csv(path: &Path, rows: &[ComplexityRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let mut f = std::io::BufReader::new(fs::File::open(path)?);
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = std::io::Read::read(&mut f, &mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Options for [`run_experiment`].
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Also archive the generated channels (large at full scale).
    pub write_dataset: bool,
    pub verbose: bool,
}

/// Runs the configured regime end to end and fills `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path, opts: RunOptions) -> Result<Manifest> {
    let start = Instant::now();
    let say = |msg: &str| {
        if opts.verbose {
            eprintln!("[{:>7.1}s] {msg}", start.elapsed().as_secs_f64());
        }
    };
    let paths = ArtifactPaths::new(out_dir);
    paths.create()?;
    fs::write(paths.config(), config.to_toml()?)?;
    let scn = Scenario::build(config)?;
    if opts.write_dataset {
        say("writing dataset");
        write_dataset(&paths.dataset(), config)?;
    }
    write_complexity_csv(&paths.complexity(), &complexity_report(config)?)?;

    let mut classifier_accuracy = None;
    let model = if config.kind == ExperimentKind::BaselineOnly {
        None
    } else {
        say("building training data");
        let data = build_training_data(&scn)?;
        say("pretraining classifier");
        let (model, pre) = pretrain_stage(&scn, &data)?;
        classifier_accuracy = Some(pre.accuracy);
        save_checkpoint(&paths.classifier(), &model, &config.model_hash())?;
        say(&format!("classifier accuracy {:.4}; federated training", pre.accuracy));
        let (model, log) = train_stage(&scn, &data, model, Some(&paths), opts.verbose)?;
        write_log_csv(std::io::BufWriter::new(fs::File::create(paths.training_log())?), &log)?;
        save_checkpoint(&paths.model(), &model, &config.model_hash())?;
        Some(model)
    };

    say("generating test set");
    let test = generate_test_set(&scn)?;
    say("fitting covariances");
    let covs = fit_covariances(&scn)?;
    say("evaluating");
    let methods = MethodSet { dml: model.is_some(), ..MethodSet::all() };
    let report = run_eval(&scn, model.as_ref(), &test, Some(&covs), methods)?;
    write_results_csv(&paths.results(), &report.rows())?;
    write_region_csv(&paths.results_by_region(), &report.region_rows())?;
    if config.eval.per_sample_rows {
        write_sample_csv(&paths.samples(), &report.sample_rows())?;
    }

    let mut files = BTreeMap::new();
    for p in [
        paths.config(),
        paths.dataset(),
        paths.complexity(),
        paths.classifier(),
        paths.model(),
        paths.training_log(),
        paths.results(),
        paths.results_by_region(),
        paths.samples(),
    ] {
        if p.exists() {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            files.insert(name, sha256_file(&p)?);
        }
    }
    let median_nmse_db =
        report.keys().into_iter().map(|k| (format!("{}@{}", k.method, k.q), report.median_db(k, None))).collect();
    let manifest = Manifest {
        kind: config.kind,
        seed: config.seed,
        config_hash: config.hash(),
        model_hash: config.model_hash(),
        files,
        classifier_accuracy,
        median_nmse_db,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    };
    fs::write(paths.manifest(), serde_json::to_string_pretty(&manifest)?)?;
    say("done");
    Ok(manifest)
}
