use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ris_dml::config::{ArchiveFormat, ExperimentConfig, ExperimentKind};
use ris_dml::dataset::write_dataset;
use ris_dml::federated::write_log_csv;
use ris_dml::harness::{
    build_training_data, complexity_report, fit_covariances, generate_test_set, load_model, pretrain_stage,
    run_baselines, run_eval, run_experiment, train_stage, write_complexity_csv, write_region_csv, write_results_csv,
    write_sample_csv, ArtifactPaths, EvalReport, MethodSet, RunOptions, Scenario,
};
use ris_dml::nn::checkpoint::save_checkpoint;
use ris_dml::Error;

/// Cascaded RIS channel estimation: simulation, baselines and federated
/// mixture-of-experts training.
#[derive(Debug, Parser)]
#[command(name = "ris-dml", version)]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Progress messages on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate and archive the channel dataset.
    Generate,
    /// Train the region classifier (stage one).
    PretrainGate,
    /// Federated training of experts and mapper (stage two).
    Train,
    /// Evaluate a trained model and the baselines over the SNR grid.
    Eval,
    /// LS/MMSE baselines only.
    Baseline,
    /// Multiply-accumulate counts per module.
    Complexity,
    /// Run the configured regime end to end.
    Experiment {
        /// Also archive the channel dataset.
        #[arg(long)]
        with_dataset: bool,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn load_config(cli: &Cli) -> ris_dml::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_report(paths: &ArtifactPaths, cfg: &ExperimentConfig, report: &EvalReport) -> ris_dml::Result<()> {
    write_results_csv(&paths.results(), &report.rows())?;
    write_region_csv(&paths.results_by_region(), &report.region_rows())?;
    if cfg.eval.per_sample_rows {
        write_sample_csv(&paths.samples(), &report.sample_rows())?;
    }
    for r in report.rows() {
        println!("{:<5} Q={:<5} snr={:>6} dB  nmse={:>9.4} dB", r.method, r.q, r.snr_db, r.nmse_db);
    }
    Ok(())
}

fn require_training(cfg: &ExperimentConfig) -> ris_dml::Result<()> {
    if cfg.kind == ExperimentKind::BaselineOnly {
        return Err(Error::Config("the baseline-only regime has no model to train".into()));
    }
    Ok(())
}

fn run(cli: &Cli) -> ris_dml::Result<()> {
    let cfg = load_config(cli)?;
    let paths = ArtifactPaths::new(&cli.out_dir);
    let say = |m: &str| {
        if cli.verbose {
            eprintln!("{m}");
        }
    };
    match &cli.command {
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
        Command::Complexity => {
            paths.create()?;
            let rows = complexity_report(&cfg)?;
            write_complexity_csv(&paths.complexity(), &rows)?;
            for r in rows {
                println!("{:<13} {:>10}", r.module, r.macs);
            }
        }
        Command::Generate => {
            paths.create()?;
            let file = match cfg.channel.archive_format {
                ArchiveFormat::Binary => paths.dataset(),
                ArchiveFormat::Csv => paths.root.join("dataset.csv"),
            };
            let h = write_dataset(&file, &cfg)?;
            let n: usize = h.clients.iter().map(|c| c.samples).sum();
            println!("wrote {n} realizations to {}", file.display());
        }
        Command::PretrainGate => {
            require_training(&cfg)?;
            paths.create()?;
            let scn = Scenario::build(&cfg)?;
            say("building training data");
            let data = build_training_data(&scn)?;
            let (model, report) = pretrain_stage(&scn, &data)?;
            save_checkpoint(&paths.classifier(), &model, &cfg.model_hash())?;
            println!("classifier accuracy {:.4}", report.accuracy);
        }
        Command::Train => {
            require_training(&cfg)?;
            paths.create()?;
            let scn = Scenario::build(&cfg)?;
            say("building training data");
            let data = build_training_data(&scn)?;
            let model = if paths.classifier().exists() {
                load_model(&paths.classifier(), &scn)?
            } else {
                say("no classifier checkpoint; pretraining");
                let (m, report) = pretrain_stage(&scn, &data)?;
                save_checkpoint(&paths.classifier(), &m, &cfg.model_hash())?;
                println!("classifier accuracy {:.4}", report.accuracy);
                m
            };
            let (model, log) = train_stage(&scn, &data, model, Some(&paths), cli.verbose)?;
            write_log_csv(std::io::BufWriter::new(std::fs::File::create(paths.training_log())?), &log)?;
            save_checkpoint(&paths.model(), &model, &cfg.model_hash())?;
            if let Some(v) = log.iter().rev().find_map(|r| r.val_nmse_db) {
                println!("final validation nmse {v:.4} dB");
            }
        }
        Command::Eval => {
            require_training(&cfg)?;
            let scn = Scenario::build(&cfg)?;
            let model = load_model(&paths.model(), &scn)?;
            say("generating test set");
            let test = generate_test_set(&scn)?;
            let covs = fit_covariances(&scn)?;
            let report = run_eval(&scn, Some(&model), &test, Some(&covs), MethodSet::all())?;
            write_report(&paths, &cfg, &report)?;
        }
        Command::Baseline => {
            paths.create()?;
            let scn = Scenario::build(&cfg)?;
            let report = run_baselines(&scn)?;
            write_report(&paths, &cfg, &report)?;
        }
        Command::Experiment { with_dataset } => {
            let m = run_experiment(&cfg, &cli.out_dir, RunOptions { write_dataset: *with_dataset, verbose: cli.verbose })?;
            if let Some(a) = m.classifier_accuracy {
                println!("classifier accuracy {a:.4}");
            }
            for (k, v) in &m.median_nmse_db {
                println!("median {k:<10} {v:>9.4} dB");
            }
            println!("artifacts in {}", display(&cli.out_dir));
        }
    }
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Serde(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
