mod common;

use common::*;
use ris_dml::config::{ExperimentConfig, ExperimentKind};
use ris_dml::estimators::LsEstimator;
use ris_dml::harness::{
    build_training_data, generate_labels, generate_test_set, load_model, read_results_csv, run_baselines,
    run_experiment, write_results_csv, Method, MethodKey, RunOptions, Scenario,
};
use ris_dml::linalg::CVector;
use ris_dml::nn::checkpoint::save_checkpoint;
use ris_dml::nn::ModelParams;
use ris_dml::pilots::noise_variance;
use ris_dml::Error;

fn small_config() -> ExperimentConfig {
    let mut c = grouped_config(40);
    c.training.epochs = 1;
    c.training.classifier_epochs = 1;
    c.eval.snr_db = vec![0.0, 10.0];
    c.eval.test_samples = 60;
    c.eval.covariance_samples = 600;
    c
}

fn truth(n: usize) -> Vec<CVector> {
    grouped_channels(2, 2, n).iter().map(|c| c.target()).collect()
}

#[test]
fn noiseless_labels_equal_the_truth() {
    let scn = Scenario::build(&small_config()).unwrap();
    let design = &scn.clients[0].label;
    let ls = LsEstimator::new(&design.psi);
    let h = truth(4);
    let labels = generate_labels(&h, design, &ls, f64::INFINITY, 1, 1, 1, 0).unwrap();
    for (l, t) in labels.iter().zip(&h) {
        assert!((l - t).norm() <= 1e-8 * t.norm());
    }
}

#[test]
fn label_error_matches_the_ls_noise_law() {
    let scn = Scenario::build(&small_config()).unwrap();
    let design = &scn.clients[0].label;
    let ls = LsEstimator::new(&design.psi);
    let h = truth(400);
    let labels = generate_labels(&h, design, &ls, 10.0, 3, 1, 1, 0).unwrap();
    let err: f64 = labels.iter().zip(&h).map(|(l, t)| (l - t).norm_squared()).sum();
    let energy: f64 = h.iter().map(|t| t.norm_squared()).sum();
    let oracle = noise_law(&design.psi, noise_variance(10.0)) / (energy / h.len() as f64);
    let empirical = err / energy;
    assert!((empirical / oracle - 1.0).abs() < 0.1, "{empirical} vs {oracle}");
}

#[test]
fn labels_draw_fresh_noise_per_sample() {
    let scn = Scenario::build(&small_config()).unwrap();
    let design = &scn.clients[0].label;
    let ls = LsEstimator::new(&design.psi);
    let h = truth(1);
    let twice = vec![h[0].clone(), h[0].clone()];
    let labels = generate_labels(&twice, design, &ls, 10.0, 3, 1, 1, 0).unwrap();
    assert_ne!(labels[0], labels[1]);
    // same sample index reproduces the same noise
    let again = generate_labels(&twice[1..], design, &ls, 10.0, 3, 1, 1, 1).unwrap();
    assert_eq!(again[0], labels[1]);
}

#[test]
fn labels_need_a_full_pilot_budget() {
    let scn = Scenario::build(&small_config()).unwrap();
    let design = &scn.clients[0].short;
    let ls = LsEstimator::new(&design.psi);
    let err = generate_labels(&truth(1), design, &ls, 10.0, 1, 1, 1, 0).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn training_data_splits_every_client() {
    let cfg = small_config();
    let scn = Scenario::build(&cfg).unwrap();
    let data = build_training_data(&scn).unwrap();
    let clients = scn.clients.len();
    assert_eq!(data.clients.len(), clients);
    let val_per = (cfg.training.val_fraction * 40.0).round() as usize;
    assert!(data.clients.iter().all(|c| c.len() == 40 - val_per));
    assert_eq!(data.val.len(), clients * val_per);
    assert_eq!(data.samples() + data.val.len(), clients * 40);
}

#[test]
fn baseline_report_has_one_row_per_method_and_snr() {
    let cfg = small_config();
    let scn = Scenario::build(&cfg).unwrap();
    let test = generate_test_set(&scn).unwrap();
    assert_eq!(test.len(), cfg.eval.test_samples);
    let report = run_baselines(&scn).unwrap();
    let rows = report.rows();
    let keys = report.keys();
    assert_eq!(keys.len(), 4);
    assert!(keys.iter().all(|k| k.method != Method::Dml));
    assert_eq!(rows.len(), keys.len() * cfg.eval.snr_db.len());
    assert!(rows.iter().all(|r| r.n == cfg.eval.test_samples && r.seed == cfg.seed && r.grouped));
    // LS on the long design improves with SNR
    let ls = MethodKey::new(Method::Ls, cfg.baseline_q());
    assert!(report.mean_db(ls, 10.0, None) < report.mean_db(ls, 0.0, None) - 5.0);
}

#[test]
fn results_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let scn = Scenario::build(&small_config()).unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    write_results_csv(&a, &run_baselines(&scn).unwrap().rows()).unwrap();
    write_results_csv(&b, &run_baselines(&scn).unwrap().rows()).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let back = read_results_csv(&a).unwrap();
    let rows = run_baselines(&scn).unwrap().rows();
    assert_eq!(back.len(), rows.len());
    for (x, y) in back.iter().zip(&rows) {
        assert_eq!((&x.method, x.q, x.snr_db), (&y.method, y.q, y.snr_db));
        assert!((x.nmse_db - y.nmse_db).abs() <= 5e-5);
    }
}

#[test]
fn checkpoints_from_other_configurations_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let scn = Scenario::build(&cfg).unwrap();
    let model = ModelParams::init(scn.arch(), 1).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, &cfg.model_hash()).unwrap();
    assert_eq!(load_model(&path, &scn).unwrap(), model);
    // evaluation settings do not touch lineage
    let mut eval_only = cfg.clone();
    eval_only.eval.test_samples = 30;
    assert!(load_model(&path, &Scenario::build(&eval_only).unwrap()).is_ok());
    let mut other = cfg;
    other.seed += 1;
    let err = load_model(&path, &Scenario::build(&other).unwrap()).unwrap_err();
    assert!(matches!(err, Error::Lineage(_)));
}

#[test]
fn baseline_only_experiment_writes_no_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.kind = ExperimentKind::BaselineOnly;
    let manifest = run_experiment(&cfg, dir.path(), RunOptions::default()).unwrap();
    assert!(manifest.classifier_accuracy.is_none());
    assert!(!dir.path().join("model.ckpt").exists());
    let rows = read_results_csv(&dir.path().join("results.csv")).unwrap();
    assert!(!rows.is_empty() && rows.iter().all(|r| r.method != "dml"));
    assert!(manifest.median_nmse_db.keys().all(|k| !k.starts_with("dml")));
}

#[test]
fn end_to_end_experiment_records_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let manifest = run_experiment(&cfg, dir.path(), RunOptions { write_dataset: true, verbose: false }).unwrap();
    for f in ["config.toml", "dataset.bin", "classifier.ckpt", "model.ckpt", "training_log.csv", "results.csv"] {
        assert!(manifest.files.contains_key(f), "{f}");
    }
    let rows = read_results_csv(&dir.path().join("results.csv")).unwrap();
    assert_eq!(rows.iter().filter(|r| r.method == "dml").count(), cfg.eval.snr_db.len());
    let reloaded = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(reloaded.hash(), manifest.config_hash);
    let scn = Scenario::build(&reloaded).unwrap();
    load_model(&dir.path().join("model.ckpt"), &scn).unwrap();
}
