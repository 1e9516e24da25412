//! Synchronous FedAvg over regional clients.
//!
//! Training has two stages. The classifier gate is first fit centrally on
//! pooled region labels, then frozen; experts and mapper are trained by
//! rounds in which every client computes a mini-batch gradient on its own
//! data, the server forms the data-weighted mean `Σ p g` and applies one
//! optimizer step. Only [`RoundMessage`]s cross the client boundary.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Aggregation;
use crate::estimators::to_db;
use crate::nn::{
    adam_step, compute_gradients, sgd_step, AdamConfig, AdamState, Batch, FeatureMap, Gating, Gradients, Mode,
    ModelParams, Objective, ParamGroup, Probe,
};
use crate::rng;
use crate::{Error, Result};

/// Training data held by one (region, user) client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub region: usize,
    pub user: usize,
    /// Region label in the model's gate space (1-based).
    pub gate_label: usize,
    pub q_shape: (usize, usize),
    pub target_len: usize,
    /// `len × Q1·Q2·2` encoded observations.
    pub inputs: Vec<f64>,
    /// `len × target_len` packed training targets.
    pub targets: Vec<f64>,
}

impl ClientDataset {
    pub fn input_len(&self) -> usize {
        self.q_shape.0 * self.q_shape.1 * 2
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.len() % self.input_len() != 0 || self.target_len == 0 || self.targets.len() != self.len() * self.target_len {
            return Err(Error::input(format!("client ({}, {}) has inconsistent buffers", self.region, self.user)));
        }
        Ok(())
    }

    pub fn gather(&self, idx: &[usize]) -> (FeatureMap, Vec<f64>) {
        let il = self.input_len();
        let tl = self.target_len;
        let mut x = Vec::with_capacity(idx.len() * il);
        let mut t = Vec::with_capacity(idx.len() * tl);
        for &i in idx {
            x.extend_from_slice(&self.inputs[i * il..(i + 1) * il]);
            t.extend_from_slice(&self.targets[i * tl..(i + 1) * tl]);
        }
        (FeatureMap::from_vec(idx.len(), self.q_shape.0, self.q_shape.1, 2, x), t)
    }
}

/// Held-out observations with ground-truth channels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationSet {
    pub q_shape: (usize, usize),
    pub target_len: usize,
    pub inputs: Vec<f64>,
    /// Packed ground-truth channels.
    pub truth: Vec<f64>,
    /// Gate-space region labels.
    pub regions: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationReport {
    pub nmse: f64,
    pub accuracy: f64,
}

impl ValidationSet {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn push(&mut self, input: &[f64], truth: &[f64], region: usize) {
        self.inputs.extend_from_slice(input);
        self.truth.extend_from_slice(truth);
        self.regions.push(region);
    }

    /// Mean NMSE against ground truth and gate accuracy, eval mode.
    pub fn evaluate(&self, model: &ModelParams, gating: Gating) -> Result<ValidationReport> {
        if self.is_empty() {
            return Err(Error::input("empty validation set"));
        }
        let il = self.q_shape.0 * self.q_shape.1 * 2;
        let tl = self.target_len;
        let mut nmse_sum = 0.0;
        let mut correct = 0usize;
        const CHUNK: usize = 512;
        for start in (0..self.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(self.len());
            let x = model.input_batch(self.inputs[start * il..end * il].to_vec())?;
            let (out, gates) = model.estimator_forward(&x, gating, Mode::Eval, &mut Probe::default())?;
            for (j, i) in (start..end).enumerate() {
                let h = &self.truth[i * tl..(i + 1) * tl];
                let o = &out[j * tl..(j + 1) * tl];
                let e: f64 = h.iter().map(|v| v * v).sum();
                nmse_sum += o.iter().zip(h).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / e;
                if gates[j].hard_choice == self.regions[i] {
                    correct += 1;
                }
            }
        }
        Ok(ValidationReport { nmse: nmse_sum / self.len() as f64, accuracy: correct as f64 / self.len() as f64 })
    }
}

/// Round and optimizer settings for stage-two training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub epochs: usize,
    /// Overrides `epochs × rounds_per_epoch` when set.
    pub rounds: Option<usize>,
    pub batch_size: usize,
    pub base_lr: f64,
    /// The step size halves every this many epochs.
    pub halve_every_epochs: usize,
    pub aggregation: Aggregation,
    /// Local optimizer steps per round. With more than one, the client
    /// returns its model delta divided by `local_lr` in place of a gradient.
    pub local_steps: usize,
    pub local_lr: f64,
    pub gating: Gating,
    /// Validate every this many rounds; 0 validates at the end of each epoch.
    pub val_every_rounds: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            rounds: None,
            batch_size: 256,
            base_lr: 1e-3,
            halve_every_epochs: 30,
            aggregation: Aggregation::Adam,
            local_steps: 1,
            local_lr: 1e-3,
            gating: Gating::Hard,
            val_every_rounds: 0,
        }
    }
}

impl FedConfig {
    /// `⌈max client size / batch⌉`.
    pub fn rounds_per_epoch(&self, clients: &[ClientDataset]) -> usize {
        let n = clients.iter().map(ClientDataset::len).max().unwrap_or(0);
        n.div_ceil(self.batch_size).max(1)
    }

    pub fn total_rounds(&self, clients: &[ClientDataset]) -> usize {
        self.rounds.unwrap_or(self.epochs * self.rounds_per_epoch(clients))
    }

    /// Step size during the 0-based `epoch`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.base_lr * 0.5f64.powi((epoch / self.halve_every_epochs) as i32)
    }
}

/// `p = |D| / Σ|D|`.
pub fn aggregation_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::config("all client datasets are empty"));
    }
    Ok(sizes.iter().map(|&s| s as f64 / total as f64).collect())
}

/// Positions of `client`'s mini-batch in a round. Each epoch reshuffles;
/// clients smaller than the largest wrap around their permutation.
pub fn batch_indices(client: &ClientDataset, batch: usize, seed: u64, epoch: usize, slot: usize) -> Vec<usize> {
    let n = client.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, &[rng::tag::SHUFFLE, client.region as u64, client.user as u64, epoch as u64]);
    perm.shuffle(&mut r);
    let take = batch.min(n);
    (0..take).map(|j| perm[(slot * batch + j) % n]).collect()
}

/// Experts and mapper under a frozen classifier.
fn stage_two(gating: Gating) -> Objective {
    Objective::Estimation { gating, train_gate: false }
}

/// One client's contribution for a round: the empirical-NMSE gradient on its
/// mini-batch, routed by the frozen classifier.
pub fn client_local_gradient(
    client: &ClientDataset,
    model: &ModelParams,
    cfg: &FedConfig,
    seed: u64,
    round: usize,
    rounds_per_epoch: usize,
) -> Result<Gradients> {
    let epoch = round / rounds_per_epoch;
    let slot = round % rounds_per_epoch;
    if cfg.local_steps <= 1 {
        let idx = batch_indices(client, cfg.batch_size, seed, epoch, slot);
        let (x, t) = client.gather(&idx);
        let batch = Batch { inputs: &x, targets: Some(&t), regions: None };
        return compute_gradients(model, &batch, stage_two(cfg.gating), 1.0);
    }
    let mut local = model.clone();
    let mut loss = 0.0;
    let mut samples = 0;
    let mut stats = None;
    for s in 0..cfg.local_steps {
        let idx = batch_indices(client, cfg.batch_size, seed, epoch, slot * cfg.local_steps + s);
        let (x, t) = client.gather(&idx);
        let batch = Batch { inputs: &x, targets: Some(&t), regions: None };
        let g = compute_gradients(&local, &batch, stage_two(cfg.gating), 1.0)?;
        sgd_step(&mut local, &g.params, cfg.local_lr, Some(ParamGroup::Estimator));
        local.apply_batch_stats(&[(1.0, &g.bn_stats)]);
        loss += g.loss;
        samples += g.samples;
        stats = Some(g.bn_stats);
    }
    let mut delta = model.zeros_like();
    for ((_, trainable, d), ((_, _, a), (_, _, b))) in
        delta.tensors_mut().into_iter().zip(model.tensors().into_iter().zip(local.tensors()))
    {
        if trainable {
            for i in 0..d.len() {
                d[i] = (a[i] - b[i]) / cfg.local_lr;
            }
        }
    }
    Ok(Gradients {
        params: delta,
        bn_stats: stats.unwrap_or_default(),
        loss: loss / cfg.local_steps as f64,
        samples: samples / cfg.local_steps,
    })
}

/// What a client sends to the server in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMessage {
    pub round: usize,
    pub region: usize,
    pub user: usize,
    pub dataset_size: usize,
    pub contribution: Gradients,
}

/// Server-side optimizer for the aggregated gradient.
#[derive(Debug, Clone)]
pub enum ServerOptimizer {
    Plain,
    Adam(Box<AdamState>),
}

impl ServerOptimizer {
    pub fn new(kind: Aggregation, model: &ModelParams) -> Self {
        match kind {
            Aggregation::Plain => Self::Plain,
            Aggregation::Adam => Self::Adam(Box::new(AdamState::new(model, AdamConfig::default()))),
        }
    }

    fn step(&mut self, model: &mut ModelParams, grad: &ModelParams, lr: f64, group: ParamGroup) {
        match self {
            Self::Plain => sgd_step(model, grad, lr, Some(group)),
            Self::Adam(state) => adam_step(model, grad, state, lr, Some(group)),
        }
    }
}

/// Weighted aggregation `Σ p g` followed by one optimizer step on the
/// experts and mapper, and the matching running-statistics update. Returns
/// the weighted mean client loss.
pub fn fedavg_aggregate(
    messages: &[RoundMessage],
    weights: &[f64],
    model: &mut ModelParams,
    lr: f64,
    optimizer: &mut ServerOptimizer,
) -> Result<f64> {
    if messages.len() != weights.len() || messages.is_empty() {
        return Err(Error::config("one weight per contribution required"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-12 || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::config(format!("aggregation weights sum to {sum}, not 1")));
    }
    let mut agg = model.zeros_like();
    for (msg, &p) in messages.iter().zip(weights) {
        for ((_, trainable, a), (_, _, g)) in agg.tensors_mut().into_iter().zip(msg.contribution.params.tensors()) {
            if trainable {
                for (ai, gi) in a.iter_mut().zip(g) {
                    *ai += p * gi;
                }
            }
        }
    }
    optimizer.step(model, &agg, lr, ParamGroup::Estimator);
    let stats: Vec<(f64, &crate::nn::BatchStats)> =
        messages.iter().zip(weights).map(|(m, &p)| (p, &m.contribution.bn_stats)).collect();
    model.apply_batch_stats(&stats);
    Ok(messages.iter().zip(weights).map(|(m, p)| p * m.contribution.loss).sum())
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub round: usize,
    /// 1-based epoch the round belongs to (0 for the initial row).
    pub epoch: usize,
    pub lr: f64,
    pub loss: Option<f64>,
    pub val_nmse_db: Option<f64>,
    pub accuracy: Option<f64>,
}

pub fn write_log_csv<W: Write>(mut w: W, rows: &[LogRow]) -> Result<()> {
    writeln!(w, "round,epoch,lr,loss,val_nmse_db,classifier_accuracy")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        writeln!(w, "{},{},{:e},{},{},{}", r.round, r.epoch, r.lr, opt(r.loss), opt(r.val_nmse_db), opt(r.accuracy))?;
    }
    Ok(())
}

/// Called after each completed epoch with the 1-based epoch and the model.
pub type EpochHook<'a> = dyn FnMut(usize, &ModelParams) -> Result<()> + 'a;

fn validation_row(
    val: Option<&ValidationSet>,
    model: &ModelParams,
    gating: Gating,
) -> Result<(Option<f64>, Option<f64>)> {
    match val {
        Some(v) if !v.is_empty() => {
            let r = v.evaluate(model, gating)?;
            Ok((Some(to_db(r.nmse)), Some(r.accuracy)))
        }
        _ => Ok((None, None)),
    }
}

fn due(cfg: &FedConfig, round: usize, rpe: usize) -> bool {
    if cfg.val_every_rounds > 0 {
        round % cfg.val_every_rounds == 0
    } else {
        round % rpe == 0
    }
}

/// Stage-two DML training. Deterministic in `seed`.
pub fn train(
    mut model: ModelParams,
    clients: &[ClientDataset],
    cfg: &FedConfig,
    val: Option<&ValidationSet>,
    seed: u64,
    mut hook: Option<&mut EpochHook>,
) -> Result<(ModelParams, Vec<LogRow>)> {
    for c in clients {
        c.validate()?;
    }
    let weights = aggregation_weights(&clients.iter().map(ClientDataset::len).collect::<Vec<_>>())?;
    let rpe = cfg.rounds_per_epoch(clients);
    let total = cfg.total_rounds(clients);
    let mut optimizer = ServerOptimizer::new(cfg.aggregation, &model);
    let (v, a) = validation_row(val, &model, cfg.gating)?;
    let mut log = vec![LogRow { round: 0, epoch: 0, lr: cfg.learning_rate(0), loss: None, val_nmse_db: v, accuracy: a }];
    for t in 0..total {
        let epoch = t / rpe;
        let lr = cfg.learning_rate(epoch);
        // broadcast: every client sees the same immutable model
        let messages = clients
            .par_iter()
            .map(|c| {
                let g = client_local_gradient(c, &model, cfg, seed, t, rpe)?;
                Ok(RoundMessage { round: t, region: c.region, user: c.user, dataset_size: c.len(), contribution: g })
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = fedavg_aggregate(&messages, &weights, &mut model, lr, &mut optimizer)?;
        let round = t + 1;
        let (v, a) = if due(cfg, round, rpe) || round == total { validation_row(val, &model, cfg.gating)? } else { (None, None) };
        log.push(LogRow { round, epoch: epoch + 1, lr, loss: Some(loss), val_nmse_db: v, accuracy: a });
        if round % rpe == 0 {
            if let Some(h) = hook.as_deref_mut() {
                h(round / rpe, &model)?;
            }
        }
    }
    Ok((model, log))
}

/// Plain mini-batch training on one dataset with the same batch order,
/// schedule and optimizer as [`train`]; the reference for FedAvg
/// equivalence.
pub fn train_centralized(
    mut model: ModelParams,
    data: &ClientDataset,
    cfg: &FedConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<f64>)> {
    data.validate()?;
    if data.is_empty() {
        return Err(Error::config("empty dataset"));
    }
    let rpe = data.len().div_ceil(cfg.batch_size).max(1);
    let total = cfg.rounds.unwrap_or(cfg.epochs * rpe);
    let mut optimizer = ServerOptimizer::new(cfg.aggregation, &model);
    let mut losses = Vec::with_capacity(total);
    for t in 0..total {
        let epoch = t / rpe;
        let idx = batch_indices(data, cfg.batch_size, seed, epoch, t % rpe);
        let (x, tg) = data.gather(&idx);
        let batch = Batch { inputs: &x, targets: Some(&tg), regions: None };
        let g = compute_gradients(&model, &batch, stage_two(cfg.gating), 1.0)?;
        optimizer.step(&mut model, &g.params, cfg.learning_rate(epoch), ParamGroup::Estimator);
        model.apply_batch_stats(&[(1.0, &g.bn_stats)]);
        losses.push(g.loss);
    }
    Ok((model, losses))
}

/// Settings for stage-one classifier training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    /// Held-out accuracy (training accuracy when no validation set).
    pub accuracy: f64,
}

/// Gate accuracy on pooled client data, eval mode.
pub fn gate_accuracy(model: &ModelParams, clients: &[ClientDataset]) -> Result<f64> {
    let mut correct = 0;
    let mut total = 0;
    for c in clients {
        let il = c.input_len();
        for start in (0..c.len()).step_by(512) {
            let end = (start + 512).min(c.len());
            let x = model.input_batch(c.inputs[start * il..end * il].to_vec())?;
            let gates = model.classifier_forward(&x, Mode::Eval, &mut Probe::default())?;
            correct += gates.iter().filter(|g| g.hard_choice == c.gate_label).count();
            total += end - start;
        }
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

/// Stage one: fits the classifier on all clients' data pooled centrally with
/// cross-entropy against their region labels. Leaves every other parameter
/// untouched.
pub fn pretrain_classifier(
    model: &mut ModelParams,
    clients: &[ClientDataset],
    cfg: &PretrainConfig,
    val: Option<&ValidationSet>,
    seed: u64,
) -> Result<PretrainReport> {
    if clients.iter().all(ClientDataset::is_empty) {
        return Err(Error::config("classifier pretraining needs data"));
    }
    if model.arch.regions == 1 {
        return Ok(PretrainReport { epoch_losses: vec![], accuracy: 1.0 });
    }
    let pool: Vec<(usize, usize)> =
        clients.iter().enumerate().flat_map(|(ci, c)| (0..c.len()).map(move |i| (ci, i))).collect();
    let mut adam = AdamState::new(model, AdamConfig::default());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let q_shape = model.arch.q_shape;
    for epoch in 0..cfg.epochs {
        let mut order = pool.clone();
        order.shuffle(&mut rng::stream(seed, &[rng::tag::SHUFFLE, u64::MAX, epoch as u64]));
        let mut loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = Vec::new();
            let mut regions = Vec::with_capacity(chunk.len());
            for &(ci, i) in chunk {
                let c = &clients[ci];
                let il = c.input_len();
                x.extend_from_slice(&c.inputs[i * il..(i + 1) * il]);
                regions.push(c.gate_label);
            }
            let x = FeatureMap::from_vec(chunk.len(), q_shape.0, q_shape.1, 2, x);
            let batch = Batch { inputs: &x, targets: None, regions: Some(&regions) };
            let g = compute_gradients(model, &batch, Objective::Classification, 1.0)?;
            adam_step(model, &g.params, &mut adam, cfg.lr, Some(ParamGroup::Classifier));
            model.apply_batch_stats(&[(1.0, &g.bn_stats)]);
            loss += g.loss;
            batches += 1;
        }
        epoch_losses.push(loss / batches as f64);
    }
    let accuracy = match val {
        Some(v) if !v.is_empty() => v.evaluate(model, Gating::Hard)?.accuracy,
        _ => gate_accuracy(model, clients)?,
    };
    Ok(PretrainReport { epoch_losses, accuracy })
}
