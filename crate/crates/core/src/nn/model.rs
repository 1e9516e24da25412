//! Region-gated mixture of experts: classifier gate, convolutional experts and
//! a shared linear mapper.

use serde::{Deserialize, Serialize};

use super::layers::{
    softmax_backward, softmax_rows, BatchNorm, BnCache, Conv2d, ConvCache, Dense, FeatureMap,
    LayerStats, Probe, Section,
};
use crate::rng::{self, SimRng};
use crate::{Error, Result};

/// Shapes of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Pilot tensor shape `(Q1, Q2)`.
    pub q_shape: (usize, usize),
    /// Complex length `D` of the estimated channel.
    pub channel_dim: usize,
    pub regions: usize,
    #[serde(default = "default_expert_width")]
    pub expert_width: usize,
    #[serde(default = "default_expert_depth")]
    pub expert_depth: usize,
    #[serde(default = "default_classifier_width")]
    pub classifier_width: usize,
    #[serde(default = "default_classifier_depth")]
    pub classifier_depth: usize,
}

fn default_expert_width() -> usize {
    32
}
fn default_expert_depth() -> usize {
    3
}
fn default_classifier_width() -> usize {
    16
}
fn default_classifier_depth() -> usize {
    2
}

impl ArchConfig {
    pub fn new(q_shape: (usize, usize), channel_dim: usize, regions: usize) -> Self {
        Self {
            q_shape,
            channel_dim,
            regions,
            expert_width: default_expert_width(),
            expert_depth: default_expert_depth(),
            classifier_width: default_classifier_width(),
            classifier_depth: default_classifier_depth(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (q1, q2) = self.q_shape;
        if q1 == 0 || q2 == 0 || self.channel_dim == 0 || self.regions == 0 {
            return Err(Error::config(format!("degenerate architecture {self:?}")));
        }
        if self.expert_width == 0 || self.expert_depth == 0 || self.classifier_width == 0 || self.classifier_depth == 0 {
            return Err(Error::config("layer widths and depths must be positive"));
        }
        Ok(())
    }

    pub fn positions(&self) -> usize {
        self.q_shape.0 * self.q_shape.1
    }

    pub fn input_len(&self) -> usize {
        self.positions() * 2
    }

    pub fn output_len(&self) -> usize {
        self.channel_dim * 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gating {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm uses the statistics of the current batch.
    Train,
    /// Batch-norm uses running statistics.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Classifier,
    /// Experts and mapper.
    Estimator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutput {
    pub probabilities: Vec<f64>,
    /// 1-based region index of the largest probability, lowest index on ties.
    pub hard_choice: usize,
}

impl GateOutput {
    pub fn from_probabilities(probabilities: Vec<f64>) -> Self {
        let mut best = 0;
        for (i, &p) in probabilities.iter().enumerate() {
            if p > probabilities[best] {
                best = i;
            }
        }
        Self { probabilities, hard_choice: best + 1 }
    }
}

/// 3×3 conv → batch-norm → ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

pub(crate) struct BlockCache {
    conv: ConvCache,
    bn: BnCache,
    out: Vec<f64>,
}

impl ConvBlock {
    fn new(c_in: usize, c_out: usize, rng: &mut SimRng) -> Self {
        Self { conv: Conv2d::new(3, c_in, c_out, rng), bn: BatchNorm::new(c_out) }
    }

    fn zeros_like(&self) -> Self {
        Self { conv: self.conv.zeros_like(), bn: self.bn.zeros_like() }
    }

    fn forward_eval(&self, x: &FeatureMap, probe: &mut Probe) -> FeatureMap {
        let (mut y, _) = self.conv.forward(x, probe);
        self.bn.forward_eval(&mut y);
        y.data.iter_mut().for_each(|v| *v = v.max(0.0));
        y
    }

    fn forward_train(&self, x: &FeatureMap, probe: &mut Probe) -> (FeatureMap, BlockCache, LayerStats) {
        let (pre, conv) = self.conv.forward(x, probe);
        let (mut y, bn, stats) = self.bn.forward_train(&pre);
        y.data.iter_mut().for_each(|v| *v = v.max(0.0));
        let cache = BlockCache { conv, bn, out: y.data.clone() };
        (y, cache, stats)
    }

    fn forward(&self, x: &FeatureMap, mode: Mode, probe: &mut Probe) -> FeatureMap {
        match mode {
            Mode::Eval => self.forward_eval(x, probe),
            Mode::Train => self.forward_train(x, probe).0,
        }
    }

    fn backward(&self, cache: &BlockCache, mut dy: FeatureMap, grad: &mut ConvBlock, need_dx: bool) -> Option<FeatureMap> {
        for (d, o) in dy.data.iter_mut().zip(&cache.out) {
            if *o <= 0.0 {
                *d = 0.0;
            }
        }
        let dpre = self.bn.backward(&cache.bn, &dy, &mut grad.bn);
        self.conv.backward(&cache.conv, &dpre, &mut grad.conv, need_dx)
    }
}

fn stack_forward_train(
    blocks: &[ConvBlock],
    x: &FeatureMap,
    probe: &mut Probe,
) -> (FeatureMap, Vec<BlockCache>, Vec<LayerStats>) {
    let mut caches = Vec::with_capacity(blocks.len());
    let mut stats = Vec::with_capacity(blocks.len());
    let mut h = None::<FeatureMap>;
    for b in blocks {
        let (y, c, s) = b.forward_train(h.as_ref().unwrap_or(x), probe);
        caches.push(c);
        stats.push(s);
        h = Some(y);
    }
    (h.expect("at least one block"), caches, stats)
}

fn stack_backward(blocks: &[ConvBlock], caches: &[BlockCache], dy: FeatureMap, grads: &mut [ConvBlock]) {
    let mut d = dy;
    for i in (0..blocks.len()).rev() {
        match blocks[i].backward(&caches[i], d, &mut grads[i], i > 0) {
            Some(dx) => d = dx,
            None => break,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub blocks: Vec<ConvBlock>,
    pub head: Dense,
}

pub(crate) struct ClassifierCache {
    blocks: Vec<BlockCache>,
    pooled: Vec<f64>,
    shape: (usize, usize, usize, usize),
}

impl Classifier {
    fn new(arch: &ArchConfig, rng: &mut SimRng) -> Self {
        let w = arch.classifier_width;
        let blocks = (0..arch.classifier_depth)
            .map(|i| ConvBlock::new(if i == 0 { 2 } else { w }, w, rng))
            .collect();
        Self { blocks, head: Dense::new(w, arch.regions, rng) }
    }

    fn zeros_like(&self) -> Self {
        Self { blocks: self.blocks.iter().map(ConvBlock::zeros_like).collect(), head: self.head.zeros_like() }
    }

    fn pool(f: &FeatureMap) -> Vec<f64> {
        let mut pooled = vec![0.0; f.n * f.c];
        let inv = 1.0 / f.positions() as f64;
        for b in 0..f.n {
            for row in f.sample(b).chunks_exact(f.c) {
                for (p, v) in pooled[b * f.c..(b + 1) * f.c].iter_mut().zip(row) {
                    *p += v;
                }
            }
            pooled[b * f.c..(b + 1) * f.c].iter_mut().for_each(|p| *p *= inv);
        }
        pooled
    }

    /// Pre-softmax scores, `n × R`.
    pub fn logits(&self, x: &FeatureMap, mode: Mode, probe: &mut Probe) -> Vec<f64> {
        probe.section = Section::Classifier;
        let mut h = None::<FeatureMap>;
        for b in &self.blocks {
            h = Some(b.forward(h.as_ref().unwrap_or(x), mode, probe));
        }
        let f = h.expect("at least one block");
        self.head.forward(&Self::pool(&f), x.n, probe)
    }

    fn forward_train(&self, x: &FeatureMap, probe: &mut Probe) -> (Vec<f64>, ClassifierCache, Vec<LayerStats>) {
        probe.section = Section::Classifier;
        let (f, blocks, stats) = stack_forward_train(&self.blocks, x, probe);
        let pooled = Self::pool(&f);
        let logits = self.head.forward(&pooled, x.n, probe);
        (logits, ClassifierCache { blocks, pooled, shape: (f.n, f.h, f.w, f.c) }, stats)
    }

    fn backward(&self, cache: &ClassifierCache, dlogits: &[f64], grad: &mut Classifier) {
        let (n, h, w, c) = cache.shape;
        let dpooled = self
            .head
            .backward(&cache.pooled, dlogits, n, &mut grad.head, true)
            .expect("requested");
        let inv = 1.0 / (h * w) as f64;
        let mut df = FeatureMap::zeros(n, h, w, c);
        for b in 0..n {
            let src = &dpooled[b * c..(b + 1) * c];
            for row in df.sample_mut(b).chunks_exact_mut(c) {
                for (d, s) in row.iter_mut().zip(src) {
                    *d = s * inv;
                }
            }
        }
        stack_backward(&self.blocks, &cache.blocks, df, &mut grad.blocks);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    pub blocks: Vec<ConvBlock>,
}

impl Expert {
    fn new(arch: &ArchConfig, rng: &mut SimRng) -> Self {
        let w = arch.expert_width;
        Self {
            blocks: (0..arch.expert_depth)
                .map(|i| ConvBlock::new(if i == 0 { 2 } else { w }, w, rng))
                .collect(),
        }
    }

    fn zeros_like(&self) -> Self {
        Self { blocks: self.blocks.iter().map(ConvBlock::zeros_like).collect() }
    }

    /// Feature map `Q1 × Q2 × width` for each sample.
    pub fn forward(&self, x: &FeatureMap, mode: Mode, probe: &mut Probe) -> FeatureMap {
        probe.section = Section::Expert;
        let mut h = None::<FeatureMap>;
        for b in &self.blocks {
            h = Some(b.forward(h.as_ref().unwrap_or(x), mode, probe));
        }
        h.expect("at least one block")
    }
}

/// 1×1 channel-mixing conv, row-major flatten, dense map to `2·D` reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mapper {
    pub mix: Conv2d,
    pub dense: Dense,
}

impl Mapper {
    fn new(arch: &ArchConfig, rng: &mut SimRng) -> Self {
        let w = arch.expert_width;
        Self {
            mix: Conv2d::new(1, w, w, rng),
            dense: Dense::new(arch.positions() * w, arch.output_len(), rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Self { mix: self.mix.zeros_like(), dense: self.dense.zeros_like() }
    }

    /// Packed outputs `n × 2D`: real parts then imaginary parts.
    pub fn forward(&self, z: &FeatureMap, probe: &mut Probe) -> Vec<f64> {
        probe.section = Section::Mapper;
        let (mixed, _) = self.mix.forward(z, probe);
        self.dense.forward(&mixed.data, z.n, probe)
    }

    fn forward_cached(&self, z: &FeatureMap, probe: &mut Probe) -> (Vec<f64>, ConvCache, FeatureMap) {
        probe.section = Section::Mapper;
        let (mixed, cache) = self.mix.forward(z, probe);
        let out = self.dense.forward(&mixed.data, z.n, probe);
        (out, cache, mixed)
    }
}

/// Batch-norm statistics gathered during one training forward pass, one slot
/// per batch-norm layer in [`ModelParams::bn_layers`] order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchStats {
    pub layers: Vec<Option<LayerStats>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub classifier: Classifier,
    pub experts: Vec<Expert>,
    pub mapper: Mapper,
}

impl ModelParams {
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::stream(seed, &[rng::tag::INIT]);
        let classifier = Classifier::new(&arch, &mut r);
        let experts = (0..arch.regions).map(|_| Expert::new(&arch, &mut r)).collect();
        let mapper = Mapper::new(&arch, &mut r);
        Ok(Self { arch, classifier, experts, mapper })
    }

    /// Same shapes, every entry zero (used as a gradient container).
    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch,
            classifier: self.classifier.zeros_like(),
            experts: self.experts.iter().map(Expert::zeros_like).collect(),
            mapper: self.mapper.zeros_like(),
        }
    }

    /// Every tensor in storage order, tagged with its group and whether it is
    /// trainable. Per conv block: weight, bias, gamma, beta, running mean,
    /// running variance; per dense: weight, bias. Classifier blocks and head,
    /// then experts in region order, then mapper mix and dense.
    pub fn tensors(&self) -> Vec<(ParamGroup, bool, &Vec<f64>)> {
        let mut out = Vec::new();
        fn block<'a>(out: &mut Vec<(ParamGroup, bool, &'a Vec<f64>)>, g: ParamGroup, b: &'a ConvBlock) {
            out.push((g, true, &b.conv.weight));
            out.push((g, true, &b.conv.bias));
            out.push((g, true, &b.bn.gamma));
            out.push((g, true, &b.bn.beta));
            out.push((g, false, &b.bn.running_mean));
            out.push((g, false, &b.bn.running_var));
        }
        for b in &self.classifier.blocks {
            block(&mut out, ParamGroup::Classifier, b);
        }
        out.push((ParamGroup::Classifier, true, &self.classifier.head.weight));
        out.push((ParamGroup::Classifier, true, &self.classifier.head.bias));
        for e in &self.experts {
            for b in &e.blocks {
                block(&mut out, ParamGroup::Estimator, b);
            }
        }
        let m = &self.mapper;
        for t in [&m.mix.weight, &m.mix.bias, &m.dense.weight, &m.dense.bias] {
            out.push((ParamGroup::Estimator, true, t));
        }
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, bool, &mut Vec<f64>)> {
        let mut out = Vec::new();
        fn block<'a>(out: &mut Vec<(ParamGroup, bool, &'a mut Vec<f64>)>, g: ParamGroup, b: &'a mut ConvBlock) {
            out.push((g, true, &mut b.conv.weight));
            out.push((g, true, &mut b.conv.bias));
            out.push((g, true, &mut b.bn.gamma));
            out.push((g, true, &mut b.bn.beta));
            out.push((g, false, &mut b.bn.running_mean));
            out.push((g, false, &mut b.bn.running_var));
        }
        for b in &mut self.classifier.blocks {
            block(&mut out, ParamGroup::Classifier, b);
        }
        out.push((ParamGroup::Classifier, true, &mut self.classifier.head.weight));
        out.push((ParamGroup::Classifier, true, &mut self.classifier.head.bias));
        for e in &mut self.experts {
            for b in &mut e.blocks {
                block(&mut out, ParamGroup::Estimator, b);
            }
        }
        let m = &mut self.mapper;
        out.push((ParamGroup::Estimator, true, &mut m.mix.weight));
        out.push((ParamGroup::Estimator, true, &mut m.mix.bias));
        out.push((ParamGroup::Estimator, true, &mut m.dense.weight));
        out.push((ParamGroup::Estimator, true, &mut m.dense.bias));
        out
    }

    pub fn parameter_count(&self, group: Option<ParamGroup>) -> usize {
        self.tensors()
            .into_iter()
            .filter(|(g, t, _)| *t && group.is_none_or(|x| x == *g))
            .map(|(_, _, v)| v.len())
            .sum()
    }

    /// All tensors (including running statistics) concatenated in
    /// [`tensors`](Self::tensors) order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, _, v)| v.iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.tensors().iter().map(|(_, _, v)| v.len()).sum();
        if flat.len() != total {
            return Err(Error::input(format!("parameter blob has {} values, expected {total}", flat.len())));
        }
        let mut off = 0;
        for (_, _, t) in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Batch-norm layers: classifier blocks, then each expert's blocks.
    pub fn bn_layers(&self) -> Vec<&BatchNorm> {
        self.classifier
            .blocks
            .iter()
            .chain(self.experts.iter().flat_map(|e| e.blocks.iter()))
            .map(|b| &b.bn)
            .collect()
    }

    fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm> {
        self.classifier
            .blocks
            .iter_mut()
            .chain(self.experts.iter_mut().flat_map(|e| e.blocks.iter_mut()))
            .map(|b| &mut b.bn)
            .collect()
    }

    fn expert_bn_offset(&self, expert: usize) -> usize {
        self.classifier.blocks.len() + expert * self.arch.expert_depth
    }

    /// Folds weighted batch statistics into the running averages. For each
    /// layer the weighted mean over contributions that carry statistics for
    /// it is used; layers nobody touched are left alone.
    pub fn apply_batch_stats(&mut self, contributions: &[(f64, &BatchStats)]) {
        let mut layers = self.bn_layers_mut();
        for (li, bn) in layers.iter_mut().enumerate() {
            let present: Vec<(f64, &LayerStats)> = contributions
                .iter()
                .filter_map(|(w, s)| s.layers.get(li).and_then(|o| o.as_ref()).map(|l| (*w, l)))
                .collect();
            if present.is_empty() {
                continue;
            }
            let wsum: f64 = present.iter().map(|(w, _)| w).sum();
            let c = bn.channels();
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for (w, l) in &present {
                for k in 0..c {
                    mean[k] += w * l.mean[k];
                    var[k] += w * l.var[k];
                }
            }
            mean.iter_mut().for_each(|m| *m /= wsum);
            var.iter_mut().for_each(|v| *v /= wsum);
            bn.update_running(&mean, &var);
        }
    }

    pub fn check_input(&self, x: &FeatureMap) -> Result<()> {
        let (q1, q2) = self.arch.q_shape;
        if (x.h, x.w, x.c) != (q1, q2, 2) {
            return Err(Error::input(format!(
                "input tensor {}x{}x{} does not match {q1}x{q2}x2",
                x.h, x.w, x.c
            )));
        }
        Ok(())
    }

    pub fn input_batch(&self, data: Vec<f64>) -> Result<FeatureMap> {
        let len = self.arch.input_len();
        if data.is_empty() || data.len() % len != 0 {
            return Err(Error::input(format!("input length {} is not a multiple of {len}", data.len())));
        }
        let (q1, q2) = self.arch.q_shape;
        Ok(FeatureMap::from_vec(data.len() / len, q1, q2, 2, data))
    }

    pub fn classifier_forward(&self, x: &FeatureMap, mode: Mode, probe: &mut Probe) -> Result<Vec<GateOutput>> {
        self.check_input(x)?;
        let logits = self.classifier.logits(x, mode, probe);
        let probs = softmax_rows(&logits, self.arch.regions);
        Ok(probs.chunks_exact(self.arch.regions).map(|p| GateOutput::from_probabilities(p.to_vec())).collect())
    }

    pub fn expert_forward(&self, expert: usize, x: &FeatureMap, mode: Mode, probe: &mut Probe) -> Result<FeatureMap> {
        self.check_input(x)?;
        let e = self
            .experts
            .get(expert)
            .ok_or_else(|| Error::input(format!("expert {expert} out of range")))?;
        probe.record_expert(expert, x.n);
        Ok(e.forward(x, mode, probe))
    }

    pub fn mapper_forward(&self, z: &FeatureMap, probe: &mut Probe) -> Result<Vec<f64>> {
        let (q1, q2) = self.arch.q_shape;
        if (z.h, z.w, z.c) != (q1, q2, self.arch.expert_width) {
            return Err(Error::input("feature map shape does not match the mapper"));
        }
        Ok(self.mapper.forward(z, probe))
    }

    /// Full estimator on a batch. Returns packed outputs (`n × 2D`) and the
    /// gate decisions. Hard gating sends each sample only through its chosen
    /// expert.
    pub fn estimator_forward(
        &self,
        x: &FeatureMap,
        gating: Gating,
        mode: Mode,
        probe: &mut Probe,
    ) -> Result<(Vec<f64>, Vec<GateOutput>)> {
        let gates = self.classifier_forward(x, mode, probe)?;
        let w = self.arch.expert_width;
        let mut z = FeatureMap::zeros(x.n, x.h, x.w, w);
        match gating {
            Gating::Hard => {
                for (e, idx) in route_groups(&gates, self.arch.regions).iter().enumerate() {
                    if idx.is_empty() {
                        continue;
                    }
                    let part = self.expert_forward(e, &x.gather(idx), mode, probe)?;
                    z.scatter(idx, &part);
                }
            }
            Gating::Soft => {
                for e in 0..self.arch.regions {
                    let ze = self.expert_forward(e, x, mode, probe)?;
                    mix_into(&mut z, &ze, &gates, e);
                }
            }
        }
        Ok((self.mapper.forward(&z, probe), gates))
    }
}

/// Sample indices routed to each expert (0-based).
pub fn route_groups(gates: &[GateOutput], regions: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); regions];
    for (i, g) in gates.iter().enumerate() {
        groups[g.hard_choice - 1].push(i);
    }
    groups
}

fn mix_into(z: &mut FeatureMap, ze: &FeatureMap, gates: &[GateOutput], e: usize) {
    for (b, g) in gates.iter().enumerate() {
        let p = g.probabilities[e];
        for (d, s) in z.sample_mut(b).iter_mut().zip(ze.sample(b)) {
            *d += p * s;
        }
    }
}

/// What a gradient computation optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Cross-entropy of the classifier against the true regions.
    Classification,
    /// Empirical NMSE of the estimator. The classifier runs frozen in eval
    /// mode unless `train_gate` is set, which under soft gating also
    /// backpropagates into the classifier (train-mode batch-norm).
    Estimation { gating: Gating, train_gate: bool },
}

/// Inputs for one gradient computation.
pub struct Batch<'a> {
    pub inputs: &'a FeatureMap,
    /// Packed targets `n × 2D` (estimation).
    pub targets: Option<&'a [f64]>,
    /// True 1-based regions (classification).
    pub regions: Option<&'a [usize]>,
}

/// Gradient of the mean batch loss, shaped like the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub params: ModelParams,
    pub bn_stats: BatchStats,
    pub loss: f64,
    pub samples: usize,
}

impl Gradients {
    pub fn scale(&mut self, a: f64) {
        for (_, trainable, t) in self.params.tensors_mut() {
            if trainable {
                t.iter_mut().for_each(|v| *v *= a);
            }
        }
    }

    /// Trainable entries of one group, concatenated.
    pub fn flat(&self, group: Option<ParamGroup>) -> Vec<f64> {
        self.params
            .tensors()
            .into_iter()
            .filter(|(g, t, _)| *t && group.is_none_or(|x| x == *g))
            .flat_map(|(_, _, v)| v.iter().copied())
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.flat(None).iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Exact gradients of the selected loss on `batch`, multiplied by
/// `loss_scale`.
pub fn compute_gradients(model: &ModelParams, batch: &Batch, objective: Objective, loss_scale: f64) -> Result<Gradients> {
    let x = batch.inputs;
    model.check_input(x)?;
    if x.n == 0 {
        return Err(Error::input("empty batch"));
    }
    let n = x.n;
    let r = model.arch.regions;
    let mut grad = model.zeros_like();
    let mut stats = BatchStats { layers: vec![None; model.bn_layers().len()] };
    let mut probe = Probe::default();

    let loss = match objective {
        Objective::Classification => {
            let regions = batch.regions.ok_or_else(|| Error::input("classification needs region labels"))?;
            check_regions(regions, n, r)?;
            let (logits, cache, st) = model.classifier.forward_train(x, &mut probe);
            for (i, s) in st.into_iter().enumerate() {
                stats.layers[i] = Some(s);
            }
            let p = softmax_rows(&logits, r);
            let mut loss = 0.0;
            let mut dlogits = vec![0.0; n * r];
            for b in 0..n {
                let t = regions[b] - 1;
                let pt = p[b * r + t];
                loss += -pt.max(super::loss::CE_CLAMP).ln();
                if pt >= super::loss::CE_CLAMP {
                    for j in 0..r {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dlogits[b * r + j] = loss_scale * (p[b * r + j] - onehot) / n as f64;
                    }
                }
            }
            model.classifier.backward(&cache, &dlogits, &mut grad.classifier);
            loss / n as f64
        }
        Objective::Estimation { gating, train_gate } => {
            let targets = batch.targets.ok_or_else(|| Error::input("estimation needs target channels"))?;
            let out_len = model.arch.output_len();
            if targets.len() != n * out_len {
                return Err(Error::input(format!("targets length {} != {}", targets.len(), n * out_len)));
            }
            let backprop_gate = train_gate && gating == Gating::Soft;
            let (gates, gate_cache) = if backprop_gate {
                let (logits, cache, st) = model.classifier.forward_train(x, &mut probe);
                for (i, s) in st.into_iter().enumerate() {
                    stats.layers[i] = Some(s);
                }
                let p = softmax_rows(&logits, r);
                let g = p.chunks_exact(r).map(|c| GateOutput::from_probabilities(c.to_vec())).collect::<Vec<_>>();
                (g, Some(cache))
            } else {
                (model.classifier_forward(x, Mode::Eval, &mut probe)?, None)
            };

            let w = model.arch.expert_width;
            let mut z = FeatureMap::zeros(n, x.h, x.w, w);
            let mut expert_runs = Vec::new();
            match gating {
                Gating::Hard => {
                    for (e, idx) in route_groups(&gates, r).into_iter().enumerate() {
                        if idx.is_empty() {
                            continue;
                        }
                        probe.section = Section::Expert;
                        let (ze, caches, st) = stack_forward_train(&model.experts[e].blocks, &x.gather(&idx), &mut probe);
                        z.scatter(&idx, &ze);
                        expert_runs.push((e, idx, ze, caches, st));
                    }
                }
                Gating::Soft => {
                    for e in 0..r {
                        probe.section = Section::Expert;
                        let (ze, caches, st) = stack_forward_train(&model.experts[e].blocks, x, &mut probe);
                        mix_into(&mut z, &ze, &gates, e);
                        expert_runs.push((e, (0..n).collect(), ze, caches, st));
                    }
                }
            }
            let (out, mix_cache, mixed) = model.mapper.forward_cached(&z, &mut probe);

            let mut loss = 0.0;
            let mut dout = vec![0.0; n * out_len];
            for b in 0..n {
                let h = &targets[b * out_len..(b + 1) * out_len];
                let o = &out[b * out_len..(b + 1) * out_len];
                let energy: f64 = h.iter().map(|v| v * v).sum();
                if energy == 0.0 {
                    return Err(Error::input("zero-energy target channel"));
                }
                let err: f64 = o.iter().zip(h).map(|(a, t)| (a - t) * (a - t)).sum();
                loss += err / energy;
                let s = loss_scale * 2.0 / (energy * n as f64);
                for ((d, a), t) in dout[b * out_len..(b + 1) * out_len].iter_mut().zip(o).zip(h) {
                    *d = s * (a - t);
                }
            }

            let dmixed = model
                .mapper
                .dense
                .backward(&mixed.data, &dout, n, &mut grad.mapper.dense, true)
                .expect("requested");
            let dmixed = FeatureMap::from_vec(n, x.h, x.w, w, dmixed);
            let dz = model
                .mapper
                .mix
                .backward(&mix_cache, &dmixed, &mut grad.mapper.mix, true)
                .expect("requested");

            let mut dp = vec![0.0; n * r];
            for (e, idx, ze, caches, st) in expert_runs {
                let off = model.expert_bn_offset(e);
                for (i, s) in st.into_iter().enumerate() {
                    stats.layers[off + i] = Some(s);
                }
                let mut dze = dz.gather(&idx);
                if gating == Gating::Soft {
                    for b in 0..n {
                        let p = gates[b].probabilities[e];
                        let zb = ze.sample(b);
                        let db = dze.sample_mut(b);
                        dp[b * r + e] = db.iter().zip(zb).map(|(d, v)| d * v).sum();
                        db.iter_mut().for_each(|d| *d *= p);
                    }
                }
                stack_backward(&model.experts[e].blocks, &caches, dze, &mut grad.experts[e].blocks);
            }
            if let Some(cache) = gate_cache {
                let p: Vec<f64> = gates.iter().flat_map(|g| g.probabilities.iter().copied()).collect();
                let dlogits = softmax_backward(&p, &dp, r);
                model.classifier.backward(&cache, &dlogits, &mut grad.classifier);
            }
            loss / n as f64
        }
    };
    Ok(Gradients { params: grad, bn_stats: stats, loss: loss * loss_scale, samples: n })
}

fn check_regions(regions: &[usize], n: usize, r: usize) -> Result<()> {
    if regions.len() != n {
        return Err(Error::input("one region label per sample required"));
    }
    if let Some(bad) = regions.iter().find(|&&x| x == 0 || x > r) {
        return Err(Error::input(format!("region label {bad} outside 1..={r}")));
    }
    Ok(())
}
