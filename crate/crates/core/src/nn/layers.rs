//! Layer primitives over NHWC feature maps with hand-written backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::SimRng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Which module a multiply-accumulate belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Section {
    #[default]
    Classifier,
    Expert,
    Mapper,
}

/// Instrumentation for forward passes: MACs per module and how often each
/// expert ran.
#[derive(Debug, Clone, Default)]
pub struct Probe {
    pub section: Section,
    pub classifier_macs: u64,
    pub expert_macs: u64,
    pub mapper_macs: u64,
    pub expert_calls: Vec<u64>,
    /// Samples pushed through each expert.
    pub expert_samples: Vec<u64>,
}

impl Probe {
    pub fn total_macs(&self) -> u64 {
        self.classifier_macs + self.expert_macs + self.mapper_macs
    }

    fn add(&mut self, macs: u64) {
        match self.section {
            Section::Classifier => self.classifier_macs += macs,
            Section::Expert => self.expert_macs += macs,
            Section::Mapper => self.mapper_macs += macs,
        }
    }

    pub(crate) fn record_expert(&mut self, expert: usize, samples: usize) {
        if self.expert_calls.len() <= expert {
            self.expert_calls.resize(expert + 1, 0);
            self.expert_samples.resize(expert + 1, 0);
        }
        self.expert_calls[expert] += 1;
        self.expert_samples[expert] += samples as u64;
    }
}

/// Row-major matrix operand, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    pub data: &'a [f64],
    /// Row-major shape as stored.
    pub rows: usize,
    pub cols: usize,
    pub transpose: bool,
}

impl<'a> Operand<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { data, rows, cols, transpose: false }
    }

    pub fn t(self) -> Self {
        Self { transpose: !self.transpose, ..self }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transpose {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transpose {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a·b + beta·c` with `c` row-major `m × n`. Counts `m·n·k` MACs.
pub(crate) fn gemm(a: Operand, b: Operand, c: &mut [f64], beta: f64, probe: &mut Probe) {
    let (m, k) = a.shape();
    let (kb, n) = b.shape();
    assert_eq!(k, kb, "inner dimensions differ");
    assert_eq!(c.len(), m * n, "output shape");
    probe.add((m * n * k) as u64);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: shapes and strides describe exactly the backing slices, which
    // were length-checked above; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Batch of `h × w × c` feature maps, stored `[n][h][w][c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self { n, h, w, c, data: vec![0.0; n * h * w * c] }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, c: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * h * w * c, "feature map size");
        Self { n, h, w, c, data }
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn sample_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let l = self.sample_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    /// Copies the listed samples into a new batch.
    pub fn gather(&self, idx: &[usize]) -> FeatureMap {
        let mut data = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        FeatureMap { n: idx.len(), h: self.h, w: self.w, c: self.c, data }
    }

    /// Writes the samples of `part` back at positions `idx`.
    pub fn scatter(&mut self, idx: &[usize], part: &FeatureMap) {
        for (j, &i) in idx.iter().enumerate() {
            self.sample_mut(i).copy_from_slice(part.sample(j));
        }
    }
}

fn glorot(rng: &mut SimRng, fan_in: usize, fan_out: usize, len: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| rng.random_range(-limit..limit)).collect()
}

/// Stride-1, same-padded `k × k` convolution with bias.
///
/// Weights are a row-major `(k·k·c_in) × c_out` matrix indexed
/// `[ky][kx][ci][co]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub struct ConvCache {
    col: Vec<f64>,
    n: usize,
    h: usize,
    w: usize,
}

impl Conv2d {
    pub fn new(kernel: usize, c_in: usize, c_out: usize, rng: &mut SimRng) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        let kk = kernel * kernel;
        Self {
            kernel,
            c_in,
            c_out,
            weight: glorot(rng, kk * c_in, kk * c_out, kk * c_in * c_out),
            bias: vec![0.0; c_out],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
            ..*self
        }
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.c_in
    }

    fn im2col(&self, x: &FeatureMap) -> Vec<f64> {
        if self.kernel == 1 {
            return x.data.clone();
        }
        let pad = (self.kernel / 2) as isize;
        let (h, w, ci) = (x.h as isize, x.w as isize, self.c_in);
        let pl = self.patch_len();
        let mut col = vec![0.0; x.n * x.positions() * pl];
        let mut row = 0;
        for b in 0..x.n {
            let src = x.sample(b);
            for i in 0..h {
                for j in 0..w {
                    let dst = &mut col[row * pl..(row + 1) * pl];
                    for ky in 0..self.kernel as isize {
                        let si = i + ky - pad;
                        if si < 0 || si >= h {
                            continue;
                        }
                        for kx in 0..self.kernel as isize {
                            let sj = j + kx - pad;
                            if sj < 0 || sj >= w {
                                continue;
                            }
                            let off = ((ky * self.kernel as isize + kx) as usize) * ci;
                            let s = ((si * w + sj) as usize) * ci;
                            dst[off..off + ci].copy_from_slice(&src[s..s + ci]);
                        }
                    }
                    row += 1;
                }
            }
        }
        col
    }

    fn col2im(&self, dcol: &[f64], n: usize, h: usize, w: usize) -> FeatureMap {
        if self.kernel == 1 {
            return FeatureMap::from_vec(n, h, w, self.c_in, dcol.to_vec());
        }
        let pad = (self.kernel / 2) as isize;
        let ci = self.c_in;
        let pl = self.patch_len();
        let mut dx = FeatureMap::zeros(n, h, w, ci);
        let (hh, ww) = (h as isize, w as isize);
        let mut row = 0;
        for b in 0..n {
            let dst = dx.sample_mut(b);
            for i in 0..hh {
                for j in 0..ww {
                    let src = &dcol[row * pl..(row + 1) * pl];
                    for ky in 0..self.kernel as isize {
                        let si = i + ky - pad;
                        if si < 0 || si >= hh {
                            continue;
                        }
                        for kx in 0..self.kernel as isize {
                            let sj = j + kx - pad;
                            if sj < 0 || sj >= ww {
                                continue;
                            }
                            let off = ((ky * self.kernel as isize + kx) as usize) * ci;
                            let d = ((si * ww + sj) as usize) * ci;
                            for c in 0..ci {
                                dst[d + c] += src[off + c];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &FeatureMap, probe: &mut Probe) -> (FeatureMap, ConvCache) {
        assert_eq!(x.c, self.c_in, "conv input channels");
        let col = self.im2col(x);
        let rows = x.n * x.positions();
        let mut out = Vec::with_capacity(rows * self.c_out);
        for _ in 0..rows {
            out.extend_from_slice(&self.bias);
        }
        gemm(
            Operand::new(&col, rows, self.patch_len()),
            Operand::new(&self.weight, self.patch_len(), self.c_out),
            &mut out,
            1.0,
            probe,
        );
        let y = FeatureMap::from_vec(x.n, x.h, x.w, self.c_out, out);
        (y, ConvCache { col, n: x.n, h: x.h, w: x.w })
    }

    /// Accumulates parameter gradients into `grad`; returns the input
    /// gradient when `need_dx`.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: &FeatureMap,
        grad: &mut Conv2d,
        need_dx: bool,
    ) -> Option<FeatureMap> {
        let rows = cache.n * cache.h * cache.w;
        let pl = self.patch_len();
        let mut scratch = Probe::default();
        gemm(
            Operand::new(&cache.col, rows, pl).t(),
            Operand::new(&dy.data, rows, self.c_out),
            &mut grad.weight,
            1.0,
            &mut scratch,
        );
        for r in dy.data.chunks_exact(self.c_out) {
            for (g, v) in grad.bias.iter_mut().zip(r) {
                *g += v;
            }
        }
        if !need_dx {
            return None;
        }
        let mut dcol = vec![0.0; rows * pl];
        gemm(
            Operand::new(&dy.data, rows, self.c_out),
            Operand::new(&self.weight, pl, self.c_out).t(),
            &mut dcol,
            0.0,
            &mut scratch,
        );
        Some(self.col2im(&dcol, cache.n, cache.h, cache.w))
    }
}

/// Per-channel batch statistics seen by one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Rows (batch × positions) the statistics were computed over.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

pub struct BnCache {
    pub xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let c = self.gamma.len();
        Self {
            gamma: vec![0.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![0.0; c],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes with the running statistics, in place.
    pub fn forward_eval(&self, x: &mut FeatureMap) {
        let c = self.channels();
        let scale: Vec<f64> = (0..c)
            .map(|k| self.gamma[k] / (self.running_var[k] + BN_EPS).sqrt())
            .collect();
        for row in x.data.chunks_exact_mut(c) {
            for k in 0..c {
                row[k] = (row[k] - self.running_mean[k]) * scale[k] + self.beta[k];
            }
        }
    }

    /// Normalizes with the statistics of this batch (biased variance).
    pub fn forward_train(&self, x: &FeatureMap) -> (FeatureMap, BnCache, LayerStats) {
        let c = self.channels();
        let rows = x.data.len() / c;
        let mut mean = vec![0.0; c];
        for row in x.data.chunks_exact(c) {
            for k in 0..c {
                mean[k] += row[k];
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for row in x.data.chunks_exact(c) {
            for k in 0..c {
                let d = row[k] - mean[k];
                var[k] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = x.data.clone();
        let mut y = x.data.clone();
        for (xr, yr) in xhat.chunks_exact_mut(c).zip(y.chunks_exact_mut(c)) {
            for k in 0..c {
                xr[k] = (xr[k] - mean[k]) * inv_std[k];
                yr[k] = self.gamma[k] * xr[k] + self.beta[k];
            }
        }
        (
            FeatureMap::from_vec(x.n, x.h, x.w, c, y),
            BnCache { xhat, inv_std },
            LayerStats { mean, var, count: rows },
        )
    }

    pub fn backward(&self, cache: &BnCache, dy: &FeatureMap, grad: &mut BatchNorm) -> FeatureMap {
        let c = self.channels();
        let rows = dy.data.len() / c;
        let mut sum_dxhat = vec![0.0; c];
        let mut sum_dxhat_xhat = vec![0.0; c];
        for (dr, xr) in dy.data.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
            for k in 0..c {
                grad.gamma[k] += dr[k] * xr[k];
                grad.beta[k] += dr[k];
                let dxh = dr[k] * self.gamma[k];
                sum_dxhat[k] += dxh;
                sum_dxhat_xhat[k] += dxh * xr[k];
            }
        }
        let nf = rows as f64;
        let mut dx = dy.data.clone();
        for (dr, xr) in dx.chunks_exact_mut(c).zip(cache.xhat.chunks_exact(c)) {
            for k in 0..c {
                let dxh = dr[k] * self.gamma[k];
                dr[k] = cache.inv_std[k] / nf * (nf * dxh - sum_dxhat[k] - xr[k] * sum_dxhat_xhat[k]);
            }
        }
        FeatureMap::from_vec(dy.n, dy.h, dy.w, c, dx)
    }

    /// Exponential running-average update with momentum [`BN_MOMENTUM`].
    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        for k in 0..self.channels() {
            self.running_mean[k] = BN_MOMENTUM * self.running_mean[k] + (1.0 - BN_MOMENTUM) * mean[k];
            self.running_var[k] = BN_MOMENTUM * self.running_var[k] + (1.0 - BN_MOMENTUM) * var[k];
        }
    }
}

/// Fully connected layer, row-major `n_in × n_out` weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(n_in: usize, n_out: usize, rng: &mut SimRng) -> Self {
        Self {
            n_in,
            n_out,
            weight: glorot(rng, n_in, n_out, n_in * n_out),
            bias: vec![0.0; n_out],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            n_in: self.n_in,
            n_out: self.n_out,
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    /// `x` is `n × n_in` row-major.
    pub fn forward(&self, x: &[f64], n: usize, probe: &mut Probe) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * self.n_out);
        for _ in 0..n {
            out.extend_from_slice(&self.bias);
        }
        gemm(
            Operand::new(x, n, self.n_in),
            Operand::new(&self.weight, self.n_in, self.n_out),
            &mut out,
            1.0,
            probe,
        );
        out
    }

    pub fn backward(&self, x: &[f64], dy: &[f64], n: usize, grad: &mut Dense, need_dx: bool) -> Option<Vec<f64>> {
        let mut scratch = Probe::default();
        gemm(
            Operand::new(x, n, self.n_in).t(),
            Operand::new(dy, n, self.n_out),
            &mut grad.weight,
            1.0,
            &mut scratch,
        );
        for r in dy.chunks_exact(self.n_out) {
            for (g, v) in grad.bias.iter_mut().zip(r) {
                *g += v;
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = vec![0.0; n * self.n_in];
        gemm(
            Operand::new(dy, n, self.n_out),
            Operand::new(&self.weight, self.n_in, self.n_out).t(),
            &mut dx,
            0.0,
            &mut scratch,
        );
        Some(dx)
    }
}

/// Numerically stable softmax of each length-`r` row.
pub fn softmax_rows(logits: &[f64], r: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(r) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    out
}

/// Gradient with respect to logits given `dL/dp` for softmax outputs `p`.
pub fn softmax_backward(p: &[f64], dp: &[f64], r: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(p.len());
    for (pr, dr) in p.chunks_exact(r).zip(dp.chunks_exact(r)) {
        let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
        out.extend(pr.iter().zip(dr).map(|(pi, di)| pi * (di - dot)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = vec![0.0; 4];
        let mut p = Probe::default();
        gemm(Operand::new(&a, 2, 2), Operand::new(&b, 2, 2), &mut c, 0.0, &mut p);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
        gemm(Operand::new(&a, 2, 2).t(), Operand::new(&b, 2, 2), &mut c, 0.0, &mut p);
        assert_eq!(c, vec![26.0, 30.0, 38.0, 44.0]);
        gemm(Operand::new(&a, 2, 2), Operand::new(&b, 2, 2).t(), &mut c, 0.0, &mut p);
        assert_eq!(c, vec![17.0, 23.0, 39.0, 53.0]);
        assert_eq!(p.total_macs(), 24);
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut r = rng::stream(4, &[]);
        let conv = Conv2d::new(3, 2, 3, &mut r);
        let x = FeatureMap::from_vec(2, 3, 2, 2, (0..24).map(|i| (i as f64 * 0.37).sin()).collect());
        let (y, _) = conv.forward(&x, &mut Probe::default());
        for b in 0..2 {
            for i in 0..3isize {
                for j in 0..2isize {
                    for co in 0..3 {
                        let mut acc = conv.bias[co];
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (si, sj) = (i + ky - 1, j + kx - 1);
                                if si < 0 || si >= 3 || sj < 0 || sj >= 2 {
                                    continue;
                                }
                                for ci in 0..2 {
                                    let xv = x.sample(b)[((si * 2 + sj) as usize) * 2 + ci];
                                    let wv = conv.weight[(((ky * 3 + kx) as usize) * 2 + ci) * 3 + co];
                                    acc += xv * wv;
                                }
                            }
                        }
                        let got = y.sample(b)[((i * 2 + j) as usize) * 3 + co];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let bn = BatchNorm::new(3);
        let x = FeatureMap::from_vec(4, 2, 2, 3, (0..48).map(|i| (i as f64).powf(1.3) * 0.1 - 2.0).collect());
        let (_, cache, stats) = bn.forward_train(&x);
        assert_eq!(stats.count, 16);
        for k in 0..3 {
            let vals: Vec<f64> = cache.xhat.iter().skip(k).step_by(3).copied().collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6);
            // ε in the denominator shrinks the variance very slightly
            assert!((v - 1.0).abs() < 1e-4, "{v}");
        }
    }

    #[test]
    fn softmax_on_simplex() {
        let p = softmax_rows(&[1000.0, 1000.0, -1000.0, 3.0, 3.0, 3.0], 3);
        assert!((p[0] - 0.5).abs() < 1e-15 && p[2] == 0.0);
        assert!(p[3..].iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }
}
