//! Proxy embedding space, temporal losses, latent window fusion and the
//! finite-difference trainer for the temporal convolution kernel.
//!
//! Embeddings are block-average pooled heatmaps flattened row-major and
//! L2-normalized. An all-zero input maps to the first basis vector so that
//! cosine similarities stay defined.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::{
    correlator_for, kl_div, sep_softmax, ProbMap, Spectrum, DEFAULT_TEMPERATURE,
};
use crate::error::{Error, Result};
use crate::heatmap::{Heatmap, SensorGeometry};

/// Spatial kernel side length of the temporal convolution.
pub const SPATIAL_TAPS: usize = 3;
const TAPS: usize = SPATIAL_TAPS * SPATIAL_TAPS;
const CENTER_TAP: usize = TAPS / 2;

/// Norm below which a vector counts as zero.
const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pooling {
    pub pooled_h: usize,
    pub pooled_w: usize,
}

impl Default for Pooling {
    fn default() -> Self {
        Self {
            pooled_h: 8,
            pooled_w: 8,
        }
    }
}

impl Pooling {
    pub fn dim(&self) -> usize {
        self.pooled_h * self.pooled_w
    }

    pub fn validate(&self, geom: &SensorGeometry) -> Result<()> {
        if self.pooled_h == 0
            || self.pooled_w == 0
            || self.pooled_h > geom.rows()
            || self.pooled_w > geom.cols()
        {
            return Err(Error::param(format!(
                "pooling {}x{} does not fit a {}x{} grid",
                self.pooled_h,
                self.pooled_w,
                geom.rows(),
                geom.cols()
            )));
        }
        Ok(())
    }
}

/// Block index of every fine cell along one axis.
fn block_index(fine: usize, coarse: usize) -> Vec<usize> {
    let mut idx = vec![0; fine];
    for b in 0..coarse {
        for slot in &mut idx[b * fine / coarse..(b + 1) * fine / coarse] {
            *slot = b;
        }
    }
    idx
}

/// Unit-norm feature vector over a `pooled_h x pooled_w` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pooling: Pooling,
    values: Vec<f64>,
}

impl Embedding {
    /// Normalizes `raw`; a zero vector becomes the first basis vector.
    pub fn from_raw(pooling: Pooling, raw: Vec<f64>) -> Result<Self> {
        if raw.len() != pooling.dim() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {}x{} embedding",
                raw.len(),
                pooling.pooled_h,
                pooling.pooled_w
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("embedding contains non-finite values"));
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < ZERO_NORM {
            return Ok(Self::sentinel(pooling));
        }
        Ok(Self {
            pooling,
            values: raw.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn sentinel(pooling: Pooling) -> Self {
        let mut values = vec![0.0; pooling.dim()];
        values[0] = 1.0;
        Self { pooling, values }
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn negated(&self) -> Self {
        Self {
            pooling: self.pooling,
            values: self.values.iter().map(|v| -v).collect(),
        }
    }
}

fn pool_raw(h: &Heatmap, pooling: Pooling) -> Vec<f64> {
    let (rows, cols) = (h.rows(), h.cols());
    let ri = block_index(rows, pooling.pooled_h);
    let ci = block_index(cols, pooling.pooled_w);
    let mut sums = vec![0.0; pooling.dim()];
    let mut counts = vec![0usize; pooling.dim()];
    for r in 0..rows {
        for c in 0..cols {
            let k = ri[r] * pooling.pooled_w + ci[c];
            sums[k] += h.get(r, c) as f64;
            counts[k] += 1;
        }
    }
    sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect()
}

/// Block-average pool, flatten row-major, L2-normalize.
pub fn embed(h: &Heatmap, pooling: Pooling) -> Result<Embedding> {
    pooling.validate(h.geometry())?;
    Embedding::from_raw(pooling, pool_raw(h, pooling))
}

fn decode_values(e: &[f64], pooling: Pooling, geom: &SensorGeometry) -> Vec<f64> {
    let (rows, cols) = (geom.rows(), geom.cols());
    let pmax = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(pmax > 0.0) {
        return vec![0.0; rows * cols];
    }
    let target = (pmax * (e.len() as f64).sqrt()).min(1.0);
    let scale = target / pmax;
    let ri = block_index(rows, pooling.pooled_h);
    let ci = block_index(cols, pooling.pooled_w);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let base = ri[r] * pooling.pooled_w;
        for c in 0..cols {
            out.push((e[base + ci[c]] * scale).clamp(0.0, 1.0));
        }
    }
    out
}

/// Nearest-neighbor upsample of the pooled grid, rescaled so the maximum
/// becomes `min(1, max * sqrt(D))`. Negative entries clamp to zero.
pub fn decode(e: &Embedding, geom: &SensorGeometry) -> Result<Heatmap> {
    e.pooling.validate(geom)?;
    Heatmap::from_f64_clamped(*geom, &decode_values(&e.values, e.pooling, geom))
}

pub fn cosine_sim(a: &Embedding, b: &Embedding) -> f64 {
    assert_eq!(a.dim(), b.dim(), "embedding dimensions differ");
    a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum()
}

/// Mean of `1 - cos(e_t, e_{t-1})` over consecutive pairs.
pub fn temporal_sim_loss(embeds: &[Embedding]) -> Result<f64> {
    if embeds.len() < 2 {
        return Err(Error::Insufficient(format!(
            "temporal similarity needs 2 embeddings, got {}",
            embeds.len()
        )));
    }
    let total: f64 = embeds.windows(2).map(|p| 1.0 - cosine_sim(&p[1], &p[0])).sum();
    Ok(total / (embeds.len() - 1) as f64)
}

/// Contrastive loss: positives on the diagonal, every other positive in the
/// batch is a negative for anchor `i`.
pub fn infonce(anchors: &[Embedding], positives: &[Embedding], temperature: f64) -> Result<f64> {
    infonce_impl(anchors, positives, temperature, None)
}

/// InfoNCE with each negative term scaled by `neighbor_weights[i][j]`.
pub fn infonce_modified(
    anchors: &[Embedding],
    positives: &[Embedding],
    temperature: f64,
    neighbor_weights: &[Vec<f64>],
) -> Result<f64> {
    let n = anchors.len();
    if neighbor_weights.len() != n || neighbor_weights.iter().any(|row| row.len() != n) {
        return Err(Error::ShapeMismatch(format!("neighbor weights must be {n}x{n}")));
    }
    for (i, row) in neighbor_weights.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::param(format!("neighbor weight [{i}][{j}] = {w} outside [0, 1]")));
            }
        }
        if row[i] != 1.0 {
            return Err(Error::param(format!("neighbor weight [{i}][{i}] must be 1")));
        }
    }
    infonce_impl(anchors, positives, temperature, Some(neighbor_weights))
}

fn infonce_impl(
    anchors: &[Embedding],
    positives: &[Embedding],
    temperature: f64,
    weights: Option<&[Vec<f64>]>,
) -> Result<f64> {
    if anchors.is_empty() {
        return Err(Error::Insufficient("infonce needs at least one pair".into()));
    }
    if anchors.len() != positives.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} anchors vs {} positives",
            anchors.len(),
            positives.len()
        )));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::param(format!("infonce temperature must be positive, got {temperature}")));
    }
    let n = anchors.len();
    let mut total = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| cosine_sim(&anchors[i], &positives[j]) / temperature)
            .collect();
        // log sum_j w_ij exp(s_ij / t), skipping zero-weight terms
        let terms: Vec<f64> = logits
            .iter()
            .enumerate()
            .filter_map(|(j, &l)| {
                let w = weights.map_or(1.0, |w| w[i][j]);
                (w > 0.0).then(|| l + w.ln())
            })
            .collect();
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    Ok(total / n as f64)
}

/// Sums the window and re-normalizes (zero sum gives the sentinel).
pub fn window_average(embeds: &[Embedding]) -> Result<Embedding> {
    let first = embeds
        .first()
        .ok_or_else(|| Error::Insufficient("empty fusion window".into()))?;
    let mut sum = vec![0.0; first.dim()];
    for e in embeds {
        if e.pooling != first.pooling {
            return Err(Error::ShapeMismatch("embeddings in window have different pooling".into()));
        }
        for (s, v) in sum.iter_mut().zip(&e.values) {
            *s += v;
        }
    }
    Embedding::from_raw(first.pooling, sum)
}

/// Learnable fusion kernel: per time step a `3 x 3` spatial stencil over the
/// pooled grid, plus a per-cell bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionKernel {
    /// Window length `T`.
    pub window: usize,
    /// `T x 9` stencil weights, oldest frame first, taps row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FusionKernel {
    pub fn new(window: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let k = Self {
            window,
            weights,
            bias,
        };
        k.validate()?;
        Ok(k)
    }

    fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::param("fusion window must be >= 1"));
        }
        if self.weights.len() != self.window * TAPS {
            return Err(Error::ShapeMismatch(format!(
                "expected {} kernel weights, got {}",
                self.window * TAPS,
                self.weights.len()
            )));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::param("fusion kernel has non-finite parameters"));
        }
        Ok(())
    }

    /// Passes the newest frame through unchanged.
    pub fn identity(window: usize, dim: usize) -> Self {
        let mut weights = vec![0.0; window * TAPS];
        weights[(window - 1) * TAPS + CENTER_TAP] = 1.0;
        Self {
            window,
            weights,
            bias: vec![0.0; dim],
        }
    }

    /// Equal center-tap weights `1/T`: the same direction as a window average.
    pub fn uniform(window: usize, dim: usize) -> Self {
        let mut weights = vec![0.0; window * TAPS];
        for t in 0..window {
            weights[t * TAPS + CENTER_TAP] = 1.0 / window as f64;
        }
        Self {
            window,
            weights,
            bias: vec![0.0; dim],
        }
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn params(&self) -> Vec<f64> {
        self.weights.iter().chain(&self.bias).copied().collect()
    }

    fn with_params(&self, p: &[f64]) -> Self {
        let nw = self.weights.len();
        Self {
            window: self.window,
            weights: p[..nw].to_vec(),
            bias: p[nw..].to_vec(),
        }
    }
}

fn conv_raw(frames: &[&[f64]], weights: &[f64], bias: &[f64], pooling: Pooling) -> Vec<f64> {
    let (ph, pw) = (pooling.pooled_h as i64, pooling.pooled_w as i64);
    let half = (SPATIAL_TAPS / 2) as i64;
    let mut out = bias.to_vec();
    for (frame, stencil) in frames.iter().zip(weights.chunks(TAPS)) {
        for (tap, &w) in stencil.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let dr = (tap / SPATIAL_TAPS) as i64 - half;
            let dc = (tap % SPATIAL_TAPS) as i64 - half;
            for r in 0..ph {
                let sr = r + dr;
                if sr < 0 || sr >= ph {
                    continue;
                }
                for c in 0..pw {
                    let sc = c + dc;
                    if sc < 0 || sc >= pw {
                        continue;
                    }
                    out[(r * pw + c) as usize] += w * frame[(sr * pw + sc) as usize];
                }
            }
        }
    }
    out
}

/// Stacks the window over time, applies the stencil per time step with zero
/// spatial padding, adds the bias and normalizes.
pub fn temporal_conv_fuse(embeds: &[Embedding], kernel: &FusionKernel) -> Result<Embedding> {
    if embeds.len() != kernel.window {
        return Err(Error::ShapeMismatch(format!(
            "window of {} embeddings for a kernel of length {}",
            embeds.len(),
            kernel.window
        )));
    }
    temporal_conv_fuse_partial(embeds, kernel)
}

/// Like [`temporal_conv_fuse`] but accepts a shorter window during warm-up:
/// the available frames are aligned with the newest kernel slots.
pub fn temporal_conv_fuse_partial(embeds: &[Embedding], kernel: &FusionKernel) -> Result<Embedding> {
    kernel.validate()?;
    let first = embeds
        .first()
        .ok_or_else(|| Error::Insufficient("empty fusion window".into()))?;
    if embeds.len() > kernel.window {
        return Err(Error::ShapeMismatch(format!(
            "window of {} embeddings for a kernel of length {}",
            embeds.len(),
            kernel.window
        )));
    }
    if kernel.bias.len() != first.dim() {
        return Err(Error::ShapeMismatch(format!(
            "kernel bias has {} entries, embeddings have {}",
            kernel.bias.len(),
            first.dim()
        )));
    }
    let skip = (kernel.window - embeds.len()) * TAPS;
    let frames: Vec<&[f64]> = embeds.iter().map(|e| e.values.as_slice()).collect();
    let raw = conv_raw(&frames, &kernel.weights[skip..], &kernel.bias, first.pooling);
    Embedding::from_raw(first.pooling, raw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_sim: f64,
    pub w_nce: f64,
    pub w_t: f64,
    pub nce_temperature: f64,
    /// Separable-softmax temperature inside the transformation loss.
    pub transform_temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_sim: 1.0,
            w_nce: 1.0,
            w_t: 1.0,
            nce_temperature: 0.1,
            transform_temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_sim, self.w_nce, self.w_t];
        if ws.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::param("loss weights must be finite and non-negative"));
        }
        if ws.iter().all(|w| *w == 0.0) {
            return Err(Error::param("at least one loss weight must be positive"));
        }
        if !(self.nce_temperature > 0.0) || !(self.transform_temperature > 0.0) {
            return Err(Error::param("loss temperatures must be positive"));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            w_sim: self.w_sim * factor,
            w_nce: self.w_nce * factor,
            w_t: self.w_t * factor,
            ..self.clone()
        }
    }
}

/// A contiguous run of degraded frames with the aligned ground truth.
///
/// With `M` frames and a kernel of length `T` the sample yields
/// `M - T + 1` fused outputs, one per full window; output `k` is paired with
/// the ground truth of the newest frame in its window.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub degraded: Vec<Heatmap>,
    pub truth: Vec<Heatmap>,
}

/// Everything about a sample that does not depend on the kernel.
struct PreparedSample {
    geometry: SensorGeometry,
    pooling: Pooling,
    degraded: Vec<Vec<f64>>,
    truth_embeds: Vec<Embedding>,
    /// Q of consecutive ground-truth pairs, aligned with fused outputs 1..
    truth_q: Vec<ProbMap>,
}

impl PreparedSample {
    fn new(sample: &TrainingSample, window: usize, pooling: Pooling, temperature: f64) -> Result<Self> {
        let m = sample.degraded.len();
        if sample.truth.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "{} degraded frames vs {} ground-truth frames",
                m,
                sample.truth.len()
            )));
        }
        if m < window {
            return Err(Error::ShapeMismatch(format!(
                "sample of {m} frames is shorter than the kernel window {window}"
            )));
        }
        let geometry = *sample.degraded[0].geometry();
        for h in sample.degraded.iter().chain(&sample.truth) {
            geometry.ensure_same(h.geometry())?;
        }
        pooling.validate(&geometry)?;
        let degraded = sample
            .degraded
            .iter()
            .map(|h| embed(h, pooling).map(|e| e.values))
            .collect::<Result<Vec<_>>>()?;
        let targets = &sample.truth[window - 1..];
        let truth_embeds = targets
            .iter()
            .map(|h| embed(h, pooling))
            .collect::<Result<Vec<_>>>()?;
        let corr = correlator_for(geometry.rows(), geometry.cols());
        let spectra: Vec<Spectrum> = targets.iter().map(|h| corr.spectrum(&h.to_f64())).collect();
        let truth_q = spectra
            .windows(2)
            .map(|p| sep_softmax(&corr.correlate_spectra(&p[1], &p[0]), temperature))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            geometry,
            pooling,
            degraded,
            truth_embeds,
            truth_q,
        })
    }

    fn loss(&self, kernel: &FusionKernel, lw: &LossWeights) -> Result<f64> {
        let t = kernel.window;
        if kernel.bias.len() != self.pooling.dim() {
            return Err(Error::ShapeMismatch(format!(
                "kernel bias has {} entries, embeddings have {}",
                kernel.bias.len(),
                self.pooling.dim()
            )));
        }
        let fused = self
            .degraded
            .windows(t)
            .map(|w| {
                let frames: Vec<&[f64]> = w.iter().map(|v| v.as_slice()).collect();
                Embedding::from_raw(self.pooling, conv_raw(&frames, &kernel.weights, &kernel.bias, self.pooling))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut loss = 0.0;
        if lw.w_nce > 0.0 {
            loss += lw.w_nce * infonce(&fused, &self.truth_embeds, lw.nce_temperature)?;
        }
        if fused.len() >= 2 {
            if lw.w_sim > 0.0 {
                loss += lw.w_sim * temporal_sim_loss(&fused)?;
            }
            if lw.w_t > 0.0 {
                let corr = correlator_for(self.geometry.rows(), self.geometry.cols());
                let spectra: Vec<Spectrum> = fused
                    .iter()
                    .map(|e| corr.spectrum(&decode_values(&e.values, self.pooling, &self.geometry)))
                    .collect();
                let mut total = 0.0;
                for (pair, q_truth) in spectra.windows(2).zip(&self.truth_q) {
                    let q_pred = sep_softmax(&corr.correlate_spectra(&pair[1], &pair[0]), lw.transform_temperature)?;
                    total += kl_div(q_truth, &q_pred)?;
                }
                loss += lw.w_t * total / self.truth_q.len() as f64;
            }
        }
        Ok(loss)
    }
}

/// Stage-3 objective on one sample:
/// `w_nce * InfoNCE(fused, embed(truth)) + w_sim * L_sim(fused)
///  + w_t * mean L_T(decode(fused_k), decode(fused_{k-1}), truth_k, truth_{k-1})`.
pub fn combined_loss(
    sample: &TrainingSample,
    kernel: &FusionKernel,
    lw: &LossWeights,
    pooling: Pooling,
) -> Result<f64> {
    lw.validate()?;
    kernel.validate()?;
    PreparedSample::new(sample, kernel.window, pooling, lw.transform_temperature)?.loss(kernel, lw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub steps: usize,
    pub step_size: f64,
    pub fd_epsilon: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            step_size: 0.05,
            fd_epsilon: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub kernel: FusionKernel,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean loss after every accepted step.
    pub history: Vec<f64>,
}

/// Mean combined loss over a prepared dataset.
struct Objective {
    samples: Vec<PreparedSample>,
    weights: LossWeights,
}

impl Objective {
    fn new(dataset: &[TrainingSample], window: usize, pooling: Pooling, lw: &LossWeights) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Insufficient("training dataset is empty".into()));
        }
        let samples = dataset
            .iter()
            .map(|s| PreparedSample::new(s, window, pooling, lw.transform_temperature))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            weights: lw.clone(),
        })
    }

    fn eval(&self, kernel: &FusionKernel) -> Result<f64> {
        let mut total = 0.0;
        for s in &self.samples {
            total += s.loss(kernel, &self.weights)?;
        }
        Ok(total / self.samples.len() as f64)
    }

    fn fd_gradient(&self, kernel: &FusionKernel, eps: f64) -> Result<Vec<f64>> {
        let base = kernel.params();
        (0..base.len())
            .into_par_iter()
            .map(|i| {
                let mut p = base.clone();
                p[i] = base[i] + eps;
                let up = self.eval(&kernel.with_params(&p))?;
                p[i] = base[i] - eps;
                let down = self.eval(&kernel.with_params(&p))?;
                Ok((up - down) / (2.0 * eps))
            })
            .collect()
    }
}

/// Central finite-difference gradient of the mean dataset loss with respect
/// to `[weights..., bias...]`.
pub fn fd_gradient(
    dataset: &[TrainingSample],
    kernel: &FusionKernel,
    lw: &LossWeights,
    pooling: Pooling,
    eps: f64,
) -> Result<Vec<f64>> {
    Objective::new(dataset, kernel.window, pooling, lw)?.fd_gradient(kernel, eps)
}

/// Mean combined loss over a dataset.
pub fn dataset_loss(
    dataset: &[TrainingSample],
    kernel: &FusionKernel,
    lw: &LossWeights,
    pooling: Pooling,
) -> Result<f64> {
    Objective::new(dataset, kernel.window, pooling, lw)?.eval(kernel)
}

/// Gradient descent with finite-difference gradients. A step is taken only
/// if it lowers the mean loss; otherwise the step size halves, and after ten
/// consecutive halvings without improvement training stops.
pub fn train_fusion(
    dataset: &[TrainingSample],
    init: &FusionKernel,
    lw: &LossWeights,
    pooling: Pooling,
    cfg: &TrainerConfig,
) -> Result<TrainOutcome> {
    lw.validate()?;
    init.validate()?;
    if !(cfg.step_size > 0.0) || !(cfg.fd_epsilon > 0.0) {
        return Err(Error::param("step_size and fd_epsilon must be positive"));
    }
    let objective = Objective::new(dataset, init.window, pooling, lw)?;
    let initial_loss = objective.eval(init)?;
    if !initial_loss.is_finite() {
        return Err(Error::NonFiniteLoss(format!("initial loss is {initial_loss}")));
    }

    let mut kernel = init.clone();
    let mut loss = initial_loss;
    let mut step_size = cfg.step_size;
    let mut history = Vec::new();
    'steps: for _ in 0..cfg.steps {
        let grad = objective.fd_gradient(&kernel, cfg.fd_epsilon)?;
        if grad.iter().any(|g| !g.is_finite()) {
            break;
        }
        let params = kernel.params();
        for _ in 0..=10 {
            let trial: Vec<f64> = params.iter().zip(&grad).map(|(p, g)| p - step_size * g).collect();
            let candidate = kernel.with_params(&trial);
            let l = objective.eval(&candidate)?;
            if l.is_finite() && l < loss {
                kernel = candidate;
                loss = l;
                history.push(l);
                continue 'steps;
            }
            step_size *= 0.5;
        }
        break;
    }
    Ok(TrainOutcome {
        kernel,
        initial_loss,
        final_loss: loss,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom() -> SensorGeometry {
        SensorGeometry::new(100.0, 5.0, 16, 16).unwrap()
    }

    fn pool4() -> Pooling {
        Pooling {
            pooled_h: 4,
            pooled_w: 4,
        }
    }

    fn basis(pooling: Pooling, i: usize) -> Embedding {
        let mut v = vec![0.0; pooling.dim()];
        v[i] = 1.0;
        Embedding::from_raw(pooling, v).unwrap()
    }

    fn random_embedding(pooling: Pooling, rng: &mut ChaCha8Rng) -> Embedding {
        Embedding::from_raw(pooling, (0..pooling.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn embed_examples() {
        let g = geom();
        let p = Pooling::default();
        assert_eq!(embed(&Heatmap::zeros(g), p).unwrap(), Embedding::sentinel(p));
        let ones = embed(&Heatmap::filled(g, 1.0).unwrap(), p).unwrap();
        for v in ones.values() {
            assert!((v - 1.0 / 8.0).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Heatmap::from_fn(g, |_, _| rng.gen_range(0.0..0.5)).unwrap();
        let a = embed(&h, p).unwrap();
        let b = embed(&h.scaled(2.0).unwrap(), p).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn decode_examples() {
        let g = geom();
        let p = pool4();
        let ones = Heatmap::filled(g, 1.0).unwrap();
        assert_eq!(decode(&embed(&ones, p).unwrap(), &g).unwrap(), ones);

        let s = decode(&Embedding::sentinel(p), &g).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let lit = r < 4 && c < 4;
                assert_eq!(s.get(r, c), if lit { 1.0 } else { 0.0 });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = random_embedding(p, &mut rng);
        assert_eq!(decode(&e, &g).unwrap(), decode(&e, &g).unwrap());
    }

    #[test]
    fn non_divisible_pooling_covers_grid() {
        let g = SensorGeometry::new(100.0, 5.0, 10, 9).unwrap();
        let p = Pooling {
            pooled_h: 3,
            pooled_w: 4,
        };
        let e = embed(&Heatmap::filled(g, 1.0).unwrap(), p).unwrap();
        assert_eq!(e.dim(), 12);
        assert_eq!(decode(&e, &g).unwrap(), Heatmap::filled(g, 1.0).unwrap());
        assert!(embed(&Heatmap::zeros(g), Pooling { pooled_h: 11, pooled_w: 2 }).is_err());
    }

    #[test]
    fn cosine_examples() {
        let p = pool4();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_embedding(p, &mut rng);
        assert!((cosine_sim(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&basis(p, 0), &basis(p, 1)), 0.0);
        assert!((cosine_sim(&a, &a.negated()) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn temporal_sim_examples() {
        let p = pool4();
        let (e1, e2) = (basis(p, 0), basis(p, 1));
        assert_eq!(temporal_sim_loss(&[e1.clone(), e1.clone(), e1.clone()]).unwrap(), 0.0);
        let alt = vec![e1.clone(), e2.clone(), e1.clone(), e2.clone()];
        assert!((temporal_sim_loss(&alt).unwrap() - 1.0).abs() < 1e-12);
        assert!((temporal_sim_loss(&[e1.clone(), e1.negated()]).unwrap() - 2.0).abs() < 1e-12);
        assert!(temporal_sim_loss(&[e1]).is_err());
    }

    #[test]
    fn infonce_examples() {
        let p = pool4();
        let (e1, e2) = (basis(p, 0), basis(p, 1));
        assert!(infonce(&[e1.clone()], &[e1.clone()], 1.0).unwrap().abs() < 1e-12);

        let aligned = infonce(&[e1.clone(), e2.clone()], &[e1.clone(), e2.clone()], 1.0).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((aligned - expected).abs() < 1e-12);
        assert!((aligned - 0.31326).abs() < 1e-5);

        let swapped = infonce(&[e1.clone(), e2.clone()], &[e2.clone(), e1.clone()], 1.0).unwrap();
        assert!((swapped - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
        assert!((swapped - 1.31326).abs() < 1e-5);

        assert!(infonce(&[e1.clone()], &[e1.clone(), e2.clone()], 1.0).is_err());
        assert!(infonce(&[e1.clone()], &[e1.clone()], 0.0).is_err());
    }

    #[test]
    fn modified_infonce_examples() {
        let p = pool4();
        let (e1, e2) = (basis(p, 0), basis(p, 1));
        let a = [e1.clone(), e2.clone()];
        let ones = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        assert_eq!(
            infonce_modified(&a, &a, 1.0, &ones).unwrap(),
            infonce(&a, &a, 1.0).unwrap()
        );
        let zero = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(infonce_modified(&a, &a, 1.0, &zero).unwrap().abs() < 1e-12);
        let half = vec![vec![1.0, 0.5], vec![0.5, 1.0]];
        let v = infonce_modified(&a, &a, 1.0, &half).unwrap();
        assert!((v - -(1f64.exp() / (1f64.exp() + 0.5)).ln()).abs() < 1e-12);
        assert!((v - 0.16885).abs() < 1e-5);

        let bad = vec![vec![1.0, 1.5], vec![0.5, 1.0]];
        assert!(infonce_modified(&a, &a, 1.0, &bad).is_err());
        let bad_diag = vec![vec![0.5, 0.5], vec![0.5, 1.0]];
        assert!(infonce_modified(&a, &a, 1.0, &bad_diag).is_err());
    }

    #[test]
    fn window_average_examples() {
        let p = pool4();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = random_embedding(p, &mut rng);
        let avg = window_average(&[e.clone(), e.clone(), e.clone()]).unwrap();
        for (x, y) in avg.values().iter().zip(e.values()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(window_average(&[e.clone(), e.negated()]).unwrap(), Embedding::sentinel(p));
        let both = window_average(&[basis(p, 0), basis(p, 1)]).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((both.values()[0] - r).abs() < 1e-12 && (both.values()[1] - r).abs() < 1e-12);
        assert!(window_average(&[]).is_err());
    }

    #[test]
    fn identity_kernel_returns_last_frame() {
        let p = pool4();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames: Vec<_> = (0..5).map(|_| random_embedding(p, &mut rng)).collect();
        let k = FusionKernel::identity(5, p.dim());
        let out = temporal_conv_fuse(&frames, &k).unwrap();
        for (x, y) in out.values().iter().zip(frames[4].values()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(temporal_conv_fuse(&frames[..4], &k).is_err());
    }

    #[test]
    fn identical_frames_are_order_free() {
        let p = pool4();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = random_embedding(p, &mut rng);
        let weights: Vec<f64> = (0..3 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k = FusionKernel::new(3, weights.clone(), vec![0.1; p.dim()]).unwrap();
        let mut rev = weights.chunks(9).rev().flatten().copied().collect::<Vec<_>>();
        rev.truncate(27);
        let k_rev = FusionKernel::new(3, rev, vec![0.1; p.dim()]).unwrap();
        let frames = vec![e.clone(); 3];
        let a = temporal_conv_fuse(&frames, &k).unwrap();
        let b = temporal_conv_fuse(&frames, &k_rev).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn partial_window_uses_newest_slots() {
        let p = pool4();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frames: Vec<_> = (0..2).map(|_| random_embedding(p, &mut rng)).collect();
        let k = FusionKernel::identity(5, p.dim());
        let out = temporal_conv_fuse_partial(&frames, &k).unwrap();
        assert_eq!(out, frames[1]);
    }

    fn static_sample(g: SensorGeometry, n: usize, block_constant: bool) -> TrainingSample {
        let h = Heatmap::from_fn(g, |r, c| {
            let (br, bc) = if block_constant { (r / 4, c / 4) } else { (r, c) };
            ((br * 7 + bc * 3) % 5) as f64 / 4.0
        })
        .unwrap();
        TrainingSample {
            degraded: vec![h.clone(); n],
            truth: vec![h; n],
        }
    }

    #[test]
    fn perfect_prediction_hits_infonce_floor() {
        let g = geom();
        let p = pool4();
        let lw = LossWeights::default();
        // batch of one fused output
        let single = static_sample(g, 3, false);
        let l = combined_loss(&single, &FusionKernel::identity(3, p.dim()), &lw, p).unwrap();
        assert!(l.abs() < 1e-6, "{l}");

        // static block-constant frames: similarity and transform terms vanish
        let sample = static_sample(g, 6, true);
        let k = FusionKernel::identity(3, p.dim());
        let with_all = combined_loss(&sample, &k, &lw, p).unwrap();
        let nce_only = combined_loss(&sample, &k, &LossWeights { w_sim: 0.0, w_t: 0.0, ..lw.clone() }, p).unwrap();
        assert!((with_all - nce_only).abs() < 1e-6);
    }

    fn moving_sample(g: SensorGeometry, seed: u64) -> TrainingSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Heatmap::from_fn(g, |_, _| if rng.gen_bool(0.2) { rng.gen_range(0.3..1.0) } else { 0.0 }).unwrap();
        let truth: Vec<_> = (0..6).map(|k| base.shifted(-(k as i64), 0)).collect();
        let degraded = truth
            .iter()
            .map(|h| h.shifted(rng.gen_range(-1..=1), rng.gen_range(-1..=1)))
            .collect();
        TrainingSample { degraded, truth }
    }

    #[test]
    fn loss_weights_select_and_scale() {
        let g = geom();
        let p = pool4();
        let sample = moving_sample(g, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = FusionKernel::new(3, (0..27).map(|_| rng.gen_range(-0.5..1.0)).collect(), vec![0.01; 16]).unwrap();
        let lw = LossWeights::default();
        let sim_only = LossWeights { w_nce: 0.0, w_t: 0.0, w_sim: 0.7, ..lw.clone() };
        let fused: Vec<Embedding> = sample
            .degraded
            .windows(3)
            .map(|w| {
                let e: Vec<_> = w.iter().map(|h| embed(h, p).unwrap()).collect();
                temporal_conv_fuse(&e, &k).unwrap()
            })
            .collect();
        let direct = 0.7 * temporal_sim_loss(&fused).unwrap();
        assert!((combined_loss(&sample, &k, &sim_only, p).unwrap() - direct).abs() < 1e-12);

        let base = combined_loss(&sample, &k, &lw, p).unwrap();
        let doubled = combined_loss(&sample, &k, &lw.scaled(2.0), p).unwrap();
        assert!((doubled - 2.0 * base).abs() < 1e-9 * base.abs().max(1.0));
        assert!(base.is_finite());
    }

    #[test]
    fn combined_loss_rejects_misaligned_samples() {
        let g = geom();
        let mut s = moving_sample(g, 2);
        s.truth.pop();
        let p = pool4();
        assert!(combined_loss(&s, &FusionKernel::identity(3, 16), &LossWeights::default(), p).is_err());
        let short = TrainingSample {
            degraded: s.degraded[..2].to_vec(),
            truth: s.degraded[..2].to_vec(),
        };
        assert!(combined_loss(&short, &FusionKernel::identity(3, 16), &LossWeights::default(), p).is_err());
    }

    #[test]
    fn zero_steps_returns_init() {
        let g = geom();
        let p = pool4();
        let data = vec![moving_sample(g, 3)];
        let init = FusionKernel::identity(3, p.dim());
        let cfg = TrainerConfig { steps: 0, ..Default::default() };
        let out = train_fusion(&data, &init, &LossWeights::default(), p, &cfg).unwrap();
        assert_eq!(out.kernel, init);
        assert_eq!(out.initial_loss, out.final_loss);
    }

    #[test]
    fn training_never_increases_loss() {
        let g = geom();
        let p = pool4();
        let data = vec![moving_sample(g, 4), moving_sample(g, 5)];
        let init = FusionKernel::identity(3, p.dim());
        let lw = LossWeights { transform_temperature: 2.0, ..Default::default() };
        let cfg = TrainerConfig { steps: 5, step_size: 0.01, fd_epsilon: 1e-4 };
        let out = train_fusion(&data, &init, &lw, p, &cfg).unwrap();
        assert!(out.final_loss <= out.initial_loss);
        let recomputed = dataset_loss(&data, &out.kernel, &lw, p).unwrap();
        assert!((recomputed - out.final_loss).abs() < 1e-12);
        for pair in out.history.windows(2) {
            assert!(pair[1] < pair[0]);
        }
    }

    #[test]
    fn clean_data_keeps_identity_near_optimal() {
        let g = geom();
        let p = pool4();
        let data = vec![static_sample(g, 6, true)];
        let init = FusionKernel::identity(3, p.dim());
        let lw = LossWeights::default();
        let cfg = TrainerConfig { steps: 3, step_size: 0.01, fd_epsilon: 1e-4 };
        let out = train_fusion(&data, &init, &lw, p, &cfg).unwrap();
        assert!(out.final_loss <= out.initial_loss);
        let drift: f64 = out
            .kernel
            .weights
            .iter()
            .zip(&init.weights)
            .chain(out.kernel.bias.iter().zip(&init.bias))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(drift < 0.05, "{drift}");
    }

    #[test]
    fn fd_gradient_is_self_consistent() {
        let g = geom();
        let p = pool4();
        let data = vec![moving_sample(g, 6)];
        let lw = LossWeights { transform_temperature: 4.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..3 {
            let k = FusionKernel::new(
                3,
                (0..27).map(|_| rng.gen_range(-0.2..0.6)).collect(),
                (0..16).map(|_| rng.gen_range(0.0..0.05)).collect(),
            )
            .unwrap();
            let eps = 1e-4;
            let grad = fd_gradient(&data, &k, &lw, p, eps).unwrap();
            let v: Vec<f64> = (0..k.n_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let base = k.params();
            let plus: Vec<f64> = base.iter().zip(&v).map(|(a, b)| a + eps * b).collect();
            let minus: Vec<f64> = base.iter().zip(&v).map(|(a, b)| a - eps * b).collect();
            let diff = dataset_loss(&data, &k.with_params(&plus), &lw, p).unwrap()
                - dataset_loss(&data, &k.with_params(&minus), &lw, p).unwrap();
            let predicted = 2.0 * eps * grad.iter().zip(&v).map(|(g, x)| g * x).sum::<f64>();
            assert!(
                (diff - predicted).abs() <= 0.05 * diff.abs().max(1e-12),
                "{diff} vs {predicted}"
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn uniform_kernel_matches_window_average(seed in any::<u64>(), n in 1usize..7) {
            let p = pool4();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames: Vec<_> = (0..n).map(|_| random_embedding(p, &mut rng)).collect();
            let sum_norm = {
                let mut s = vec![0.0; p.dim()];
                for f in &frames { for (a, b) in s.iter_mut().zip(f.values()) { *a += b; } }
                s.iter().map(|v| v * v).sum::<f64>().sqrt()
            };
            prop_assume!(sum_norm > 1e-6);
            let a = temporal_conv_fuse(&frames, &FusionKernel::uniform(n, p.dim())).unwrap();
            let b = window_average(&frames).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn unit_weights_reduce_to_infonce(seed in any::<u64>(), n in 1usize..6, t in 0.05f64..2.0) {
            let p = pool4();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<_> = (0..n).map(|_| random_embedding(p, &mut rng)).collect();
            let b: Vec<_> = (0..n).map(|_| random_embedding(p, &mut rng)).collect();
            let w = vec![vec![1.0; n]; n];
            let plain = infonce(&a, &b, t).unwrap();
            prop_assert!((infonce_modified(&a, &b, t, &w).unwrap() - plain).abs() < 1e-12);
            prop_assert!(plain >= 0.0);
        }

        #[test]
        fn block_constant_round_trip(values in prop::collection::vec(0.0f32..=1.0, 16)) {
            let g = geom();
            let p = pool4();
            // normalize so the largest block is 1
            let m = values.iter().copied().fold(0.0f32, f32::max);
            prop_assume!(m > 1e-3);
            let h = Heatmap::from_fn(g, |r, c| values[(r / 4) * 4 + c / 4] as f64 / m as f64).unwrap();
            let back = decode(&embed(&h, p).unwrap(), &g).unwrap();
            for (x, y) in h.values().iter().zip(back.values()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
