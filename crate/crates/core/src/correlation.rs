//! Full 2D cross-correlation, separable softmax, KL divergence and the
//! displacement-distribution loss built from them, plus a correlation-peak
//! scan matcher.
//!
//! Convention: for images `a`, `b` of size `H x W` the correlation map has
//! size `(2H-1) x (2W-1)` and the entry at `center + (dy, dx)` is
//! `sum a[i, j] * b[i - dy, j - dx]`. A peak at `(dy, dx)` therefore means
//! `a` looks like `b` translated by `(dy, dx)`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{FrameSequence, Heatmap, StampedPose, Trajectory};

/// Default temperature of the separable softmax.
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// Floor added to the reference distribution inside the KL divergence.
pub const KL_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrMethod {
    Direct,
    #[default]
    Fft,
}

/// A dense score surface. For correlation maps the shape is odd in both
/// axes and the center cell corresponds to zero displacement.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrMap {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CorrMap {
    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} map",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("correlation map contains non-finite values"));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn center(&self) -> (usize, usize) {
        (self.rows / 2, self.cols / 2)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Score at displacement `(dy, dx)` relative to the center.
    pub fn at(&self, dy: i64, dx: i64) -> f64 {
        let (cr, cc) = self.center();
        self.get((cr as i64 + dy) as usize, (cc as i64 + dx) as usize)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Probability distribution over the cells of a [`CorrMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl ProbMap {
    /// Wraps raw probabilities, renormalizing them to sum to one.
    pub fn from_weights(rows: usize, cols: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for a {rows}x{cols} map",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::param("probability weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::param("probability weights sum to zero"));
        }
        let values = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { rows, cols, values })
    }

    pub fn uniform(rows: usize, cols: usize) -> Self {
        let n = rows * cols;
        Self {
            rows,
            cols,
            values: vec![1.0 / n as f64; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }
}

/// Peak offset from the zero-displacement cell, in bins.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Displacement {
    pub d_range: f64,
    pub d_azimuth: f64,
}

impl Displacement {
    pub fn new(d_range: f64, d_azimuth: f64) -> Self {
        Self { d_range, d_azimuth }
    }

    pub fn distance(&self, other: &Displacement) -> f64 {
        (self.d_range - other.d_range).hypot(self.d_azimuth - other.d_azimuth)
    }
}

/// FFT plans for full linear correlation of `h x w` images.
pub struct Correlator {
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

/// Zero-padded spectrum of one image, reusable across correlations.
#[derive(Clone)]
pub struct Spectrum {
    data: Vec<Complex<f64>>,
    norm: f64,
}

impl Correlator {
    pub fn new(h: usize, w: usize) -> Self {
        let ph = (2 * h - 1).next_power_of_two();
        let pw = (2 * w - 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        Self {
            h,
            w,
            ph,
            pw,
            row_fwd: planner.plan_fft_forward(pw),
            row_inv: planner.plan_fft_inverse(pw),
            col_fwd: planner.plan_fft_forward(ph),
            col_inv: planner.plan_fft_inverse(ph),
        }
    }

    fn fft2(&self, data: &mut Vec<Complex<f64>>, inverse: bool) {
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        row.process(data);
        let mut t = transpose(data, self.ph, self.pw);
        col.process(&mut t);
        *data = transpose(&t, self.pw, self.ph);
    }

    pub fn spectrum(&self, img: &[f64]) -> Spectrum {
        assert_eq!(img.len(), self.h * self.w, "image size does not match correlator");
        let mut data = vec![Complex::new(0.0, 0.0); self.ph * self.pw];
        for r in 0..self.h {
            for c in 0..self.w {
                data[r * self.pw + c] = Complex::new(img[r * self.w + c], 0.0);
            }
        }
        self.fft2(&mut data, false);
        let norm = img.iter().map(|v| v * v).sum::<f64>().sqrt();
        Spectrum { data, norm }
    }

    pub fn correlate_spectra(&self, a: &Spectrum, b: &Spectrum) -> CorrMap {
        let mut prod: Vec<Complex<f64>> = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| x * y.conj())
            .collect();
        self.fft2(&mut prod, true);
        let scale = 1.0 / (self.ph * self.pw) as f64;
        // Anything below this is FFT round-off: the true correlation is
        // bounded by |a|*|b| (Cauchy-Schwarz).
        let floor = 1e-12 * a.norm * b.norm;
        let (rows, cols) = (2 * self.h - 1, 2 * self.w - 1);
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let dy = i as i64 - (self.h as i64 - 1);
            let ky = dy.rem_euclid(self.ph as i64) as usize;
            for j in 0..cols {
                let dx = j as i64 - (self.w as i64 - 1);
                let kx = dx.rem_euclid(self.pw as i64) as usize;
                let v = prod[ky * self.pw + kx].re * scale;
                values.push(if v.abs() <= floor { 0.0 } else { v });
            }
        }
        CorrMap { rows, cols, values }
    }

    pub fn correlate(&self, a: &[f64], b: &[f64]) -> CorrMap {
        self.correlate_spectra(&self.spectrum(a), &self.spectrum(b))
    }
}

fn transpose(data: &[Complex<f64>], rows: usize, cols: usize) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::new(0.0, 0.0); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

thread_local! {
    static CORRELATORS: RefCell<HashMap<(usize, usize), Rc<Correlator>>> =
        RefCell::new(HashMap::new());
}

/// Cached correlator for the given image shape (per thread).
pub fn correlator_for(h: usize, w: usize) -> Rc<Correlator> {
    CORRELATORS.with(|cache| {
        cache
            .borrow_mut()
            .entry((h, w))
            .or_insert_with(|| Rc::new(Correlator::new(h, w)))
            .clone()
    })
}

/// Brute-force correlation over every displacement.
pub fn xcorr2_direct_raw(a: &[f64], b: &[f64], h: usize, w: usize) -> CorrMap {
    let (rows, cols) = (2 * h - 1, 2 * w - 1);
    let mut values = vec![0.0; rows * cols];
    let (hi, wi) = (h as i64, w as i64);
    for dy in -(hi - 1)..hi {
        let i0 = dy.max(0);
        let i1 = (hi + dy).min(hi);
        for dx in -(wi - 1)..wi {
            let j0 = dx.max(0);
            let j1 = (wi + dx).min(wi);
            let mut s = 0.0;
            for i in i0..i1 {
                let ra = (i * wi) as usize;
                let rb = ((i - dy) * wi) as usize;
                for j in j0..j1 {
                    s += a[ra + j as usize] * b[rb + (j - dx) as usize];
                }
            }
            values[((dy + hi - 1) * cols as i64 + dx + wi - 1) as usize] = s;
        }
    }
    CorrMap { rows, cols, values }
}

pub fn xcorr2_raw(a: &[f64], b: &[f64], h: usize, w: usize, method: CorrMethod) -> CorrMap {
    match method {
        CorrMethod::Direct => xcorr2_direct_raw(a, b, h, w),
        CorrMethod::Fft => correlator_for(h, w).correlate(a, b),
    }
}

/// Full zero-padded cross-correlation of two heatmaps.
pub fn xcorr2(a: &Heatmap, b: &Heatmap, method: CorrMethod) -> Result<CorrMap> {
    a.geometry().ensure_same(b.geometry())?;
    Ok(xcorr2_raw(&a.to_f64(), &b.to_f64(), a.rows(), a.cols(), method))
}

fn log_softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    for x in xs.iter_mut() {
        *x -= lse;
    }
}

/// Softmax along each column and along each row, multiplied elementwise
/// and renormalized to a distribution.
pub fn sep_softmax(c: &CorrMap, temperature: f64) -> Result<ProbMap> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::param(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let (rows, cols) = (c.rows, c.cols);
    let scaled: Vec<f64> = c.values.iter().map(|v| v / temperature).collect();

    let mut log_col = scaled.clone();
    let mut column = vec![0.0; rows];
    for j in 0..cols {
        for i in 0..rows {
            column[i] = scaled[i * cols + j];
        }
        log_softmax_in_place(&mut column);
        for i in 0..rows {
            log_col[i * cols + j] = column[i];
        }
    }
    let mut log_row = scaled;
    for row in log_row.chunks_mut(cols) {
        log_softmax_in_place(row);
    }

    let mut joint: Vec<f64> = log_col.iter().zip(&log_row).map(|(a, b)| a + b).collect();
    log_softmax_in_place(&mut joint);
    let values = joint.into_iter().map(f64::exp).collect();
    Ok(ProbMap { rows, cols, values })
}

/// `sum p * ln(p / q)` with `q` floored at `eps`, skipping cells where
/// `p == 0`. Flooring rather than adding `eps` keeps `kl(p, p)` at exactly 0
/// on large maps, where an additive offset would bias it by about `-n * eps`.
pub fn kl_div(p: &ProbMap, q: &ProbMap) -> Result<f64> {
    if p.rows != q.rows || p.cols != q.cols {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            p.rows, p.cols, q.rows, q.cols
        )));
    }
    Ok(p.values
        .iter()
        .zip(&q.values)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(KL_EPSILON)).ln())
        .sum())
}

/// Divergence of the predicted displacement distribution from the
/// ground-truth one: `KL(Q_truth || Q_pred)`.
pub fn transform_loss(
    p_t: &Heatmap,
    p_prev: &Heatmap,
    l_t: &Heatmap,
    l_prev: &Heatmap,
    temperature: f64,
) -> Result<f64> {
    let g = p_t.geometry();
    for other in [p_prev, l_t, l_prev] {
        g.ensure_same(other.geometry())?;
    }
    let q_pred = sep_softmax(&xcorr2(p_t, p_prev, CorrMethod::Fft)?, temperature)?;
    let q_truth = sep_softmax(&xcorr2(l_t, l_prev, CorrMethod::Fft)?, temperature)?;
    kl_div(&q_truth, &q_pred)
}

/// Location of the correlation maximum relative to the center.
///
/// Ties (within `1e-12` of the maximum, relative) go to the smallest
/// displacement magnitude, then the smallest `d_range`, then the smallest
/// `d_azimuth`, so flat maps yield zero motion.
pub fn peak_displacement(c: &CorrMap, subpixel: bool) -> Displacement {
    let (cr, cc) = c.center();
    let max = c.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-12 * c.max_abs();
    let mut best: Option<(i64, i64, i64, usize, usize)> = None;
    for i in 0..c.rows {
        for j in 0..c.cols {
            if c.get(i, j) < max - tol {
                continue;
            }
            let dy = i as i64 - cr as i64;
            let dx = j as i64 - cc as i64;
            let key = (dy * dy + dx * dx, dy, dx, i, j);
            if best.map_or(true, |b| (key.0, key.1, key.2) < (b.0, b.1, b.2)) {
                best = Some(key);
            }
        }
    }
    let (_, dy, dx, i, j) = best.expect("correlation map is non-empty");
    let mut d = Displacement::new(dy as f64, dx as f64);
    if subpixel {
        if i > 0 && i + 1 < c.rows {
            d.d_range += parabolic_offset(c.get(i - 1, j), c.get(i, j), c.get(i + 1, j));
        }
        if j > 0 && j + 1 < c.cols {
            d.d_azimuth += parabolic_offset(c.get(i, j - 1), c.get(i, j), c.get(i, j + 1));
        }
    }
    d
}

fn parabolic_offset(left: f64, center: f64, right: f64) -> f64 {
    let denom = left - 2.0 * center + right;
    if denom >= 0.0 {
        return 0.0;
    }
    (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
}

/// Frame-to-frame displacements `peak(xcorr2(h_t, h_{t-1}))` for every
/// consecutive pair.
pub fn sequence_displacements(seq: &FrameSequence, subpixel: bool) -> Result<Vec<Displacement>> {
    if seq.len() < 2 {
        return Err(Error::Insufficient(format!(
            "scan matching needs at least 2 frames, got {}",
            seq.len()
        )));
    }
    let g = seq.geometry().expect("non-empty sequence");
    let corr = correlator_for(g.rows(), g.cols());
    let spectra: Vec<Spectrum> = seq.heatmaps().map(|h| corr.spectrum(&h.to_f64())).collect();
    Ok(spectra
        .windows(2)
        .map(|pair| peak_displacement(&corr.correlate_spectra(&pair[1], &pair[0]), subpixel))
        .collect())
}

/// Dead-reckons a trajectory from heatmap displacements, anchored at the
/// first ground-truth pose.
///
/// A range shift of `+1` bin means returns moved away from the sensor, i.e.
/// the platform moved backward by one bin; an azimuth shift of `+1` bin
/// means the scene rotated counter-clockwise in the sensor frame, i.e. the
/// platform turned clockwise.
pub fn scan_match_sequence(seq: &FrameSequence) -> Result<Trajectory> {
    let disps = sequence_displacements(seq, true)?;
    let g = seq.geometry().expect("non-empty sequence");
    let frames = seq.frames();
    let mut pose = frames[0].pose;
    let mut poses = Vec::with_capacity(frames.len());
    poses.push(StampedPose {
        t: frames[0].timestamp,
        pose,
    });
    for (d, f) in disps.iter().zip(&frames[1..]) {
        let forward = -d.d_range * g.range_bin_size();
        let turn = -d.d_azimuth * g.azimuth_bin_size();
        pose = pose.advance(forward, turn);
        poses.push(StampedPose {
            t: f.timestamp,
            pose,
        });
    }
    Trajectory::new(poses)
}
