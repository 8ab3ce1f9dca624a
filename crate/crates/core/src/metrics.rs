//! Evaluation metrics: PSNR, Lucas-Kanade grid tracking, the motion-feature
//! Fréchet distance, correlation-peak distance, APE and occupancy-map IoU.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::correlation::sequence_displacements;
use crate::error::{Error, Result};
use crate::heatmap::{heatmap_mse, polar_to_cart, FrameSequence, Heatmap, Trajectory};

pub const DEFAULT_PSNR_CAP: f64 = 100.0;
/// LK systems whose smaller eigenvalue falls below this are rejected.
pub const LK_MIN_EIGENVALUE: f64 = 1e-6;
pub const DEFAULT_LK_ITERATIONS: usize = 10;
/// Update size, in bins, below which LK iteration stops.
const LK_CONVERGED: f64 = 1e-3;
pub const HIST_BINS: usize = 8;
/// Magnitude histograms cover `[0, MAX_MAGNITUDE]` bins/frame.
pub const MAX_MAGNITUDE: f64 = 4.0;
pub const FEATURE_DIM: usize = 4 * HIST_BINS;
const COV_REGULARIZER: f64 = 1e-6;
const TIMESTAMP_TOLERANCE: f64 = 1e-9;

/// `10 log10(1 / mse)` with unit peak; identical inputs give `cap`.
pub fn psnr(pred: &Heatmap, truth: &Heatmap, cap: f64) -> Result<f64> {
    if !(cap > 0.0) {
        return Err(Error::param(format!("psnr cap must be positive, got {cap}")));
    }
    let mse = heatmap_mse(pred, truth)?;
    if mse == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(cap))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flow {
    pub d_row: f64,
    pub d_col: f64,
    pub valid: bool,
}

fn gradient(h: &Heatmap, r: usize, c: usize) -> (f64, f64) {
    let (rows, cols) = (h.rows(), h.cols());
    let up = h.get(r.saturating_sub(1), c) as f64;
    let down = h.get((r + 1).min(rows - 1), c) as f64;
    let left = h.get(r, c.saturating_sub(1)) as f64;
    let right = h.get(r, (c + 1).min(cols - 1)) as f64;
    // one-sided difference on the border
    let dr_span = ((r + 1).min(rows - 1) - r.saturating_sub(1)).max(1) as f64;
    let dc_span = ((c + 1).min(cols - 1) - c.saturating_sub(1)).max(1) as f64;
    ((down - up) / dr_span, (right - left) / dc_span)
}

/// Bilinear sample with clamp-to-edge addressing.
fn sample(h: &Heatmap, r: f64, c: f64) -> f64 {
    let r = r.clamp(0.0, (h.rows() - 1) as f64);
    let c = c.clamp(0.0, (h.cols() - 1) as f64);
    let (r0, c0) = (r.floor() as usize, c.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(h.rows() - 1), (c0 + 1).min(h.cols() - 1));
    let (fr, fc) = (r - r0 as f64, c - c0 as f64);
    let top = h.get(r0, c0) as f64 * (1.0 - fc) + h.get(r0, c1) as f64 * fc;
    let bottom = h.get(r1, c0) as f64 * (1.0 - fc) + h.get(r1, c1) as f64 * fc;
    top * (1.0 - fr) + bottom * fr
}

/// Lucas-Kanade flow of the window around `point` from `a` to `b`, without
/// pyramids. Positive `d_row` means content moved to larger row indices.
///
/// The normal matrix uses the gradients of `a`; each iteration re-samples
/// `b` at the current estimate and solves for the update. One iteration is
/// the classic single-step solver.
pub fn lk_flow_iter(
    a: &Heatmap,
    b: &Heatmap,
    point: (usize, usize),
    window_radius: usize,
    iterations: usize,
) -> Result<Flow> {
    a.geometry().ensure_same(b.geometry())?;
    let (r0, c0) = point;
    if r0 < window_radius
        || c0 < window_radius
        || r0 + window_radius >= a.rows()
        || c0 + window_radius >= a.cols()
    {
        return Err(Error::param(format!(
            "point ({r0}, {c0}) closer than {window_radius} bins to the border"
        )));
    }
    if iterations == 0 {
        return Err(Error::param("lk iterations must be >= 1"));
    }
    let invalid = Flow {
        d_row: 0.0,
        d_col: 0.0,
        valid: false,
    };
    let cells: Vec<(usize, usize, f64, f64)> = (r0 - window_radius..=r0 + window_radius)
        .flat_map(|r| (c0 - window_radius..=c0 + window_radius).map(move |c| (r, c)))
        .map(|(r, c)| {
            let (ir, ic) = gradient(a, r, c);
            (r, c, ir, ic)
        })
        .collect();
    let (mut gxx, mut gxy, mut gyy) = (0.0, 0.0, 0.0);
    for &(_, _, ir, ic) in &cells {
        gxx += ir * ir;
        gxy += ir * ic;
        gyy += ic * ic;
    }
    let det = gxx * gyy - gxy * gxy;
    let disc = ((gxx - gyy).powi(2) / 4.0 + gxy * gxy).sqrt();
    let min_eig = (gxx + gyy) / 2.0 - disc;
    if !(min_eig >= LK_MIN_EIGENVALUE) || !(det > 0.0) {
        return Ok(invalid);
    }
    let limit = window_radius as f64 + 1.0;
    let (mut d_row, mut d_col) = (0.0, 0.0);
    for _ in 0..iterations {
        let (mut bx, mut by) = (0.0, 0.0);
        for &(r, c, ir, ic) in &cells {
            let it = sample(b, r as f64 + d_row, c as f64 + d_col) - a.get(r, c) as f64;
            bx += ir * it;
            by += ic * it;
        }
        // G v = -b
        let ur = (-gyy * bx + gxy * by) / det;
        let uc = (gxy * bx - gxx * by) / det;
        d_row += ur;
        d_col += uc;
        if !d_row.is_finite() || !d_col.is_finite() || d_row.abs() > limit || d_col.abs() > limit {
            return Ok(invalid);
        }
        if ur.abs().max(uc.abs()) < LK_CONVERGED {
            break;
        }
    }
    Ok(Flow {
        d_row,
        d_col,
        valid: true,
    })
}

/// [`lk_flow_iter`] with [`DEFAULT_LK_ITERATIONS`].
pub fn lk_flow(a: &Heatmap, b: &Heatmap, point: (usize, usize), window_radius: usize) -> Result<Flow> {
    lk_flow_iter(a, b, point, window_radius, DEFAULT_LK_ITERATIONS)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointTrack {
    pub start: (usize, usize),
    pub positions: Vec<(f64, f64)>,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Lattice spacing of tracked points, bins.
    pub spacing: usize,
    pub window_radius: usize,
    /// Frames per motion-feature window.
    pub window_len: usize,
    pub stride: usize,
    pub psnr_cap: f64,
    /// Occupancy map cell size, meters.
    pub map_resolution: f64,
    pub map_threshold: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            spacing: 4,
            window_radius: 3,
            window_len: 10,
            stride: 5,
            psnr_cap: DEFAULT_PSNR_CAP,
            map_resolution: 0.1,
            map_threshold: 0.5,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spacing == 0 || self.window_radius == 0 || self.stride == 0 {
            return Err(Error::param("spacing, window_radius and stride must be >= 1"));
        }
        if self.window_len < 3 {
            return Err(Error::param(format!("window_len must be >= 3, got {}", self.window_len)));
        }
        if !(self.psnr_cap > 0.0) || !(self.map_resolution > 0.0) {
            return Err(Error::param("psnr_cap and map_resolution must be positive"));
        }
        if !(0.0..=1.0).contains(&self.map_threshold) {
            return Err(Error::param("map_threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Seeds a lattice at `spacing` (offset by half a spacing, keeping only
/// points a full window from the border) and propagates every point frame to
/// frame. Once a point is invalid it stays invalid.
pub fn track_grid(seq: &FrameSequence, spacing: usize, window_radius: usize) -> Result<Vec<PointTrack>> {
    if spacing == 0 {
        return Err(Error::param("track spacing must be >= 1"));
    }
    let Some(geom) = seq.geometry() else {
        return Ok(Vec::new());
    };
    let (rows, cols) = (geom.rows(), geom.cols());
    let frames: Vec<&Heatmap> = seq.heatmaps().collect();
    let inside = |r: f64, c: f64| {
        r >= window_radius as f64
            && c >= window_radius as f64
            && r < (rows - window_radius) as f64 - 0.5
            && c < (cols - window_radius) as f64 - 0.5
    };
    let mut tracks = Vec::new();
    for r0 in (spacing / 2..rows).step_by(spacing) {
        for c0 in (spacing / 2..cols).step_by(spacing) {
            if !inside(r0 as f64, c0 as f64) {
                continue;
            }
            let mut pos = (r0 as f64, c0 as f64);
            let mut positions = vec![pos];
            let mut valid = vec![true];
            let mut alive = true;
            for pair in frames.windows(2) {
                if alive {
                    let p = (pos.0.round() as usize, pos.1.round() as usize);
                    let flow = lk_flow(pair[0], pair[1], p, window_radius)?;
                    if flow.valid {
                        pos = (pos.0 + flow.d_row, pos.1 + flow.d_col);
                        alive = inside(pos.0, pos.1);
                    } else {
                        alive = false;
                    }
                }
                positions.push(pos);
                valid.push(alive);
            }
            tracks.push(PointTrack {
                start: (r0, c0),
                positions,
                valid,
            });
        }
    }
    Ok(tracks)
}

/// Concatenated normalized histograms of velocity magnitude, velocity angle,
/// acceleration magnitude and acceleration angle.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFeature {
    pub values: Vec<f64>,
}

fn magnitude_bin(m: f64) -> usize {
    ((m / (MAX_MAGNITUDE / HIST_BINS as f64)) as usize).min(HIST_BINS - 1)
}

/// Bins on `(-pi, pi]`.
fn angle_bin(a: f64) -> usize {
    let width = 2.0 * std::f64::consts::PI / HIST_BINS as f64;
    let b = ((a + std::f64::consts::PI) / width).ceil() as i64 - 1;
    b.clamp(0, HIST_BINS as i64 - 1) as usize
}

fn push_vector(hist: &mut [f64], mag_block: usize, angle_block: usize, v: (f64, f64)) {
    let m = (v.0 * v.0 + v.1 * v.1).sqrt();
    hist[mag_block * HIST_BINS + magnitude_bin(m)] += 1.0;
    hist[angle_block * HIST_BINS + angle_bin(v.0.atan2(v.1))] += 1.0;
}

/// One feature per window of `window_len` frames advanced by `stride`.
/// Windows without a single valid velocity sample are dropped.
pub fn motion_features(tracks: &[PointTrack], window_len: usize, stride: usize) -> Result<Vec<MotionFeature>> {
    if window_len < 3 {
        return Err(Error::param(format!("window_len must be >= 3, got {window_len}")));
    }
    if stride == 0 {
        return Err(Error::param("stride must be >= 1"));
    }
    let n_frames = tracks.iter().map(|t| t.positions.len()).max().unwrap_or(0);
    let mut out = Vec::new();
    let mut start = 0;
    while start + window_len <= n_frames {
        let mut hist = vec![0.0; FEATURE_DIM];
        for track in tracks {
            let mut prev_v: Option<(f64, f64)> = None;
            for t in start..start + window_len - 1 {
                if !(track.valid[t] && track.valid[t + 1]) {
                    prev_v = None;
                    continue;
                }
                let (p0, p1) = (track.positions[t], track.positions[t + 1]);
                let v = (p1.0 - p0.0, p1.1 - p0.1);
                push_vector(&mut hist, 0, 1, v);
                if let Some(pv) = prev_v {
                    push_vector(&mut hist, 2, 3, (v.0 - pv.0, v.1 - pv.1));
                }
                prev_v = Some(v);
            }
        }
        if hist[..HIST_BINS].iter().sum::<f64>() > 0.0 {
            for block in hist.chunks_mut(HIST_BINS) {
                let total: f64 = block.iter().sum();
                if total > 0.0 {
                    block.iter_mut().for_each(|v| *v /= total);
                }
            }
            out.push(MotionFeature { values: hist });
        }
        start += stride;
    }
    Ok(out)
}

fn check_covariance(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if !m.is_square() || m.iter().any(|v| !v.is_finite()) {
        return Err(Error::param(format!("{name} must be a finite square matrix")));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-9 * scale {
        return Err(Error::param(format!("{name} is not symmetric")));
    }
    Ok(())
}

fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians.
pub fn gaussian_frechet(
    mu1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> Result<f64> {
    check_covariance(cov1, "cov1")?;
    check_covariance(cov2, "cov2")?;
    let d = mu1.len();
    if mu2.len() != d || cov1.nrows() != d || cov2.nrows() != d {
        return Err(Error::ShapeMismatch("means and covariances must share one dimension".into()));
    }
    if mu1.iter().chain(mu2.iter()).any(|v| !v.is_finite()) {
        return Err(Error::param("means must be finite"));
    }
    let s1 = sqrtm_psd(cov1);
    let inner = &s1 * cov2 * &s1;
    // symmetrize round-off before the second root
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = sqrtm_psd(&inner);
    let dist = (mu1 - mu2).norm_squared() + (cov1 + cov2 - cross * 2.0).trace();
    Ok(dist.max(0.0))
}

fn fit_gaussian(features: &[MotionFeature]) -> (DVector<f64>, DMatrix<f64>) {
    let n = features.len();
    let d = features[0].values.len();
    let mut mu = DVector::zeros(d);
    for f in features {
        mu += DVector::from_column_slice(&f.values);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let x = DVector::from_column_slice(&f.values) - &mu;
        cov += &x * x.transpose();
    }
    cov /= (n - 1) as f64;
    cov += DMatrix::identity(d, d) * COV_REGULARIZER;
    (mu, cov)
}

/// One motion feature per window of `window_len` frames (advanced by
/// `stride`), each from a lattice freshly seeded at the window's first frame.
fn sequence_features(seq: &FrameSequence, cfg: &MetricConfig, side: &str) -> Result<Vec<MotionFeature>> {
    if seq.len() < cfg.window_len + 2 {
        return Err(Error::Insufficient(format!(
            "{side} sequence has {} frames, fvmd needs at least {}",
            seq.len(),
            cfg.window_len + 2
        )));
    }
    let frames = seq.frames();
    let mut features = Vec::new();
    let mut start = 0;
    while start + cfg.window_len <= frames.len() {
        let clip = FrameSequence::new(frames[start..start + cfg.window_len].to_vec(), seq.modality_label())?;
        let tracks = track_grid(&clip, cfg.spacing, cfg.window_radius)?;
        features.extend(motion_features(&tracks, cfg.window_len, cfg.window_len)?);
        start += cfg.stride;
    }
    if features.len() < 2 {
        return Err(Error::Insufficient(format!(
            "{side} sequence yields {} motion-feature windows, fvmd needs 2",
            features.len()
        )));
    }
    Ok(features)
}

/// Fréchet distance between Gaussian fits of the motion features of the two
/// sequences.
pub fn fvmd(pred: &FrameSequence, reference: &FrameSequence, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    let fp = sequence_features(pred, cfg, "predicted")?;
    let fr = sequence_features(reference, cfg, "reference")?;
    let (mu1, cov1) = fit_gaussian(&fp);
    let (mu2, cov2) = fit_gaussian(&fr);
    gaussian_frechet(&mu1, &cov1, &mu2, &cov2)
}

/// Mean distance between the integer correlation-peak displacements of
/// consecutive predicted frames and consecutive reference frames, in bins.
pub fn peak_distance_metric(pred: &FrameSequence, reference: &FrameSequence) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted frames vs {} reference frames",
            pred.len(),
            reference.len()
        )));
    }
    if let (Some(a), Some(b)) = (pred.geometry(), reference.geometry()) {
        a.ensure_same(b)?;
    }
    let dp = sequence_displacements(pred, false)?;
    let dr = sequence_displacements(reference, false)?;
    Ok(dp.iter().zip(&dr).map(|(a, b)| a.distance(b)).sum::<f64>() / dp.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApeReport {
    pub rmse: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Per-pose position error without any alignment.
pub fn ape(est: &Trajectory, gt: &Trajectory) -> Result<ApeReport> {
    if est.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} estimated poses vs {} ground-truth poses",
            est.len(),
            gt.len()
        )));
    }
    if est.is_empty() {
        return Err(Error::Insufficient("ape needs at least one pose".into()));
    }
    let mut errors = Vec::with_capacity(est.len());
    for (i, (e, g)) in est.poses().iter().zip(gt.poses()).enumerate() {
        if (e.t - g.t).abs() > TIMESTAMP_TOLERANCE {
            return Err(Error::InvalidSequence(format!(
                "timestamp mismatch at pose {i}: {} vs {}",
                e.t, g.t
            )));
        }
        errors.push(e.pose.position().distance(&g.pose.position()));
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let mean_sq = errors.iter().map(|e| e * e).sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    Ok(ApeReport {
        rmse: mean_sq.sqrt(),
        mean,
        std: var.sqrt(),
    })
}

/// Boolean occupancy over world cells `[origin + (i, j)] * resolution`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    resolution: f64,
    /// Cell index of `cells[0]` along x and y.
    origin: (i64, i64),
    width: usize,
    height: usize,
    cells: Vec<bool>,
}

impl OccupancyGrid {
    /// Grid covering exactly the given occupied cell indices.
    pub fn from_cells(resolution: f64, occupied: &[(i64, i64)]) -> Result<Self> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(Error::param(format!("map resolution must be positive, got {resolution}")));
        }
        if occupied.is_empty() {
            return Ok(Self {
                resolution,
                origin: (0, 0),
                width: 0,
                height: 0,
                cells: Vec::new(),
            });
        }
        let min_x = occupied.iter().map(|c| c.0).min().unwrap();
        let max_x = occupied.iter().map(|c| c.0).max().unwrap();
        let min_y = occupied.iter().map(|c| c.1).min().unwrap();
        let max_y = occupied.iter().map(|c| c.1).max().unwrap();
        let width = (max_x - min_x + 1) as usize;
        let height = (max_y - min_y + 1) as usize;
        let mut cells = vec![false; width * height];
        for &(x, y) in occupied {
            cells[(y - min_y) as usize * width + (x - min_x) as usize] = true;
        }
        Ok(Self {
            resolution,
            origin: (min_x, min_y),
            width,
            height,
            cells,
        })
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Occupied cell indices in row-major order.
    pub fn occupied(&self) -> Vec<(i64, i64)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.cells[y * self.width + x] {
                    out.push((self.origin.0 + x as i64, self.origin.1 + y as i64));
                }
            }
        }
        out
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_occupied(&self, x: i64, y: i64) -> bool {
        let (dx, dy) = (x - self.origin.0, y - self.origin.1);
        dx >= 0
            && dy >= 0
            && (dx as usize) < self.width
            && (dy as usize) < self.height
            && self.cells[dy as usize * self.width + dx as usize]
    }

    /// World coordinates of the center of cell `(x, y)`.
    pub fn cell_center(&self, x: i64, y: i64) -> (f64, f64) {
        ((x as f64 + 0.5) * self.resolution, (y as f64 + 0.5) * self.resolution)
    }
}

/// Union of the thresholded returns of every frame placed at its pose.
pub fn rasterize_map(seq: &FrameSequence, traj: &Trajectory, resolution: f64, threshold: f64) -> Result<OccupancyGrid> {
    if seq.len() != traj.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} frames vs {} poses",
            seq.len(),
            traj.len()
        )));
    }
    let mut occupied = Vec::new();
    for (i, (frame, sp)) in seq.frames().iter().zip(traj.poses()).enumerate() {
        if (frame.timestamp - sp.t).abs() > TIMESTAMP_TOLERANCE {
            return Err(Error::InvalidSequence(format!(
                "frame {i} at t = {} but pose at t = {}",
                frame.timestamp, sp.t
            )));
        }
        for p in polar_to_cart(&frame.heatmap, &sp.pose, threshold)? {
            occupied.push(((p.x / resolution).floor() as i64, (p.y / resolution).floor() as i64));
        }
    }
    occupied.sort_unstable();
    occupied.dedup();
    OccupancyGrid::from_cells(resolution, &occupied)
}

/// Best integer shift of `b` onto `a` by occupied-pair counting, searched
/// within half the larger map extent per axis around zero. Ties prefer the smaller shift.
pub fn align_shift(a: &OccupancyGrid, b: &OccupancyGrid) -> (i64, i64) {
    let ca = a.occupied();
    let cb = b.occupied();
    if ca.is_empty() || cb.is_empty() {
        return (0, 0);
    }
    let wx = (a.width.max(b.width) as i64 + 1) / 2;
    let wy = (a.height.max(b.height) as i64 + 1) / 2;
    let (lo_x, lo_y) = (-wx, -wy);
    let (hi_x, hi_y) = (wx, wy);
    let nx = (2 * wx + 1) as usize;
    let ny = (2 * wy + 1) as usize;
    let mut counts = vec![0u32; nx * ny];
    for &(xa, ya) in &ca {
        for &(xb, yb) in &cb {
            let (sx, sy) = (xa - xb, ya - yb);
            if sx < lo_x || sx > hi_x || sy < lo_y || sy > hi_y {
                continue;
            }
            counts[(sy - lo_y) as usize * nx + (sx - lo_x) as usize] += 1;
        }
    }
    let mut best = (0i64, 0i64);
    let mut best_count = 0u32;
    for iy in 0..ny {
        for ix in 0..nx {
            let count = counts[iy * nx + ix];
            let s = (lo_x + ix as i64, lo_y + iy as i64);
            let better = count > best_count
                || (count == best_count && count > 0 && (s.0.abs() + s.1.abs()) < (best.0.abs() + best.1.abs()));
            if better {
                best = s;
                best_count = count;
            }
        }
    }
    best
}

/// IoU of occupied cells after translating `b` by the best alignment shift.
/// Two empty maps agree perfectly.
pub fn map_iou(a: &OccupancyGrid, b: &OccupancyGrid) -> Result<f64> {
    if (a.resolution - b.resolution).abs() > 1e-12 * a.resolution.max(b.resolution) {
        return Err(Error::ShapeMismatch(format!(
            "map resolutions differ: {} vs {}",
            a.resolution, b.resolution
        )));
    }
    let (na, nb) = (a.count(), b.count());
    if na == 0 && nb == 0 {
        return Ok(1.0);
    }
    let (sx, sy) = align_shift(a, b);
    let inter = b
        .occupied()
        .iter()
        .filter(|&&(x, y)| a.is_occupied(x + sx, y + sy))
        .count();
    Ok(inter as f64 / (na + nb - inter) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::{Frame, Pose2D, SensorGeometry, StampedPose};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom(n: usize) -> SensorGeometry {
        SensorGeometry::new(100.0, 5.0, n, n).unwrap()
    }

    /// Sum of broad Gaussian blobs, shifted by `(dr, dc)` bins.
    fn blobs(g: SensorGeometry, seed: u64, dr: f64, dc: f64) -> Heatmap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = g.rows() as f64;
        let centers: Vec<(f64, f64, f64)> = (0..6)
            .map(|_| (rng.gen_range(0.0..n), rng.gen_range(0.0..n), rng.gen_range(3.0..5.0)))
            .collect();
        Heatmap::from_fn(g, |r, c| {
            let v: f64 = centers
                .iter()
                .map(|&(cr, cc, s)| {
                    let (y, x) = (r as f64 - cr - dr, c as f64 - cc - dc);
                    (-(x * x + y * y) / (2.0 * s * s)).exp()
                })
                .sum();
            0.5 * v.min(2.0)
        })
        .unwrap()
    }

    fn sequence(frames: Vec<Heatmap>) -> FrameSequence {
        let frames = frames
            .into_iter()
            .enumerate()
            .map(|(i, heatmap)| Frame {
                timestamp: i as f64 * 0.1,
                heatmap,
                pose: Pose2D::identity(),
            })
            .collect();
        FrameSequence::new(frames, "test").unwrap()
    }

    fn line_trajectory(n: usize, offset_from: usize, offset: (f64, f64)) -> Trajectory {
        Trajectory::new(
            (0..n)
                .map(|i| {
                    let (dx, dy) = if i >= offset_from { offset } else { (0.0, 0.0) };
                    StampedPose {
                        t: i as f64,
                        pose: Pose2D::new(i as f64 * 0.1 + dx, dy, 0.0),
                    }
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn psnr_examples() {
        let g = geom(8);
        let z = Heatmap::zeros(g);
        assert_eq!(psnr(&z, &z, DEFAULT_PSNR_CAP).unwrap(), 100.0);
        let half = Heatmap::filled(g, 0.5).unwrap();
        assert!((psnr(&half, &z, 100.0).unwrap() - 6.020599913).abs() < 1e-6);
        assert!(psnr(&Heatmap::filled(g, 1.0).unwrap(), &z, 100.0).unwrap().abs() < 1e-12);
        assert!(psnr(&z, &z, 0.0).is_err());
        assert!(psnr(&z, &Heatmap::zeros(geom(12)), 100.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let g = geom(16);
        let base = blobs(g, 1, 0.0, 0.0);
        let mean_psnr = |amp: f64| {
            (0..5)
                .map(|s| {
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    let noisy = Heatmap::from_f64_clamped(
                        g,
                        &base.to_f64().iter().map(|v| v + rng.gen_range(-amp..amp)).collect::<Vec<_>>(),
                    )
                    .unwrap();
                    psnr(&noisy, &base, 100.0).unwrap()
                })
                .sum::<f64>()
                / 5.0
        };
        let levels: Vec<f64> = [0.01, 0.05, 0.1, 0.2].iter().map(|&a| mean_psnr(a)).collect();
        for w in levels.windows(2) {
            assert!(w[1] < w[0], "{levels:?}");
        }
    }

    #[test]
    fn lk_static_and_blank() {
        let g = geom(32);
        let a = blobs(g, 2, 0.0, 0.0);
        let f = lk_flow(&a, &a, (16, 16), 3).unwrap();
        assert!(f.valid && f.d_row == 0.0 && f.d_col == 0.0);
        let z = Heatmap::zeros(g);
        assert!(!lk_flow(&z, &z, (16, 16), 3).unwrap().valid);
        assert!(lk_flow(&a, &a, (2, 16), 3).is_err());
    }

    #[test]
    fn lk_recovers_unit_shift() {
        let g = geom(32);
        let a = blobs(g, 3, 0.0, 0.0);
        let b = blobs(g, 3, 1.0, 0.0);
        let f = lk_flow(&a, &b, (16, 16), 4).unwrap();
        assert!(f.valid);
        assert!((f.d_row - 1.0).abs() < 0.3 && f.d_col.abs() < 0.3, "{f:?}");
    }

    #[test]
    fn track_grid_examples() {
        let g = geom(32);
        let frame = blobs(g, 4, 0.0, 0.0);
        let tracks = track_grid(&sequence(vec![frame.clone(); 4]), 4, 3).unwrap();
        assert!(!tracks.is_empty());
        for t in &tracks {
            for (p, v) in t.positions.iter().zip(&t.valid) {
                if *v {
                    assert_eq!(*p, (t.start.0 as f64, t.start.1 as f64));
                }
            }
        }

        let blank = track_grid(&sequence(vec![Heatmap::zeros(g); 3]), 4, 3).unwrap();
        assert!(blank.iter().all(|t| t.valid[0] && !t.valid[1] && !t.valid[2]));
        assert!(track_grid(&sequence(vec![frame; 2]), 0, 3).is_err());
    }

    #[test]
    fn tracks_follow_global_shift() {
        let g = geom(48);
        let frames: Vec<_> = (0..5).map(|k| blobs(g, 5, k as f64, 0.0)).collect();
        let tracks = track_grid(&sequence(frames), 6, 4).unwrap();
        let mut steps = Vec::new();
        for t in &tracks {
            for k in 0..4 {
                if t.valid[k] && t.valid[k + 1] {
                    steps.push(t.positions[k + 1].0 - t.positions[k].0);
                }
            }
        }
        let mean = steps.iter().sum::<f64>() / steps.len() as f64;
        assert!((mean - 1.0).abs() < 0.3, "{mean}");
    }

    fn track_with_velocity(n: usize, v: (f64, f64)) -> PointTrack {
        PointTrack {
            start: (10, 10),
            positions: (0..n).map(|i| (10.0 + v.0 * i as f64, 10.0 + v.1 * i as f64)).collect(),
            valid: vec![true; n],
        }
    }

    #[test]
    fn motion_feature_examples() {
        let still = motion_features(&[track_with_velocity(6, (0.0, 0.0))], 3, 1).unwrap();
        assert_eq!(still.len(), 4);
        for f in &still {
            assert_eq!(f.values[0], 1.0);
            assert_eq!(f.values[2 * HIST_BINS], 1.0);
        }

        // speed 1.3 bins/frame lands in magnitude bin 2; angle 0 sits in bin 3
        let moving = motion_features(&[track_with_velocity(5, (0.0, 1.3))], 4, 1).unwrap();
        for f in &moving {
            assert_eq!(f.values[2], 1.0);
            assert_eq!(f.values[HIST_BINS + 3], 1.0);
            assert_eq!(f.values[2 * HIST_BINS], 1.0);
            for block in f.values.chunks(HIST_BINS) {
                assert!((block.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        let dead = PointTrack {
            valid: vec![true, false, false, false],
            ..track_with_velocity(4, (1.0, 0.0))
        };
        assert!(motion_features(&[dead], 3, 1).unwrap().is_empty());
        assert!(motion_features(&[], 3, 1).unwrap().is_empty());
        assert!(motion_features(&[track_with_velocity(4, (0.0, 0.0))], 2, 1).is_err());
    }

    #[test]
    fn angle_bins_cover_half_open_circle() {
        use std::f64::consts::PI;
        assert_eq!(angle_bin(PI), HIST_BINS - 1);
        assert_eq!(angle_bin(-PI + 1e-9), 0);
        assert_eq!(angle_bin(0.0), 3);
        assert_eq!(angle_bin(1e-9), 4);
        assert_eq!(magnitude_bin(10.0), HIST_BINS - 1);
        assert_eq!(magnitude_bin(0.49), 0);
    }

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn frechet_closed_forms() {
        let (m0, m3) = (DVector::from_element(1, 0.0), DVector::from_element(1, 3.0));
        assert!((gaussian_frechet(&m0, &scalar(1.0), &m3, &scalar(1.0)).unwrap() - 9.0).abs() < 1e-9);
        assert!((gaussian_frechet(&m0, &scalar(1.0), &m0, &scalar(4.0)).unwrap() - 1.0).abs() < 1e-9);

        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let mu = DVector::from_vec(vec![1.0, -1.0]);
        assert!(gaussian_frechet(&mu, &cov, &mu, &cov).unwrap().abs() < 1e-9);

        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(gaussian_frechet(&mu, &asym, &mu, &cov).is_err());
        let nan = DMatrix::from_row_slice(2, 2, &[f64::NAN, 0.0, 0.0, 1.0]);
        assert!(gaussian_frechet(&mu, &nan, &mu, &cov).is_err());
    }

    fn moving_sequence(seed: u64, n: usize) -> FrameSequence {
        let g = geom(32);
        sequence((0..n).map(|k| blobs(g, seed, 0.4 * k as f64, 0.1 * k as f64)).collect())
    }

    #[test]
    fn fvmd_identity_and_reversal() {
        let cfg = MetricConfig {
            window_len: 4,
            stride: 2,
            ..Default::default()
        };
        let seq = moving_sequence(6, 12);
        assert!(fvmd(&seq, &seq, &cfg).unwrap() <= 1e-6);
        let mut frames: Vec<Heatmap> = seq.heatmaps().cloned().collect();
        frames.reverse();
        let rev = sequence(frames);
        let d = fvmd(&rev, &seq, &cfg).unwrap();
        assert!(d > 0.0);
        assert!((d - fvmd(&seq, &rev, &cfg).unwrap()).abs() < 1e-6);

        let short = moving_sequence(6, 5);
        assert!(matches!(fvmd(&short, &seq, &cfg), Err(Error::Insufficient(_))));
    }

    #[test]
    fn peak_distance_examples() {
        let g = geom(16);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base = Heatmap::from_fn(g, |_, _| if rng.gen_bool(0.2) { rng.gen_range(0.2..1.0) } else { 0.0 }).unwrap();
        let reference = sequence((0..5).map(|k| base.shifted(k, 0)).collect());
        assert_eq!(peak_distance_metric(&reference, &reference).unwrap(), 0.0);

        let dim = sequence(reference.heatmaps().map(|h| h.scaled(0.5).unwrap()).collect());
        assert_eq!(peak_distance_metric(&dim, &reference).unwrap(), 0.0);

        let short = sequence(reference.heatmaps().take(4).cloned().collect());
        assert!(peak_distance_metric(&short, &reference).is_err());
    }

    #[test]
    fn peak_distance_of_jittered_impulses() {
        let g = geom(16);
        let mut impulse = vec![0.0; 256];
        impulse[8 * 16 + 8] = 1.0;
        let base = Heatmap::from_f64_clamped(g, &impulse).unwrap();
        let jitter = [(0i64, 0i64), (1, 0), (1, 2), (-1, 1), (0, 0)];
        let reference = sequence(vec![base.clone(); 5]);
        let pred = sequence(jitter.iter().map(|&(r, c)| base.shifted(r, c)).collect());
        let expected = jitter
            .windows(2)
            .map(|p| (((p[1].0 - p[0].0).pow(2) + (p[1].1 - p[0].1).pow(2)) as f64).sqrt())
            .sum::<f64>()
            / 4.0;
        assert!((peak_distance_metric(&pred, &reference).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ape_examples() {
        let gt = line_trajectory(11, 99, (0.0, 0.0));
        assert_eq!(ape(&gt, &gt).unwrap(), ApeReport { rmse: 0.0, mean: 0.0, std: 0.0 });

        let est = line_trajectory(11, 1, (0.3, 0.4));
        let r = ape(&est, &gt).unwrap();
        assert!((r.mean - 0.5 * 10.0 / 11.0).abs() < 1e-12);
        assert!((r.rmse - (0.25 * 10.0 / 11.0f64).sqrt()).abs() < 1e-12);
        assert!((r.rmse.powi(2) - r.mean.powi(2) - r.std.powi(2)).abs() < 1e-12);

        let one = line_trajectory(1, 99, (0.0, 0.0));
        assert_eq!(ape(&one, &one).unwrap().std, 0.0);
        assert!(ape(&one, &gt).is_err());
        let shifted = Trajectory::new(
            gt.poses().iter().map(|p| StampedPose { t: p.t + 0.5, ..*p }).collect(),
        )
        .unwrap();
        assert!(ape(&shifted, &gt).is_err());
    }

    fn grid(cells: &[(i64, i64)]) -> OccupancyGrid {
        OccupancyGrid::from_cells(0.1, cells).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = grid(&[(0, 0), (1, 0), (2, 0), (2, 1), (2, 2), (5, 3)]);
        assert_eq!(map_iou(&a, &a).unwrap(), 1.0);
        let shifted: Vec<_> = a.occupied().iter().map(|&(x, y)| (x + 3, y - 2)).collect();
        assert_eq!(map_iou(&a, &grid(&shifted)).unwrap(), 1.0);
        // one of the two cells aligns
        assert_eq!(map_iou(&grid(&[(0, 0)]), &grid(&[(1, 0), (2, 0)])).unwrap(), 0.5);
        // beyond the search window nothing is recovered
        assert_eq!(map_iou(&grid(&[(0, 0)]), &grid(&[(40, 40)])).unwrap(), 0.0);
        assert_eq!(map_iou(&grid(&[]), &grid(&[])).unwrap(), 1.0);
        assert_eq!(map_iou(&grid(&[]), &a).unwrap(), 0.0);
        let coarse = OccupancyGrid::from_cells(0.2, &[(0, 0)]).unwrap();
        assert!(map_iou(&a, &coarse).is_err());
    }

    #[test]
    fn rasterize_examples() {
        let g = geom(8);
        let seq = sequence(vec![Heatmap::zeros(g); 3]);
        let traj = seq.trajectory();
        assert_eq!(rasterize_map(&seq, &traj, 0.1, 0.5).unwrap().count(), 0);

        let mut v = vec![0.0; 64];
        v[5 * 8 + 4] = 1.0;
        let one = Heatmap::from_f64_clamped(g, &v).unwrap();
        let seq = sequence(vec![one.clone(), one]);
        let m = rasterize_map(&seq, &seq.trajectory(), 0.1, 0.5).unwrap();
        assert_eq!(m.count(), 1);
        assert!(rasterize_map(&seq, &line_trajectory(3, 99, (0.0, 0.0)), 0.1, 0.5).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn iou_shift_invariance(seed in any::<u64>(), sx in -4i64..=4, sy in -4i64..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cells: Vec<(i64, i64)> = (0..12).map(|_| (rng.gen_range(0..10), rng.gen_range(0..10))).collect();
            cells.push((0, 0));
            cells.push((9, 9));
            let a = grid(&cells);
            let b = grid(&cells.iter().map(|&(x, y)| (x + sx, y + sy)).collect::<Vec<_>>());
            prop_assert_eq!(map_iou(&a, &b).unwrap(), 1.0);
        }

        #[test]
        fn iou_in_unit_interval(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<(i64, i64)> = (0..rng.gen_range(0..10)).map(|_| (rng.gen_range(0..8), rng.gen_range(0..8))).collect();
            let b: Vec<(i64, i64)> = (0..rng.gen_range(0..10)).map(|_| (rng.gen_range(0..8), rng.gen_range(0..8))).collect();
            let v = map_iou(&grid(&a), &grid(&b)).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn ape_identity(errors in prop::collection::vec(0.0f64..3.0, 1..30)) {
            let n = errors.len();
            let gt = line_trajectory(n, 99, (0.0, 0.0));
            let est = Trajectory::new(gt.poses().iter().zip(&errors).map(|(p, e)| StampedPose {
                t: p.t,
                pose: Pose2D::new(p.pose.x, p.pose.y + e, 0.0),
            }).collect()).unwrap();
            let r = ape(&est, &gt).unwrap();
            prop_assert!(r.rmse.powi(2) >= r.mean.powi(2) - 1e-12);
            prop_assert!((r.rmse.powi(2) - r.mean.powi(2) - r.std.powi(2)).abs() < 1e-9);
        }

        #[test]
        fn frechet_matches_1d_closed_form(m1 in -5.0f64..5.0, m2 in -5.0f64..5.0, v1 in 0.0f64..9.0, v2 in 0.0f64..9.0) {
            let d = gaussian_frechet(
                &DVector::from_element(1, m1), &scalar(v1),
                &DVector::from_element(1, m2), &scalar(v2),
            ).unwrap();
            let expected = (m1 - m2).powi(2) + (v1.sqrt() - v2.sqrt()).powi(2);
            prop_assert!((d - expected).abs() < 1e-9);
        }

        #[test]
        fn peak_distance_scale_invariant(seed in any::<u64>(), k in 0.1f64..1.0) {
            let g = geom(12);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames: Vec<Heatmap> = (0..4).map(|_| Heatmap::from_fn(g, |_, _| rng.gen_range(0.0..1.0)).unwrap()).collect();
            let a = sequence(frames.clone());
            let b = sequence(frames.iter().map(|h| h.shifted(1, 0)).collect());
            let scaled = sequence(frames.iter().map(|h| h.scaled(k).unwrap()).collect());
            let d1 = peak_distance_metric(&a, &b).unwrap();
            let d2 = peak_distance_metric(&scaled, &b).unwrap();
            prop_assert!((d1 - d2).abs() < 1e-9);
        }
    }
}
