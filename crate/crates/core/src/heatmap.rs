//! Range-azimuth grids, planar poses and frame sequences.
//!
//! Rows index range bins (row 0 nearest the sensor), columns index azimuth
//! bins (column 0 at `-fov/2`, increasing counter-clockwise). Bin centers
//! sit at `row + 0.5` / `col + 0.5`.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sensor field of view and grid resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorGeometry {
    /// Total azimuth field of view in degrees.
    pub azimuth_fov_deg: f64,
    /// Maximum range in meters.
    pub max_range: f64,
    /// Number of range bins (grid height).
    pub n_range_bins: usize,
    /// Number of azimuth bins (grid width).
    pub n_azimuth_bins: usize,
}

impl Default for SensorGeometry {
    fn default() -> Self {
        Self {
            azimuth_fov_deg: 100.0,
            max_range: 5.0,
            n_range_bins: 64,
            n_azimuth_bins: 64,
        }
    }
}

impl SensorGeometry {
    pub fn new(
        azimuth_fov_deg: f64,
        max_range: f64,
        n_range_bins: usize,
        n_azimuth_bins: usize,
    ) -> Result<Self> {
        let g = Self {
            azimuth_fov_deg,
            max_range,
            n_range_bins,
            n_azimuth_bins,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.azimuth_fov_deg > 0.0 && self.azimuth_fov_deg <= 360.0) {
            return Err(Error::Geometry(format!(
                "azimuth_fov must be in (0, 360], got {}",
                self.azimuth_fov_deg
            )));
        }
        if !(self.max_range > 0.0 && self.max_range.is_finite()) {
            return Err(Error::Geometry(format!(
                "max_range must be positive, got {}",
                self.max_range
            )));
        }
        if self.n_range_bins < 8 || self.n_azimuth_bins < 8 {
            return Err(Error::Geometry(format!(
                "grid must be at least 8x8, got {}x{}",
                self.n_range_bins, self.n_azimuth_bins
            )));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.n_range_bins
    }

    pub fn cols(&self) -> usize {
        self.n_azimuth_bins
    }

    pub fn fov_rad(&self) -> f64 {
        self.azimuth_fov_deg.to_radians()
    }

    /// Meters per range bin.
    pub fn range_bin_size(&self) -> f64 {
        self.max_range / self.n_range_bins as f64
    }

    /// Radians per azimuth bin.
    pub fn azimuth_bin_size(&self) -> f64 {
        self.fov_rad() / self.n_azimuth_bins as f64
    }

    pub fn range_of_row(&self, row: f64) -> f64 {
        (row + 0.5) * self.range_bin_size()
    }

    pub fn azimuth_of_col(&self, col: f64) -> f64 {
        -self.fov_rad() / 2.0 + (col + 0.5) * self.azimuth_bin_size()
    }

    pub(crate) fn ensure_same(&self, other: &SensorGeometry) -> Result<()> {
        if self != other {
            return Err(Error::GeometryMismatch {
                left: self.to_string(),
                right: other.to_string(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for SensorGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{} bins, fov {} deg, range {} m",
            self.n_range_bins, self.n_azimuth_bins, self.azimuth_fov_deg, self.max_range
        )
    }
}

/// A range-azimuth intensity grid with values in `[0, 1]`.
///
/// Values are stored as `f32` so that the on-disk frame format round-trips
/// bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    geometry: SensorGeometry,
    values: Vec<f32>,
}

impl Heatmap {
    pub fn new(geometry: SensorGeometry, values: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        let n = geometry.rows() * geometry.cols();
        if values.len() != n {
            return Err(Error::InvalidHeatmap(format!(
                "expected {n} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(Error::InvalidHeatmap(format!(
                "value {} at index {i} outside [0, 1]",
                values[i]
            )));
        }
        Ok(Self { geometry, values })
    }

    pub fn zeros(geometry: SensorGeometry) -> Self {
        let n = geometry.rows() * geometry.cols();
        Self {
            geometry,
            values: vec![0.0; n],
        }
    }

    pub fn filled(geometry: SensorGeometry, value: f32) -> Result<Self> {
        let n = geometry.rows() * geometry.cols();
        Self::new(geometry, vec![value; n])
    }

    /// Builds a heatmap from arbitrary `f64` values, clamping into `[0, 1]`.
    /// Non-finite input is rejected rather than clamped.
    pub fn from_f64_clamped(geometry: SensorGeometry, values: &[f64]) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidHeatmap(format!("non-finite value at index {i}")));
        }
        let clamped = values.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
        Self::new(geometry, clamped)
    }

    /// Evaluates `f(row, col)` for every cell, clamping into `[0, 1]`.
    pub fn from_fn(geometry: SensorGeometry, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let (h, w) = (geometry.rows(), geometry.cols());
        let mut values = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                values.push(f(r, c));
            }
        }
        Self::from_f64_clamped(geometry, &values)
    }

    pub fn geometry(&self) -> &SensorGeometry {
        &self.geometry
    }

    pub fn rows(&self) -> usize {
        self.geometry.rows()
    }

    pub fn cols(&self) -> usize {
        self.geometry.cols()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.cols() + col]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn max_value(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    pub fn is_blank(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Multiplies every value by `factor`, clamping into `[0, 1]`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let v: Vec<f64> = self.values.iter().map(|&x| x as f64 * factor).collect();
        Self::from_f64_clamped(self.geometry, &v)
    }

    /// Translates the content by `(d_row, d_col)` cells with zero fill, so that
    /// `out[i][j] = self[i - d_row][j - d_col]`.
    pub fn shifted(&self, d_row: i64, d_col: i64) -> Self {
        let (h, w) = (self.rows() as i64, self.cols() as i64);
        let mut out = vec![0.0f32; self.values.len()];
        for i in 0..h {
            let si = i - d_row;
            if si < 0 || si >= h {
                continue;
            }
            for j in 0..w {
                let sj = j - d_col;
                if sj < 0 || sj >= w {
                    continue;
                }
                out[(i * w + j) as usize] = self.values[(si * w + sj) as usize];
            }
        }
        Self {
            geometry: self.geometry,
            values: out,
        }
    }
}

/// Normalizes an angle into `(-pi, pi]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let mut a = theta.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Planar pose; `theta` is kept in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Default for Pose2D {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    /// Maps a point from this pose's local frame into the parent frame.
    pub fn transform_point(&self, p: Point2) -> Point2 {
        let (s, c) = self.theta.sin_cos();
        Point2::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y)
    }

    /// `self ⊕ delta`: applies `delta`, expressed in this pose's frame.
    pub fn compose(&self, delta: &Pose2D) -> Pose2D {
        let p = self.transform_point(Point2::new(delta.x, delta.y));
        Pose2D::new(p.x, p.y, self.theta + delta.theta)
    }

    /// Moves `forward` meters along the current heading, then turns by `dtheta`.
    pub fn advance(&self, forward: f64, dtheta: f64) -> Pose2D {
        let (s, c) = self.theta.sin_cos();
        Pose2D::new(self.x + forward * c, self.y + forward * s, self.theta + dtheta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    pub heatmap: Heatmap,
    pub pose: Pose2D,
}

/// Time-ordered heatmaps sharing one geometry, each with its ground-truth pose.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Frame>,
    modality_label: String,
}

impl FrameSequence {
    pub fn new(frames: Vec<Frame>, modality_label: impl Into<String>) -> Result<Self> {
        if let Some(first) = frames.first() {
            let g = *first.heatmap.geometry();
            for (i, f) in frames.iter().enumerate() {
                if *f.heatmap.geometry() != g {
                    return Err(Error::InvalidSequence(format!(
                        "frame {i} geometry differs from frame 0"
                    )));
                }
                if !f.timestamp.is_finite() {
                    return Err(Error::InvalidSequence(format!(
                        "frame {i} has a non-finite timestamp"
                    )));
                }
            }
        }
        for (i, pair) in frames.windows(2).enumerate() {
            if pair[1].timestamp <= pair[0].timestamp {
                return Err(Error::InvalidSequence(format!(
                    "timestamps not strictly increasing at frame {}",
                    i + 1
                )));
            }
        }
        Ok(Self {
            frames,
            modality_label: modality_label.into(),
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn modality_label(&self) -> &str {
        &self.modality_label
    }

    pub fn geometry(&self) -> Option<&SensorGeometry> {
        self.frames.first().map(|f| f.heatmap.geometry())
    }

    pub fn heatmaps(&self) -> impl Iterator<Item = &Heatmap> {
        self.frames.iter().map(|f| &f.heatmap)
    }

    /// Ground-truth trajectory carried by the frames.
    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            poses: self
                .frames
                .iter()
                .map(|f| StampedPose {
                    t: f.timestamp,
                    pose: f.pose,
                })
                .collect(),
        }
    }

    /// Same timestamps and poses, new heatmaps.
    pub fn with_heatmaps(
        &self,
        heatmaps: Vec<Heatmap>,
        modality_label: impl Into<String>,
    ) -> Result<Self> {
        if heatmaps.len() != self.frames.len() {
            return Err(Error::InvalidSequence(format!(
                "expected {} heatmaps, got {}",
                self.frames.len(),
                heatmaps.len()
            )));
        }
        let frames = self
            .frames
            .iter()
            .zip(heatmaps)
            .map(|(f, heatmap)| Frame {
                timestamp: f.timestamp,
                heatmap,
                pose: f.pose,
            })
            .collect();
        Self::new(frames, modality_label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StampedPose {
    pub t: f64,
    pub pose: Pose2D,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    poses: Vec<StampedPose>,
}

impl Trajectory {
    pub fn new(poses: Vec<StampedPose>) -> Result<Self> {
        for (i, pair) in poses.windows(2).enumerate() {
            if pair[1].t <= pair[0].t {
                return Err(Error::InvalidSequence(format!(
                    "trajectory timestamps not strictly increasing at pose {}",
                    i + 1
                )));
            }
        }
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[StampedPose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn path_length(&self) -> f64 {
        self.poses
            .windows(2)
            .map(|p| p[0].pose.position().distance(&p[1].pose.position()))
            .sum()
    }
}

/// World coordinates of every cell at or above `threshold`, placed at its
/// bin center and transformed by `pose`.
pub fn polar_to_cart(h: &Heatmap, pose: &Pose2D, threshold: f64) -> Result<Vec<Point2>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::param(format!("threshold {threshold} outside [0, 1]")));
    }
    let g = h.geometry();
    let mut out = Vec::new();
    for row in 0..g.rows() {
        let r = g.range_of_row(row as f64);
        for col in 0..g.cols() {
            if (h.get(row, col) as f64) < threshold {
                continue;
            }
            let a = g.azimuth_of_col(col as f64);
            let local = Point2::new(r * a.cos(), r * a.sin());
            out.push(pose.transform_point(local));
        }
    }
    Ok(out)
}

/// Mean squared per-cell difference.
pub fn heatmap_mse(a: &Heatmap, b: &Heatmap) -> Result<f64> {
    a.geometry().ensure_same(b.geometry())?;
    let n = a.values.len() as f64;
    let sum: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / n)
}
