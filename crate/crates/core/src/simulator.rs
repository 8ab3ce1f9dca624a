//! Synthetic line-segment worlds, platform trajectories, ideal 2D LiDAR
//! rendering into range-azimuth heatmaps and the degradation models that
//! stand in for noisy radar/sonar-derived predictions.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{Frame, FrameSequence, Heatmap, Point2, Pose2D, SensorGeometry, StampedPose, Trajectory};

/// Range smear applied to every return, in bins.
const RETURN_SIGMA_BINS: f64 = 1.0;
/// Smear is truncated beyond this many sigmas.
const RETURN_TRUNCATION: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: Point2,
    pub b: Point2,
}

impl Segment {
    pub fn new(ax: f64, ay: f64, bx: f64, by: f64) -> Self {
        Self {
            a: Point2::new(ax, ay),
            b: Point2::new(bx, by),
        }
    }

    pub fn length(&self) -> f64 {
        self.a.distance(&self.b)
    }

    /// Distance along the ray `origin + t * (cos, sin)` to this segment.
    fn ray_hit(&self, origin: Point2, dir: (f64, f64)) -> Option<f64> {
        let ex = self.b.x - self.a.x;
        let ey = self.b.y - self.a.y;
        let denom = dir.0 * ey - dir.1 * ex;
        if denom.abs() < 1e-12 {
            return None;
        }
        let wx = self.a.x - origin.x;
        let wy = self.a.y - origin.y;
        let t = (wx * ey - wy * ex) / denom;
        let u = (wx * dir.1 - wy * dir.0) / denom;
        if t > 1e-9 && (-1e-12..=1.0 + 1e-12).contains(&u) {
            Some(t)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Point2,
    pub max: Point2,
}

impl Bounds {
    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }
}

/// Static 2D environment made of wall segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub segments: Vec<Segment>,
    pub bounds: Bounds,
    /// Default start pose for trajectories in this world.
    pub spawn: Pose2D,
}

impl World {
    pub fn new(segments: Vec<Segment>, bounds: Bounds, spawn: Pose2D) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::param("world needs at least one segment"));
        }
        if let Some(i) = segments
            .iter()
            .position(|s| !bounds.contains(s.a) || !bounds.contains(s.b))
        {
            return Err(Error::param(format!("segment {i} lies outside the world bounds")));
        }
        Ok(Self {
            segments,
            bounds,
            spawn,
        })
    }

    /// Nearest hit along a world-frame ray.
    pub fn cast(&self, origin: Point2, heading: f64) -> Option<f64> {
        let dir = (heading.cos(), heading.sin());
        self.segments
            .iter()
            .filter_map(|s| s.ray_hit(origin, dir))
            .fold(None, |best: Option<f64>, t| Some(best.map_or(t, |b| b.min(t))))
    }
}

fn push_box(segs: &mut Vec<Segment>, cx: f64, cy: f64, hx: f64, hy: f64) {
    let (x0, x1, y0, y1) = (cx - hx, cx + hx, cy - hy, cy + hy);
    segs.push(Segment::new(x0, y0, x1, y0));
    segs.push(Segment::new(x1, y0, x1, y1));
    segs.push(Segment::new(x1, y1, x0, y1));
    segs.push(Segment::new(x0, y1, x0, y0));
}

fn push_rect_walls(segs: &mut Vec<Segment>, x0: f64, y0: f64, x1: f64, y1: f64) {
    segs.push(Segment::new(x0, y0, x1, y0));
    segs.push(Segment::new(x1, y0, x1, y1));
    segs.push(Segment::new(x1, y1, x0, y1));
    segs.push(Segment::new(x0, y1, x0, y0));
}

/// Corridor half-width in meters.
pub const CORRIDOR_HALF_WIDTH: f64 = 3.0;
/// Corridor length in meters.
pub const CORRIDOR_LENGTH: f64 = 24.0;

/// Deterministic world for `(preset, seed)`.
///
/// - `room`: 8 x 6 m box with a few pieces of furniture
/// - `corridor`: 24 m long, 6 m wide hall with two rows of transverse
///   panels along the centre line
/// - `office`: 12 x 10 m floor with partition walls and desks
pub fn build_world(preset: &str, seed: u64) -> Result<World> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut segs = Vec::new();
    match preset {
        "room" => {
            push_rect_walls(&mut segs, 0.0, 0.0, 8.0, 6.0);
            let n = rng.gen_range(3..=5);
            for _ in 0..n {
                let cx = rng.gen_range(1.0..7.0);
                let cy = rng.gen_range(0.8..5.2);
                // keep the spawn area clear
                if (cx - 2.0f64).abs() < 1.0 && (cy - 3.0f64).abs() < 1.0 {
                    continue;
                }
                push_box(&mut segs, cx, cy, rng.gen_range(0.15..0.5), rng.gen_range(0.15..0.5));
            }
            let bounds = Bounds {
                min: Point2::new(0.0, 0.0),
                max: Point2::new(8.0, 6.0),
            };
            World::new(segs, bounds, Pose2D::new(2.0, 3.0, 0.0))
        }
        "corridor" => {
            let hw = CORRIDOR_HALF_WIDTH;
            let len = CORRIDOR_LENGTH;
            segs.push(Segment::new(0.0, -hw, len, -hw));
            segs.push(Segment::new(0.0, hw, len, hw));
            segs.push(Segment::new(0.0, -hw, 0.0, hw));
            segs.push(Segment::new(len, -hw, len, hw));
            // Two rows of thin transverse panels flanking the centre line.
            // Faces parallel to the direction of travel look the same from
            // every point along the corridor, so the fittings are kept
            // perpendicular to it.
            for &row_y in &[-1.1f64, 1.1] {
                let mut x = rng.gen_range(0.8..1.6);
                while x < len - 0.5 {
                    let y = row_y + rng.gen_range(-0.25..0.25);
                    let half = rng.gen_range(0.15..0.35);
                    segs.push(Segment::new(x, y - half, x, y + half));
                    x += rng.gen_range(0.7..1.4);
                }
            }
            let bounds = Bounds {
                min: Point2::new(0.0, -hw),
                max: Point2::new(len, hw),
            };
            World::new(segs, bounds, Pose2D::new(1.0, 0.0, 0.0))
        }
        "office" => {
            push_rect_walls(&mut segs, 0.0, 0.0, 12.0, 10.0);
            // partitions with door gaps
            for &px in &[4.0, 8.0] {
                let gap = rng.gen_range(2.0..8.0);
                segs.push(Segment::new(px, 0.0, px, gap - 0.5));
                segs.push(Segment::new(px, gap + 0.5, px, 10.0));
            }
            let n = rng.gen_range(5..=9);
            for _ in 0..n {
                let cx = rng.gen_range(0.8..11.2);
                let cy = rng.gen_range(0.8..9.2);
                push_box(&mut segs, cx, cy, rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.4));
            }
            let bounds = Bounds {
                min: Point2::new(0.0, 0.0),
                max: Point2::new(12.0, 10.0),
            };
            World::new(segs, bounds, Pose2D::new(1.5, 5.0, 0.0))
        }
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    Straight,
    Loop,
    CorridorTurns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    pub kind: TrajectoryKind,
    /// Forward speed, m/s.
    pub speed: f64,
    /// Turn rate while turning, rad/s.
    pub angular_rate: f64,
    pub n_frames: usize,
    /// Frame period, s.
    pub dt: f64,
    pub seed: u64,
    /// Overrides the world's spawn pose.
    pub start: Option<Pose2D>,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            kind: TrajectoryKind::Straight,
            speed: 0.5,
            angular_rate: 0.0,
            n_frames: 100,
            dt: 0.1,
            seed: 0,
            start: None,
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 2 {
            return Err(Error::param(format!("n_frames must be >= 2, got {}", self.n_frames)));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::param(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.speed >= 0.0) || !self.speed.is_finite() {
            return Err(Error::param(format!("speed must be >= 0, got {}", self.speed)));
        }
        if !self.angular_rate.is_finite() {
            return Err(Error::param("angular_rate must be finite"));
        }
        Ok(())
    }

    /// Heading change applied after each step.
    fn turn_schedule(&self) -> Vec<f64> {
        let dtheta = self.angular_rate * self.dt;
        let steps = self.n_frames - 1;
        match self.kind {
            TrajectoryKind::Straight => vec![0.0; steps],
            TrajectoryKind::Loop => vec![dtheta; steps],
            TrajectoryKind::CorridorTurns => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let mut sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let turn_steps = if dtheta.abs() > 0.0 {
                    ((PI / 2.0) / dtheta.abs()).round().max(1.0) as usize
                } else {
                    0
                };
                let mut out = Vec::with_capacity(steps);
                while out.len() < steps {
                    let leg = rng.gen_range(15..=30);
                    out.extend(std::iter::repeat(0.0).take(leg));
                    out.extend(std::iter::repeat(sign * dtheta.abs()).take(turn_steps));
                    sign = -sign;
                }
                out.truncate(steps);
                out
            }
        }
    }
}

/// Integrates the configured motion from the start pose: each step moves
/// `speed * dt` along the current heading and then turns.
pub fn simulate_trajectory(world: &World, cfg: &TrajectoryConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let start = cfg.start.unwrap_or(world.spawn);
    if !world.bounds.contains(start.position()) {
        return Err(Error::OutOfBounds { frame: 0 });
    }
    let step = cfg.speed * cfg.dt;
    let mut pose = start;
    let mut poses = vec![StampedPose { t: 0.0, pose }];
    for (k, turn) in cfg.turn_schedule().into_iter().enumerate() {
        pose = pose.advance(step, turn);
        let frame = k + 1;
        if !world.bounds.contains(pose.position()) {
            return Err(Error::OutOfBounds { frame });
        }
        poses.push(StampedPose {
            t: frame as f64 * cfg.dt,
            pose,
        });
    }
    Trajectory::new(poses)
}

/// Ideal 2D LiDAR scan as a range-azimuth heatmap: one ray per azimuth
/// bin, first hit within range lit with a unit-peak Gaussian along range.
pub fn render_lidar(world: &World, pose: &Pose2D, geom: &SensorGeometry) -> Result<Heatmap> {
    geom.validate()?;
    let (h, w) = (geom.rows(), geom.cols());
    let bin = geom.range_bin_size();
    let mut values = vec![0.0f64; h * w];
    for col in 0..w {
        let heading = pose.theta + geom.azimuth_of_col(col as f64);
        let Some(r) = world.cast(pose.position(), heading) else {
            continue;
        };
        if r >= geom.max_range {
            continue;
        }
        let u = r / bin - 0.5;
        let reach = RETURN_TRUNCATION * RETURN_SIGMA_BINS;
        let lo = (u - reach).ceil().max(0.0) as usize;
        let hi = ((u + reach).floor() as usize).min(h - 1);
        for row in lo..=hi {
            let d = (row as f64 - u) / RETURN_SIGMA_BINS;
            values[row * w + col] = (-0.5 * d * d).exp();
        }
    }
    Heatmap::from_f64_clamped(*geom, &values)
}

/// Renders the ground-truth sequence along a trajectory.
pub fn render_sequence(world: &World, traj: &Trajectory, geom: &SensorGeometry) -> Result<FrameSequence> {
    let frames = traj
        .poses()
        .iter()
        .map(|sp| {
            Ok(Frame {
                timestamp: sp.t,
                heatmap: render_lidar(world, &sp.pose, geom)?,
                pose: sp.pose,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames, "lidar")
}

/// Noise knobs applied per frame, in this order: whole-frame jitter,
/// ghost blobs, additive Gaussian noise, dropout, clamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationModel {
    pub gaussian_sigma: f64,
    pub ghost_count: usize,
    pub ghost_gain: f64,
    pub dropout_prob: f64,
    /// Standard deviation of the per-frame translation, in bins.
    pub jitter_sigma: f64,
    pub seed: u64,
}

impl Default for DegradationModel {
    fn default() -> Self {
        Self {
            gaussian_sigma: 0.0,
            ghost_count: 0,
            ghost_gain: 0.0,
            dropout_prob: 0.0,
            jitter_sigma: 0.0,
            seed: 0,
        }
    }
}

impl DegradationModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gaussian_sigma", self.gaussian_sigma),
            ("ghost_gain", self.ghost_gain),
            ("jitter_sigma", self.jitter_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::param(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(Error::param(format!(
                "dropout_prob must be in [0, 1], got {}",
                self.dropout_prob
            )));
        }
        Ok(())
    }
}

/// What `degrade` did to one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameDegradation {
    pub shift_range: i64,
    pub shift_azimuth: i64,
}

fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64);
    rng
}

/// Applies `model` to one frame using the stream for `frame_index`.
pub fn degrade_frame(h: &Heatmap, model: &DegradationModel, frame_index: usize) -> Result<(Heatmap, FrameDegradation)> {
    model.validate()?;
    let mut rng = frame_rng(model.seed, frame_index);
    let (rows, cols) = (h.rows(), h.cols());

    let jitter = Normal::new(0.0, model.jitter_sigma).map_err(|e| Error::param(e.to_string()))?;
    let shift_range = jitter.sample(&mut rng).round() as i64;
    let shift_azimuth = jitter.sample(&mut rng).round() as i64;
    let mut v = h.shifted(shift_range, shift_azimuth).to_f64();

    for _ in 0..model.ghost_count {
        let gr = rng.gen_range(0..rows) as f64;
        let gc = rng.gen_range(0..cols) as f64;
        let r0 = (gr - 3.0).max(0.0) as usize;
        let r1 = ((gr + 3.0) as usize).min(rows - 1);
        let c0 = (gc - 3.0).max(0.0) as usize;
        let c1 = ((gc + 3.0) as usize).min(cols - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let d2 = (r as f64 - gr).powi(2) + (c as f64 - gc).powi(2);
                v[r * cols + c] += model.ghost_gain * (-0.5 * d2).exp();
            }
        }
    }

    if model.gaussian_sigma > 0.0 {
        let noise = Normal::new(0.0, model.gaussian_sigma).map_err(|e| Error::param(e.to_string()))?;
        for x in v.iter_mut() {
            *x += noise.sample(&mut rng);
        }
    }

    if model.dropout_prob > 0.0 {
        for x in v.iter_mut() {
            if rng.gen::<f64>() < model.dropout_prob {
                *x = 0.0;
            }
        }
    }

    let out = Heatmap::from_f64_clamped(*h.geometry(), &v)?;
    Ok((
        out,
        FrameDegradation {
            shift_range,
            shift_azimuth,
        },
    ))
}

/// Degrades every frame; poses and timestamps are untouched.
pub fn degrade_with_log(seq: &FrameSequence, model: &DegradationModel) -> Result<(FrameSequence, Vec<FrameDegradation>)> {
    model.validate()?;
    let mut heatmaps = Vec::with_capacity(seq.len());
    let mut log = Vec::with_capacity(seq.len());
    for (k, h) in seq.heatmaps().enumerate() {
        let (d, info) = degrade_frame(h, model, k)?;
        heatmaps.push(d);
        log.push(info);
    }
    let label = format!("{}-degraded", seq.modality_label());
    Ok((seq.with_heatmaps(heatmaps, label)?, log))
}

pub fn degrade(seq: &FrameSequence, model: &DegradationModel) -> Result<FrameSequence> {
    degrade_with_log(seq, model).map(|(s, _)| s)
}
