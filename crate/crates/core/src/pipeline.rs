//! Run configuration and the end-to-end stages: simulate, degrade, fuse,
//! scan-match, evaluate and the ablation matrix.
//!
//! Every stage is a pure function of its inputs and the seeds it is given;
//! parallel execution over seeds or ablation rows returns exactly what the
//! sequential loop would.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::correlation::scan_match_sequence;
use crate::error::{Error, Result};
use crate::fusion::{
    cosine_sim, decode, embed, temporal_conv_fuse_partial, train_fusion, window_average, Embedding,
    FusionKernel, LossWeights, Pooling, TrainOutcome, TrainerConfig, TrainingSample,
};
use crate::heatmap::{FrameSequence, Heatmap, SensorGeometry, Trajectory};
use crate::io::EvalReport;
use crate::metrics::{ape, fvmd, map_iou, peak_distance_metric, psnr, rasterize_map, ApeReport, MetricConfig};
use crate::simulator::{build_world, degrade, render_sequence, simulate_trajectory, DegradationModel, TrajectoryConfig};
use crate::stats::{kendall_tau, pearson, spearman, CorrelationResult};

pub const WORLD_PRESETS: [&str; 3] = ["room", "corridor", "office"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    None,
    WindowAverage,
    TemporalConv,
}

impl FusionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::WindowAverage => "window_average",
            FusionMode::TemporalConv => "temporal_conv",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionMode::None),
            "window_average" => Ok(FusionMode::WindowAverage),
            "temporal_conv" => Ok(FusionMode::TemporalConv),
            other => Err(Error::param(format!(
                "unknown fusion mode `{other}` (expected none, window_average or temporal_conv)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub window: usize,
    pub pooling: Pooling,
    pub loss: LossWeights,
    pub trainer: TrainerConfig,
    /// Seed of the separate simulated run the kernel is trained on.
    pub train_seed: u64,
    /// Number of training samples cut from the training run.
    pub train_samples: usize,
    /// Frames per training sample (at least `window + 1`).
    pub train_sample_frames: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::None,
            window: 5,
            pooling: Pooling::default(),
            loss: LossWeights::default(),
            trainer: TrainerConfig::default(),
            train_seed: 1000,
            train_samples: 4,
            train_sample_frames: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub jitter_sigmas: Vec<f64>,
    pub modes: Vec<FusionMode>,
    pub windows: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            jitter_sigmas: vec![0.0, 1.0, 2.0, 3.0],
            modes: vec![FusionMode::None, FusionMode::WindowAverage],
            windows: vec![3, 5, 7],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub world: String,
    pub trajectory: TrajectoryConfig,
    pub geometry: SensorGeometry,
    pub degradation: DegradationModel,
    pub fusion: FusionConfig,
    pub metrics: MetricConfig,
    /// One pipeline run per seed. The seed drives world layout, trajectory
    /// randomness and degradation noise.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: "corridor".into(),
            trajectory: TrajectoryConfig::default(),
            geometry: SensorGeometry::default(),
            degradation: DegradationModel::default(),
            fusion: FusionConfig::default(),
            metrics: MetricConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("heatbench-out"),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !WORLD_PRESETS.contains(&self.world.as_str()) {
            return Err(Error::UnknownPreset(self.world.clone()));
        }
        if self.seeds.is_empty() {
            return Err(Error::param("seeds must not be empty"));
        }
        self.trajectory.validate()?;
        self.geometry.validate()?;
        self.degradation.validate()?;
        self.metrics.validate()?;
        self.fusion.loss.validate()?;
        if self.fusion.window == 0 {
            return Err(Error::param("fusion window must be >= 1"));
        }
        self.fusion.pooling.validate(&self.geometry)?;
        if self.fusion.mode == FusionMode::TemporalConv {
            if self.fusion.train_samples == 0 {
                return Err(Error::param("train_samples must be >= 1"));
            }
            if self.fusion.train_sample_frames < self.fusion.window + 1 {
                return Err(Error::param(format!(
                    "train_sample_frames must be >= window + 1 = {}",
                    self.fusion.window + 1
                )));
            }
        }
        Ok(())
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Ground-truth sequence for one seed.
pub fn simulate(cfg: &RunConfig, seed: u64) -> Result<FrameSequence> {
    let world = build_world(&cfg.world, seed)?;
    let tcfg = TrajectoryConfig {
        seed,
        ..cfg.trajectory.clone()
    };
    let traj = simulate_trajectory(&world, &tcfg)?;
    render_sequence(&world, &traj, &cfg.geometry)
}

/// Degrades `truth` with the configured model re-seeded by `seed`.
pub fn degrade_run(truth: &FrameSequence, model: &DegradationModel, seed: u64) -> Result<FrameSequence> {
    degrade(
        truth,
        &DegradationModel {
            seed,
            ..model.clone()
        },
    )
}

fn embed_all(seq: &FrameSequence, pooling: Pooling) -> Result<Vec<Embedding>> {
    seq.heatmaps().map(|h| embed(h, pooling)).collect()
}

/// Latent fusion over a sliding window. Frame `t` fuses frames
/// `max(0, t - N + 1) ..= t`, so the first `N - 1` outputs use truncated
/// windows and the output has as many frames as the input.
pub fn fuse_sequence(
    seq: &FrameSequence,
    mode: FusionMode,
    window: usize,
    pooling: Pooling,
    kernel: Option<&FusionKernel>,
) -> Result<FrameSequence> {
    if window == 0 {
        return Err(Error::param("fusion window must be >= 1"));
    }
    if window > seq.len() {
        return Err(Error::param(format!(
            "fusion window {window} is longer than the sequence ({} frames)",
            seq.len()
        )));
    }
    if mode == FusionMode::None {
        return Ok(seq.clone());
    }
    let geom = *seq.geometry().expect("non-empty sequence");
    pooling.validate(&geom)?;
    let identity;
    let kernel = match (mode, kernel) {
        (FusionMode::TemporalConv, Some(k)) => {
            if k.window != window {
                return Err(Error::param(format!(
                    "kernel window {} does not match fusion window {window}",
                    k.window
                )));
            }
            Some(k)
        }
        (FusionMode::TemporalConv, None) => {
            identity = FusionKernel::identity(window, pooling.dim());
            Some(&identity)
        }
        _ => None,
    };
    let embeds = embed_all(seq, pooling)?;
    let fused: Vec<Heatmap> = (0..embeds.len())
        .map(|t| {
            let w = &embeds[(t + 1).saturating_sub(window)..=t];
            let e = match kernel {
                Some(k) => temporal_conv_fuse_partial(w, k)?,
                None => window_average(w)?,
            };
            decode(&e, &geom)
        })
        .collect::<Result<_>>()?;
    seq.with_heatmaps(fused, format!("{}-fused", seq.modality_label()))
}

/// Cuts `count` evenly spaced runs of `frames` frames out of a paired
/// degraded / ground-truth sequence.
pub fn training_samples(
    degraded: &FrameSequence,
    truth: &FrameSequence,
    count: usize,
    frames: usize,
) -> Result<Vec<TrainingSample>> {
    if degraded.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} degraded frames vs {} ground-truth frames",
            degraded.len(),
            truth.len()
        )));
    }
    if frames > degraded.len() || count == 0 || frames == 0 {
        return Err(Error::param(format!(
            "cannot cut {count} samples of {frames} frames from {} frames",
            degraded.len()
        )));
    }
    let d: Vec<&Heatmap> = degraded.heatmaps().collect();
    let l: Vec<&Heatmap> = truth.heatmaps().collect();
    let span = degraded.len() - frames;
    Ok((0..count)
        .map(|i| {
            let start = if count == 1 { 0 } else { i * span / (count - 1) };
            TrainingSample {
                degraded: d[start..start + frames].iter().map(|h| (*h).clone()).collect(),
                truth: l[start..start + frames].iter().map(|h| (*h).clone()).collect(),
            }
        })
        .collect())
}

/// Trains the temporal convolution kernel on a separate simulated run
/// seeded with `fusion.train_seed`, starting from the identity kernel.
pub fn train_kernel(cfg: &RunConfig) -> Result<TrainOutcome> {
    let f = &cfg.fusion;
    let truth = simulate(cfg, f.train_seed)?;
    let degraded = degrade_run(&truth, &cfg.degradation, f.train_seed)?;
    let data = training_samples(&degraded, &truth, f.train_samples, f.train_sample_frames)?;
    let init = FusionKernel::identity(f.window, f.pooling.dim());
    train_fusion(&data, &init, &f.loss, f.pooling, &f.trainer)
}

/// Kernel for `cfg`: trained when the mode needs one, otherwise `None`.
pub fn prepare_kernel(cfg: &RunConfig) -> Result<Option<FusionKernel>> {
    match cfg.fusion.mode {
        FusionMode::TemporalConv => Ok(Some(train_kernel(cfg)?.kernel)),
        _ => Ok(None),
    }
}

/// Mean cosine similarity between per-frame embeddings.
pub fn mean_cosine_sim(pred: &FrameSequence, reference: &FrameSequence, pooling: Pooling) -> Result<f64> {
    if pred.len() != reference.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted frames vs {} reference frames",
            pred.len(),
            reference.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in pred.heatmaps().zip(reference.heatmaps()) {
        total += cosine_sim(&embed(a, pooling)?, &embed(b, pooling)?);
    }
    Ok(total / pred.len() as f64)
}

pub fn mean_psnr(pred: &FrameSequence, reference: &FrameSequence, cap: f64) -> Result<f64> {
    if pred.len() != reference.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted frames vs {} reference frames",
            pred.len(),
            reference.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in pred.heatmaps().zip(reference.heatmaps()) {
        total += psnr(a, b, cap)?;
    }
    Ok(total / pred.len() as f64)
}

/// Scan-matched trajectory of `pred`, anchored at its first pose.
pub fn slam(pred: &FrameSequence) -> Result<Trajectory> {
    scan_match_sequence(pred)
}

/// Every metric column for one predicted sequence against the reference.
/// APE and IoU both compare what the scan matcher makes of `pred` with what
/// it makes of `reference`: the two estimated trajectories for APE, and the
/// occupancy maps rasterized along them for IoU. A prediction equal to the
/// reference therefore scores APE 0 and IoU 1.
pub fn evaluate(
    pred: &FrameSequence,
    reference: &FrameSequence,
    metrics: &MetricConfig,
    pooling: Pooling,
) -> Result<EvalReport> {
    metrics.validate()?;
    if pred.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted frames vs {} reference frames",
            pred.len(),
            reference.len()
        )));
    }
    let mut report = EvalReport::default();
    report.record("psnr", mean_psnr(pred, reference, metrics.psnr_cap));
    report.record("cosine_sim", mean_cosine_sim(pred, reference, pooling));
    report.record("fvmd", fvmd(pred, reference, metrics));
    report.record("peak_distance", peak_distance_metric(pred, reference));
    let trajectories = slam(pred).and_then(|est| {
        let ref_est = if pred == reference { est.clone() } else { slam(reference)? };
        Ok((est, ref_est))
    });
    match trajectories {
        Ok((est, ref_est)) => {
            report.record_ape(ape(&est, &ref_est));
            let maps = || -> Result<f64> {
                let a = rasterize_map(pred, &est, metrics.map_resolution, metrics.map_threshold)?;
                let b = rasterize_map(reference, &ref_est, metrics.map_resolution, metrics.map_threshold)?;
                map_iou(&a, &b)
            };
            report.record("iou", maps());
        }
        Err(e) => {
            report.null_reasons.insert("ape".into(), e.to_string());
            report.record("iou", Err(e));
        }
    }
    Ok(report)
}

/// Intermediate sequences and the report of one seeded run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub truth: FrameSequence,
    pub degraded: FrameSequence,
    pub fused: FrameSequence,
    pub report: EvalReport,
}

pub fn run_seed(cfg: &RunConfig, seed: u64, kernel: Option<&FusionKernel>) -> Result<RunOutcome> {
    let truth = simulate(cfg, seed)?;
    let degraded = degrade_run(&truth, &cfg.degradation, seed)?;
    let f = &cfg.fusion;
    let fused = fuse_sequence(&degraded, f.mode, f.window, f.pooling, kernel)?;
    let mut report = evaluate(&fused, &truth, &cfg.metrics, f.pooling)?;
    report.seeds = vec![seed];
    Ok(RunOutcome {
        seed,
        truth,
        degraded,
        fused,
        report,
    })
}

/// Runs every seed (in parallel) with one shared kernel.
pub fn run_all(cfg: &RunConfig, kernel: Option<&FusionKernel>) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    cfg.seeds.par_iter().map(|&s| run_seed(cfg, s, kernel)).collect()
}

fn mean_of(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    (!v.is_empty() && v.len() == values.len()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-metric mean over runs. A metric missing from any run is null, with
/// the first run's reason.
pub fn aggregate(reports: &[EvalReport], config: Value) -> EvalReport {
    let mut out = EvalReport {
        config,
        seeds: reports.iter().flat_map(|r| r.seeds.clone()).collect(),
        ..Default::default()
    };
    let pick = |f: fn(&EvalReport) -> Option<f64>| mean_of(&reports.iter().map(f).collect::<Vec<_>>());
    let scalars: [(&str, fn(&EvalReport) -> Option<f64>); 5] = [
        ("psnr", |r| r.psnr),
        ("cosine_sim", |r| r.cosine_sim),
        ("fvmd", |r| r.fvmd),
        ("peak_distance", |r| r.peak_distance),
        ("iou", |r| r.iou),
    ];
    for (name, f) in scalars {
        let v = pick(f);
        let value = v.ok_or_else(|| {
            let reason = reports
                .iter()
                .find_map(|r| r.null_reasons.get(name).cloned())
                .unwrap_or_else(|| "no runs".into());
            Error::Insufficient(reason)
        });
        out.record(name, value);
    }
    let apes: Vec<Option<ApeReport>> = reports.iter().map(|r| r.ape).collect();
    if !apes.is_empty() && apes.iter().all(Option::is_some) {
        let n = apes.len() as f64;
        let sum = |f: fn(&ApeReport) -> f64| apes.iter().flatten().map(f).sum::<f64>() / n;
        out.ape = Some(ApeReport {
            rmse: sum(|a| a.rmse),
            mean: sum(|a| a.mean),
            std: sum(|a| a.std),
        });
    } else {
        let reason = reports
            .iter()
            .find_map(|r| r.null_reasons.get("ape").cloned())
            .unwrap_or_else(|| "no runs".into());
        out.null_reasons.insert("ape".into(), reason);
    }
    out
}

/// One configuration of the ablation matrix with its seed-averaged metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub jitter_sigma: f64,
    pub mode: FusionMode,
    pub window: usize,
    pub report: EvalReport,
}

pub const ABLATION_COLUMNS: [&str; 12] = [
    "label",
    "jitter_sigma",
    "mode",
    "window",
    "psnr",
    "cosine_sim",
    "fvmd",
    "peak_distance",
    "ape_rmse",
    "ape_mean",
    "ape_std",
    "iou",
];

impl AblationRow {
    pub fn csv_cells(&self) -> Vec<String> {
        use crate::io::csv_cell;
        let r = &self.report;
        vec![
            self.label.clone(),
            format!("{}", self.jitter_sigma),
            self.mode.as_str().to_string(),
            self.window.to_string(),
            csv_cell(r.psnr),
            csv_cell(r.cosine_sim),
            csv_cell(r.fvmd),
            csv_cell(r.peak_distance),
            csv_cell(r.ape.map(|a| a.rmse)),
            csv_cell(r.ape.map(|a| a.mean)),
            csv_cell(r.ape.map(|a| a.std)),
            csv_cell(r.iou),
        ]
    }
}

/// The matrix rows: `none` once per severity, every other mode once per
/// severity and window.
pub fn ablation_matrix(cfg: &RunConfig) -> Vec<RunConfig> {
    let mut rows = Vec::new();
    for &sigma in &cfg.ablation.jitter_sigmas {
        for &mode in &cfg.ablation.modes {
            let windows: Vec<usize> = if mode == FusionMode::None {
                vec![1]
            } else {
                cfg.ablation.windows.clone()
            };
            for window in windows {
                let mut row = cfg.clone();
                row.degradation.jitter_sigma = sigma;
                row.fusion.mode = mode;
                row.fusion.window = window;
                rows.push(row);
            }
        }
    }
    rows
}

fn row_label(row: &RunConfig) -> String {
    format!(
        "jitter{}-{}-w{}",
        row.degradation.jitter_sigma,
        row.fusion.mode.as_str(),
        row.fusion.window
    )
}

pub fn run_ablation_row(row: &RunConfig) -> Result<AblationRow> {
    let kernel = prepare_kernel(row)?;
    let outcomes = run_all(row, kernel.as_ref())?;
    let reports: Vec<EvalReport> = outcomes.into_iter().map(|o| o.report).collect();
    Ok(AblationRow {
        label: row_label(row),
        jitter_sigma: row.degradation.jitter_sigma,
        mode: row.fusion.mode,
        window: row.fusion.window,
        report: aggregate(&reports, Value::Null),
    })
}

/// Correlation of one metric column against mean APE.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricCorrelation {
    pub spearman: Option<CorrelationResult>,
    pub pearson: Option<CorrelationResult>,
    pub kendall: Option<CorrelationResult>,
    pub reason: Option<String>,
}

/// Metric columns tested against APE.
pub const CORRELATED_METRICS: [&str; 5] = ["fvmd", "peak_distance", "psnr", "cosine_sim", "iou"];

fn metric_column(rows: &[AblationRow], name: &str) -> Vec<Option<f64>> {
    rows.iter()
        .map(|r| match name {
            "fvmd" => r.report.fvmd,
            "peak_distance" => r.report.peak_distance,
            "psnr" => r.report.psnr,
            "cosine_sim" => r.report.cosine_sim,
            "iou" => r.report.iou,
            _ => None,
        })
        .collect()
}

pub fn metric_correlations(rows: &[AblationRow]) -> std::collections::BTreeMap<String, MetricCorrelation> {
    let ape: Vec<Option<f64>> = rows.iter().map(|r| r.report.ape.map(|a| a.mean)).collect();
    CORRELATED_METRICS
        .iter()
        .map(|&name| {
            let col = metric_column(rows, name);
            let pairs: Vec<(f64, f64)> = col
                .iter()
                .zip(&ape)
                .filter_map(|(m, a)| Some(((*m)?, (*a)?)))
                .collect();
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let mut c = MetricCorrelation::default();
            let mut reasons = Vec::new();
            let mut take = |res: Result<CorrelationResult>| match res {
                Ok(v) => Some(v),
                Err(e) => {
                    reasons.push(e.to_string());
                    None
                }
            };
            c.spearman = take(spearman(&x, &y));
            c.pearson = take(pearson(&x, &y));
            c.kendall = take(kendall_tau(&x, &y));
            reasons.dedup();
            c.reason = (!reasons.is_empty()).then(|| reasons.join("; "));
            (name.to_string(), c)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub correlations: std::collections::BTreeMap<String, MetricCorrelation>,
}

/// Runs every matrix row (rows in parallel) and correlates each metric with
/// mean APE across rows.
pub fn run_ablation(cfg: &RunConfig) -> Result<AblationResult> {
    cfg.validate()?;
    let matrix = ablation_matrix(cfg);
    if matrix.is_empty() {
        return Err(Error::param("ablation matrix is empty"));
    }
    for row in &matrix {
        row.validate()?;
    }
    let rows = matrix.par_iter().map(run_ablation_row).collect::<Result<Vec<_>>>()?;
    let correlations = metric_correlations(&rows);
    Ok(AblationResult { rows, correlations })
}
