//! `heatbench`: batch driver for the simulate → degrade → fuse → scan-match →
//! evaluate pipeline and the ablation sweep.
//!
//! Exit codes: 0 on success, 2 for configuration or usage errors, 3 when the
//! data being processed is broken.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use heatbench::fusion::{train_fusion, FusionKernel};
use heatbench::io::{
    emit_pgm, emit_svg_trajectories, read_dataset_with_manifest, write_csv, write_dataset, write_json,
    write_report, write_trajectory_csv, MANIFEST_FILE,
};
use heatbench::metrics::ape;
use heatbench::pipeline::{
    aggregate, evaluate, fuse_sequence, prepare_kernel, run_ablation, run_all, slam, training_samples, FusionMode,
    RunConfig, ABLATION_COLUMNS,
};
use heatbench::simulator::degrade;
use heatbench::Error;

/// Environment variable that overrides the configured output directory.
const OUTPUT_ROOT_ENV: &str = "HEATBENCH_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "heatbench", version, about = "Heatmap temporal-consistency workbench")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Options applied on top of the JSON config, in this order: config file,
/// `HEATBENCH_OUTPUT_ROOT`, flags.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// World preset: room, corridor or office.
    #[arg(long, global = true)]
    world: Option<String>,
    /// Comma-separated seed list.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    frames: Option<usize>,
    /// Forward speed in m/s.
    #[arg(long, global = true)]
    speed: Option<f64>,
    /// Per-frame jitter in bins.
    #[arg(long, global = true)]
    jitter_sigma: Option<f64>,
    /// Fusion mode: none, window_average or temporal_conv.
    #[arg(long, global = true)]
    mode: Option<FusionMode>,
    #[arg(long, global = true)]
    window: Option<usize>,
    /// Trainer steps for temporal_conv.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Softmax temperature of the transformation-consistency loss.
    #[arg(long, global = true)]
    temperature: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a ground-truth dataset.
    Simulate {
        /// Seed for world, trajectory and rendering (default: first configured seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset directory (default: <output>/truth).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Degrade a dataset with the configured model.
    Degrade {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset directory (default: <output>/degraded).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fuse a dataset over a sliding temporal window.
    Fuse {
        #[arg(long)]
        input: PathBuf,
        /// Paired ground truth; trains the temporal_conv kernel on (input, truth).
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Load a temporal_conv kernel instead of training one.
        #[arg(long, conflicts_with = "truth")]
        kernel: Option<PathBuf>,
        /// Write the kernel that was used.
        #[arg(long)]
        save_kernel: Option<PathBuf>,
        /// Dataset directory (default: <output>/fused).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scan-match a dataset into a trajectory.
    Slam {
        #[arg(long)]
        input: PathBuf,
        /// Directory for estimated.csv and trajectories.svg (default: <output>/slam).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute every metric of a predicted dataset against a reference.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Report file (default: <output>/eval.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the ablation matrix and correlate each metric with APE.
    Ablate {
        /// Directory for ablation.csv and correlations.json (default: <output>/ablation).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full pipeline for every seed and write reports and figures.
    Report {
        /// Directory (default: <output>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn config(msg: impl Into<String>) -> Self {
        Failure { code: 2, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_data_error() { 3 } else { 2 },
            msg: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn load_config(o: &Overrides) -> CliResult<RunConfig> {
    let mut cfg = match &o.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::config(format!("invalid config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV) {
        cfg.output_dir = PathBuf::from(root);
    }
    if let Some(v) = &o.output_dir {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = &o.world {
        cfg.world = v.clone();
    }
    if let Some(v) = &o.seeds {
        cfg.seeds = v.clone();
    }
    if let Some(v) = o.frames {
        cfg.trajectory.n_frames = v;
    }
    if let Some(v) = o.speed {
        cfg.trajectory.speed = v;
    }
    if let Some(v) = o.jitter_sigma {
        cfg.degradation.jitter_sigma = v;
    }
    if let Some(v) = o.mode {
        cfg.fusion.mode = v;
    }
    if let Some(v) = o.window {
        cfg.fusion.window = v;
    }
    if let Some(v) = o.steps {
        cfg.fusion.trainer.steps = v;
    }
    if let Some(v) = o.temperature {
        cfg.fusion.loss.transform_temperature = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a dataset, treating a missing directory as a usage error.
fn open_dataset(dir: &Path) -> CliResult<(heatbench::heatmap::FrameSequence, Value)> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(Failure::config(format!("no dataset at {}", dir.display())));
    }
    let (seq, manifest) = read_dataset_with_manifest(dir)?;
    Ok((seq, manifest.seed_provenance))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure {
        code: 3,
        msg: format!("cannot create {}: {e}", dir.display()),
    })
}

fn load_kernel(path: &Path) -> CliResult<FusionKernel> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read kernel {}: {e}", path.display())))?;
    let raw: FusionKernel = serde_json::from_str(&text)
        .map_err(|e| Failure::config(format!("invalid kernel {}: {e}", path.display())))?;
    // round-trip through the constructor so shape invariants are checked
    Ok(FusionKernel::new(raw.window, raw.weights, raw.bias)?)
}

fn seed_of(provenance: &Value) -> Option<u64> {
    provenance.get("seed").and_then(Value::as_u64)
}

fn cmd_simulate(cfg: &RunConfig, seed: Option<u64>, out: Option<PathBuf>) -> CliResult<()> {
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let out = out.unwrap_or_else(|| cfg.output_dir.join("truth"));
    let seq = heatbench::pipeline::simulate(cfg, seed)?;
    let provenance = json!({ "stage": "simulate", "seed": seed, "config": cfg.to_value() });
    write_dataset(&seq, &out, &provenance)?;
    println!("wrote {} frames to {}", seq.len(), out.display());
    Ok(())
}

fn cmd_degrade(cfg: &RunConfig, input: &Path, seed: Option<u64>, out: Option<PathBuf>) -> CliResult<()> {
    let (seq, source) = open_dataset(input)?;
    let seed = seed.or_else(|| seed_of(&source)).unwrap_or(cfg.seeds[0]);
    let model = heatbench::simulator::DegradationModel {
        seed,
        ..cfg.degradation.clone()
    };
    let degraded = degrade(&seq, &model)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join("degraded"));
    let provenance = json!({ "stage": "degrade", "seed": seed, "degradation": model, "source": source });
    write_dataset(&degraded, &out, &provenance)?;
    println!("wrote {} frames to {}", degraded.len(), out.display());
    Ok(())
}

fn cmd_fuse(
    cfg: &RunConfig,
    input: &Path,
    truth: Option<&Path>,
    kernel_path: Option<&Path>,
    save_kernel: Option<&Path>,
    out: Option<PathBuf>,
) -> CliResult<()> {
    let f = &cfg.fusion;
    let (seq, source) = open_dataset(input)?;
    if f.window > seq.len() {
        return Err(Failure::config(format!(
            "fusion window {} is longer than the sequence ({} frames)",
            f.window,
            seq.len()
        )));
    }
    let kernel = match (f.mode, kernel_path, truth) {
        (FusionMode::TemporalConv, Some(p), _) => Some(load_kernel(p)?),
        (FusionMode::TemporalConv, None, Some(t)) => {
            let (truth_seq, _) = open_dataset(t)?;
            let data = training_samples(&seq, &truth_seq, f.train_samples, f.train_sample_frames)?;
            let init = FusionKernel::identity(f.window, f.pooling.dim());
            let outcome = train_fusion(&data, &init, &f.loss, f.pooling, &f.trainer)?;
            eprintln!(
                "trained {} steps: loss {:.6} -> {:.6}",
                outcome.history.len().saturating_sub(1),
                outcome.initial_loss,
                outcome.final_loss
            );
            Some(outcome.kernel)
        }
        (FusionMode::TemporalConv, None, None) => Some(FusionKernel::identity(f.window, f.pooling.dim())),
        _ => None,
    };
    let fused = fuse_sequence(&seq, f.mode, f.window, f.pooling, kernel.as_ref())?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join("fused"));
    let provenance = json!({
        "stage": "fuse",
        "seed": seed_of(&source),
        "fusion": f,
        "trained": truth.is_some() && kernel_path.is_none(),
        "source": source,
    });
    write_dataset(&fused, &out, &provenance)?;
    if let (Some(path), Some(k)) = (save_kernel, &kernel) {
        write_json(k, path)?;
    }
    println!("wrote {} frames to {}", fused.len(), out.display());
    Ok(())
}

fn cmd_slam(cfg: &RunConfig, input: &Path, out: Option<PathBuf>) -> CliResult<()> {
    let (seq, _) = open_dataset(input)?;
    let est = slam(&seq)?;
    let gt = seq.trajectory();
    let out = out.unwrap_or_else(|| cfg.output_dir.join("slam"));
    create_dir(&out)?;
    write_trajectory_csv(&est, &out.join("estimated.csv"))?;
    emit_svg_trajectories(
        &[("ground truth".to_string(), gt.clone()), ("estimated".to_string(), est.clone())],
        &out.join("trajectories.svg"),
    )?;
    let err = ape(&est, &gt)?;
    println!(
        "ape rmse {:.6} mean {:.6} std {:.6} over {} poses; wrote {}",
        err.rmse,
        err.mean,
        err.std,
        est.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, pred: &Path, reference: &Path, out: Option<PathBuf>) -> CliResult<()> {
    let (p, _) = open_dataset(pred)?;
    let (r, provenance) = open_dataset(reference)?;
    if p.geometry() != r.geometry() {
        return Err(Failure::config("predicted and reference datasets differ in geometry"));
    }
    let mut report = evaluate(&p, &r, &cfg.metrics, cfg.fusion.pooling)?;
    report.config = cfg.to_value();
    report.seeds = seed_of(&provenance).into_iter().collect();
    let out = out.unwrap_or_else(|| cfg.output_dir.join("eval.json"));
    write_report(&report, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, out: Option<PathBuf>) -> CliResult<()> {
    let result = run_ablation(cfg)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join("ablation"));
    create_dir(&out)?;
    let rows: Vec<Vec<String>> = result.rows.iter().map(|r| r.csv_cells()).collect();
    write_csv(&out.join("ablation.csv"), &ABLATION_COLUMNS, &rows)?;
    write_report(
        &json!({ "config": cfg.to_value(), "correlations": result.correlations }),
        &out.join("correlations.json"),
    )?;
    for (metric, c) in &result.correlations {
        match &c.spearman {
            Some(s) => println!("{metric:>14} vs ape: spearman {:+.4} (p {:.4})", s.coefficient, s.p_value),
            None => println!(
                "{metric:>14} vs ape: null ({})",
                c.reason.as_deref().unwrap_or("unavailable")
            ),
        }
    }
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_report(cfg: &RunConfig, out: Option<PathBuf>) -> CliResult<()> {
    let out = out.unwrap_or_else(|| cfg.output_dir.clone());
    let kernel = prepare_kernel(cfg)?;
    let outcomes = run_all(cfg, kernel.as_ref())?;
    for o in &outcomes {
        let dir = out.join(format!("seed-{}", o.seed));
        create_dir(&dir)?;
        let mut report = o.report.clone();
        report.config = cfg.to_value();
        write_report(&report, &dir.join("report.json"))?;
        let first = |s: &heatbench::heatmap::FrameSequence| s.heatmaps().next().cloned();
        for (name, seq) in [("truth", &o.truth), ("degraded", &o.degraded), ("fused", &o.fused)] {
            if let Some(h) = first(seq) {
                emit_pgm(&h, &dir.join(format!("{name}_frame0.pgm")))?;
            }
        }
        let mut trajs = vec![("ground truth".to_string(), o.truth.trajectory())];
        if let Ok(est) = slam(&o.fused) {
            write_trajectory_csv(&est, &dir.join("estimated.csv"))?;
            trajs.push((format!("estimated ({})", cfg.fusion.mode.as_str()), est));
        }
        emit_svg_trajectories(&trajs, &dir.join("trajectories.svg"))?;
    }
    if let Some(k) = &kernel {
        write_json(k, &out.join("kernel.json"))?;
    }
    let reports: Vec<_> = outcomes.into_iter().map(|o| o.report).collect();
    let summary = aggregate(&reports, cfg.to_value());
    write_report(&summary, &out.join("report.json"))?;
    let show = |v: Option<f64>| v.map_or("null".to_string(), |x| format!("{x:.4}"));
    println!(
        "psnr {} cosine_sim {} fvmd {} peak_distance {} ape_mean {} iou {}",
        show(summary.psnr),
        show(summary.cosine_sim),
        show(summary.fvmd),
        show(summary.peak_distance),
        show(summary.ape.map(|a| a.mean)),
        show(summary.iou)
    );
    println!("wrote {}", out.join("report.json").display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli.overrides)?;
    match cli.command {
        Command::Simulate { seed, out } => cmd_simulate(&cfg, seed, out),
        Command::Degrade { input, seed, out } => cmd_degrade(&cfg, &input, seed, out),
        Command::Fuse {
            input,
            truth,
            kernel,
            save_kernel,
            out,
        } => cmd_fuse(
            &cfg,
            &input,
            truth.as_deref(),
            kernel.as_deref(),
            save_kernel.as_deref(),
            out,
        ),
        Command::Slam { input, out } => cmd_slam(&cfg, &input, out),
        Command::Eval { pred, reference, out } => cmd_eval(&cfg, &pred, &reference, out),
        Command::Ablate { out } => cmd_ablate(&cfg, out),
        Command::Report { out } => cmd_report(&cfg, out),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors, matching the config-error code
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
