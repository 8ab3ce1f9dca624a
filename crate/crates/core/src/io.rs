//! On-disk formats: the dataset directory, JSON reports, CSV tables and the
//! PGM/SVG figure emitters.
//!
//! A dataset directory holds `manifest.json`, one `frame_NNNNNN.bin` per frame
//! (row-major little-endian `f32`) and `trajectory.csv` with header
//! `t,x,y,theta`. Floats in CSV are printed in shortest round-trip form, so
//! reading a dataset back reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::heatmap::{Frame, FrameSequence, Heatmap, Pose2D, SensorGeometry, StampedPose, Trajectory};
use crate::metrics::ApeReport;

pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub geometry: SensorGeometry,
    pub frame_count: usize,
    pub modality_label: String,
    /// Echo of the configuration that produced the data.
    pub seed_provenance: Value,
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.bin")
}

fn dataset_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Deterministic pretty JSON with sorted object keys and a trailing newline.
pub fn to_sorted_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's default map is ordered by key
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    write_bytes(path, to_sorted_json(value)?.as_bytes())
}

fn existing_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if name.starts_with("frame_") && name.ends_with(".bin") {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

/// Writes `seq` into `dir`, replacing any frames already there.
pub fn write_dataset(seq: &FrameSequence, dir: &Path, provenance: &Value) -> Result<()> {
    let geometry = *seq
        .geometry()
        .ok_or_else(|| Error::InvalidSequence("cannot store an empty sequence".into()))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for stale in existing_frame_files(dir)? {
        fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
    }
    for (i, frame) in seq.frames().iter().enumerate() {
        let mut bytes = Vec::with_capacity(frame.heatmap.values().len() * 4);
        for v in frame.heatmap.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write_bytes(&dir.join(frame_file_name(i)), &bytes)?;
    }
    write_trajectory_csv(&seq.trajectory(), &dir.join(TRAJECTORY_FILE))?;
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        geometry,
        frame_count: seq.len(),
        modality_label: seq.modality_label().to_string(),
        seed_provenance: provenance.clone(),
    };
    write_json(&manifest, &dir.join(MANIFEST_FILE))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| dataset_err(&path, format!("malformed manifest: {e}")))?;
    if manifest.version != DATASET_VERSION {
        return Err(dataset_err(
            &path,
            format!("unsupported version {} (expected {DATASET_VERSION})", manifest.version),
        ));
    }
    manifest
        .geometry
        .validate()
        .map_err(|e| dataset_err(&path, e.to_string()))?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<FrameSequence> {
    Ok(read_dataset_with_manifest(dir)?.0)
}

pub fn read_dataset_with_manifest(dir: &Path) -> Result<(FrameSequence, DatasetManifest)> {
    let manifest = read_manifest(dir)?;
    let files = existing_frame_files(dir)?;
    if files.len() != manifest.frame_count {
        return Err(dataset_err(
            dir,
            format!(
                "manifest lists {} frames but {} frame files are present",
                manifest.frame_count,
                files.len()
            ),
        ));
    }
    let traj = read_trajectory_csv(&dir.join(TRAJECTORY_FILE))?;
    if traj.len() != manifest.frame_count {
        return Err(dataset_err(
            dir,
            format!(
                "manifest lists {} frames but the trajectory has {} poses",
                manifest.frame_count,
                traj.len()
            ),
        ));
    }
    let g = manifest.geometry;
    let expected = g.rows() * g.cols() * 4;
    let mut frames = Vec::with_capacity(manifest.frame_count);
    for (i, sp) in traj.poses().iter().enumerate() {
        let path = dir.join(frame_file_name(i));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != expected {
            return Err(dataset_err(
                &path,
                format!("frame {i} has {} bytes, geometry needs {expected}", bytes.len()),
            ));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteFrame { frame: i });
        }
        let heatmap = Heatmap::new(g, values).map_err(|e| dataset_err(&path, format!("frame {i}: {e}")))?;
        frames.push(Frame {
            timestamp: sp.t,
            heatmap,
            pose: sp.pose,
        });
    }
    let seq = FrameSequence::new(frames, manifest.modality_label.clone())
        .map_err(|e| dataset_err(dir, e.to_string()))?;
    Ok((seq, manifest))
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryRow {
    t: f64,
    x: f64,
    y: f64,
    theta: f64,
}

pub fn write_trajectory_csv(traj: &Trajectory, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in traj.poses() {
        w.serialize(TrajectoryRow {
            t: p.t,
            x: p.pose.x,
            y: p.pose.y,
            theta: p.pose.theta,
        })
        .map_err(|e| dataset_err(path, e.to_string()))?;
    }
    if traj.is_empty() {
        w.write_record(["t", "x", "y", "theta"])
            .map_err(|e| dataset_err(path, e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| dataset_err(path, e.to_string()))?;
    write_bytes(path, &bytes)
}

pub fn read_trajectory_csv(path: &Path) -> Result<Trajectory> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(text.as_slice());
    let headers = r.headers().map_err(|e| dataset_err(path, e.to_string()))?;
    if headers != vec!["t", "x", "y", "theta"] {
        return Err(dataset_err(path, "trajectory header must be t,x,y,theta"));
    }
    let mut poses = Vec::new();
    for (i, row) in r.deserialize::<TrajectoryRow>().enumerate() {
        let row = row.map_err(|e| dataset_err(path, format!("row {i}: {e}")))?;
        if ![row.t, row.x, row.y, row.theta].iter().all(|v| v.is_finite()) {
            return Err(dataset_err(path, format!("row {i} has non-finite values")));
        }
        // stored angles are already normalized; keep their bits
        poses.push(StampedPose {
            t: row.t,
            pose: Pose2D {
                x: row.x,
                y: row.y,
                theta: row.theta,
            },
        });
    }
    Trajectory::new(poses).map_err(|e| dataset_err(path, e.to_string()))
}

/// Per-sequence evaluation results. Metrics that cannot be computed are
/// `null` with an explanation under `null_reasons`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr: Option<f64>,
    pub cosine_sim: Option<f64>,
    pub fvmd: Option<f64>,
    pub peak_distance: Option<f64>,
    pub ape: Option<ApeReport>,
    pub iou: Option<f64>,
    pub null_reasons: BTreeMap<String, String>,
    pub config: Value,
    pub seeds: Vec<u64>,
}

impl EvalReport {
    /// Stores a metric, or null plus the reason if it failed or is not finite.
    pub fn record(&mut self, name: &str, value: Result<f64>) -> Option<f64> {
        let v = match value {
            Ok(v) if v.is_finite() => Some(v),
            Ok(v) => {
                self.null_reasons.insert(name.to_string(), format!("non-finite value {v}"));
                None
            }
            Err(e) => {
                self.null_reasons.insert(name.to_string(), e.to_string());
                None
            }
        };
        match name {
            "psnr" => self.psnr = v,
            "cosine_sim" => self.cosine_sim = v,
            "fvmd" => self.fvmd = v,
            "peak_distance" => self.peak_distance = v,
            "iou" => self.iou = v,
            other => panic!("unknown scalar metric `{other}`"),
        }
        v
    }

    pub fn record_ape(&mut self, value: Result<ApeReport>) {
        match value {
            Ok(r) if [r.rmse, r.mean, r.std].iter().all(|v| v.is_finite()) => self.ape = Some(r),
            Ok(_) => {
                self.null_reasons.insert("ape".into(), "non-finite error".into());
            }
            Err(e) => {
                self.null_reasons.insert("ape".into(), e.to_string());
            }
        }
    }
}

pub fn write_report<T: Serialize>(report: &T, path: &Path) -> Result<()> {
    write_json(report, path)
}

/// Writes a CSV table with the given header and pre-formatted cells.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| dataset_err(path, e.to_string()))?;
    for (i, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(Error::ShapeMismatch(format!(
                "csv row {i} has {} cells for {} columns",
                row.len(),
                header.len()
            )));
        }
        w.write_record(row).map_err(|e| dataset_err(path, e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| dataset_err(path, e.to_string()))?;
    write_bytes(path, &bytes)
}

/// Formats an optional metric for CSV output; missing values are empty.
pub fn csv_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Binary 8-bit PGM, row 0 at the top.
pub fn pgm_bytes(h: &Heatmap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", h.cols(), h.rows()).into_bytes();
    out.extend(h.values().iter().map(|&v| (255.0 * v as f64).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn emit_pgm(h: &Heatmap, path: &Path) -> Result<()> {
    write_bytes(path, &pgm_bytes(h))
}

const SVG_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// One labeled polyline per trajectory in a viewBox fitted to all of them.
/// World y points up, so the drawing flips it.
pub fn svg_trajectories(trajs: &[(String, Trajectory)]) -> String {
    let points = trajs.iter().flat_map(|(_, t)| t.poses().iter().map(|p| (p.pose.x, p.pose.y)));
    let (mut min_x, mut min_y, mut max_x, mut max_y) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (x, y) in points {
        min_x = min_x.min(x);
        min_y = min_y.min(y);
        max_x = max_x.max(x);
        max_y = max_y.max(y);
    }
    if !min_x.is_finite() {
        (min_x, min_y, max_x, max_y) = (0.0, 0.0, 1.0, 1.0);
    }
    let pad = 0.05 * (max_x - min_x).max(max_y - min_y).max(1.0);
    let (vx, vy) = (min_x - pad, -max_y - pad);
    let (vw, vh) = (max_x - min_x + 2.0 * pad, max_y - min_y + 2.0 * pad);
    let stroke = 0.004 * vw.max(vh);
    let font = 0.03 * vw.max(vh);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{vx:.4} {vy:.4} {vw:.4} {vh:.4}">"#
    );
    for (i, (label, traj)) in trajs.iter().enumerate() {
        let color = SVG_COLORS[i % SVG_COLORS.len()];
        let pts: Vec<String> = traj
            .poses()
            .iter()
            .map(|p| format!("{:.4},{:.4}", p.pose.x, -p.pose.y))
            .collect();
        let label = xml_escape(label);
        let _ = writeln!(
            s,
            r#"  <polyline data-label="{label}" fill="none" stroke="{color}" stroke-width="{stroke:.4}" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"  <text x="{:.4}" y="{:.4}" font-size="{font:.4}" fill="{color}">{label}</text>"#,
            vx + pad * 0.5,
            vy + pad * 0.5 + font * (i as f64 + 1.0)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn emit_svg_trajectories(trajs: &[(String, Trajectory)], path: &Path) -> Result<()> {
    write_bytes(path, svg_trajectories(trajs).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::Pose2D;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use serde_json::json;

    fn random_sequence(seed: u64, n: usize) -> FrameSequence {
        let g = SensorGeometry::new(100.0, 5.0, 8, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..n)
            .map(|i| Frame {
                timestamp: i as f64 * 0.1 + rng.gen_range(0.0..0.01),
                heatmap: Heatmap::from_fn(g, |_, _| rng.gen_range(0.0..=1.0)).unwrap(),
                pose: Pose2D::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-4.0..4.0)),
            })
            .collect();
        FrameSequence::new(frames, "lidar").unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let seq = random_sequence(1, 5);
        write_dataset(&seq, dir.path(), &json!({"seed": 1})).unwrap();
        let (back, manifest) = read_dataset_with_manifest(dir.path()).unwrap();
        assert_eq!(back, seq);
        assert_eq!(manifest.frame_count, 5);
        assert_eq!(manifest.seed_provenance, json!({"seed": 1}));
        for (a, b) in back.frames().iter().zip(seq.frames()) {
            assert_eq!(a.pose.theta.to_bits(), b.pose.theta.to_bits());
            assert_eq!(a.timestamp.to_bits(), b.timestamp.to_bits());
        }
    }

    #[test]
    fn rewriting_shorter_sequence_drops_stale_frames() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&random_sequence(1, 6), dir.path(), &Value::Null).unwrap();
        let short = random_sequence(2, 3);
        write_dataset(&short, dir.path(), &Value::Null).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), short);
    }

    #[test]
    fn missing_frame_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&random_sequence(3, 4), dir.path(), &Value::Null).unwrap();
        fs::remove_file(dir.path().join(frame_file_name(3))).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("manifest lists 4 frames but 3"), "{err}");
        assert!(err.is_data_error());
    }

    #[test]
    fn nan_frame_names_index() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&random_sequence(4, 3), dir.path(), &Value::Null).unwrap();
        let path = dir.path().join(frame_file_name(2));
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::NonFiniteFrame { frame: 2 })));
    }

    #[test]
    fn version_and_size_checks() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&random_sequence(5, 2), dir.path(), &Value::Null).unwrap();
        let path = dir.path().join(frame_file_name(0));
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(read_dataset(dir.path()).is_err());

        let mpath = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).unwrap().replace("\"version\": 1", "\"version\": 2");
        fs::write(&mpath, text).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("unsupported version 2"), "{err}");
    }

    #[test]
    fn reports_are_deterministic_and_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = EvalReport {
            config: json!({"zeta": 1, "alpha": [1, 2]}),
            seeds: vec![3, 1],
            ..Default::default()
        };
        r.record("psnr", Ok(31.5));
        r.record("fvmd", Err(Error::Insufficient("too few frames".into())));
        let (p1, p2) = (dir.path().join("a.json"), dir.path().join("b.json"));
        write_report(&r, &p1).unwrap();
        write_report(&r, &p2).unwrap();
        let text = fs::read_to_string(&p1).unwrap();
        assert_eq!(text, fs::read_to_string(&p2).unwrap());
        let v: Value = serde_json::from_str(&text).unwrap();
        assert!(v["fvmd"].is_null());
        assert!(v["null_reasons"]["fvmd"].as_str().unwrap().contains("too few frames"));
        assert!(text.find("\"alpha\"").unwrap() < text.find("\"zeta\"").unwrap());
        assert!(text.find("\"cosine_sim\"").unwrap() < text.find("\"psnr\"").unwrap());
    }

    #[test]
    fn non_finite_metric_becomes_null() {
        let mut r = EvalReport::default();
        assert_eq!(r.record("iou", Ok(f64::NAN)), None);
        assert!(r.null_reasons.contains_key("iou"));
    }

    #[test]
    fn csv_rows_keep_column_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let rows = vec![
            vec!["a".to_string(), csv_cell(Some(1.5))],
            vec!["b".to_string(), csv_cell(None)],
        ];
        write_csv(&p, &["label", "value"], &rows).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "label,value\na,1.5\nb,\n");
        assert!(write_csv(&p, &["only"], &rows).is_err());
    }

    #[test]
    fn pgm_examples() {
        let g = SensorGeometry::new(100.0, 5.0, 8, 10).unwrap();
        let zeros = pgm_bytes(&Heatmap::zeros(g));
        let header = b"P5\n10 8\n255\n";
        assert_eq!(&zeros[..header.len()], header);
        assert!(zeros[header.len()..].iter().all(|&b| b == 0));
        assert_eq!(zeros.len(), header.len() + 80);
        let ones = pgm_bytes(&Heatmap::filled(g, 1.0).unwrap());
        assert!(ones[header.len()..].iter().all(|&b| b == 255));
        let half = pgm_bytes(&Heatmap::filled(g, 0.5).unwrap());
        assert!(half[header.len()..].iter().all(|&b| b == 128));
    }

    #[test]
    fn svg_has_one_polyline_per_trajectory() {
        let t = random_sequence(6, 4).trajectory();
        let svg = svg_trajectories(&[("truth".into(), t.clone()), ("estimate <a&b>".into(), t)]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("data-label=\"truth\""));
        assert!(svg.contains("estimate &lt;a&amp;b&gt;"));
        let lines: Vec<&str> = svg.lines().filter(|l| l.contains("points=")).collect();
        let pts = |l: &str| l.split("points=").nth(1).unwrap().to_string();
        assert_eq!(pts(lines[0]), pts(lines[1]));
        assert_eq!(svg, svg_trajectories(&[("truth".into(), random_sequence(6, 4).trajectory()), ("estimate <a&b>".into(), random_sequence(6, 4).trajectory())]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn dataset_round_trip(seed in any::<u64>(), n in 1usize..6) {
            let dir = tempfile::tempdir().unwrap();
            let seq = random_sequence(seed, n);
            write_dataset(&seq, dir.path(), &Value::Null).unwrap();
            prop_assert_eq!(read_dataset(dir.path()).unwrap(), seq);
        }
    }
}
