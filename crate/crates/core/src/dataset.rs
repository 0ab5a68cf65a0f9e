//! On-disk sequence layout.
//!
//! ```text
//! <dir>/meta.json          generation parameters and initial state
//! <dir>/imu.csv            t,wx,wy,wz,ax,ay,az
//! <dir>/groundtruth.txt    TUM poses at every scan end
//! <dir>/scans/NNNNNN.csv   t,x,y,z per return, sensor frame at capture time
//! ```
//!
//! Floats are written in shortest round-trip form so a dataset read back
//! is bit-identical to the one generated.

use crate::estimator::write_tum;
use crate::evaluation::{parse_tum, EvalError};
use crate::geometry::{Pose, Rotation};
use crate::imu::{ImuSample, NavState};
use crate::scan::{ScanFrame, TimedPoint};
use crate::simulator::{quaternion_xyzw, SimConfig, Simulation};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: unsupported format_version {found} (expected {FORMAT_VERSION})")]
    Version { path: PathBuf, found: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, message: impl Into<String>) -> DatasetError {
    DatasetError::Format { path: path.to_path_buf(), message: message.into() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    pub t: f64,
    pub position: [f64; 3],
    /// `[x, y, z, w]`.
    pub orientation: [f64; 4],
    pub velocity: [f64; 3],
}

impl InitialState {
    pub fn from_state(s: &NavState) -> Self {
        InitialState {
            t: s.t,
            position: s.position.into(),
            orientation: quaternion_xyzw(&s.rotation),
            velocity: s.velocity.into(),
        }
    }

    pub fn to_state(&self) -> NavState {
        let [x, y, z, w] = self.orientation;
        NavState {
            rotation: Rotation::from_xyzw(x, y, z, w),
            position: Vector3::from(self.position),
            velocity: Vector3::from(self.velocity),
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
            t: self.t,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub format_version: u32,
    pub preset: String,
    pub frames: usize,
    pub initial_state: InitialState,
    pub simulation: SimConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: Meta,
    pub frames: Vec<ScanFrame>,
    pub imu: Vec<ImuSample>,
    pub ground_truth: Vec<(f64, Pose)>,
}

impl Dataset {
    pub fn from_simulation(sim: &Simulation) -> Self {
        let frames = sim.frames();
        let ground_truth = frames.iter().filter_map(|f| f.ground_truth.map(|p| (f.end, p))).collect();
        Dataset {
            meta: Meta {
                format_version: FORMAT_VERSION,
                preset: sim.config.preset.name().to_string(),
                frames: frames.len(),
                initial_state: InitialState::from_state(&sim.initial_state()),
                simulation: sim.config.clone(),
            },
            frames,
            imu: sim.imu.clone(),
            ground_truth,
        }
    }

    pub fn initial_state(&self) -> NavState {
        self.meta.initial_state.to_state()
    }
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

pub fn scan_file_name(index: usize) -> String {
    format!("{index:06}.csv")
}

/// Writes `dataset` under `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<(), DatasetError> {
    let scans = dir.join("scans");
    fs::create_dir_all(&scans).map_err(io_err(&scans))?;
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&dataset.meta).map_err(|e| format_err(&meta_path, e.to_string()))?;
    fs::write(&meta_path, json + "\n").map_err(io_err(&meta_path))?;

    write_file(&dir.join("imu.csv"), |w| {
        writeln!(w, "t,wx,wy,wz,ax,ay,az")?;
        for s in &dataset.imu {
            let (g, a) = (s.gyro, s.accel);
            writeln!(w, "{},{},{},{},{},{},{}", s.t, g.x, g.y, g.z, a.x, a.y, a.z)?;
        }
        Ok(())
    })?;
    write_file(&dir.join("groundtruth.txt"), |w| write_tum(w, &dataset.ground_truth))?;
    for (k, frame) in dataset.frames.iter().enumerate() {
        write_file(&scans.join(scan_file_name(k)), |w| {
            writeln!(w, "t,x,y,z")?;
            for p in &frame.points {
                writeln!(w, "{},{},{},{}", p.t, p.p.x, p.p.y, p.p.z)?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

fn read_to_string(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn parse_csv_rows(path: &Path, text: &str, header: &str, width: usize) -> Result<Vec<Vec<f64>>, DatasetError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        _ => return Err(format_err(path, format!("line 1: expected header `{header}`"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?;
        if row.len() != width || row.iter().any(|v| !v.is_finite()) {
            return Err(format_err(path, format!("line {}: expected {width} finite values", i + 1)));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_meta(dir: &Path) -> Result<Meta, DatasetError> {
    let path = dir.join("meta.json");
    let text = read_to_string(&path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))?;
    let version = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(DatasetError::Version { path, found: version });
    }
    serde_json::from_value(value).map_err(|e| format_err(&path, e.to_string()))
}

pub fn read_imu(path: &Path) -> Result<Vec<ImuSample>, DatasetError> {
    let rows = parse_csv_rows(path, &read_to_string(path)?, "t,wx,wy,wz,ax,ay,az", 7)?;
    let samples: Vec<ImuSample> = rows
        .into_iter()
        .map(|r| ImuSample { t: r[0], gyro: Vector3::new(r[1], r[2], r[3]), accel: Vector3::new(r[4], r[5], r[6]) })
        .collect();
    if let Some(i) = samples.windows(2).position(|w| !(w[1].t > w[0].t)) {
        return Err(format_err(path, format!("line {}: timestamps not increasing", i + 3)));
    }
    Ok(samples)
}

/// Loads a dataset directory. Scan `k` spans `[k/rate, (k+1)/rate]`.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let meta = read_meta(dir)?;
    let imu = read_imu(&dir.join("imu.csv"))?;
    let gt_path = dir.join("groundtruth.txt");
    let ground_truth = parse_tum(&read_to_string(&gt_path)?).map_err(|e: EvalError| format_err(&gt_path, e.to_string()))?;
    let period = 1.0 / meta.simulation.scan.rate_hz;
    let mut frames = Vec::with_capacity(meta.frames);
    for k in 0..meta.frames {
        let path = dir.join("scans").join(scan_file_name(k));
        let rows = parse_csv_rows(&path, &read_to_string(&path)?, "t,x,y,z", 4)?;
        let (start, end) = (k as f64 * period, (k + 1) as f64 * period);
        let points = rows.into_iter().map(|r| TimedPoint { t: r[0], p: Vector3::new(r[1], r[2], r[3]) }).collect();
        let ground_truth = ground_truth.get(k).map(|(_, p)| *p);
        frames.push(ScanFrame { start, end, points, ground_truth });
    }
    Ok(Dataset { meta, frames, imu, ground_truth })
}

/// Relative paths of every dataset file, sorted.
fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut files = vec![PathBuf::from("groundtruth.txt"), PathBuf::from("imu.csv"), PathBuf::from("meta.json")];
    let scans = dir.join("scans");
    let mut names: Vec<String> = fs::read_dir(&scans)
        .map_err(io_err(&scans))?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    files.extend(names.into_iter().map(|n| Path::new("scans").join(n)));
    files.sort();
    Ok(files)
}

/// SHA-256 over every file's relative path, length and bytes.
pub fn dataset_digest(dir: &Path) -> Result<String, DatasetError> {
    let mut h = Sha256::new();
    for rel in dataset_files(dir)? {
        let path = dir.join(&rel);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0u8]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}
