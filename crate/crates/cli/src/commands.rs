//! Implementations of the four subcommands.

use crate::config::{resolve, Method, Overrides, RunConfig};
use crate::error::{write_err, CliError, CliResult};
use alio_core::dataset::{dataset_digest, read_dataset, read_meta, write_dataset, Dataset, DatasetError};
use alio_core::degeneracy::{write_trace_row, TRACE_HEADER};
use alio_core::estimator::{run_sequence, write_frame_row, write_tum, SequenceResult, FRAMES_HEADER};
use alio_core::evaluation::{
    evaluate, median, parse_tum, write_comparison, Alignment, ApeSummary, ComparisonRow, EvalError,
};
use alio_core::residuals::{write_class_stats, DIAGNOSTICS_HEADER};
use alio_core::simulator::{simulate, ImuNoise, Preset, ScanPattern, SimConfig, SimError};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

/// Association window used when scoring a run against its ground truth.
pub const RUN_MAX_DT: f64 = 0.01;

fn data_err(e: DatasetError) -> CliError {
    CliError::Data(e.to_string())
}

fn sim_err(e: SimError) -> CliError {
    CliError::Usage(e.to_string())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(write_err(dir))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>) -> CliResult<()> {
    let file = fs::File::create(path).map_err(write_err(path))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(write_err(path))
}

/// Geometry and sampling parameters of `simulate`.
#[derive(Clone, Debug, Default)]
pub struct SimulateParams {
    pub preset: String,
    pub size: Option<Vec<f64>>,
    pub length: Option<f64>,
    pub width: Option<f64>,
    pub height: Option<f64>,
    pub end_caps: bool,
    pub radius: Option<f64>,
    pub segments: Option<usize>,
    pub duration: f64,
    pub seed: u64,
    pub noise: f64,
    pub rays: usize,
    pub rate: f64,
    pub noiseless_imu: bool,
}

impl SimulateParams {
    pub fn new(preset: &str, duration: f64, seed: u64) -> Self {
        SimulateParams {
            preset: preset.to_string(),
            duration,
            seed,
            noise: 0.02,
            rays: ScanPattern::default().rays,
            rate: ScanPattern::default().rate_hz,
            ..SimulateParams::default()
        }
    }

    /// Builds the simulation configuration, rejecting flags that do not
    /// belong to the chosen preset.
    pub fn to_config(&self) -> CliResult<SimConfig> {
        let mut preset = Preset::from_name(&self.preset)
            .ok_or_else(|| CliError::Usage(format!("unknown preset `{}`", self.preset)))?;
        let stray = |flag: &str| Err(CliError::Usage(format!("--{flag} does not apply to preset {}", self.preset)));
        match &mut preset {
            Preset::Room { size } => {
                if let Some(s) = &self.size {
                    *size = <[f64; 3]>::try_from(s.as_slice())
                        .map_err(|_| CliError::Usage("--size expects three values x,y,z".into()))?;
                }
                for (flag, given) in [
                    ("length", self.length.is_some()),
                    ("width", self.width.is_some()),
                    ("height", self.height.is_some()),
                    ("end-caps", self.end_caps),
                    ("radius", self.radius.is_some()),
                    ("segments", self.segments.is_some()),
                ] {
                    if given {
                        return stray(flag);
                    }
                }
            }
            Preset::Corridor { length, width, height, end_caps } => {
                *length = self.length.unwrap_or(*length);
                *width = self.width.unwrap_or(*width);
                *height = self.height.unwrap_or(*height);
                *end_caps = self.end_caps;
                for (flag, given) in
                    [("size", self.size.is_some()), ("radius", self.radius.is_some()), ("segments", self.segments.is_some())]
                {
                    if given {
                        return stray(flag);
                    }
                }
            }
            Preset::Tunnel { length, radius, segments } => {
                *length = self.length.unwrap_or(*length);
                *radius = self.radius.unwrap_or(*radius);
                *segments = self.segments.unwrap_or(*segments);
                for (flag, given) in [
                    ("size", self.size.is_some()),
                    ("width", self.width.is_some()),
                    ("height", self.height.is_some()),
                    ("end-caps", self.end_caps),
                ] {
                    if given {
                        return stray(flag);
                    }
                }
            }
            Preset::GroundOnly => {
                if self.size.is_some() || self.length.is_some() || self.radius.is_some() || self.width.is_some() {
                    return stray("size/length/width/radius");
                }
            }
        }
        let mut config = SimConfig::new(preset, self.duration, self.seed);
        config.range_noise = self.noise;
        config.scan.rays = self.rays;
        config.scan.rate_hz = self.rate;
        if self.noiseless_imu {
            config.imu = ImuNoise { rate_hz: config.imu.rate_hz, ..ImuNoise::noiseless() };
        }
        config.validate().map_err(sim_err)?;
        Ok(config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimulateSummary {
    pub out: PathBuf,
    pub preset: String,
    pub frames: usize,
    pub digest: String,
}

pub fn cmd_simulate(config: &SimConfig, out: &Path) -> CliResult<SimulateSummary> {
    let sim = simulate(config).map_err(sim_err)?;
    let dataset = Dataset::from_simulation(&sim);
    create_dir(out)?;
    write_dataset(out, &dataset).map_err(|e| CliError::Internal(e.to_string()))?;
    let digest = dataset_digest(out).map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(SimulateSummary { out: out.to_path_buf(), preset: dataset.meta.preset, frames: dataset.meta.frames, digest })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub method: Method,
    pub frames: usize,
    pub gated: usize,
    pub failed_frames: usize,
    /// APE against the dataset's ground truth, first-pose aligned.
    pub rmse: Option<f64>,
    pub mean: Option<f64>,
    pub max: Option<f64>,
}

/// Writes every per-run artifact of `result` into `out`.
pub fn write_run_outputs(out: &Path, config: &RunConfig, result: &SequenceResult) -> CliResult<()> {
    create_dir(out)?;
    let effective = serde_json::to_string_pretty(config).map_err(|e| CliError::Internal(e.to_string()))?;
    let path = out.join("effective_config.json");
    fs::write(&path, effective + "\n").map_err(write_err(&path))?;
    write_file(&out.join("trajectory.txt"), |w| write_tum(w, &result.trajectory))?;
    write_file(&out.join("degeneracy.csv"), |w| {
        writeln!(w, "{TRACE_HEADER}")?;
        result.frames.iter().try_for_each(|f| write_trace_row(&mut *w, f.index, f.t, &f.report, f.gated()))
    })?;
    write_file(&out.join("frames.csv"), |w| {
        writeln!(w, "{FRAMES_HEADER}")?;
        result.frames.iter().try_for_each(|f| write_frame_row(&mut *w, f))
    })?;
    write_file(&out.join("residuals.csv"), |w| {
        writeln!(w, "{DIAGNOSTICS_HEADER}")?;
        result.frames.iter().try_for_each(|f| write_class_stats(&mut *w, f.index, &f.class_stats))
    })?;
    write_file(&out.join("map.ply"), |w| result.map.write_ply(w))?;
    if !result.errors.is_empty() {
        write_file(&out.join("errors.csv"), |w| {
            writeln!(w, "frame,message")?;
            result.errors.iter().try_for_each(|(k, m)| writeln!(w, "{k},\"{}\"", m.replace('"', "'")))
        })?;
    }
    Ok(())
}

/// Runs the estimator over an in-memory dataset and writes its outputs.
pub fn execute_run(dataset: &Dataset, config: &RunConfig, out: &Path) -> CliResult<RunSummary> {
    let result = run_sequence(&dataset.frames, &dataset.imu, dataset.initial_state(), &config.estimator);
    write_run_outputs(out, config, &result)?;
    let ape = if dataset.ground_truth.is_empty() || result.trajectory.is_empty() {
        None
    } else {
        evaluate(&result.trajectory, &dataset.ground_truth, RUN_MAX_DT, Alignment::FirstPose).ok()
    };
    Ok(RunSummary {
        method: config.method,
        frames: result.trajectory.len(),
        gated: result.frames.iter().filter(|f| f.gated()).count(),
        failed_frames: result.errors.len(),
        rmse: ape.map(|a| a.rmse),
        mean: ape.map(|a| a.mean),
        max: ape.map(|a| a.max),
    })
}

pub fn cmd_run(overrides: &Overrides) -> CliResult<RunSummary> {
    let config = resolve(overrides)?;
    let dataset_dir =
        config.dataset.clone().ok_or_else(|| CliError::Usage("no dataset given (--dataset or config file)".into()))?;
    let out = config.out.clone().ok_or_else(|| CliError::Usage("no output directory given (--out or config file)".into()))?;
    let dataset = read_dataset(&dataset_dir).map_err(data_err)?;
    execute_run(&dataset, &config, &out)
}

fn read_tum(path: &Path) -> CliResult<Vec<(f64, alio_core::geometry::Pose)>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    parse_tum(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn cmd_evaluate(est: &Path, gt: &Path, alignment: Alignment, max_dt: f64, out: Option<&Path>) -> CliResult<ApeSummary> {
    if !(max_dt >= 0.0) {
        return Err(CliError::Usage(format!("--max-dt must be non-negative, got {max_dt}")));
    }
    let (e, g) = (read_tum(est)?, read_tum(gt)?);
    let summary = evaluate(&e, &g, max_dt, alignment).map_err(|err: EvalError| CliError::Data(err.to_string()))?;
    if let Some(path) = out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        write_file(path, |w| {
            writeln!(w, "rmse,mean,max,count")?;
            writeln!(w, "{},{},{},{}", summary.rmse, summary.mean, summary.max, summary.count)
        })?;
    }
    Ok(summary)
}

pub const RUNS_HEADER: &str = "sequence,seed,method,status,rmse,mean,max,frames,gated";

/// One (sequence, seed, method) combination of an ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub sequence: String,
    pub seed: u64,
    pub method: Method,
    pub result: Result<RunSummary, String>,
}

#[derive(Clone, Debug, Default)]
pub struct AblateParams {
    pub datasets: Vec<PathBuf>,
    pub seeds: Vec<u64>,
    pub config: Option<PathBuf>,
    pub sets: Vec<String>,
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
}

fn sequence_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Regenerates every dataset for every seed, runs the three method presets
/// on each and writes `runs.csv` and `comparison.csv` under `out`.
pub fn cmd_ablate(p: &AblateParams) -> CliResult<Vec<ComparisonRow>> {
    if p.datasets.is_empty() {
        return Err(CliError::Usage("ablate needs at least one dataset".into()));
    }
    if p.seeds.is_empty() {
        return Err(CliError::Usage("ablate needs at least one seed".into()));
    }
    let configs: Vec<RunConfig> = Method::ALL
        .iter()
        .map(|&m| {
            resolve(&Overrides { config: p.config.clone(), method: Some(m), sets: p.sets.clone(), ..Overrides::default() })
        })
        .collect::<CliResult<_>>()?;
    let mut names = Vec::new();
    let mut metas = Vec::new();
    for dir in &p.datasets {
        let name = sequence_name(dir);
        if names.contains(&name) {
            return Err(CliError::Usage(format!("two datasets share the name `{name}`")));
        }
        metas.push(read_meta(dir).map_err(data_err)?);
        names.push(name);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(p.jobs)
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;

    let cases: Vec<(usize, u64)> =
        (0..metas.len()).flat_map(|d| p.seeds.iter().map(move |&s| (d, s))).collect();
    let runs: Vec<AblationRun> = pool.install(|| {
        cases
            .par_iter()
            .flat_map_iter(|&(d, seed)| {
                let mut sim_config = metas[d].simulation.clone();
                sim_config.seed = seed;
                let dataset = simulate(&sim_config).map(|s| Dataset::from_simulation(&s)).map_err(|e| e.to_string());
                let sequence = names[d].clone();
                let out = p.out.join("runs").join(&sequence).join(format!("seed_{seed}"));
                configs
                    .iter()
                    .map(|config| {
                        let mut config = config.clone();
                        config.dataset = Some(p.datasets[d].clone());
                        config.seed = Some(seed);
                        let dir = out.join(config.method.name());
                        config.out = Some(dir.clone());
                        let result = match &dataset {
                            Ok(ds) => execute_run(ds, &config, &dir).map_err(|e| e.to_string()),
                            Err(e) => Err(e.clone()),
                        };
                        AblationRun { sequence: sequence.clone(), seed, method: config.method, result }
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    });

    create_dir(&p.out)?;
    write_file(&p.out.join("runs.csv"), |w| {
        writeln!(w, "{RUNS_HEADER}")?;
        for r in &runs {
            match &r.result {
                Ok(s) => writeln!(
                    w,
                    "{},{},{},ok,{},{},{},{},{}",
                    r.sequence,
                    r.seed,
                    r.method.name(),
                    fmt_opt(s.rmse),
                    fmt_opt(s.mean),
                    fmt_opt(s.max),
                    s.frames,
                    s.gated
                )?,
                Err(msg) => {
                    let status = format!("failed: {}", msg.replace([',', '\n', '"'], " "));
                    writeln!(w, "{},{},{},{status},,,,,", r.sequence, r.seed, r.method.name())?
                }
            }
        }
        Ok(())
    })?;

    let mut rows = Vec::new();
    for name in &names {
        for method in Method::ALL {
            let ok: Vec<&RunSummary> = runs
                .iter()
                .filter(|r| &r.sequence == name && r.method == method)
                .filter_map(|r| r.result.as_ref().ok())
                .filter(|s| s.rmse.is_some())
                .collect();
            let stat = |f: fn(&RunSummary) -> Option<f64>| {
                let v: Vec<f64> = ok.iter().filter_map(|s| f(s)).collect();
                if v.is_empty() { f64::NAN } else { median(&v) }
            };
            let frames: Vec<f64> = ok.iter().map(|s| s.frames as f64).collect();
            rows.push(ComparisonRow {
                sequence: name.clone(),
                method: method.name().to_string(),
                summary: ApeSummary {
                    rmse: stat(|s| s.rmse),
                    mean: stat(|s| s.mean),
                    max: stat(|s| s.max),
                    count: if frames.is_empty() { 0 } else { median(&frames).round() as usize },
                },
            });
        }
    }
    write_file(&p.out.join("comparison.csv"), |w| write_comparison(w, &rows))?;
    Ok(rows)
}

pub fn summary_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).unwrap_or_else(|e| json!({ "error": e.to_string() }).to_string())
}
