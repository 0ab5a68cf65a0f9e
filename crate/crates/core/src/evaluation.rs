//! Absolute pose error of an estimated trajectory against ground truth.
//!
//! Only translational error enters the summary; rotation error is
//! available separately for diagnostics.

use crate::geometry::{Pose, Rotation};
use nalgebra::{Matrix3, Vector3};
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no estimated pose lies within the association window of a ground-truth pose")]
    NoAssociations,
    #[error("trajectory timestamps must be strictly increasing (line {line})")]
    NonIncreasing { line: usize },
}

pub type Trajectory = Vec<(f64, Pose)>;

/// Parses TUM text (`t x y z qx qy qz qw`); blank lines and `#` comments
/// are skipped. Line numbers in errors are 1-based.
pub fn parse_tum(text: &str) -> Result<Trajectory, EvalError> {
    let mut out: Trajectory = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = s
            .split_whitespace()
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| EvalError::Parse { line, message: format!("bad number: {e}") })?;
        if fields.len() != 8 {
            return Err(EvalError::Parse { line, message: format!("expected 8 fields, found {}", fields.len()) });
        }
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::Parse { line, message: "non-finite value".into() });
        }
        let qn = fields[4..8].iter().map(|v| v * v).sum::<f64>().sqrt();
        if qn < 1e-9 {
            return Err(EvalError::Parse { line, message: "zero quaternion".into() });
        }
        let t = fields[0];
        if let Some((prev, _)) = out.last() {
            if !(t > *prev) {
                return Err(EvalError::NonIncreasing { line });
            }
        }
        let r = Rotation::from_xyzw(fields[4], fields[5], fields[6], fields[7]);
        out.push((t, Pose::new(r, Vector3::new(fields[1], fields[2], fields[3]))));
    }
    Ok(out)
}

/// `(estimated, ground truth)` pose pair.
pub type PosePair = (Pose, Pose);

/// Pairs each estimate with the nearest unused ground-truth pose within
/// `max_dt`. Estimates are visited in time order.
pub fn associate(est: &[(f64, Pose)], gt: &[(f64, Pose)], max_dt: f64) -> Result<Vec<PosePair>, EvalError> {
    let mut used = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (t, pose) in est {
        let i = gt.partition_point(|(tg, _)| tg < t);
        let best = [i.checked_sub(1), Some(i), Some(i + 1)]
            .into_iter()
            .flatten()
            .filter(|&j| j < gt.len() && !used[j])
            .map(|j| (j, (gt[j].0 - t).abs()))
            .filter(|(_, d)| *d <= max_dt)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((j, _)) = best {
            used[j] = true;
            pairs.push((*pose, gt[j].1));
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::NoAssociations);
    }
    Ok(pairs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Alignment {
    None,
    #[default]
    FirstPose,
    /// Least-squares rigid fit of all positions.
    Umeyama,
}

/// Left-multiplies every estimate by `gt₀·est₀⁻¹`.
pub fn align_first_pose(pairs: &[PosePair]) -> Vec<PosePair> {
    let Some((e0, g0)) = pairs.first() else {
        return Vec::new();
    };
    let correction = *g0 * e0.inverse();
    pairs.iter().map(|(e, g)| (correction * *e, *g)).collect()
}

/// Rigid transform (no scale) minimizing `Σ‖T·est − gt‖²` over positions.
pub fn umeyama(pairs: &[PosePair]) -> Pose {
    let n = pairs.len() as f64;
    if pairs.is_empty() {
        return Pose::identity();
    }
    let mu_e = pairs.iter().map(|(e, _)| e.translation).sum::<Vector3<f64>>() / n;
    let mu_g = pairs.iter().map(|(_, g)| g.translation).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (e, g) in pairs {
        cov += (g.translation - mu_g) * (e.translation - mu_e).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = Rotation::from_matrix(u * s * v_t);
    Pose::new(r, mu_g - r.apply(&mu_e))
}

pub fn align(pairs: &[PosePair], mode: Alignment) -> Vec<PosePair> {
    match mode {
        Alignment::None => pairs.to_vec(),
        Alignment::FirstPose => align_first_pose(pairs),
        Alignment::Umeyama => {
            let t = umeyama(pairs);
            pairs.iter().map(|(e, g)| (t * *e, *g)).collect()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApeSummary {
    pub rmse: f64,
    pub mean: f64,
    pub max: f64,
    pub count: usize,
}

/// Translational error statistics. An empty input yields zeros.
pub fn ape(pairs: &[PosePair]) -> ApeSummary {
    let errors: Vec<f64> = pairs.iter().map(|(e, g)| (e.translation - g.translation).norm()).collect();
    summarize(&errors)
}

pub fn summarize(errors: &[f64]) -> ApeSummary {
    if errors.is_empty() {
        return ApeSummary { rmse: 0.0, mean: 0.0, max: 0.0, count: 0 };
    }
    let n = errors.len() as f64;
    ApeSummary {
        rmse: (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        mean: errors.iter().sum::<f64>() / n,
        max: errors.iter().copied().fold(0.0, f64::max),
        count: errors.len(),
    }
}

/// Per-pair rotation error (rad).
pub fn rotation_errors(pairs: &[PosePair]) -> Vec<f64> {
    pairs.iter().map(|(e, g)| e.rotation.angle_to(&g.rotation)).collect()
}

/// Associate, align and summarize in one call.
pub fn evaluate(est: &[(f64, Pose)], gt: &[(f64, Pose)], max_dt: f64, mode: Alignment) -> Result<ApeSummary, EvalError> {
    Ok(ape(&align(&associate(est, gt, max_dt)?, mode)))
}

pub const COMPARISON_HEADER: &str = "sequence,method,rmse,mean,max,frames";

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub sequence: String,
    pub method: String,
    pub summary: ApeSummary,
}

pub fn write_comparison<W: Write>(mut w: W, rows: &[ComparisonRow]) -> io::Result<()> {
    writeln!(w, "{COMPARISON_HEADER}")?;
    for r in rows {
        let s = &r.summary;
        writeln!(w, "{},{},{},{},{},{}", r.sequence, r.method, s.rmse, s.mean, s.max, s.count)?;
    }
    Ok(())
}

/// Median of a nonempty slice; the mean of the middle two for even length.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
