//! Per-frame pose estimation and the sequential odometry loop.
//!
//! Each frame is predicted with the inertial stream, motion-compensated,
//! and registered against a frozen snapshot of the voxel map with damped
//! Gauss-Newton iterations over the 6-DoF pose. The final iterate's
//! residuals feed the degeneracy assessment, whose score decides whether
//! the frame's points are merged into the map.

use crate::degeneracy::{assess, DegeneracyConfig, DegeneracyReport};
use crate::geometry::{Perturbation, Pose};
use crate::imu::{deskew, prior_residual, propagate, smooth_biases, ImuConfig, ImuError, ImuSample, NavState, PoseTrajectory};
use crate::residuals::{
    build_residuals, matches_cost, ClassStats, MatchStats, ResidualConfig, ResidualKind, ResidualSet,
};
use crate::scan::ScanFrame;
use crate::simulator::quaternion_xyzw;
use crate::voxel_map::{frame_gate, InsertStats, VoxelMap, VoxelMapConfig};
use nalgebra::{Matrix6, Vector3, Vector6};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("scan {index} has no points")]
    EmptyScan { index: usize },
    #[error(transparent)]
    Imu(#[from] ImuError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Iterations stop once `‖δ‖` falls below this (mixed rad/m norm).
    pub convergence_threshold: f64,
    pub initial_lambda: f64,
    /// Damping is multiplied by this on a rejected step and divided by it
    /// on an accepted one.
    pub lambda_factor: f64,
    /// Past this damping an iteration gives up and keeps the current pose.
    pub max_lambda: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 10,
            convergence_threshold: 1e-6,
            initial_lambda: 1e-4,
            lambda_factor: 10.0,
            max_lambda: 1e10,
        }
    }
}

/// Every tunable of the odometry pipeline.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub solver: SolverConfig,
    pub residuals: ResidualConfig,
    pub degeneracy: DegeneracyConfig,
    pub map: VoxelMapConfig,
    pub imu: ImuConfig,
}

impl EstimatorConfig {
    /// Checks ranges that serde cannot express.
    pub fn validate(&self) -> Result<(), String> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("{name} must lie in [0, 1], got {v}"))
            }
        };
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} must be positive, got {v}"))
            }
        };
        unit("degeneracy.alpha", self.degeneracy.alpha)?;
        unit("degeneracy.gamma", self.degeneracy.gamma)?;
        unit("map.beta", self.map.beta)?;
        pos("degeneracy.tau_global", self.degeneracy.tau_global)?;
        pos("degeneracy.epsilon", self.degeneracy.epsilon)?;
        pos("solver.convergence_threshold", self.solver.convergence_threshold)?;
        pos("solver.initial_lambda", self.solver.initial_lambda)?;
        pos("solver.max_lambda", self.solver.max_lambda)?;
        if !(self.solver.lambda_factor > 1.0) {
            return Err(format!("solver.lambda_factor must exceed 1, got {}", self.solver.lambda_factor));
        }
        pos("map.side", self.map.side)?;
        pos("residuals.min_direction_norm", self.residuals.min_direction_norm)?;
        pos("residuals.gicp_regularization", self.residuals.gicp_regularization)?;
        pos("residuals.max_plane_distance", self.residuals.max_plane_distance)?;
        pos("map.acceptance.margin", self.map.acceptance.margin)?;
        for (name, class) in [
            ("point_to_plane", &self.residuals.point_to_plane),
            ("gicp", &self.residuals.gicp),
            ("angle", &self.residuals.angle),
        ] {
            pos(&format!("residuals.{name}.weight"), class.weight)?;
        }
        if self.map.min_points_for_plane < 3 {
            return Err("map.min_points_for_plane must be at least 3".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapOutcome {
    Updated,
    GatedOut,
}

impl MapOutcome {
    pub fn name(&self) -> &'static str {
        match self {
            MapOutcome::Updated => "updated",
            MapOutcome::GatedOut => "gated_out",
        }
    }
}

/// Cost of one accepted iteration, evaluated on that iteration's frozen
/// correspondences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationCost {
    pub before: f64,
    pub after: f64,
    pub step_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameResult {
    pub index: usize,
    pub t: f64,
    pub pose: Pose,
    pub predicted: Pose,
    pub iterations: usize,
    pub converged: bool,
    pub report: DegeneracyReport,
    pub map_outcome: MapOutcome,
    pub bootstrap: bool,
    pub match_stats: MatchStats,
    /// Point-to-plane, GICP and angle statistics at the final iterate.
    pub class_stats: [ClassStats; 3],
    pub cost_initial: f64,
    pub cost_final: f64,
    pub iteration_costs: Vec<IterationCost>,
    pub insert_stats: InsertStats,
    /// Set when the frame fell back to the inertial prediction.
    pub note: Option<String>,
}

impl FrameResult {
    pub fn gated(&self) -> bool {
        self.map_outcome == MapOutcome::GatedOut
    }
}

fn class_stats(set: &ResidualSet) -> [ClassStats; 3] {
    ResidualKind::MEASUREMENTS.map(|k| set.class_stats(k))
}

/// Samples needed to propagate over `[t0, t1]`: the last one at or before
/// `t0` through the first one at or after `t1`.
pub fn imu_window(samples: &[ImuSample], t0: f64, t1: f64) -> &[ImuSample] {
    let lo = samples.partition_point(|s| s.t <= t0).saturating_sub(1);
    let hi = (samples.partition_point(|s| s.t < t1) + 1).min(samples.len());
    if lo >= hi {
        return &[];
    }
    &samples[lo..hi]
}

struct Prediction {
    state: NavState,
    information: Matrix6<f64>,
    trajectory: PoseTrajectory,
}

struct Solve {
    pose: Pose,
    iterations: usize,
    converged: bool,
    costs: Vec<IterationCost>,
    singular: bool,
}

fn prior_cost(predicted: &Pose, pose: &Pose, information: &Matrix6<f64>, enabled: bool) -> f64 {
    if enabled {
        prior_residual(predicted, pose, information).cost()
    } else {
        0.0
    }
}

fn gauss_newton(
    points: &[Vector3<f64>],
    map: &VoxelMap,
    predicted: &Pose,
    information: &Matrix6<f64>,
    config: &EstimatorConfig,
) -> Solve {
    let sc = &config.solver;
    let rc = &config.residuals;
    let use_prior = information.amax() > 0.0;
    let mut pose = *predicted;
    let mut lambda = sc.initial_lambda;
    let mut out = Solve { pose, iterations: 0, converged: false, costs: Vec::new(), singular: false };

    for _ in 0..sc.max_iterations {
        let set = build_residuals(points, map, &pose, rc);
        if set.matches.is_empty() {
            break;
        }
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for t in &set.terms {
            t.accumulate(&mut h, &mut g);
        }
        let mut cost0 = set.cost();
        if use_prior {
            let p = prior_residual(predicted, &pose, information);
            p.accumulate(&mut h, &mut g);
            cost0 += p.cost();
        }

        let mut accepted = None;
        while lambda <= sc.max_lambda {
            let damped = h + Matrix6::identity() * lambda;
            let Some(chol) = damped.cholesky() else {
                lambda *= sc.lambda_factor;
                continue;
            };
            let delta = Perturbation(-chol.solve(&g));
            let candidate = pose.retract(&delta);
            let cost1 = matches_cost(&set.matches, &candidate, rc.min_direction_norm)
                + prior_cost(predicted, &candidate, information, use_prior);
            if cost1 <= cost0 {
                lambda = (lambda / sc.lambda_factor).max(f64::MIN_POSITIVE);
                accepted = Some((candidate, cost1, delta.norm()));
                break;
            }
            lambda *= sc.lambda_factor;
        }
        out.iterations += 1;
        let Some((candidate, cost1, step)) = accepted else {
            // No damping level decreases the cost: the current pose is a
            // stationary point of this linearization.
            out.singular = true;
            out.converged = true;
            break;
        };
        out.costs.push(IterationCost { before: cost0, after: cost1, step_norm: step });
        pose = candidate;
        if step < sc.convergence_threshold {
            out.converged = true;
            break;
        }
    }
    out.pose = pose;
    out
}

/// Registers one scan and updates `map` and `state` in place.
///
/// `imu` must cover `[state.t, scan.end]`. An empty map is seeded with the
/// predicted scan and a neutral score of 1.
pub fn process_frame(
    index: usize,
    scan: &ScanFrame,
    imu: &[ImuSample],
    map: &mut VoxelMap,
    state: &mut NavState,
    config: &EstimatorConfig,
) -> Result<FrameResult, EstimatorError> {
    if scan.is_empty() {
        return Err(EstimatorError::EmptyScan { index });
    }
    let prediction = {
        let p = propagate(state, imu_window(imu, state.t, scan.end), scan.end, &config.imu)?;
        Prediction { state: p.state, information: p.information, trajectory: p.trajectory }
    };
    let points = deskew(scan, &prediction.trajectory)?.positions();
    let predicted = prediction.state.pose();
    let dt = scan.end - state.t;

    if map.is_empty() {
        let world: Vec<_> = points.iter().map(|p| predicted.apply(p)).collect();
        let insert_stats = map.insert_points(world.iter(), 1.0);
        *state = prediction.state;
        return Ok(FrameResult {
            index,
            t: scan.end,
            pose: predicted,
            predicted,
            iterations: 0,
            converged: true,
            report: DegeneracyReport::bootstrap(),
            map_outcome: MapOutcome::Updated,
            bootstrap: true,
            match_stats: MatchStats { points: points.len(), ..MatchStats::default() },
            class_stats: [ClassStats::default(); 3],
            cost_initial: 0.0,
            cost_final: 0.0,
            iteration_costs: Vec::new(),
            insert_stats,
            note: None,
        });
    }

    let snapshot = map.snapshot();
    let information = prediction.information;
    let solve = gauss_newton(&points, &snapshot, &predicted, &information, config);
    let final_set = build_residuals(&points, &snapshot, &solve.pose, &config.residuals);
    let prior_final = prior_cost(&predicted, &solve.pose, &information, true);
    let cost_initial = solve.costs.first().map(|c| c.before).unwrap_or(final_set.cost() + prior_final);

    let mut note = None;
    let (pose, report, gated) = if final_set.matches.is_empty() {
        note = Some("no correspondences; inertial prediction kept".to_string());
        (predicted, DegeneracyReport::without_constraints(), true)
    } else {
        let report = assess(&final_set.terms, &config.degeneracy);
        let gated = config.degeneracy.gating_enabled && !frame_gate(report.s_deg, config.degeneracy.tau_global);
        (solve.pose, report, gated)
    };
    if solve.singular && note.is_none() {
        note = Some("damping limit reached".to_string());
    }

    let insert_stats = if gated {
        InsertStats::default()
    } else {
        let world: Vec<_> = points.iter().map(|p| pose.apply(p)).collect();
        map.insert_points(world.iter(), report.s_deg)
    };

    let mut next = prediction.state;
    next.rotation = pose.rotation;
    next.position = pose.translation;
    if dt > 0.0 {
        next.velocity += (pose.translation - predicted.translation) / dt;
    }
    smooth_biases(&mut next, &predicted, &pose, dt, config.imu.bias_gain);
    next.t = scan.end;
    *state = next;

    Ok(FrameResult {
        index,
        t: scan.end,
        pose,
        predicted,
        iterations: solve.iterations,
        converged: solve.converged,
        match_stats: final_set.stats,
        class_stats: class_stats(&final_set),
        cost_initial,
        cost_final: final_set.cost() + prior_cost(&predicted, &pose, &information, true),
        iteration_costs: solve.costs,
        report,
        map_outcome: if gated { MapOutcome::GatedOut } else { MapOutcome::Updated },
        bootstrap: false,
        insert_stats,
        note,
    })
}

/// Outcome of a whole sequence.
#[derive(Clone, Debug)]
pub struct SequenceResult {
    pub trajectory: Vec<(f64, Pose)>,
    pub frames: Vec<FrameResult>,
    pub map: VoxelMap,
    /// `(frame index, message)` for frames that could not be processed.
    pub errors: Vec<(usize, String)>,
}

/// Folds [`process_frame`] over `frames` from `initial`. A frame that fails
/// is recorded and replaced by a constant-velocity extrapolation.
pub fn run_sequence(frames: &[ScanFrame], imu: &[ImuSample], initial: NavState, config: &EstimatorConfig) -> SequenceResult {
    let mut map = VoxelMap::new(config.map.clone());
    let mut state = initial;
    let mut out = SequenceResult { trajectory: Vec::new(), frames: Vec::new(), map: map.clone(), errors: Vec::new() };
    for (k, scan) in frames.iter().enumerate() {
        match process_frame(k, scan, imu, &mut map, &mut state, config) {
            Ok(r) => {
                out.trajectory.push((r.t, r.pose));
                out.frames.push(r);
            }
            Err(e) => {
                let dt = scan.end - state.t;
                state.position += state.velocity * dt;
                state.t = scan.end;
                out.trajectory.push((scan.end, state.pose()));
                out.errors.push((k, e.to_string()));
            }
        }
    }
    out.map = map;
    out
}

/// One `t x y z qx qy qz qw` line per pose.
pub fn write_tum<W: Write>(mut w: W, trajectory: &[(f64, Pose)]) -> io::Result<()> {
    for (t, p) in trajectory {
        let [qx, qy, qz, qw] = quaternion_xyzw(&p.rotation);
        let v = p.translation;
        writeln!(w, "{t} {} {} {} {qx} {qy} {qz} {qw}", v.x, v.y, v.z)?;
    }
    Ok(())
}

pub const FRAMES_HEADER: &str = "frame,t,iters,converged,matched,cost_initial,cost_final,map_outcome";

pub fn write_frame_row<W: Write>(mut w: W, r: &FrameResult) -> io::Result<()> {
    writeln!(
        w,
        "{},{},{},{},{},{},{},{}",
        r.index,
        r.t,
        r.iterations,
        r.converged as u8,
        r.match_stats.matched,
        r.cost_initial,
        r.cost_final,
        r.map_outcome.name()
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imu::ImuSample;

    #[test]
    fn imu_window_brackets_interval() {
        let s: Vec<_> = (0..=10)
            .map(|i| ImuSample { t: i as f64 * 0.1, gyro: Vector3::zeros(), accel: Vector3::zeros() })
            .collect();
        let w = imu_window(&s, 0.25, 0.55);
        assert_eq!((w[0].t, w[w.len() - 1].t), (0.2, 0.6000000000000001));
        let w = imu_window(&s, 0.2, 0.4);
        assert!((w[0].t - 0.2).abs() < 1e-12 && (w[w.len() - 1].t - 0.4).abs() < 1e-12);
        assert!(imu_window(&[], 0.0, 1.0).is_empty());
    }

    #[test]
    fn default_config_is_valid() {
        assert_eq!(EstimatorConfig::default().validate(), Ok(()));
        let mut c = EstimatorConfig::default();
        c.degeneracy.alpha = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn tum_line_format() {
        let mut out = Vec::new();
        write_tum(&mut out, &[(0.1, Pose::from_translation(Vector3::new(1.0, 2.0, 3.0)))]).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "0.1 1 2 3 0 0 0 1\n");
    }
}
