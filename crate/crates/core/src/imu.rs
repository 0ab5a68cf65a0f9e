//! Inertial propagation between scans, the inertial prior residual, and
//! per-point motion compensation.
//!
//! Body-frame measurements are integrated with a midpoint rule: the
//! rotation advances by the averaged bias-corrected rate, and position and
//! velocity use the average of the world-frame accelerations at both ends
//! of each step. The LiDAR and IMU frames coincide.

use crate::geometry::{log_so3, right_jacobian_inverse, Pose, Rotation};
use crate::residuals::{Linearization, ResidualKind, ResidualTerm};
use crate::scan::{ScanFrame, TimedPoint};
use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Gravity in the world frame (m/s²).
pub const GRAVITY: [f64; 3] = [0.0, 0.0, -9.81];

/// Slack allowed when checking that a timestamp lies inside a window (s).
const TIME_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImuError {
    #[error("no inertial samples cover the propagation window")]
    EmptySampleWindow,
    #[error("inertial timestamps are not strictly increasing at sample {index}")]
    NonMonotonicTimestamps { index: usize },
    #[error("point time {t} outside trajectory window [{start}, {end}]")]
    PointOutsideWindow { t: f64, start: f64, end: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    /// Angular velocity, body frame (rad/s).
    pub gyro: Vector3<f64>,
    /// Specific force, body frame (m/s²); reads `−Rᵀg` at rest.
    pub accel: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NavState {
    pub rotation: Rotation,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
    pub t: f64,
}

impl NavState {
    pub fn at_rest(pose: Pose, t: f64) -> Self {
        NavState {
            rotation: pose.rotation,
            position: pose.translation,
            velocity: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
            t,
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.position)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ImuConfig {
    pub gravity: [f64; 3],
    /// Prior information on rotation per unit time (1/rad² · s).
    pub prior_rotation_weight: f64,
    /// Prior information on translation per unit time (1/m² · s).
    pub prior_translation_weight: f64,
    /// Smoothing gain pulling the biases toward the values implied by each
    /// frame's pose correction.
    pub bias_gain: f64,
}

impl Default for ImuConfig {
    fn default() -> Self {
        ImuConfig {
            gravity: GRAVITY,
            prior_rotation_weight: 1e4,
            prior_translation_weight: 1e4,
            bias_gain: 0.01,
        }
    }
}

impl ImuConfig {
    pub fn gravity(&self) -> Vector3<f64> {
        Vector3::from(self.gravity)
    }
}

/// Poses at increasing timestamps, interpolated on the geodesic between
/// neighbouring knots.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseTrajectory {
    knots: Vec<(f64, Pose)>,
}

impl PoseTrajectory {
    /// `knots` must be sorted by time and nonempty.
    pub fn new(knots: Vec<(f64, Pose)>) -> Self {
        assert!(!knots.is_empty(), "trajectory needs at least one knot");
        debug_assert!(knots.windows(2).all(|w| w[0].0 <= w[1].0));
        PoseTrajectory { knots }
    }

    pub fn stationary(pose: Pose, start: f64, end: f64) -> Self {
        PoseTrajectory::new(vec![(start, pose), (end, pose)])
    }

    pub fn start(&self) -> f64 {
        self.knots[0].0
    }

    pub fn end(&self) -> f64 {
        self.knots[self.knots.len() - 1].0
    }

    pub fn knots(&self) -> &[(f64, Pose)] {
        &self.knots
    }

    pub fn pose_at(&self, t: f64) -> Result<Pose, ImuError> {
        let (start, end) = (self.start(), self.end());
        if !(t >= start - TIME_SLACK && t <= end + TIME_SLACK) {
            return Err(ImuError::PointOutsideWindow { t, start, end });
        }
        let i = self.knots.partition_point(|(tk, _)| *tk <= t);
        if i == 0 {
            return Ok(self.knots[0].1);
        }
        if i == self.knots.len() {
            return Ok(self.knots[i - 1].1);
        }
        let (t0, p0) = &self.knots[i - 1];
        let (t1, p1) = &self.knots[i];
        let span = t1 - t0;
        if span <= 0.0 {
            return Ok(*p1);
        }
        Ok(p0.interpolate(p1, (t - t0) / span))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Propagation {
    pub state: NavState,
    /// Prior information on the `[δθ; δt]` pose perturbation.
    pub information: Matrix6<f64>,
    pub trajectory: PoseTrajectory,
}

fn check_samples(samples: &[ImuSample]) -> Result<(), ImuError> {
    if samples.is_empty() {
        return Err(ImuError::EmptySampleWindow);
    }
    for (i, w) in samples.windows(2).enumerate() {
        if !(w[1].t > w[0].t) {
            return Err(ImuError::NonMonotonicTimestamps { index: i + 1 });
        }
    }
    Ok(())
}

/// Measurement at `t`, linearly interpolated and held constant outside the
/// sampled range.
fn measurement_at(samples: &[ImuSample], t: f64) -> (Vector3<f64>, Vector3<f64>) {
    let i = samples.partition_point(|s| s.t <= t);
    if i == 0 {
        return (samples[0].gyro, samples[0].accel);
    }
    if i == samples.len() {
        let s = &samples[i - 1];
        return (s.gyro, s.accel);
    }
    let (a, b) = (&samples[i - 1], &samples[i]);
    let f = (t - a.t) / (b.t - a.t);
    (a.gyro + (b.gyro - a.gyro) * f, a.accel + (b.accel - a.accel) * f)
}

/// Integrates `samples` from `state.t` to `t_end`. Knots are placed at
/// every sample time strictly inside the window.
pub fn propagate(
    state: &NavState,
    samples: &[ImuSample],
    t_end: f64,
    config: &ImuConfig,
) -> Result<Propagation, ImuError> {
    check_samples(samples)?;
    let g = config.gravity();
    let mut times = vec![state.t];
    times.extend(samples.iter().map(|s| s.t).filter(|&t| t > state.t && t < t_end));
    if t_end > state.t {
        times.push(t_end);
    }

    let mut s = *state;
    let mut knots = Vec::with_capacity(times.len());
    knots.push((s.t, s.pose()));
    let (mut gyro_a, mut accel_a) = measurement_at(samples, times[0]);
    for w in times.windows(2) {
        let dt = w[1] - w[0];
        let (gyro_b, accel_b) = measurement_at(samples, w[1]);
        let omega = (gyro_a + gyro_b) * 0.5 - s.gyro_bias;
        let r_a = s.rotation;
        let r_b = r_a.retract(&(omega * dt));
        let acc_a = r_a.apply(&(accel_a - s.accel_bias)) + g;
        let acc_b = r_b.apply(&(accel_b - s.accel_bias)) + g;
        let acc = (acc_a + acc_b) * 0.5;
        s.position += s.velocity * dt + acc * (0.5 * dt * dt);
        s.velocity += acc * dt;
        s.rotation = r_b;
        s.t = w[1];
        knots.push((s.t, s.pose()));
        gyro_a = gyro_b;
        accel_a = accel_b;
    }

    let dt = (t_end - state.t).max(f64::EPSILON);
    let mut information = Matrix6::zeros();
    information
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(Matrix3::identity() * (config.prior_rotation_weight / dt)));
    information
        .fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(Matrix3::identity() * (config.prior_translation_weight / dt)));
    Ok(Propagation { state: s, information, trajectory: PoseTrajectory::new(knots) })
}

/// Symmetric square root of a PSD matrix.
fn psd_sqrt(m: &Matrix6<f64>) -> Matrix6<f64> {
    let is_diagonal = (0..6).all(|i| (0..6).all(|j| i == j || m[(i, j)] == 0.0));
    if is_diagonal {
        return Matrix6::from_diagonal(&m.diagonal().map(|x| x.max(0.0).sqrt()));
    }
    let eig = m.symmetric_eigen();
    let d = Matrix6::from_diagonal(&eig.eigenvalues.map(|x| x.max(0.0).sqrt()));
    eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `r = Ω^{1/2}·[log(R_predᵀR_cur); t_cur − t_pred]`, differentiated w.r.t.
/// the perturbation of `current`.
pub fn prior_residual(predicted: &Pose, current: &Pose, information: &Matrix6<f64>) -> ResidualTerm {
    let phi = log_so3(&(predicted.rotation.inverse() * current.rotation));
    let mut raw = Vector6::zeros();
    raw.fixed_rows_mut::<3>(0).copy_from(&phi);
    raw.fixed_rows_mut::<3>(3).copy_from(&(current.translation - predicted.translation));
    let mut jac = Matrix6::identity();
    jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&right_jacobian_inverse(&phi));
    let sqrt_info = psd_sqrt(information);
    ResidualTerm {
        kind: ResidualKind::Prior,
        linearization: Linearization::Vector6(Box::new((sqrt_info * raw, sqrt_info * jac))),
        weight: 1.0,
        point_index: usize::MAX,
        voxel_key: None,
    }
}

/// Re-expresses every point in the sensor frame at `scan.end`. Output
/// timestamps collapse to `scan.end`.
pub fn deskew(scan: &ScanFrame, trajectory: &PoseTrajectory) -> Result<ScanFrame, ImuError> {
    let end_inv = trajectory.pose_at(scan.end)?.inverse();
    let points = scan
        .points
        .iter()
        .map(|p| {
            let capture = trajectory.pose_at(p.t)?;
            Ok(TimedPoint { t: scan.end, p: end_inv.apply(&capture.apply(&p.p)) })
        })
        .collect::<Result<Vec<_>, ImuError>>()?;
    Ok(ScanFrame { points, ..scan.clone() })
}

/// Moves the biases a fraction `gain` toward the values that would have
/// produced `corrected` instead of `predicted` over `dt`.
pub fn smooth_biases(state: &mut NavState, predicted: &Pose, corrected: &Pose, dt: f64, gain: f64) {
    if !(dt > 0.0) || gain == 0.0 {
        return;
    }
    let phi = log_so3(&(predicted.rotation.inverse() * corrected.rotation));
    state.gyro_bias -= phi * (gain / dt);
    let dp = corrected.translation - predicted.translation;
    let accel_world = dp * (2.0 / (dt * dt));
    state.accel_bias -= corrected.rotation.inverse().apply(&accel_world) * gain;
}
