//! Synthetic planar worlds, closed-form trajectories, raycast LiDAR scans
//! and analytic inertial streams.
//!
//! A trajectory is a sequence of constant body twists `(ω, v)`, so poses,
//! velocities and specific forces are available in closed form. Every ray
//! draws its direction and noise from its own RNG stream keyed by
//! `(seed, scan, ray)`, which keeps output independent of thread count.

use crate::geometry::{exp_so3, Pose, Rotation};
use crate::imu::{ImuSample, NavState, GRAVITY};
use crate::scan::{ScanFrame, TimedPoint};
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Magnitude bounds on trajectory twists.
pub const MAX_ANGULAR_RATE: f64 = 2.0;
pub const MAX_LINEAR_RATE: f64 = 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid world dimensions: {0}")]
    InvalidDimensions(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("invalid simulation parameters: {0}")]
    InvalidParams(String),
}

/// A finite rectangle or an unbounded plane.
#[derive(Clone, Debug, PartialEq)]
pub enum Surface {
    Patch {
        center: Vector3<f64>,
        normal: Vector3<f64>,
        /// Unit in-plane axes.
        axes: [Vector3<f64>; 2],
        half_extent: [f64; 2],
    },
    Plane { point: Vector3<f64>, normal: Vector3<f64> },
}

impl Surface {
    fn patch(center: Vector3<f64>, normal: Vector3<f64>, u: Vector3<f64>, half_u: f64, half_v: f64) -> Self {
        let n = normal.normalize();
        let u = (u - n * n.dot(&u)).normalize();
        Surface::Patch { center, normal: n, axes: [u, n.cross(&u)], half_extent: [half_u, half_v] }
    }

    pub fn normal(&self) -> Vector3<f64> {
        match self {
            Surface::Patch { normal, .. } | Surface::Plane { normal, .. } => *normal,
        }
    }

    /// Signed distance of `p` from the surface's supporting plane.
    pub fn plane_distance(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Surface::Patch { center, normal, .. } => normal.dot(&(p - center)),
            Surface::Plane { point, normal } => normal.dot(&(p - point)),
        }
    }

    /// Ray parameter of the first intersection, if any.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = -self.plane_distance(origin) / denom;
        if !(t > 1e-9) {
            return None;
        }
        if let Surface::Patch { center, axes, half_extent, .. } = self {
            let hit = origin + dir * t;
            let d = hit - center;
            let slack = 1e-9;
            if axes[0].dot(&d).abs() > half_extent[0] + slack || axes[1].dot(&d).abs() > half_extent[1] + slack {
                return None;
            }
        }
        Some(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Preset {
    /// Closed box `[−x/2, x/2] × [−y/2, y/2] × [0, z]`.
    Room { size: [f64; 3] },
    /// Rectangular duct along +x from `x = 0`, centred on `y = 0`, floor at `z = 0`.
    Corridor { length: f64, width: f64, height: f64, end_caps: bool },
    /// Regular polygonal duct along +x from `x = 0`, axis on the x axis.
    Tunnel { length: f64, radius: f64, segments: usize },
    /// The unbounded plane `z = 0`.
    GroundOnly,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Room { .. } => "room",
            Preset::Corridor { .. } => "corridor",
            Preset::Tunnel { .. } => "tunnel",
            Preset::GroundOnly => "ground_only",
        }
    }

    pub fn room() -> Self {
        Preset::Room { size: [10.0, 8.0, 3.0] }
    }

    pub fn corridor() -> Self {
        Preset::Corridor { length: 50.0, width: 2.0, height: 2.5, end_caps: false }
    }

    pub fn tunnel() -> Self {
        Preset::Tunnel { length: 50.0, radius: 2.5, segments: 16 }
    }

    /// Default preset for a name accepted on the command line.
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "room" => Some(Self::room()),
            "corridor" => Some(Self::corridor()),
            "tunnel" => Some(Self::tunnel()),
            "ground_only" | "ground" => Some(Preset::GroundOnly),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub preset: Preset,
    pub surfaces: Vec<Surface>,
}

impl World {
    /// First intersection along a ray within `max_range`: `(range, surface index)`.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, max_range: f64) -> Option<(f64, usize)> {
        self.surfaces
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.intersect(origin, dir).map(|t| (t, i)))
            .filter(|(t, _)| *t <= max_range)
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Smallest distance from `p` to any supporting plane.
    pub fn distance_to_nearest_plane(&self, p: &Vector3<f64>) -> f64 {
        self.surfaces.iter().map(|s| s.plane_distance(p).abs()).fold(f64::INFINITY, f64::min)
    }
}

fn positive(name: &str, v: f64) -> Result<(), SimError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(SimError::InvalidDimensions(format!("{name} must be positive, got {v}")))
    }
}

pub fn make_world(preset: &Preset) -> Result<World, SimError> {
    let (x, y, z) = (Vector3::x(), Vector3::y(), Vector3::z());
    let surfaces = match *preset {
        Preset::Room { size: [sx, sy, sz] } => {
            positive("room x", sx)?;
            positive("room y", sy)?;
            positive("room z", sz)?;
            let c = Vector3::new(0.0, 0.0, sz / 2.0);
            vec![
                Surface::patch(c - z * (sz / 2.0), z, x, sx / 2.0, sy / 2.0),
                Surface::patch(c + z * (sz / 2.0), -z, x, sx / 2.0, sy / 2.0),
                Surface::patch(c - x * (sx / 2.0), x, y, sy / 2.0, sz / 2.0),
                Surface::patch(c + x * (sx / 2.0), -x, y, sy / 2.0, sz / 2.0),
                Surface::patch(c - y * (sy / 2.0), y, x, sx / 2.0, sz / 2.0),
                Surface::patch(c + y * (sy / 2.0), -y, x, sx / 2.0, sz / 2.0),
            ]
        }
        Preset::Corridor { length, width, height, end_caps } => {
            positive("corridor length", length)?;
            positive("corridor width", width)?;
            positive("corridor height", height)?;
            let c = Vector3::new(length / 2.0, 0.0, height / 2.0);
            let mut s = vec![
                Surface::patch(c - z * (height / 2.0), z, x, length / 2.0, width / 2.0),
                Surface::patch(c + z * (height / 2.0), -z, x, length / 2.0, width / 2.0),
                Surface::patch(c - y * (width / 2.0), y, x, length / 2.0, height / 2.0),
                Surface::patch(c + y * (width / 2.0), -y, x, length / 2.0, height / 2.0),
            ];
            if end_caps {
                s.push(Surface::patch(c - x * (length / 2.0), x, y, width / 2.0, height / 2.0));
                s.push(Surface::patch(c + x * (length / 2.0), -x, y, width / 2.0, height / 2.0));
            }
            s
        }
        Preset::Tunnel { length, radius, segments } => {
            positive("tunnel length", length)?;
            positive("tunnel radius", radius)?;
            if segments < 3 {
                return Err(SimError::InvalidDimensions(format!("tunnel needs ≥ 3 segments, got {segments}")));
            }
            let step = std::f64::consts::TAU / segments as f64;
            let apothem = radius * (step / 2.0).cos();
            let half_side = radius * (step / 2.0).sin();
            (0..segments)
                .map(|k| {
                    let a = step * k as f64;
                    let outward = Vector3::new(0.0, a.cos(), a.sin());
                    let center = Vector3::new(length / 2.0, 0.0, 0.0) + outward * apothem;
                    Surface::patch(center, -outward, x, length / 2.0, half_side)
                })
                .collect()
        }
        Preset::GroundOnly => vec![Surface::Plane { point: Vector3::zeros(), normal: z }],
    };
    Ok(World { preset: *preset, surfaces })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwistSegment {
    /// Body angular rate (rad/s).
    pub angular: [f64; 3],
    /// Body linear rate (m/s).
    pub linear: [f64; 3],
    pub duration: f64,
}

/// Piecewise-constant body twist from a start pose. The body linear rate
/// must be the same in every segment so the world velocity stays
/// continuous.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub start_position: [f64; 3],
    /// Start orientation quaternion `[x, y, z, w]`.
    pub start_orientation: [f64; 4],
    pub segments: Vec<TwistSegment>,
}

impl TrajectorySpec {
    pub fn start_pose(&self) -> Pose {
        let [x, y, z, w] = self.start_orientation;
        Pose::new(Rotation::from_xyzw(x, y, z, w), Vector3::from(self.start_position))
    }

    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidTrajectory(m));
        if self.segments.is_empty() {
            return bad("no segments".into());
        }
        let q = self.start_orientation;
        if !(q.iter().map(|v| v * v).sum::<f64>() > 1e-12) {
            return bad("zero start quaternion".into());
        }
        let v0 = self.segments[0].linear;
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.duration > 0.0 && s.duration.is_finite()) {
                return bad(format!("segment {i} has non-positive duration"));
            }
            if Vector3::from(s.angular).norm() > MAX_ANGULAR_RATE {
                return bad(format!("segment {i} angular rate exceeds {MAX_ANGULAR_RATE} rad/s"));
            }
            if Vector3::from(s.linear).norm() > MAX_LINEAR_RATE {
                return bad(format!("segment {i} linear rate exceeds {MAX_LINEAR_RATE} m/s"));
            }
            if s.linear != v0 {
                return bad(format!("segment {i} changes the body linear rate"));
            }
        }
        Ok(())
    }

    /// Constant linear rate with a triangle-wave orientation wiggle: the
    /// angular rate flips sign every `period / 2`, starting and ending with
    /// a quarter period so the mean orientation equals the start.
    pub fn wiggle(start: Pose, linear: Vector3<f64>, angular: Vector3<f64>, period: f64, duration: f64) -> Self {
        let half = period / 2.0;
        let mut segments = Vec::new();
        let mut t = 0.0;
        let mut sign = 1.0;
        let mut len = (half / 2.0).min(duration);
        while t < duration - 1e-12 {
            let d = len.min(duration - t);
            segments.push(TwistSegment { angular: (angular * sign).into(), linear: linear.into(), duration: d });
            t += d;
            sign = -sign;
            len = half;
        }
        let q = start.rotation.to_quaternion();
        TrajectorySpec {
            start_position: start.translation.into(),
            start_orientation: [q.i, q.j, q.k, q.w],
            segments,
        }
    }

    /// Trajectory used when a preset is simulated without an explicit one.
    pub fn default_for(preset: &Preset, duration: f64) -> Self {
        match *preset {
            // Near one end wall looking down the long axis so both side
            // walls, the floor and the ceiling stay inside the cone.
            Preset::Room { size: [sx, sy, sz] } => TrajectorySpec::wiggle(
                Pose::from_translation(Vector3::new(-0.35 * sx, -0.125 * sy, sz / 2.0)),
                Vector3::new(0.02, 0.1, 0.0),
                Vector3::new(0.03, 0.03, 0.15),
                4.0,
                duration,
            ),
            Preset::Corridor { height, .. } => TrajectorySpec::wiggle(
                Pose::from_translation(Vector3::new(2.0, 0.0, height / 2.0)),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.05, 0.05, 0.1),
                4.0,
                duration,
            ),
            Preset::Tunnel { .. } => TrajectorySpec::wiggle(
                Pose::from_translation(Vector3::new(2.0, 0.0, 0.0)),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.1, 0.05, 0.05),
                4.0,
                duration,
            ),
            Preset::GroundOnly => {
                // Nose tilted 60° down so the whole cone hits the ground.
                let pitch = 60f64.to_radians();
                let r = exp_so3(&Vector3::new(0.0, pitch, 0.0));
                let forward_body = r.inverse().apply(&Vector3::new(1.0, 0.0, 0.0));
                TrajectorySpec::wiggle(
                    Pose::new(r, Vector3::new(0.0, 0.0, 2.0)),
                    forward_body,
                    Vector3::new(0.0, 0.0, 0.1),
                    4.0,
                    duration,
                )
            }
        }
    }
}

/// A validated trajectory with precomputed segment start poses.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    spec: TrajectorySpec,
    starts: Vec<(f64, Pose)>,
}

/// Kinematic quantities at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kinematics {
    pub pose: Pose,
    pub world_velocity: Vector3<f64>,
    pub angular: Vector3<f64>,
    /// Body-frame specific force `ω × v − Rᵀg`.
    pub specific_force: Vector3<f64>,
}

impl Trajectory {
    pub fn new(spec: TrajectorySpec) -> Result<Self, SimError> {
        spec.validate()?;
        let mut starts = Vec::with_capacity(spec.segments.len());
        let (mut t, mut pose) = (0.0, spec.start_pose());
        for s in &spec.segments {
            starts.push((t, pose));
            pose = pose.integrate_twist(&(Vector3::from(s.angular) * s.duration), &(Vector3::from(s.linear) * s.duration));
            t += s.duration;
        }
        Ok(Trajectory { spec, starts })
    }

    pub fn spec(&self) -> &TrajectorySpec {
        &self.spec
    }

    pub fn duration(&self) -> f64 {
        self.spec.duration()
    }

    /// Segment active at `t`; segments are closed on the left.
    fn segment_at(&self, t: f64) -> usize {
        self.starts.partition_point(|(ts, _)| *ts <= t).saturating_sub(1)
    }

    fn kinematics_in(&self, k: usize, t: f64) -> Kinematics {
        let seg = &self.spec.segments[k];
        let (t0, p0) = self.starts[k];
        let (w, v) = (Vector3::from(seg.angular), Vector3::from(seg.linear));
        let tau = t - t0;
        let pose = p0.integrate_twist(&(w * tau), &(v * tau));
        let g = Vector3::from(GRAVITY);
        Kinematics {
            pose,
            world_velocity: pose.rotation.apply(&v),
            angular: w,
            specific_force: w.cross(&v) - pose.rotation.inverse().apply(&g),
        }
    }

    pub fn kinematics(&self, t: f64) -> Kinematics {
        self.kinematics_in(self.segment_at(t), t)
    }

    pub fn pose_at(&self, t: f64) -> Pose {
        self.kinematics(t).pose
    }

    /// Rate measurements at `t`. At a segment boundary the measurement is
    /// the mean of both one-sided limits, which makes trapezoidal
    /// integration across the switch exact to second order.
    fn measured_rates(&self, t: f64) -> (Vector3<f64>, Vector3<f64>) {
        let k = self.segment_at(t);
        let right = self.kinematics_in(k, t);
        if k > 0 && (t - self.starts[k].0).abs() < 1e-12 {
            let left = self.kinematics_in(k - 1, t);
            return (
                (left.angular + right.angular) * 0.5,
                (left.specific_force + right.specific_force) * 0.5,
            );
        }
        (right.angular, right.specific_force)
    }

    pub fn initial_state(&self) -> NavState {
        let k = self.kinematics(0.0);
        NavState {
            rotation: k.pose.rotation,
            position: k.pose.translation,
            velocity: k.world_velocity,
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
            t: 0.0,
        }
    }
}

/// Scan timing and ray layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanPattern {
    pub rate_hz: f64,
    pub rays: usize,
    /// Full apex angle of the cone about body +x (degrees).
    pub fov_deg: f64,
    pub max_range: f64,
}

impl Default for ScanPattern {
    fn default() -> Self {
        ScanPattern { rate_hz: 10.0, rays: 10_000, fov_deg: 70.0, max_range: 100.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImuNoise {
    pub rate_hz: f64,
    /// Per-sample gyro white noise (rad/s).
    pub gyro_std: f64,
    /// Per-sample accelerometer white noise (m/s²).
    pub accel_std: f64,
    pub gyro_bias: [f64; 3],
    pub accel_bias: [f64; 3],
}

impl Default for ImuNoise {
    fn default() -> Self {
        ImuNoise { rate_hz: 1000.0, gyro_std: 1e-3, accel_std: 1e-2, gyro_bias: [0.0; 3], accel_bias: [0.0; 3] }
    }
}

impl ImuNoise {
    pub fn noiseless() -> Self {
        ImuNoise { gyro_std: 0.0, accel_std: 0.0, ..Self::default() }
    }
}

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub preset: Preset,
    pub duration: f64,
    pub seed: u64,
    /// Gaussian range noise σ (m).
    pub range_noise: f64,
    #[serde(default)]
    pub scan: ScanPattern,
    #[serde(default)]
    pub imu: ImuNoise,
    /// Explicit trajectory; the preset default when absent.
    #[serde(default)]
    pub trajectory: Option<TrajectorySpec>,
}

impl SimConfig {
    pub fn new(preset: Preset, duration: f64, seed: u64) -> Self {
        SimConfig {
            preset,
            duration,
            seed,
            range_noise: 0.02,
            scan: ScanPattern::default(),
            imu: ImuNoise::default(),
            trajectory: None,
        }
    }

    pub fn noiseless(mut self) -> Self {
        self.range_noise = 0.0;
        self.imu = ImuNoise { rate_hz: self.imu.rate_hz, ..ImuNoise::noiseless() };
        self
    }

    pub fn trajectory_spec(&self) -> TrajectorySpec {
        self.trajectory.clone().unwrap_or_else(|| TrajectorySpec::default_for(&self.preset, self.duration))
    }

    pub fn frame_count(&self) -> usize {
        (self.duration * self.scan.rate_hz + 1e-9).floor() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidParams(m.to_string()));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be positive");
        }
        if !(self.range_noise >= 0.0) {
            return bad("range noise must be non-negative");
        }
        if !(self.scan.rate_hz > 0.0) || self.scan.rays == 0 {
            return bad("scan rate and ray count must be positive");
        }
        if !(self.scan.fov_deg > 0.0 && self.scan.fov_deg < 180.0) {
            return bad("field of view must be in (0, 180) degrees");
        }
        if !(self.scan.max_range > 0.0) {
            return bad("max range must be positive");
        }
        if !(self.imu.rate_hz > 0.0) || !(self.imu.gyro_std >= 0.0) || !(self.imu.accel_std >= 0.0) {
            return bad("inertial rate must be positive and noise non-negative");
        }
        if self.trajectory_spec().duration() + 1e-9 < self.duration {
            return bad("trajectory shorter than the requested duration");
        }
        Ok(())
    }
}

/// Seed of the independent stream for `(seed, a, b)`.
pub fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ a) ^ b.rotate_left(32))
}

/// Stream index reserved for inertial noise.
const IMU_STREAM: u64 = u64::MAX;

/// One simulated sweep: points in the sensor frame at their own capture
/// time, and the same returns expressed in the scan-end frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedScan {
    pub distorted: ScanFrame,
    pub undistorted: ScanFrame,
}

/// Unit direction in the sensing cone, uniform in solid angle.
fn cone_direction(rng: &mut ChaCha8Rng, half_angle: f64) -> Vector3<f64> {
    let cos_min = half_angle.cos();
    let c: f64 = 1.0 - rng.random::<f64>() * (1.0 - cos_min);
    let s = (1.0 - c * c).max(0.0).sqrt();
    let phi = rng.random::<f64>() * std::f64::consts::TAU;
    Vector3::new(c, s * phi.cos(), s * phi.sin())
}

/// Raycasts scan `index` covering `[start, end]`; ray `i` fires at
/// `start + i·(end − start)/rays`.
pub fn raycast_scan(
    world: &World,
    pose_at: &(dyn Fn(f64) -> Pose + Sync),
    pattern: &ScanPattern,
    noise_std: f64,
    seed: u64,
    index: usize,
    start: f64,
    end: f64,
) -> SimulatedScan {
    let half_angle = pattern.fov_deg.to_radians() / 2.0;
    let end_inv = pose_at(end).inverse();
    let hits: Vec<Option<(TimedPoint, TimedPoint)>> = (0..pattern.rays)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, index as u64, i as u64));
            let dir_body = cone_direction(&mut rng, half_angle);
            let noise: f64 = StandardNormal.sample(&mut rng);
            let t = start + (end - start) * i as f64 / pattern.rays as f64;
            let pose = pose_at(t);
            let dir = pose.rotation.apply(&dir_body);
            let (range, _) = world.raycast(&pose.translation, &dir, pattern.max_range)?;
            let measured = range + noise_std * noise;
            let world_point = pose.translation + dir * measured;
            Some((
                TimedPoint { t, p: dir_body * measured },
                TimedPoint { t: end, p: end_inv.apply(&world_point) },
            ))
        })
        .collect();
    let (distorted, undistorted): (Vec<_>, Vec<_>) = hits.into_iter().flatten().unzip();
    let ground_truth = Some(pose_at(end));
    SimulatedScan {
        distorted: ScanFrame { start, end, points: distorted, ground_truth },
        undistorted: ScanFrame { start, end, points: undistorted, ground_truth },
    }
}

/// Analytic inertial samples at `k / rate` for `t ∈ [0, duration]`.
pub fn synthesize_imu(traj: &Trajectory, noise: &ImuNoise, duration: f64, seed: u64) -> Vec<ImuSample> {
    let n = (duration * noise.rate_hz + 1e-9).floor() as usize;
    let (bg, ba) = (Vector3::from(noise.gyro_bias), Vector3::from(noise.accel_bias));
    (0..=n)
        .map(|k| {
            let t = k as f64 / noise.rate_hz;
            let (gyro, accel) = traj.measured_rates(t);
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, IMU_STREAM, k as u64));
            let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
            let ng = Vector3::new(gauss(), gauss(), gauss()) * noise.gyro_std;
            let na = Vector3::new(gauss(), gauss(), gauss()) * noise.accel_std;
            ImuSample { t, gyro: gyro + bg + ng, accel: accel + ba + na }
        })
        .collect()
}

/// A generated sequence held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Simulation {
    pub config: SimConfig,
    pub world: World,
    pub trajectory: Trajectory,
    pub scans: Vec<SimulatedScan>,
    pub imu: Vec<ImuSample>,
}

impl Simulation {
    pub fn initial_state(&self) -> NavState {
        self.trajectory.initial_state()
    }

    pub fn frames(&self) -> Vec<ScanFrame> {
        self.scans.iter().map(|s| s.distorted.clone()).collect()
    }
}

pub fn simulate(config: &SimConfig) -> Result<Simulation, SimError> {
    config.validate()?;
    let world = make_world(&config.preset)?;
    let trajectory = Trajectory::new(config.trajectory_spec())?;
    let period = 1.0 / config.scan.rate_hz;
    let pose_at = |t: f64| trajectory.pose_at(t);
    let scans = (0..config.frame_count())
        .map(|k| {
            let start = k as f64 * period;
            let end = (k + 1) as f64 * period;
            raycast_scan(&world, &pose_at, &config.scan, config.range_noise, config.seed, k, start, end)
        })
        .collect();
    let imu = synthesize_imu(&trajectory, &config.imu, config.duration, config.seed);
    Ok(Simulation { config: config.clone(), world, trajectory, scans, imu })
}

/// Quaternion `[x, y, z, w]` of a rotation.
pub fn quaternion_xyzw(r: &Rotation) -> [f64; 4] {
    let q: UnitQuaternion<f64> = r.to_quaternion();
    [q.i, q.j, q.k, q.w]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imu::{propagate, ImuConfig};

    #[test]
    fn room_has_six_inward_patches() {
        let w = make_world(&Preset::room()).unwrap();
        assert_eq!(w.surfaces.len(), 6);
        let centre = Vector3::new(0.0, 0.0, 1.5);
        for s in &w.surfaces {
            assert!(s.plane_distance(&centre) > 0.0);
            assert!((s.normal().norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn corridor_without_caps() {
        let w = make_world(&Preset::corridor()).unwrap();
        assert_eq!(w.surfaces.len(), 4);
        assert!(w.surfaces.iter().all(|s| s.normal().x.abs() < 1e-12));
        let capped = make_world(&Preset::Corridor { length: 50.0, width: 2.0, height: 2.5, end_caps: true }).unwrap();
        assert_eq!(capped.surfaces.len(), 6);
    }

    #[test]
    fn ground_only_and_invalid() {
        let w = make_world(&Preset::GroundOnly).unwrap();
        assert_eq!(w.surfaces, vec![Surface::Plane { point: Vector3::zeros(), normal: Vector3::z() }]);
        assert!(matches!(make_world(&Preset::Room { size: [0.0, 1.0, 1.0] }), Err(SimError::InvalidDimensions(_))));
        assert!(make_world(&Preset::Tunnel { length: 5.0, radius: 1.0, segments: 2 }).is_err());
    }

    #[test]
    fn ray_straight_down() {
        let w = make_world(&Preset::GroundOnly).unwrap();
        let dir = -Vector3::z();
        let (range, _) = w.raycast(&Vector3::new(0.0, 0.0, 1.0), &dir, 100.0).unwrap();
        assert_eq!(range, 1.0);
        assert_eq!(dir * range, Vector3::new(0.0, 0.0, -1.0));
        // the body-frame point of a sensor looking down its +x axis
        let pose = Pose::new(exp_so3(&Vector3::new(0.0, std::f64::consts::FRAC_PI_2, 0.0)), Vector3::z());
        let p = pose.inverse().apply(&Vector3::zeros());
        assert!((p - Vector3::new(1.0, 0.0, 0.0)).amax() < 1e-12);
        assert!(w.raycast(&Vector3::z(), &Vector3::z(), 100.0).is_none());
    }

    #[test]
    fn stream_seeds_differ() {
        assert_ne!(stream_seed(1, 0, 0), stream_seed(1, 0, 1));
        assert_ne!(stream_seed(1, 0, 1), stream_seed(1, 1, 0));
        assert_ne!(stream_seed(1, 2, 3), stream_seed(2, 2, 3));
    }

    #[test]
    fn stationary_scan_is_undistorted() {
        let world = make_world(&Preset::room()).unwrap();
        let pose = Pose::from_translation(Vector3::new(-3.0, 0.0, 1.5));
        let pattern = ScanPattern { rays: 500, ..ScanPattern::default() };
        let s = raycast_scan(&world, &|_| pose, &pattern, 0.0, 3, 0, 0.0, 0.1);
        assert_eq!(s.distorted.len(), 500);
        for (a, b) in s.distorted.points.iter().zip(&s.undistorted.points) {
            assert!((a.p - b.p).amax() < 1e-12);
            assert!(world.distance_to_nearest_plane(&pose.apply(&a.p)) < 1e-9);
        }
    }

    #[test]
    fn twist_segments_must_keep_linear_rate() {
        let mut spec = TrajectorySpec::wiggle(Pose::identity(), Vector3::x(), Vector3::z() * 0.1, 2.0, 3.0);
        assert!(spec.validate().is_ok());
        spec.segments[1].linear = [0.5, 0.0, 0.0];
        assert!(matches!(spec.validate(), Err(SimError::InvalidTrajectory(_))));
        let fast = TrajectorySpec::wiggle(Pose::identity(), Vector3::x() * 4.0, Vector3::zeros(), 2.0, 1.0);
        assert!(fast.validate().is_err());
    }

    #[test]
    fn wiggle_covers_duration() {
        let spec = TrajectorySpec::wiggle(Pose::identity(), Vector3::x(), Vector3::z() * 0.1, 4.0, 20.0);
        assert!((spec.duration() - 20.0).abs() < 1e-12);
        assert_eq!(spec.segments[0].duration, 1.0);
        assert_eq!(spec.segments[1].duration, 2.0);
    }

    #[test]
    fn static_imu_reads_gravity_reaction() {
        let spec = TrajectorySpec {
            start_position: [0.0; 3],
            start_orientation: [0.0, 0.0, 0.0, 1.0],
            segments: vec![TwistSegment { angular: [0.0; 3], linear: [0.0; 3], duration: 1.0 }],
        };
        let traj = Trajectory::new(spec).unwrap();
        for s in synthesize_imu(&traj, &ImuNoise::noiseless(), 1.0, 0) {
            assert_eq!(s.gyro, Vector3::zeros());
            assert!((s.accel - Vector3::new(0.0, 0.0, 9.81)).amax() < 1e-15);
        }
        let turn = TrajectorySpec {
            segments: vec![TwistSegment { angular: [0.0, 0.0, 0.5], linear: [0.0; 3], duration: 1.0 }],
            ..traj.spec().clone()
        };
        let traj = Trajectory::new(turn).unwrap();
        assert!(synthesize_imu(&traj, &ImuNoise::noiseless(), 1.0, 0).iter().all(|s| s.gyro == Vector3::new(0.0, 0.0, 0.5)));
    }

    #[test]
    fn imu_round_trip_over_ten_seconds() {
        let start = Pose::new(exp_so3(&Vector3::new(0.1, -0.2, 0.3)), Vector3::new(1.0, 2.0, 3.0));
        let spec = TrajectorySpec::wiggle(start, Vector3::new(1.0, 0.2, -0.1), Vector3::new(0.2, -0.1, 0.4), 2.0, 10.0);
        let traj = Trajectory::new(spec).unwrap();
        let imu = synthesize_imu(&traj, &ImuNoise::noiseless(), 10.0, 0);
        let out = propagate(&traj.initial_state(), &imu, 10.0, &ImuConfig::default()).unwrap();
        let truth = traj.kinematics(10.0);
        assert!((out.state.position - truth.pose.translation).norm() < 1e-4);
        assert!(out.state.rotation.angle_to(&truth.pose.rotation) < 1e-4);
    }
}
