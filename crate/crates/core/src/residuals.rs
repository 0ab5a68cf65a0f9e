//! Registration residuals and their Jacobians w.r.t. the pose perturbation
//! `[δθ; δt]` (see [`crate::geometry`] for the convention).
//!
//! Three measurement classes are built per matched scan point:
//!
//! * point-to-plane: `d₂ᵀ(R·q + t − Q)`
//! * GICP: `L⁻¹(R·q + t − Q)` with `LLᵀ = C_voxel + R·C_point·Rᵀ + λ·I`
//! * normal-angle: `e_θ = 1 − u·d₂`, `u = d₁/‖d₁‖`, `d₁ = R(q − qᴸ)`
//!
//! where `q` is the scan point in the LiDAR frame, `Q` the voxel centroid,
//! `d₂` the voxel plane normal and `qᴸ = T⁻¹·Q` evaluated when the
//! correspondence is formed. The angle term only depends on rotation; its
//! translation block is identically zero.

use crate::geometry::{skew, Pose};
use crate::voxel_map::{Voxel, VoxelKey, VoxelMap};
use nalgebra::{Matrix3, Matrix3x6, Matrix6, RowVector3, RowVector6, Vector3, Vector6};
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResidualError {
    #[error("combined GICP covariance is not positive definite")]
    NonSpdCovariance,
    #[error("angle direction too short: ‖d₁‖ = {norm:e}")]
    DegenerateDirection { norm: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ResidualKind {
    PointToPlane,
    Gicp,
    Angle,
    Prior,
}

impl ResidualKind {
    pub const MEASUREMENTS: [ResidualKind; 3] =
        [ResidualKind::PointToPlane, ResidualKind::Gicp, ResidualKind::Angle];

    pub fn name(&self) -> &'static str {
        match self {
            ResidualKind::PointToPlane => "point_to_plane",
            ResidualKind::Gicp => "gicp",
            ResidualKind::Angle => "angle",
            ResidualKind::Prior => "prior",
        }
    }
}

/// Value and Jacobian of one residual block.
#[derive(Clone, Debug, PartialEq)]
pub enum Linearization {
    Scalar { value: f64, jacobian: RowVector6<f64> },
    Vector3 { value: Vector3<f64>, jacobian: Matrix3x6<f64> },
    Vector6(Box<(Vector6<f64>, Matrix6<f64>)>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualTerm {
    pub kind: ResidualKind,
    pub linearization: Linearization,
    /// Multiplies the squared residual in the cost; includes any robust
    /// reweighting.
    pub weight: f64,
    pub point_index: usize,
    pub voxel_key: Option<VoxelKey>,
}

impl ResidualTerm {
    pub fn dim(&self) -> usize {
        match &self.linearization {
            Linearization::Scalar { .. } => 1,
            Linearization::Vector3 { .. } => 3,
            Linearization::Vector6(_) => 6,
        }
    }

    pub fn value_norm(&self) -> f64 {
        match &self.linearization {
            Linearization::Scalar { value, .. } => value.abs(),
            Linearization::Vector3 { value, .. } => value.norm(),
            Linearization::Vector6(b) => b.0.norm(),
        }
    }

    /// `weight · ‖r‖²`.
    pub fn cost(&self) -> f64 {
        self.weight * self.value_norm().powi(2)
    }

    pub fn value_rows(&self) -> Vec<f64> {
        match &self.linearization {
            Linearization::Scalar { value, .. } => vec![*value],
            Linearization::Vector3 { value, .. } => value.iter().copied().collect(),
            Linearization::Vector6(b) => b.0.iter().copied().collect(),
        }
    }

    pub fn jacobian_rows(&self) -> Vec<[f64; 6]> {
        let row = |r: nalgebra::RowVector6<f64>| -> [f64; 6] { [r[0], r[1], r[2], r[3], r[4], r[5]] };
        match &self.linearization {
            Linearization::Scalar { jacobian, .. } => vec![row(*jacobian)],
            Linearization::Vector3 { jacobian, .. } => {
                (0..3).map(|i| row(jacobian.row(i).into_owned())).collect()
            }
            Linearization::Vector6(b) => (0..6).map(|i| row(b.1.row(i).into_owned())).collect(),
        }
    }

    /// Adds `w·JᵀJ` to `hessian` and `w·Jᵀr` to `gradient`.
    pub fn accumulate(&self, hessian: &mut Matrix6<f64>, gradient: &mut Vector6<f64>) {
        let w = self.weight;
        match &self.linearization {
            Linearization::Scalar { value, jacobian } => {
                let jt = jacobian.transpose();
                *hessian += jt * jacobian * w;
                *gradient += jt * (value * w);
            }
            Linearization::Vector3 { value, jacobian } => {
                let jt = jacobian.transpose();
                *hessian += jt * jacobian * w;
                *gradient += jt * value * w;
            }
            Linearization::Vector6(b) => {
                let jt = b.1.transpose();
                *hessian += jt * b.1 * w;
                *gradient += jt * b.0 * w;
            }
        }
    }
}

/// A scan point associated with a map voxel, frozen at the pose where the
/// association was made.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub point_index: usize,
    /// `q_iᴸ`, the point in the LiDAR frame.
    pub scan_point: Vector3<f64>,
    pub voxel_key: VoxelKey,
    /// `Q`, the voxel centroid in the world frame.
    pub map_point: Vector3<f64>,
    /// `d₂`, the voxel plane normal.
    pub normal: Vector3<f64>,
    pub voxel_covariance: Matrix3<f64>,
    pub planarity: f64,
    /// `qᴸ = T⁻¹·Q` at association time.
    pub map_point_local: Vector3<f64>,
}

impl Correspondence {
    pub fn new(point_index: usize, scan_point: Vector3<f64>, voxel: &Voxel, pose: &Pose) -> Self {
        Correspondence {
            point_index,
            scan_point,
            voxel_key: voxel.key,
            map_point: voxel.centroid,
            normal: voxel.normal,
            voxel_covariance: voxel.covariance,
            planarity: voxel.planarity,
            map_point_local: pose.inverse().apply(&voxel.centroid),
        }
    }

    /// Rebases `qᴸ` on a different pose.
    pub fn relinked(mut self, pose: &Pose) -> Self {
        self.map_point_local = pose.inverse().apply(&self.map_point);
        self
    }
}

#[inline]
fn point_to_plane_value(corr: &Correspondence, pose: &Pose) -> f64 {
    corr.normal.dot(&(pose.apply(&corr.scan_point) - corr.map_point))
}

pub fn point_to_plane(corr: &Correspondence, pose: &Pose) -> ResidualTerm {
    let r = pose.rotation.matrix();
    let d2t: RowVector3<f64> = corr.normal.transpose();
    let rot = -(d2t * r * skew(&corr.scan_point));
    let mut jacobian = RowVector6::zeros();
    jacobian.fixed_columns_mut::<3>(0).copy_from(&rot);
    jacobian.fixed_columns_mut::<3>(3).copy_from(&d2t);
    ResidualTerm {
        kind: ResidualKind::PointToPlane,
        linearization: Linearization::Scalar { value: point_to_plane_value(corr, pose), jacobian },
        weight: 1.0,
        point_index: corr.point_index,
        voxel_key: Some(corr.voxel_key),
    }
}

/// `L⁻¹` for the combined covariance at `pose`.
pub fn gicp_whitener(
    corr: &Correspondence,
    pose: &Pose,
    point_cov: &Matrix3<f64>,
    regularization: f64,
) -> Result<Matrix3<f64>, ResidualError> {
    let r = pose.rotation.matrix();
    let combined = corr.voxel_covariance + r * point_cov * r.transpose()
        + Matrix3::identity() * regularization;
    let chol = combined.cholesky().ok_or(ResidualError::NonSpdCovariance)?;
    chol.l()
        .solve_lower_triangular(&Matrix3::identity())
        .ok_or(ResidualError::NonSpdCovariance)
}

fn gicp_with_whitener(corr: &Correspondence, pose: &Pose, whitener: &Matrix3<f64>) -> ResidualTerm {
    let r = pose.rotation.matrix();
    let value = whitener * (pose.apply(&corr.scan_point) - corr.map_point);
    let mut raw = Matrix3x6::zeros();
    raw.fixed_columns_mut::<3>(0).copy_from(&(-(r * skew(&corr.scan_point))));
    raw.fixed_columns_mut::<3>(3).copy_from(&Matrix3::identity());
    ResidualTerm {
        kind: ResidualKind::Gicp,
        linearization: Linearization::Vector3 { value, jacobian: whitener * raw },
        weight: 1.0,
        point_index: corr.point_index,
        voxel_key: Some(corr.voxel_key),
    }
}

/// Distribution-to-distribution residual. The whitener is treated as
/// constant when differentiating.
pub fn gicp(
    corr: &Correspondence,
    pose: &Pose,
    point_cov: &Matrix3<f64>,
    regularization: f64,
) -> Result<ResidualTerm, ResidualError> {
    let w = gicp_whitener(corr, pose, point_cov, regularization)?;
    Ok(gicp_with_whitener(corr, pose, &w))
}

struct AngleGeometry {
    delta_q: Vector3<f64>,
    d1: Vector3<f64>,
    norm: f64,
    u: Vector3<f64>,
}

fn angle_geometry(corr: &Correspondence, pose: &Pose, min_norm: f64) -> Result<AngleGeometry, ResidualError> {
    let delta_q = corr.scan_point - corr.map_point_local;
    let d1 = pose.rotation.apply(&delta_q);
    let norm = d1.norm();
    if !(norm >= min_norm) {
        return Err(ResidualError::DegenerateDirection { norm });
    }
    Ok(AngleGeometry { delta_q, d1, norm, u: d1 / norm })
}

/// `e_θ = 1 − (d₁/‖d₁‖)·d₂`, in `[0, 2]`.
pub fn angle_residual(corr: &Correspondence, pose: &Pose, min_norm: f64) -> Result<f64, ResidualError> {
    let g = angle_geometry(corr, pose, min_norm)?;
    Ok(1.0 - g.u.dot(&corr.normal))
}

/// `∂e_θ/∂δθ = −d₂ᵀ(I − uuᵀ)(1/‖d₁‖)(−R[Δq]ₓ)`; the translation block is zero.
pub fn angle_jacobian(
    corr: &Correspondence,
    pose: &Pose,
    min_norm: f64,
) -> Result<RowVector6<f64>, ResidualError> {
    let delta_q = corr.scan_point - corr.map_point_local;
    if delta_q == Vector3::zeros() && min_norm <= 0.0 {
        return Ok(RowVector6::zeros());
    }
    let g = angle_geometry(corr, pose, min_norm)?;
    Ok(angle_jacobian_from(&g, corr, pose))
}

fn angle_jacobian_from(g: &AngleGeometry, corr: &Correspondence, pose: &Pose) -> RowVector6<f64> {
    let projector = Matrix3::identity() - g.u * g.u.transpose();
    let du_dd1 = projector / g.norm;
    let dd1_dtheta = -(pose.rotation.matrix() * skew(&g.delta_q));
    let rot = -(corr.normal.transpose() * du_dd1 * dd1_dtheta);
    let mut jacobian = RowVector6::zeros();
    jacobian.fixed_columns_mut::<3>(0).copy_from(&rot);
    debug_assert!(g.d1.iter().all(|x| x.is_finite()));
    jacobian
}

pub fn angle_term(corr: &Correspondence, pose: &Pose, min_norm: f64) -> Result<ResidualTerm, ResidualError> {
    let g = angle_geometry(corr, pose, min_norm)?;
    let jacobian = angle_jacobian_from(&g, corr, pose);
    Ok(ResidualTerm {
        kind: ResidualKind::Angle,
        linearization: Linearization::Scalar { value: 1.0 - g.u.dot(&corr.normal), jacobian },
        weight: 1.0,
        point_index: corr.point_index,
        voxel_key: Some(corr.voxel_key),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualClass {
    pub enabled: bool,
    pub weight: f64,
}

impl ResidualClass {
    fn on(weight: f64) -> Self {
        ResidualClass { enabled: true, weight }
    }
}

impl Default for ResidualClass {
    fn default() -> Self {
        ResidualClass::on(1.0)
    }
}

/// Huber reweighting; `delta_metric` applies to point-to-plane distances and
/// whitened GICP norms, `delta_angle` to `e_θ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct RobustLoss {
    pub enabled: bool,
    pub delta_metric: f64,
    pub delta_angle: f64,
}

impl Default for RobustLoss {
    fn default() -> Self {
        RobustLoss { enabled: false, delta_metric: 0.1, delta_angle: 0.1 }
    }
}

impl RobustLoss {
    fn factor(&self, kind: ResidualKind, norm: f64) -> f64 {
        if !self.enabled {
            return 1.0;
        }
        let delta = match kind {
            ResidualKind::Angle => self.delta_angle,
            _ => self.delta_metric,
        };
        if norm <= delta {
            1.0
        } else {
            delta / norm
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualConfig {
    pub point_to_plane: ResidualClass,
    pub gicp: ResidualClass,
    pub angle: ResidualClass,
    /// Voxels below this planarity give no metric residuals.
    pub min_planarity: f64,
    /// Angle residuals are only formed on voxels at least this planar.
    pub angle_min_planarity: f64,
    /// Correspondences farther than `plane_distance_sigmas` standard
    /// deviations of the voxel's normal spread from its plane are dropped.
    pub plane_distance_sigmas: f64,
    /// Lower bound on that gate (m).
    pub min_plane_distance: f64,
    /// Upper bound on that gate (m).
    pub max_plane_distance: f64,
    /// ε_d: minimum ‖d₁‖ for an angle residual (m).
    pub min_direction_norm: f64,
    /// λ added to the combined GICP covariance (m²).
    pub gicp_regularization: f64,
    /// Isotropic scan-point covariance used by GICP (m²).
    pub gicp_point_variance: f64,
    pub robust: RobustLoss,
}

impl ResidualConfig {
    /// Association gate on the point-to-plane distance for `voxel` (m).
    pub fn plane_gate(&self, voxel: &Voxel) -> f64 {
        let spread = voxel.normal.dot(&(voxel.covariance * voxel.normal)).max(0.0).sqrt();
        (self.plane_distance_sigmas * spread).clamp(self.min_plane_distance, self.max_plane_distance)
    }
}

impl Default for ResidualConfig {
    fn default() -> Self {
        ResidualConfig {
            point_to_plane: ResidualClass::on(1.0),
            gicp: ResidualClass { enabled: false, weight: 1.0 },
            angle: ResidualClass::on(1e-4),
            min_planarity: 20.0,
            angle_min_planarity: 9.0,
            plane_distance_sigmas: 3.0,
            min_plane_distance: 0.02,
            max_plane_distance: 0.2,
            min_direction_norm: 1e-4,
            gicp_regularization: 1e-3,
            gicp_point_variance: 1e-4,
            robust: RobustLoss::default(),
        }
    }
}

/// A scan point's frozen association plus everything needed to re-evaluate
/// its residuals at other poses during a line search.
#[derive(Clone, Debug)]
pub struct Match {
    pub corr: Correspondence,
    whitener: Option<Matrix3<f64>>,
    p2p_weight: Option<f64>,
    gicp_weight: Option<f64>,
    angle_weight: Option<f64>,
}

/// Per-class summary of the residuals of one linearization.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassStats {
    pub count: usize,
    pub mean_abs: f64,
    pub max_abs: f64,
    pub skipped: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MatchStats {
    pub points: usize,
    pub matched: usize,
    pub unmatched: usize,
    /// Matched voxel too far from the point or not planar enough.
    pub rejected: usize,
    pub gicp_failures: usize,
    pub angle_degenerate: usize,
    pub angle_non_planar: usize,
}

impl MatchStats {
    pub fn matched_fraction(&self) -> f64 {
        if self.points == 0 {
            0.0
        } else {
            self.matched as f64 / self.points as f64
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ResidualSet {
    pub matches: Vec<Match>,
    /// Terms sorted by point index, then kind.
    pub terms: Vec<ResidualTerm>,
    pub stats: MatchStats,
}

impl ResidualSet {
    pub fn cost(&self) -> f64 {
        self.terms.iter().map(ResidualTerm::cost).sum()
    }

    pub fn class_stats(&self, kind: ResidualKind) -> ClassStats {
        let mut out = ClassStats::default();
        let mut sum = 0.0;
        for t in self.terms.iter().filter(|t| t.kind == kind) {
            let v = t.value_norm();
            out.count += 1;
            sum += v;
            out.max_abs = out.max_abs.max(v);
        }
        if out.count > 0 {
            out.mean_abs = sum / out.count as f64;
        }
        out.skipped = match kind {
            ResidualKind::PointToPlane => self.stats.rejected,
            ResidualKind::Gicp => self.stats.rejected + self.stats.gicp_failures,
            ResidualKind::Angle => self.stats.angle_degenerate + self.stats.angle_non_planar,
            ResidualKind::Prior => 0,
        };
        out
    }
}

enum PointOutcome {
    Unmatched,
    Rejected,
    Matched { m: Match, terms: Vec<ResidualTerm>, gicp_failed: bool, angle_degenerate: bool, angle_non_planar: bool },
}

fn associate(
    index: usize,
    q: &Vector3<f64>,
    map: &VoxelMap,
    pose: &Pose,
    config: &ResidualConfig,
    point_cov: &Matrix3<f64>,
) -> PointOutcome {
    let world = pose.apply(q);
    let Some(voxel) = map.query(&world) else {
        return PointOutcome::Unmatched;
    };
    if voxel.planarity < config.min_planarity
        || voxel.normal.dot(&(world - voxel.centroid)).abs() > config.plane_gate(voxel)
    {
        return PointOutcome::Rejected;
    }
    let corr = Correspondence::new(index, *q, voxel, pose);
    let mut m = Match { corr, whitener: None, p2p_weight: None, gicp_weight: None, angle_weight: None };
    let mut terms = Vec::with_capacity(3);
    let (mut gicp_failed, mut angle_degenerate, mut angle_non_planar) = (false, false, false);

    if config.point_to_plane.enabled {
        let mut t = point_to_plane(&corr, pose);
        t.weight = config.point_to_plane.weight * config.robust.factor(t.kind, t.value_norm());
        m.p2p_weight = Some(t.weight);
        terms.push(t);
    }
    if config.gicp.enabled {
        match gicp_whitener(&corr, pose, point_cov, config.gicp_regularization) {
            Ok(w) => {
                let mut t = gicp_with_whitener(&corr, pose, &w);
                t.weight = config.gicp.weight * config.robust.factor(t.kind, t.value_norm());
                m.whitener = Some(w);
                m.gicp_weight = Some(t.weight);
                terms.push(t);
            }
            Err(_) => gicp_failed = true,
        }
    }
    if config.angle.enabled {
        if corr.planarity < config.angle_min_planarity {
            angle_non_planar = true;
        } else {
            match angle_term(&corr, pose, config.min_direction_norm) {
                Ok(mut t) => {
                    t.weight = config.angle.weight * config.robust.factor(t.kind, t.value_norm());
                    m.angle_weight = Some(t.weight);
                    terms.push(t);
                }
                Err(_) => angle_degenerate = true,
            }
        }
    }
    PointOutcome::Matched { m, terms, gicp_failed, angle_degenerate, angle_non_planar }
}

/// Associates every scan point with the map at `pose` and linearizes the
/// enabled residual classes. Output order follows the point index.
pub fn build_residuals(
    points: &[Vector3<f64>],
    map: &VoxelMap,
    pose: &Pose,
    config: &ResidualConfig,
) -> ResidualSet {
    let point_cov = Matrix3::identity() * config.gicp_point_variance;
    let outcomes: Vec<PointOutcome> = points
        .par_iter()
        .enumerate()
        .map(|(i, q)| associate(i, q, map, pose, config, &point_cov))
        .collect();

    let mut set = ResidualSet::default();
    set.stats.points = points.len();
    for outcome in outcomes {
        match outcome {
            PointOutcome::Unmatched => set.stats.unmatched += 1,
            PointOutcome::Rejected => set.stats.rejected += 1,
            PointOutcome::Matched { m, terms, gicp_failed, angle_degenerate, angle_non_planar } => {
                set.stats.matched += 1;
                set.stats.gicp_failures += gicp_failed as usize;
                set.stats.angle_degenerate += angle_degenerate as usize;
                set.stats.angle_non_planar += angle_non_planar as usize;
                set.matches.push(m);
                set.terms.extend(terms);
            }
        }
    }
    set
}

/// Relinearizes frozen matches at `pose`, reusing their association,
/// whiteners and robust weights.
pub fn relinearize(matches: &[Match], pose: &Pose, min_direction_norm: f64) -> Vec<ResidualTerm> {
    let per_point: Vec<Vec<ResidualTerm>> = matches
        .par_iter()
        .map(|m| {
            let mut out = Vec::with_capacity(3);
            if let Some(w) = m.p2p_weight {
                let mut t = point_to_plane(&m.corr, pose);
                t.weight = w;
                out.push(t);
            }
            if let (Some(w), Some(l)) = (m.gicp_weight, m.whitener.as_ref()) {
                let mut t = gicp_with_whitener(&m.corr, pose, l);
                t.weight = w;
                out.push(t);
            }
            if let Some(w) = m.angle_weight {
                if let Ok(mut t) = angle_term(&m.corr, pose, min_direction_norm) {
                    t.weight = w;
                    out.push(t);
                }
            }
            out
        })
        .collect();
    per_point.into_iter().flatten().collect()
}

/// Cost of frozen matches at `pose` (no Jacobians).
pub fn matches_cost(matches: &[Match], pose: &Pose, min_direction_norm: f64) -> f64 {
    let per_point: Vec<f64> = matches
        .par_iter()
        .map(|m| {
            let mut c = 0.0;
            if let Some(w) = m.p2p_weight {
                c += w * point_to_plane_value(&m.corr, pose).powi(2);
            }
            if let (Some(w), Some(l)) = (m.gicp_weight, m.whitener.as_ref()) {
                c += w * (l * (pose.apply(&m.corr.scan_point) - m.corr.map_point)).norm_squared();
            }
            if let Some(w) = m.angle_weight {
                // A direction that collapses mid-search keeps its worst-case value.
                let e = angle_residual(&m.corr, pose, min_direction_norm).unwrap_or(2.0);
                c += w * e * e;
            }
            c
        })
        .collect();
    per_point.iter().sum()
}

/// Writes the per-class diagnostics rows `frame,kind,count,mean_abs,max_abs,skipped`.
pub fn write_diagnostics_row<W: Write>(w: W, frame: usize, set: &ResidualSet) -> io::Result<()> {
    write_class_stats(w, frame, &ResidualKind::MEASUREMENTS.map(|k| set.class_stats(k)))
}

/// Same rows from statistics already split by class, in
/// [`ResidualKind::MEASUREMENTS`] order.
pub fn write_class_stats<W: Write>(mut w: W, frame: usize, stats: &[ClassStats; 3]) -> io::Result<()> {
    for (kind, s) in ResidualKind::MEASUREMENTS.iter().zip(stats) {
        writeln!(w, "{frame},{},{},{},{},{}", kind.name(), s.count, s.mean_abs, s.max_abs, s.skipped)?;
    }
    Ok(())
}

pub const DIAGNOSTICS_HEADER: &str = "frame,kind,count,mean_abs,max_abs,skipped";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3;
    use crate::voxel_map::{fit_plane, VoxelMapConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corr_at(scan_point: Vector3<f64>, map_point: Vector3<f64>, normal: Vector3<f64>, pose: &Pose) -> Correspondence {
        Correspondence {
            point_index: 0,
            scan_point,
            voxel_key: VoxelKey([0, 0, 0]),
            map_point,
            normal: normal.normalize(),
            voxel_covariance: Matrix3::identity(),
            planarity: 100.0,
            map_point_local: pose.inverse().apply(&map_point),
        }
    }

    fn scalar(t: &ResidualTerm) -> (f64, RowVector6<f64>) {
        match &t.linearization {
            Linearization::Scalar { value, jacobian } => (*value, *jacobian),
            _ => panic!("not scalar"),
        }
    }

    #[test]
    fn point_to_plane_values() {
        let pose = Pose::identity();
        let c = corr_at(Vector3::new(0.3, -0.2, 1.0), Vector3::new(0.0, 0.0, 1.0), Vector3::z(), &pose);
        assert!(scalar(&point_to_plane(&c, &pose)).0.abs() < 1e-15);
        let c = corr_at(Vector3::new(0.3, -0.2, 1.1), Vector3::new(0.0, 0.0, 1.0), Vector3::z(), &pose);
        assert!((scalar(&point_to_plane(&c, &pose)).0 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn gicp_values() {
        let pose = Pose::identity();
        let zero = Matrix3::zeros();
        let c = corr_at(Vector3::new(1.0, 2.0, 3.0), Vector3::new(1.0, 2.0, 3.0), Vector3::z(), &pose);
        let t = gicp(&c, &pose, &zero, 1e-3).unwrap();
        assert_eq!(t.value_rows(), vec![0.0, 0.0, 0.0]);

        let c = corr_at(Vector3::new(1.2, 2.0, 3.0), Vector3::new(1.0, 2.0, 3.0), Vector3::z(), &pose);
        let v = gicp(&c, &pose, &zero, 1e-3).unwrap().value_rows();
        // C = (1 + λ)·I  ⇒  L⁻¹ = I/√(1 + λ)
        let expect = 0.2 / (1.0f64 + 1e-3).sqrt();
        assert!((v[0] - expect).abs() < 1e-12 && v[1].abs() < 1e-15 && v[2].abs() < 1e-15);
    }

    #[test]
    fn gicp_rejects_indefinite_covariance() {
        let pose = Pose::identity();
        let mut c = corr_at(Vector3::zeros(), Vector3::zeros(), Vector3::z(), &pose);
        c.voxel_covariance = -Matrix3::identity();
        assert_eq!(gicp(&c, &pose, &Matrix3::zeros(), 1e-3), Err(ResidualError::NonSpdCovariance));
    }

    #[test]
    fn angle_residual_extremes() {
        let pose = Pose::identity();
        let n = Vector3::z();
        let q = Vector3::zeros();
        let par = corr_at(q, Vector3::new(0.0, 0.0, -1.0), n, &pose);
        let orth = corr_at(q, Vector3::new(-1.0, 0.0, 0.0), n, &pose);
        let anti = corr_at(q, Vector3::new(0.0, 0.0, 1.0), n, &pose);
        assert!(angle_residual(&par, &pose, 1e-4).unwrap().abs() < 1e-15);
        assert!((angle_residual(&orth, &pose, 1e-4).unwrap() - 1.0).abs() < 1e-15);
        assert!((angle_residual(&anti, &pose, 1e-4).unwrap() - 2.0).abs() < 1e-15);
        let tiny = corr_at(q, Vector3::new(0.0, 0.0, 1e-5), n, &pose);
        assert!(matches!(angle_residual(&tiny, &pose, 1e-4), Err(ResidualError::DegenerateDirection { .. })));
    }

    #[test]
    fn angle_jacobian_zero_cases() {
        let pose = Pose::new(exp_so3(&Vector3::new(0.2, 0.1, -0.3)), Vector3::new(1.0, 2.0, 3.0));
        // u = d₂ exactly: d₁ = R·Δq, choose d₂ = d₁/‖d₁‖
        let q = Vector3::new(0.4, -0.1, 0.7);
        let mut c = corr_at(q, Vector3::zeros(), Vector3::z(), &pose);
        c.normal = pose.rotation.apply(&(q - c.map_point_local)).normalize();
        let j = angle_jacobian(&c, &pose, 1e-4).unwrap();
        assert!(j.amax() < 1e-12);

        // Δq = 0 leaves ‖d₁‖ = 0, which the precondition already excludes
        let mut c = corr_at(q, pose.apply(&q), Vector3::z(), &pose);
        c.map_point_local = q;
        assert!(angle_jacobian(&c, &pose, 1e-4).is_err());
        assert_eq!(angle_jacobian(&c, &pose, 0.0).unwrap(), RowVector6::zeros());
    }

    #[test]
    fn angle_invariant_to_direction_scaling() {
        let pose = Pose::new(exp_so3(&Vector3::new(0.1, 0.5, -0.2)), Vector3::new(0.5, 0.0, 1.0));
        let c = corr_at(Vector3::new(1.0, 0.5, -0.5), Vector3::new(2.0, 1.0, 0.0), Vector3::new(0.3, 0.1, 1.0), &pose);
        let e0 = angle_residual(&c, &pose, 1e-4).unwrap();
        for scale in [0.01, 0.5, 3.0, 1e3] {
            let mut s = c;
            s.scan_point = c.map_point_local + (c.scan_point - c.map_point_local) * scale;
            assert!((angle_residual(&s, &pose, 1e-4).unwrap() - e0).abs() < 1e-12);
        }
    }

    #[test]
    fn point_to_plane_invariant_within_plane() {
        let pose = Pose::new(exp_so3(&Vector3::new(0.3, -0.2, 0.1)), Vector3::new(1.0, -1.0, 0.5));
        let c = corr_at(Vector3::new(1.0, 2.0, 0.5), Vector3::new(3.0, 0.0, 1.0), Vector3::new(1.0, 1.0, 0.2), &pose);
        let base = scalar(&point_to_plane(&c, &pose)).0;
        // move the world point along the plane, then express it back in the LiDAR frame
        let tangent = c.normal.cross(&Vector3::x()).normalize();
        for s in [-2.0, 0.3, 5.0] {
            let mut moved = c;
            let world = pose.apply(&c.scan_point) + tangent * s;
            moved.scan_point = pose.inverse().apply(&world);
            assert!((scalar(&point_to_plane(&moved, &pose)).0 - base).abs() < 1e-9);
        }
    }

    #[test]
    fn build_empty_map() {
        let map = VoxelMap::new(VoxelMapConfig::default());
        let set = build_residuals(&[Vector3::new(1.0, 2.0, 3.0)], &map, &Pose::identity(), &ResidualConfig::default());
        assert!(set.terms.is_empty());
        assert_eq!(set.stats.matched, 0);
        assert_eq!(set.stats.unmatched, 1);
    }

    #[test]
    fn build_single_planar_voxel_gives_three_terms() {
        let mut map = VoxelMap::new(VoxelMapConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<_> = (0..40)
            .map(|_| Vector3::new(rng.random_range(0.0..0.5), rng.random_range(0.0..0.5), 0.25))
            .collect();
        map.insert_points(pts.iter(), 1.0);
        let q = Vector3::new(0.05, 0.45, 0.25);
        let mut config = ResidualConfig::default();
        config.gicp.enabled = true;
        let set = build_residuals(&[q], &map, &Pose::identity(), &config);
        assert_eq!(set.stats.matched, 1);
        let kinds: Vec<_> = set.terms.iter().map(|t| t.kind).collect();
        assert_eq!(kinds, vec![ResidualKind::PointToPlane, ResidualKind::Gicp, ResidualKind::Angle]);
        // fit_plane on the same points gives the same plane
        let fit = fit_plane(&pts, &VoxelMapConfig::default()).unwrap();
        assert!((map.query(&q).unwrap().normal - fit.normal).amax() < 1e-9);
    }

    #[test]
    fn relinearize_reproduces_build_terms() {
        let mut map = VoxelMap::new(VoxelMapConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<_> = (0..400)
            .map(|_| Vector3::new(rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), 0.01 * rng.random::<f64>()))
            .collect();
        map.insert_points(pts.iter(), 1.0);
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 0.02));
        let scan: Vec<_> = pts.iter().step_by(7).map(|p| pose.inverse().apply(p)).collect();
        let set = build_residuals(&scan, &map, &pose, &ResidualConfig::default());
        assert!(set.stats.matched > 0);
        let again = relinearize(&set.matches, &pose, 1e-4);
        assert_eq!(again, set.terms);
        assert!((matches_cost(&set.matches, &pose, 1e-4) - set.cost()).abs() < 1e-9 * set.cost().max(1.0));
    }

    #[test]
    fn huber_downweights_large_residuals() {
        let robust = RobustLoss { enabled: true, ..RobustLoss::default() };
        assert_eq!(robust.factor(ResidualKind::PointToPlane, 0.05), 1.0);
        assert!((robust.factor(ResidualKind::PointToPlane, 0.5) - 0.2).abs() < 1e-15);
        assert!((robust.factor(ResidualKind::Angle, 1.0) - 0.1).abs() < 1e-15);
        assert_eq!(RobustLoss::default().factor(ResidualKind::Angle, 1.0), 1.0);
    }

    #[test]
    fn diagnostics_rows() {
        let set = ResidualSet::default();
        let mut out = Vec::new();
        write_diagnostics_row(&mut out, 4, &set).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("4,point_to_plane,0,0,0,0"));
    }

    proptest! {
        #[test]
        fn residuals_are_finite(
            w in proptest::array::uniform3(-3.0..3.0f64),
            t in proptest::array::uniform3(-10.0..10.0f64),
            q in proptest::array::uniform3(-10.0..10.0f64),
            qm in proptest::array::uniform3(-10.0..10.0f64),
            n in proptest::array::uniform3(-1.0..1.0f64),
        ) {
            let n = Vector3::from(n);
            prop_assume!(n.norm() > 1e-3);
            let pose = Pose::new(exp_so3(&Vector3::from(w)), Vector3::from(t));
            let c = corr_at(Vector3::from(q), Vector3::from(qm), n, &pose);
            let p = point_to_plane(&c, &pose);
            prop_assert!(p.value_rows().iter().chain(p.jacobian_rows().iter().flatten()).all(|x| x.is_finite()));
            let g = gicp(&c, &pose, &(Matrix3::identity() * 1e-4), 1e-3).unwrap();
            prop_assert!(g.value_rows().iter().chain(g.jacobian_rows().iter().flatten()).all(|x| x.is_finite()));
            if let Ok(a) = angle_term(&c, &pose, 1e-4) {
                let e = a.value_rows()[0];
                prop_assert!((0.0..=2.0 + 1e-12).contains(&e));
                prop_assert!(a.jacobian_rows().iter().flatten().all(|x| x.is_finite()));
            }
        }
    }
}
