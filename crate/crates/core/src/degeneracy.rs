//! Hessian conditioning analysis and the fused frame stability score.
//!
//! The Gauss-Newton Hessian `H = Σ w·JᵀJ` of the final iterate is split
//! into its rotation and translation blocks. Each block's condition number
//! is mapped to a stability score in `[0, 1]`, the two are blended into a
//! structural score, and that is blended with an angle-consistency score
//! `exp(−ē_θ)` built from the mean normal-angle residual.

use crate::residuals::{Linearization, ResidualKind, ResidualTerm};
use nalgebra::{Matrix3, Matrix6, Vector3};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use std::io::{self, Write};

/// Which closed form maps a condition number to a stability score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVariant {
    /// `1 − exp(−(1 − 1/κ))`: 0 at κ = 1, rising toward `1 − e⁻¹`.
    PaperEq11,
    /// `exp(−(1 − 1/κ))`: 1 at κ = 1, falling toward `e⁻¹`.
    ProseConsistent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct DegeneracyConfig {
    /// Weight of the rotational score in the structural score.
    pub alpha: f64,
    /// Weight of the structural score in `s_deg`.
    pub gamma: f64,
    /// Floor on the smallest singular value.
    pub epsilon: f64,
    /// Frames with `s_deg` below this leave the map untouched.
    pub tau_global: f64,
    pub variant: ScoreVariant,
    pub gating_enabled: bool,
    /// Whether whitened GICP terms contribute to the analysed Hessian.
    /// Their in-plane rows carry the voxel's spread, which masks the
    /// translational null space that point-to-plane terms expose.
    pub include_gicp: bool,
}

impl Default for DegeneracyConfig {
    fn default() -> Self {
        DegeneracyConfig {
            alpha: 0.5,
            gamma: 0.5,
            epsilon: 1e-8,
            tau_global: 0.3,
            variant: ScoreVariant::ProseConsistent,
            gating_enabled: true,
            include_gicp: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegeneracyReport {
    pub hessian: Matrix6<f64>,
    pub kappa_r: f64,
    pub kappa_t: f64,
    /// Singular values of the rotation block, descending.
    pub sigma_r: Vector3<f64>,
    /// Singular values of the translation block, descending.
    pub sigma_t: Vector3<f64>,
    pub s_r: f64,
    pub s_t: f64,
    pub s_struct: f64,
    pub mean_angle_residual: f64,
    pub angle_terms: usize,
    pub s_angle: f64,
    pub s_deg: f64,
}

impl DegeneracyReport {
    /// Report for a frame with no usable constraints: every score is zero
    /// and both condition numbers are infinite, so the frame is always gated.
    pub fn without_constraints() -> Self {
        DegeneracyReport {
            hessian: Matrix6::zeros(),
            kappa_r: f64::INFINITY,
            kappa_t: f64::INFINITY,
            sigma_r: Vector3::zeros(),
            sigma_t: Vector3::zeros(),
            s_r: 0.0,
            s_t: 0.0,
            s_struct: 0.0,
            mean_angle_residual: 0.0,
            angle_terms: 0,
            s_angle: 0.0,
            s_deg: 0.0,
        }
    }

    /// Score assigned to the bootstrap frame that seeds an empty map.
    pub fn bootstrap() -> Self {
        DegeneracyReport {
            kappa_r: 1.0,
            kappa_t: 1.0,
            s_r: 1.0,
            s_t: 1.0,
            s_struct: 1.0,
            s_angle: 1.0,
            s_deg: 1.0,
            ..Self::without_constraints()
        }
    }
}

/// `H = Σ wᵢ·Jᵢᵀ·Jᵢ`.
pub fn accumulate_hessian<'a, I>(terms: I) -> Matrix6<f64>
where
    I: IntoIterator<Item = &'a ResidualTerm>,
{
    let mut h = Matrix6::zeros();
    for t in terms {
        let w = t.weight;
        match &t.linearization {
            Linearization::Scalar { jacobian, .. } => h += jacobian.transpose() * jacobian * w,
            Linearization::Vector3 { jacobian, .. } => h += jacobian.transpose() * jacobian * w,
            Linearization::Vector6(b) => h += b.1.transpose() * b.1 * w,
        }
    }
    h
}

/// `(H_rr, H_tt)` under the `[δθ; δt]` ordering.
pub fn split_blocks(h: &Matrix6<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    (h.fixed_view::<3, 3>(0, 0).into_owned(), h.fixed_view::<3, 3>(3, 3).into_owned())
}

fn sorted_singular_values(m: &Matrix3<f64>) -> Vector3<f64> {
    let mut s = m.singular_values();
    s.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    s
}

fn kappa(sigma: &Vector3<f64>, epsilon: f64) -> f64 {
    (sigma[0] / sigma[2].max(epsilon)).max(1.0)
}

/// `κ = σ_max / max(σ_min, ε)`, clamped below at 1, for each block.
pub fn condition_numbers(h_rr: &Matrix3<f64>, h_tt: &Matrix3<f64>, epsilon: f64) -> (f64, f64) {
    (
        kappa(&sorted_singular_values(h_rr), epsilon),
        kappa(&sorted_singular_values(h_tt), epsilon),
    )
}

pub fn stability_score(kappa: f64, variant: ScoreVariant) -> f64 {
    let x = 1.0 - 1.0 / kappa.max(1.0);
    match variant {
        ScoreVariant::PaperEq11 => 1.0 - (-x).exp(),
        ScoreVariant::ProseConsistent => (-x).exp(),
    }
}

pub fn stability_scores(kappa_r: f64, kappa_t: f64, variant: ScoreVariant) -> (f64, f64) {
    (stability_score(kappa_r, variant), stability_score(kappa_t, variant))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusedScores {
    pub s_struct: f64,
    pub s_angle: f64,
    pub s_deg: f64,
}

/// Convex blends of the structural and angle scores. With no angle terms
/// the angle score is neutral (1).
pub fn fuse_scores(s_r: f64, s_t: f64, mean_angle_residual: f64, n: usize, alpha: f64, gamma: f64) -> FusedScores {
    let s_struct = alpha * s_r + (1.0 - alpha) * s_t;
    let s_angle = if n == 0 { 1.0 } else { (-mean_angle_residual).exp() };
    FusedScores { s_struct, s_angle, s_deg: gamma * s_struct + (1.0 - gamma) * s_angle }
}

/// Builds the full report from a frame's final-iterate residual terms.
/// Prior terms never enter the analysed Hessian.
pub fn assess(terms: &[ResidualTerm], config: &DegeneracyConfig) -> DegeneracyReport {
    let analysed = terms.iter().filter(|t| match t.kind {
        ResidualKind::PointToPlane | ResidualKind::Angle => true,
        ResidualKind::Gicp => config.include_gicp,
        ResidualKind::Prior => false,
    });
    let hessian = accumulate_hessian(analysed);
    let (h_rr, h_tt) = split_blocks(&hessian);
    let sigma_r = sorted_singular_values(&h_rr);
    let sigma_t = sorted_singular_values(&h_tt);
    let kappa_r = kappa(&sigma_r, config.epsilon);
    let kappa_t = kappa(&sigma_t, config.epsilon);
    let (s_r, s_t) = stability_scores(kappa_r, kappa_t, config.variant);

    let (sum, n) = terms
        .iter()
        .filter(|t| t.kind == ResidualKind::Angle)
        .fold((0.0, 0usize), |(s, n), t| (s + t.value_norm(), n + 1));
    let mean = if n == 0 { 0.0 } else { sum / n as f64 };
    let fused = fuse_scores(s_r, s_t, mean, n, config.alpha, config.gamma);
    DegeneracyReport {
        hessian,
        kappa_r,
        kappa_t,
        sigma_r,
        sigma_t,
        s_r,
        s_t,
        s_struct: fused.s_struct,
        mean_angle_residual: mean,
        angle_terms: n,
        s_angle: fused.s_angle,
        s_deg: fused.s_deg,
    }
}

pub const TRACE_HEADER: &str = "frame,t,kappa_r,kappa_t,s_r,s_t,s_struct,mean_e_theta,s_angle,s_deg,gated";

/// One row of the per-frame degeneracy trace.
pub fn write_trace_row<W: Write>(mut w: W, frame: usize, t: f64, r: &DegeneracyReport, gated: bool) -> io::Result<()> {
    writeln!(
        w,
        "{frame},{t},{},{},{},{},{},{},{},{},{}",
        r.kappa_r,
        r.kappa_t,
        r.s_r,
        r.s_t,
        r.s_struct,
        r.mean_angle_residual,
        r.s_angle,
        r.s_deg,
        gated as u8
    )
}
