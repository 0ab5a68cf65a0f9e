//! Analytic Jacobians of every residual class against central finite
//! differences of the residual value under `R' = R·exp(δθ)`, `t' = t + δt`.

use alio_core::geometry::{exp_so3, Perturbation, Pose};
use alio_core::imu::prior_residual;
use alio_core::residuals::{
    angle_jacobian, angle_residual, angle_term, gicp_whitener, point_to_plane, Correspondence, ResidualTerm,
};
use alio_core::voxel_map::VoxelKey;
use nalgebra::{DMatrix, Matrix3, Matrix6, Vector3, Vector6};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
    )
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    Pose::new(exp_so3(&random_vec(rng, 1.5)), random_vec(rng, 5.0))
}

fn random_spd(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let a = Matrix3::from_fn(|_, _| rng.random_range(-0.3..0.3));
    a * a.transpose() + Matrix3::identity() * 1e-3
}

fn random_correspondence(rng: &mut ChaCha8Rng, pose: &Pose) -> Correspondence {
    let normal = random_vec(rng, 1.0).normalize();
    let map_point = random_vec(rng, 5.0);
    Correspondence {
        point_index: 0,
        scan_point: random_vec(rng, 5.0),
        voxel_key: VoxelKey([0, 0, 0]),
        map_point,
        normal,
        voxel_covariance: random_spd(rng),
        planarity: 50.0,
        map_point_local: pose.inverse().apply(&map_point),
    }
}

/// Central differences of a vector-valued function of the pose.
fn finite_difference(pose: &Pose, rows: usize, f: impl Fn(&Pose) -> Vec<f64>) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(rows, 6);
    for k in 0..6 {
        let mut e = Vector6::zeros();
        e[k] = H;
        let plus = f(&pose.retract(&Perturbation(e)));
        let minus = f(&pose.retract(&Perturbation(-e)));
        for r in 0..rows {
            j[(r, k)] = (plus[r] - minus[r]) / (2.0 * H);
        }
    }
    j
}

fn analytic(term: &ResidualTerm) -> DMatrix<f64> {
    let rows = term.jacobian_rows();
    DMatrix::from_fn(rows.len(), 6, |r, c| rows[r][c])
}

fn relative_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    (analytic - numeric).norm() / numeric.norm().max(1e-9)
}

#[test]
fn point_to_plane_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let pose = random_pose(&mut rng);
        let corr = random_correspondence(&mut rng, &pose);
        let term = point_to_plane(&corr, &pose);
        let fd = finite_difference(&pose, 1, |p| point_to_plane(&corr, p).value_rows());
        let err = relative_error(&analytic(&term), &fd);
        assert!(err < 1e-5, "relative error {err}");
    }
}

#[test]
fn angle_matches_finite_differences_with_frozen_anchor() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut checked = 0;
    while checked < 100 {
        let pose = random_pose(&mut rng);
        let corr = random_correspondence(&mut rng, &pose);
        let d1 = pose.rotation.apply(&(corr.scan_point - corr.map_point_local));
        if d1.norm() <= 0.1 {
            continue;
        }
        let j = angle_jacobian(&corr, &pose, 1e-4).unwrap();
        let fd = finite_difference(&pose, 1, |p| vec![angle_residual(&corr, p, 1e-4).unwrap()]);
        let a = DMatrix::from_row_slice(1, 6, j.as_slice());
        let err = relative_error(&a, &fd);
        assert!(err < 1e-5, "relative error {err}");
        // the translation block vanishes because d₁ only sees the rotation
        assert!(j.fixed_columns::<3>(3).amax() == 0.0);
        let term = angle_term(&corr, &pose, 1e-4).unwrap();
        assert_eq!(analytic(&term), a);
        checked += 1;
    }
}

#[test]
fn gicp_matches_finite_differences_with_frozen_whitener() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let point_cov = Matrix3::identity() * 1e-4;
    for _ in 0..100 {
        let pose = random_pose(&mut rng);
        let corr = random_correspondence(&mut rng, &pose);
        let w = gicp_whitener(&corr, &pose, &point_cov, 1e-3).unwrap();
        let term = alio_core::residuals::gicp(&corr, &pose, &point_cov, 1e-3).unwrap();
        let fd = finite_difference(&pose, 3, |p| {
            let v = w * (p.apply(&corr.scan_point) - corr.map_point);
            v.iter().copied().collect()
        });
        let err = relative_error(&analytic(&term), &fd);
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn prior_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let info = Matrix6::from_diagonal(&Vector6::new(4.0, 4.0, 4.0, 9.0, 9.0, 9.0));
    for _ in 0..100 {
        let predicted = random_pose(&mut rng);
        let offset = Perturbation::new(random_vec(&mut rng, 0.5), random_vec(&mut rng, 0.5));
        let current = predicted.retract(&offset);
        let term = prior_residual(&predicted, &current, &info);
        let fd = finite_difference(&current, 6, |p| prior_residual(&predicted, p, &info).value_rows());
        let err = relative_error(&analytic(&term), &fd);
        assert!(err < 1e-5, "relative error {err}");
    }
}

proptest! {
    #[test]
    fn point_to_plane_gradient_is_first_order_accurate(
        seed in 0u64..10_000,
        step in prop::array::uniform6(-1e-4..1e-4f64),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = random_pose(&mut rng);
        let corr = random_correspondence(&mut rng, &pose);
        let term = point_to_plane(&corr, &pose);
        let delta = Vector6::from_row_slice(&step);
        let predicted = term.value_rows()[0] + analytic(&term).row(0).dot(&delta.transpose());
        let actual = point_to_plane(&corr, &pose.retract(&Perturbation(delta))).value_rows()[0];
        // second-order remainder bounded by ‖δ‖²·(lever arm)
        prop_assert!((predicted - actual).abs() < 1e-6);
    }
}
