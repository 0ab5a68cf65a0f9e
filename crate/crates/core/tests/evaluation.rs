//! Trajectory error metrics against hand-computed values and invariants.

use alio_core::estimator::write_tum;
use alio_core::evaluation::{evaluate, parse_tum, summarize, Alignment};
use alio_core::geometry::{exp_so3, Pose};
use nalgebra::Vector3;
use proptest::prelude::*;

fn arb_pose() -> impl Strategy<Value = Pose> {
    (prop::array::uniform3(-1.0..1.0f64), prop::array::uniform3(-10.0..10.0f64))
        .prop_map(|(w, t)| Pose::new(exp_so3(&Vector3::from(w)), Vector3::from(t)))
}

fn timed(poses: &[Pose]) -> Vec<(f64, Pose)> {
    poses.iter().enumerate().map(|(i, p)| (i as f64 * 0.1, *p)).collect()
}

#[test]
fn two_error_fixture() {
    let s = summarize(&[0.3, 0.4]);
    assert!((s.rmse - 0.125f64.sqrt()).abs() < 1e-12);
    assert!((s.mean - 0.35).abs() < 1e-12);
    assert!((s.max - 0.4).abs() < 1e-12);
    assert_eq!(s.count, 2);
}

#[test]
fn constant_offset_without_alignment() {
    let gt: Vec<_> = (0..5).map(|i| Pose::from_translation(Vector3::new(i as f64, 0.0, 0.0))).collect();
    let est: Vec<_> = gt.iter().map(|p| Pose::from_translation(p.translation + Vector3::new(0.0, 0.5, 0.0))).collect();
    let s = evaluate(&timed(&est), &timed(&gt), 0.01, Alignment::None).unwrap();
    for v in [s.rmse, s.mean, s.max] {
        assert!((v - 0.5).abs() < 1e-12);
    }
    let aligned = evaluate(&timed(&est), &timed(&gt), 0.01, Alignment::FirstPose).unwrap();
    assert!(aligned.max < 1e-12);
}

proptest! {
    #[test]
    fn rmse_bounds_mean_and_max_bounds_rmse(errors in prop::collection::vec(0.0..5.0f64, 1..200)) {
        let s = summarize(&errors);
        prop_assert!(s.rmse + 1e-12 >= s.mean);
        prop_assert!(s.max + 1e-12 >= s.rmse);
    }

    #[test]
    fn ape_is_invariant_under_a_common_rigid_motion(
        gt in prop::collection::vec(arb_pose(), 2..30),
        noise in prop::collection::vec(arb_pose(), 30),
        common in arb_pose(),
    ) {
        let est: Vec<_> = gt.iter().zip(&noise).map(|(g, n)| {
            let small = Pose::new(exp_so3(&(n.translation * 0.001)), n.translation * 0.01);
            *g * small
        }).collect();
        let a = evaluate(&timed(&est), &timed(&gt), 0.01, Alignment::FirstPose).unwrap();
        let moved_est: Vec<_> = est.iter().map(|p| common * *p).collect();
        let moved_gt: Vec<_> = gt.iter().map(|p| common * *p).collect();
        let b = evaluate(&timed(&moved_est), &timed(&moved_gt), 0.01, Alignment::FirstPose).unwrap();
        prop_assert!((a.rmse - b.rmse).abs() < 1e-9);
        prop_assert!((a.max - b.max).abs() < 1e-9);
    }

    #[test]
    fn tum_text_round_trips(poses in prop::collection::vec(arb_pose(), 1..20)) {
        let traj = timed(&poses);
        let mut text = Vec::new();
        write_tum(&mut text, &traj).unwrap();
        let parsed = parse_tum(std::str::from_utf8(&text).unwrap()).unwrap();
        prop_assert_eq!(parsed.len(), traj.len());
        for ((ta, a), (tb, b)) in parsed.iter().zip(&traj) {
            prop_assert!((ta - tb).abs() < 1e-6);
            prop_assert!((a.translation - b.translation).amax() < 1e-6);
            prop_assert!(a.rotation.angle_to(&b.rotation) < 1e-6);
        }
    }
}
