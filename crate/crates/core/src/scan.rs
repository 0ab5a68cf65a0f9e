use crate::geometry::Pose;
use nalgebra::Vector3;

/// One LiDAR return in the sensor frame at its capture time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimedPoint {
    pub t: f64,
    pub p: Vector3<f64>,
}

/// A timestamped sweep with its ground-truth pose at `end` (when known).
#[derive(Clone, Debug, PartialEq)]
pub struct ScanFrame {
    pub start: f64,
    pub end: f64,
    pub points: Vec<TimedPoint>,
    pub ground_truth: Option<Pose>,
}

impl ScanFrame {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|p| p.p).collect()
    }
}
