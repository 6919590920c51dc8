//! 6-DoF pose from a confidence-weighted point cloud.
//!
//! Translation is the weighted centroid; rotation columns are the principal axes of
//! the weighted covariance in descending eigenvalue order. Eigenvector signs are not
//! observable from the cloud, so the proper rotation closest to the previous pose is
//! chosen.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraExtrinsics;
use crate::fusion::{Frame, WeightedPointCloud};

pub const DEFAULT_DEGENERACY_RATIO: f64 = 0.05;
const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum WpcaError {
    #[error("total weight is zero")]
    ZeroTotalWeight,
    #[error("covariance is not symmetric (max deviation {0:e})")]
    AsymmetricInput(f64),
    #[error("covariance has non-finite entries")]
    NonFiniteInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PoseQuality {
    Ok,
    /// Two or more principal variances nearly coincide; the axes are arbitrary.
    DegenerateOrientation,
    /// No usable points.
    Invalid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose6DoF {
    pub translation: Vector3<f64>,
    /// Columns are the principal axes; always a proper rotation.
    pub rotation: Matrix3<f64>,
    /// Principal variances (m²), descending.
    pub extents: [f64; 3],
    pub quality: PoseQuality,
    pub timestamp: f64,
    pub frame: Frame,
}

impl Pose6DoF {
    pub fn invalid(timestamp: f64, frame: Frame, rotation: Matrix3<f64>) -> Self {
        Self {
            translation: Vector3::zeros(),
            rotation,
            extents: [0.0; 3],
            quality: PoseQuality::Invalid,
            timestamp,
            frame,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.quality != PoseQuality::Invalid
    }

    /// First principal axis.
    pub fn dominant_axis(&self) -> Vector3<f64> {
        self.rotation.column(0).into_owned()
    }

    /// Re-expresses a camera-frame pose in the world frame.
    pub fn to_world(&self, e: &CameraExtrinsics) -> Pose6DoF {
        debug_assert_eq!(self.frame, Frame::Camera);
        Pose6DoF {
            translation: e.rotation() * self.translation + e.translation(),
            rotation: e.rotation() * self.rotation,
            frame: Frame::World,
            ..*self
        }
    }
}

pub fn weighted_centroid(cloud: &WeightedPointCloud) -> Result<Vector3<f64>, WpcaError> {
    let total = cloud.total_weight();
    if !(total > 0.0) {
        return Err(WpcaError::ZeroTotalWeight);
    }
    let sum = cloud
        .points
        .iter()
        .zip(&cloud.weights)
        .fold(Vector3::zeros(), |acc, (p, &w)| acc + p * w);
    Ok(sum / total)
}

/// `Σ wᵢ (pᵢ − c)(pᵢ − c)ᵀ / Σ wᵢ`, without a small-sample correction.
pub fn weighted_covariance(cloud: &WeightedPointCloud, centroid: &Vector3<f64>) -> Result<Matrix3<f64>, WpcaError> {
    let total = cloud.total_weight();
    if !(total > 0.0) {
        return Err(WpcaError::ZeroTotalWeight);
    }
    let mut acc = Matrix3::zeros();
    for (p, &w) in cloud.points.iter().zip(&cloud.weights) {
        let d = p - centroid;
        acc += (d * d.transpose()) * w;
    }
    let cov = acc / total;
    // Exact symmetry regardless of accumulation rounding.
    Ok((cov + cov.transpose()) * 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrincipalAxes {
    /// Unit eigenvectors as columns, descending eigenvalue order, det = +1.
    pub rotation: Matrix3<f64>,
    pub eigenvalues: [f64; 3],
    pub degenerate: bool,
}

pub fn principal_axes(cov: &Matrix3<f64>, rho: f64) -> Result<PrincipalAxes, WpcaError> {
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(WpcaError::NonFiniteInput);
    }
    let asym = (cov - cov.transpose()).abs().max();
    if asym > SYMMETRY_TOL * cov.abs().max().max(1.0) {
        return Err(WpcaError::AsymmetricInput(asym));
    }
    let eig = SymmetricEigen::new((cov + cov.transpose()) * 0.5);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let mut rotation = Matrix3::zeros();
    let mut eigenvalues = [0.0; 3];
    for (dst, &src) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(src).normalize();
        // Deterministic sign: largest-magnitude component positive.
        let lead = v.iamax();
        if v[lead] < 0.0 {
            v = -v;
        }
        rotation.set_column(dst, &v);
        eigenvalues[dst] = eig.eigenvalues[src].max(0.0);
    }
    if rotation.determinant() < 0.0 {
        let flipped = -rotation.column(2);
        rotation.set_column(2, &flipped);
    }
    let [l1, l2, l3] = eigenvalues;
    let degenerate = !(l1 > 0.0) || l1 - l2 < rho * l1 || l2 - l3 < rho * l1;
    Ok(PrincipalAxes { rotation, eigenvalues, degenerate })
}

/// Angle (radians) of the relative rotation `aᵀ·b`.
pub fn geodesic_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = (((a.transpose() * b).trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    c.acos()
}

/// Angle (degrees) between the dominant axes of two rotations, ignoring axis sign.
pub fn dominant_axis_error_deg(estimated: &Matrix3<f64>, truth: &Matrix3<f64>) -> f64 {
    let a = estimated.column(0).normalize();
    let b = truth.column(0).normalize();
    a.dot(&b).abs().min(1.0).acos().to_degrees()
}

const PROPER_SIGN_FLIPS: [[f64; 3]; 4] = [[1.0, 1.0, 1.0], [-1.0, -1.0, 1.0], [-1.0, 1.0, -1.0], [1.0, -1.0, -1.0]];

/// Of the four sign assignments that keep det = +1, the one nearest `reference`.
pub fn align_signs(rotation: &Matrix3<f64>, reference: &Matrix3<f64>) -> Matrix3<f64> {
    let mut best = *rotation;
    let mut best_trace = f64::NEG_INFINITY;
    for flips in PROPER_SIGN_FLIPS {
        let candidate = rotation * Matrix3::from_diagonal(&Vector3::from(flips));
        let trace = (reference.transpose() * candidate).trace();
        if trace > best_trace {
            best_trace = trace;
            best = candidate;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEstimator {
    /// Relative eigen-gap below which orientation is flagged degenerate.
    pub rho: f64,
}

impl Default for PoseEstimator {
    fn default() -> Self {
        Self { rho: DEFAULT_DEGENERACY_RATIO }
    }
}

impl PoseEstimator {
    pub fn estimate(&self, cloud: &WeightedPointCloud, previous: Option<&Pose6DoF>, timestamp: f64) -> Pose6DoF {
        let reference = previous.map(|p| p.rotation).unwrap_or_else(Matrix3::identity);
        let invalid = || Pose6DoF::invalid(timestamp, cloud.frame, reference);
        let Ok(centroid) = weighted_centroid(cloud) else {
            return invalid();
        };
        let Ok(axes) = weighted_covariance(cloud, &centroid).and_then(|cov| principal_axes(&cov, self.rho)) else {
            return invalid();
        };
        if !centroid.iter().all(|v| v.is_finite()) {
            return invalid();
        }
        Pose6DoF {
            translation: centroid,
            rotation: align_signs(&axes.rotation, &reference),
            extents: axes.eigenvalues,
            quality: if axes.degenerate { PoseQuality::DegenerateOrientation } else { PoseQuality::Ok },
            timestamp,
            frame: cloud.frame,
        }
    }
}

pub fn estimate_pose(cloud: &WeightedPointCloud, previous: Option<&Pose6DoF>, timestamp: f64) -> Pose6DoF {
    PoseEstimator::default().estimate(cloud, previous, timestamp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: &[[f64; 3]], weights: &[f64]) -> WeightedPointCloud {
        WeightedPointCloud::new(points.iter().map(|p| Vector3::from(*p)).collect(), weights.to_vec(), Frame::Camera)
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> WeightedPointCloud {
        let pts = (0..n)
            .map(|_| Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0), rng.random_range(0.5..4.0)))
            .collect();
        let ws = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        WeightedPointCloud::new(pts, ws, Frame::Camera)
    }

    fn assert_proper(r: &Matrix3<f64>, tol: f64) {
        assert!((r.transpose() * r - Matrix3::identity()).abs().max() < tol);
        assert!((r.determinant() - 1.0).abs() < tol);
    }

    #[test]
    fn centroid_cases() {
        assert_eq!(weighted_centroid(&cloud(&[[1.0, 2.0, 3.0]], &[0.3])).unwrap(), Vector3::new(1.0, 2.0, 3.0));
        let c = weighted_centroid(&cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], &[1.0, 3.0])).unwrap();
        assert_eq!(c, Vector3::new(0.75, 0.0, 0.0));
        assert_eq!(weighted_centroid(&cloud(&[[1.0, 1.0, 1.0]], &[0.0])), Err(WpcaError::ZeroTotalWeight));
        assert_eq!(weighted_centroid(&WeightedPointCloud::empty(Frame::World)), Err(WpcaError::ZeroTotalWeight));
    }

    #[test]
    fn uniform_weights_give_arithmetic_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = random_cloud(&mut rng, 40);
        c.weights = vec![0.37; 40];
        let mean = c.points.iter().sum::<Vector3<f64>>() / 40.0;
        assert!((weighted_centroid(&c).unwrap() - mean).abs().max() < 1e-12);
    }

    #[test]
    fn covariance_cases() {
        let single = cloud(&[[1.0, 2.0, 3.0]], &[1.0]);
        let c = weighted_centroid(&single).unwrap();
        assert_eq!(weighted_covariance(&single, &c).unwrap(), Matrix3::zeros());

        let pair = cloud(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]], &[0.5, 0.5]);
        let c = weighted_centroid(&pair).unwrap();
        assert_eq!(weighted_covariance(&pair, &c).unwrap(), Matrix3::from_diagonal(&Vector3::new(1.0, 0.0, 0.0)));
    }

    #[test]
    fn diagonal_covariance_axes() {
        let axes = principal_axes(&Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 0.25)), 0.05).unwrap();
        assert_eq!(axes.rotation, Matrix3::identity());
        assert_eq!(axes.eigenvalues, [4.0, 1.0, 0.25]);
        assert!(!axes.degenerate);
    }

    #[test]
    fn permuted_diagonal_sorted() {
        let axes = principal_axes(&Matrix3::from_diagonal(&Vector3::new(0.25, 4.0, 1.0)), 0.05).unwrap();
        assert_eq!(axes.eigenvalues, [4.0, 1.0, 0.25]);
        assert_eq!(axes.rotation.column(0).into_owned(), Vector3::y());
        assert_proper(&axes.rotation, 1e-12);
    }

    #[test]
    fn isotropic_and_zero_are_degenerate() {
        assert!(principal_axes(&Matrix3::identity(), 0.05).unwrap().degenerate);
        assert!(principal_axes(&Matrix3::zeros(), 0.05).unwrap().degenerate);
        // λ1 distinct, λ2 ≈ λ3
        assert!(principal_axes(&Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 0.9)), 0.05).unwrap().degenerate);
    }

    #[test]
    fn input_validation() {
        let mut m = Matrix3::identity();
        m[(0, 1)] = 0.1;
        assert!(matches!(principal_axes(&m, 0.05), Err(WpcaError::AsymmetricInput(_))));
        m[(0, 1)] = f64::NAN;
        assert_eq!(principal_axes(&m, 0.05), Err(WpcaError::NonFiniteInput));
    }

    #[test]
    fn empty_cloud_is_invalid_pose() {
        let pose = estimate_pose(&WeightedPointCloud::empty(Frame::Camera), None, 1.5);
        assert_eq!(pose.quality, PoseQuality::Invalid);
        assert_eq!(pose.timestamp, 1.5);
        assert_proper(&pose.rotation, 1e-12);
        let zero = estimate_pose(&cloud(&[[1.0, 0.0, 0.0]], &[0.0]), None, 0.0);
        assert_eq!(zero.quality, PoseQuality::Invalid);
    }

    #[test]
    fn sign_choice_follows_previous() {
        let base = Rotation3::from_euler_angles(0.2, -0.4, 1.1).into_inner();
        for flips in PROPER_SIGN_FLIPS {
            let flipped = base * Matrix3::from_diagonal(&Vector3::from(flips));
            let chosen = align_signs(&flipped, &base);
            assert!((chosen - base).abs().max() < 1e-12);
        }
    }

    #[test]
    fn degenerate_cloud_flagged() {
        // Points on a sphere-symmetric cross.
        let pts = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, -1.0]];
        let pose = estimate_pose(&cloud(&pts, &[1.0; 6]), None, 0.0);
        assert_eq!(pose.quality, PoseQuality::DegenerateOrientation);
        assert_proper(&pose.rotation, 1e-9);
    }

    proptest! {
        #[test]
        fn weight_scaling_invariance(seed in any::<u64>(), k in 1e-3f64..1e3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_cloud(&mut rng, 30);
            let mut scaled = c.clone();
            scaled.weights.iter_mut().for_each(|w| *w *= k);
            let (c1, c2) = (weighted_centroid(&c).unwrap(), weighted_centroid(&scaled).unwrap());
            prop_assert!((c1 - c2).abs().max() <= 1e-12 * c1.abs().max().max(1.0));
            let (v1, v2) = (weighted_covariance(&c, &c1).unwrap(), weighted_covariance(&scaled, &c2).unwrap());
            prop_assert!((v1 - v2).abs().max() <= 1e-12 * v1.abs().max().max(1.0));
            let (p1, p2) = (estimate_pose(&c, None, 0.0), estimate_pose(&scaled, None, 0.0));
            prop_assert!((p1.rotation - p2.rotation).abs().max() < 1e-9);
        }

        #[test]
        fn rigid_equivariance(seed in any::<u64>(), roll in -3.0f64..3.0, pitch in -1.5f64..1.5, yaw in -3.0f64..3.0,
                              t in prop::array::uniform3(-5.0f64..5.0)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_cloud(&mut rng, 50);
            let r0 = Rotation3::from_euler_angles(roll, pitch, yaw).into_inner();
            let t0 = Vector3::from(t);
            let moved = WeightedPointCloud::new(c.points.iter().map(|p| r0 * p + t0).collect(), c.weights.clone(), Frame::Camera);
            let c1 = weighted_centroid(&c).unwrap();
            let c2 = weighted_centroid(&moved).unwrap();
            prop_assert!((c2 - (r0 * c1 + t0)).norm() < 1e-9);
            let cov1 = weighted_covariance(&c, &c1).unwrap();
            let cov2 = weighted_covariance(&moved, &c2).unwrap();
            prop_assert!((cov2 - r0 * cov1 * r0.transpose()).abs().max() < 1e-9);
        }

        #[test]
        fn axes_always_proper(diag in prop::array::uniform3(0.0f64..1.0), eps in 0.0f64..1e-7,
                              roll in -3.0f64..3.0, pitch in -1.5f64..1.5, yaw in -3.0f64..3.0) {
            // Includes exactly and nearly repeated eigenvalues.
            let d = Vector3::new(diag[0], diag[0] + eps, diag[2]);
            let r = Rotation3::from_euler_angles(roll, pitch, yaw).into_inner();
            let cov = r * Matrix3::from_diagonal(&d) * r.transpose();
            let cov = (cov + cov.transpose()) * 0.5;
            let axes = principal_axes(&cov, 0.05).unwrap();
            prop_assert!((axes.rotation.transpose() * axes.rotation - Matrix3::identity()).abs().max() < 1e-6);
            prop_assert!((axes.rotation.determinant() - 1.0).abs() < 1e-6);
            prop_assert!(axes.eigenvalues[0] >= axes.eigenvalues[1] && axes.eigenvalues[1] >= axes.eigenvalues[2]);
            prop_assert!(axes.eigenvalues[2] >= 0.0);
        }
    }

    #[test]
    fn axis_error_metric() {
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::z()), 10f64.to_radians()).into_inner();
        assert!((dominant_axis_error_deg(&r, &Matrix3::identity()) - 10.0).abs() < 1e-9);
        let flipped = Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0));
        assert!(dominant_axis_error_deg(&flipped, &Matrix3::identity()) < 1e-6);
        assert!((geodesic_angle(&flipped, &Matrix3::identity()) - std::f64::consts::PI).abs() < 1e-9);
    }
}
