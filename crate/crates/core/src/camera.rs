//! Pinhole camera model, camera-to-world extrinsics and relative-depth calibration.
//!
//! Pixel coordinates are `(x, y) = (column, row)` with the origin at the center of
//! the top-left pixel, matching row-major raster storage.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::Raster;

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid extrinsics: {0}")]
    InvalidExtrinsics(String),
    #[error("invalid depth calibration: {0}")]
    InvalidCalibration(String),
    #[error("depth {0} is not a positive finite value")]
    NonPositiveDepth(f64),
    #[error("expected a single-channel raster, got {0} channels")]
    ChannelMismatch(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, CameraError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fx.is_finite() && self.fy > 0.0 && self.fy.is_finite()) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Forward pinhole projection of a camera-frame point. `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if !(p.z > 0.0) {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Unit-depth ray direction (Z = 1) through pixel `(x, y)`.
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }
}

/// Lifts pixel `(x, y)` at metric depth `z` into the camera frame.
pub fn backproject(x: f64, y: f64, z: f64, k: &CameraIntrinsics) -> Result<Vector3<f64>, CameraError> {
    if !(z > 0.0 && z.is_finite()) {
        return Err(CameraError::NonPositiveDepth(z));
    }
    Ok(Vector3::new((x - k.cx) * z / k.fx, (y - k.cy) * z / k.fy, z))
}

/// Rigid camera→world transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraExtrinsics {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

const RIGID_TOL: f64 = 1e-9;

impl CameraExtrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, CameraError> {
        let ortho_err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(ortho_err <= RIGID_TOL) {
            return Err(CameraError::InvalidExtrinsics(format!(
                "rotation not orthonormal (max deviation {ortho_err:e})"
            )));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= RIGID_TOL) {
            return Err(CameraError::InvalidExtrinsics(format!("rotation determinant {det}, expected +1")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(CameraError::InvalidExtrinsics("non-finite translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera origin expressed in the world frame.
    pub fn camera_center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p_world - self.translation)
    }
}

pub fn transform_to_world(p: &Vector3<f64>, e: &CameraExtrinsics) -> Vector3<f64> {
    e.rotation * p + e.translation
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DepthMode {
    /// Input is relative inverse depth: `z = 1 / max(a·d + b, epsilon)`.
    AffineDisparity,
    /// Input is relative depth: `z = a·d + b`.
    AffineDepth,
    Identity,
}

impl std::str::FromStr for DepthMode {
    type Err = CameraError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "AFFINE_DISPARITY" => Ok(DepthMode::AffineDisparity),
            "AFFINE_DEPTH" => Ok(DepthMode::AffineDepth),
            "IDENTITY" => Ok(DepthMode::Identity),
            other => Err(CameraError::InvalidCalibration(format!("unknown depth mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for DepthMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DepthMode::AffineDisparity => "AFFINE_DISPARITY",
            DepthMode::AffineDepth => "AFFINE_DEPTH",
            DepthMode::Identity => "IDENTITY",
        })
    }
}

/// Maps backend relative depth to meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthCalibration {
    pub mode: DepthMode,
    pub a: f64,
    pub b: f64,
    pub epsilon: f64,
}

impl Default for DepthCalibration {
    fn default() -> Self {
        Self { mode: DepthMode::AffineDisparity, a: 1.0, b: 0.0, epsilon: 1e-6 }
    }
}

impl DepthCalibration {
    pub fn identity() -> Self {
        Self { mode: DepthMode::Identity, a: 1.0, b: 0.0, epsilon: 1e-6 }
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.a.is_finite() && self.b.is_finite() && self.epsilon.is_finite()) {
            return Err(CameraError::InvalidCalibration("non-finite coefficient".into()));
        }
        if self.mode == DepthMode::AffineDisparity && !(self.a > 0.0 && self.epsilon > 0.0) {
            return Err(CameraError::InvalidCalibration(format!(
                "disparity mode needs a > 0 and epsilon > 0, got a={} epsilon={}",
                self.a, self.epsilon
            )));
        }
        Ok(())
    }

    /// Fits disparity-mode coefficients from `(relative value, known distance in m)`
    /// pairs by least squares on `1/z = a·d + b`. Two distinct references suffice.
    pub fn fit_disparity(references: &[(f64, f64)], epsilon: f64) -> Result<Self, CameraError> {
        if references.len() < 2 {
            return Err(CameraError::InvalidCalibration("need at least two reference distances".into()));
        }
        if references.iter().any(|&(d, z)| !(d.is_finite() && z > 0.0 && z.is_finite())) {
            return Err(CameraError::InvalidCalibration("reference values must be finite, distances positive".into()));
        }
        let n = references.len() as f64;
        let mean_d = references.iter().map(|r| r.0).sum::<f64>() / n;
        let mean_q = references.iter().map(|r| 1.0 / r.1).sum::<f64>() / n;
        let (mut sdd, mut sdq) = (0.0, 0.0);
        for &(d, z) in references {
            sdd += (d - mean_d) * (d - mean_d);
            sdq += (d - mean_d) * (1.0 / z - mean_q);
        }
        if sdd == 0.0 {
            return Err(CameraError::InvalidCalibration("reference relative values are all equal".into()));
        }
        let a = sdq / sdd;
        let cal = Self { mode: DepthMode::AffineDisparity, a, b: mean_q - a * mean_d, epsilon };
        cal.validate()?;
        Ok(cal)
    }

    /// Converts one relative sample to meters; NaN when the result is unusable.
    pub fn apply(&self, d: f32) -> f32 {
        let d = d as f64;
        let z = match self.mode {
            DepthMode::AffineDisparity => 1.0 / (self.a * d + self.b).max(self.epsilon),
            DepthMode::AffineDepth => self.a * d + self.b,
            DepthMode::Identity => d,
        };
        // NaN d passes through max() as epsilon, so screen the input too.
        if d.is_finite() && z.is_finite() && z > 0.0 {
            z as f32
        } else {
            f32::NAN
        }
    }
}

pub fn depth_to_metric(relative: &Raster, cal: &DepthCalibration) -> Result<Raster, CameraError> {
    if relative.channels() != 1 {
        return Err(CameraError::ChannelMismatch(relative.channels()));
    }
    cal.validate()?;
    let data = relative.data().iter().map(|&d| cal.apply(d)).collect();
    Ok(Raster::new(relative.width(), relative.height(), 1, data).expect("same shape as input"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::*;

    fn k640() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn principal_ray() {
        let k = k640();
        assert_eq!(backproject(k.cx, k.cy, 2.0, &k).unwrap(), Vector3::new(0.0, 0.0, 2.0));
    }

    #[test]
    fn pinhole_direct_evaluation() {
        assert_eq!(backproject(820.0, 240.0, 1.0, &k640()).unwrap(), Vector3::new(1.0, 0.0, 1.0));
    }

    #[test]
    fn non_positive_depth_rejected() {
        let k = k640();
        assert_eq!(backproject(1.0, 1.0, 0.0, &k), Err(CameraError::NonPositiveDepth(0.0)));
        assert!(backproject(1.0, 1.0, f64::NAN, &k).is_err());
        assert!(backproject(1.0, 1.0, f64::INFINITY, &k).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 3.9, 0.0, 4, 4).is_ok());
    }

    #[test]
    fn depth_modes() {
        let r = Raster::new(1, 1, 1, vec![1.5]).unwrap();
        assert_eq!(depth_to_metric(&r, &DepthCalibration::identity()).unwrap().data()[0], 1.5);

        let disp = DepthCalibration { mode: DepthMode::AffineDisparity, a: 1.0, b: 0.0, epsilon: 1e-6 };
        let r = Raster::new(1, 1, 1, vec![0.5]).unwrap();
        assert_eq!(depth_to_metric(&r, &disp).unwrap().data()[0], 2.0);

        let aff = DepthCalibration { mode: DepthMode::AffineDepth, a: 2.0, b: 0.1, epsilon: 1e-6 };
        let r = Raster::new(1, 1, 1, vec![0.0]).unwrap();
        assert!((depth_to_metric(&r, &aff).unwrap().data()[0] - 0.1).abs() < 1e-7);
    }

    #[test]
    fn invalid_results_become_nan() {
        let aff = DepthCalibration { mode: DepthMode::AffineDepth, a: 1.0, b: -1.0, epsilon: 1e-6 };
        let r = Raster::new(3, 1, 1, vec![0.5, f32::NAN, 2.0]).unwrap();
        let z = depth_to_metric(&r, &aff).unwrap();
        assert!(z.data()[0].is_nan());
        assert!(z.data()[1].is_nan());
        assert_eq!(z.data()[2], 1.0);
        assert!(DepthCalibration::default().apply(f32::NAN).is_nan());
    }

    #[test]
    fn disparity_clamped_by_epsilon() {
        let disp = DepthCalibration { mode: DepthMode::AffineDisparity, a: 1.0, b: 0.0, epsilon: 0.01 };
        assert_eq!(disp.apply(-3.0), 100.0);
        assert_eq!(disp.apply(0.0), 100.0);
    }

    #[test]
    fn multi_channel_depth_rejected() {
        let r = Raster::filled(2, 2, 2, 1.0).unwrap();
        assert_eq!(
            depth_to_metric(&r, &DepthCalibration::identity()).unwrap_err(),
            CameraError::ChannelMismatch(2)
        );
    }

    #[test]
    fn disparity_calibration_validated() {
        let bad = DepthCalibration { mode: DepthMode::AffineDisparity, a: 0.0, b: 0.0, epsilon: 1e-6 };
        assert!(bad.validate().is_err());
        let bad = DepthCalibration { mode: DepthMode::AffineDisparity, a: 1.0, b: 0.0, epsilon: 0.0 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fit_from_two_references() {
        // 1/z = 0.25·d + 0.05
        let refs = [(1.0, 1.0 / 0.3), (3.0, 1.0 / 0.8)];
        let cal = DepthCalibration::fit_disparity(&refs, 1e-6).unwrap();
        assert!((cal.a - 0.25).abs() < 1e-12);
        assert!((cal.b - 0.05).abs() < 1e-12);
        assert!(DepthCalibration::fit_disparity(&refs[..1], 1e-6).is_err());
        assert!(DepthCalibration::fit_disparity(&[(1.0, 2.0), (1.0, 3.0)], 1e-6).is_err());
    }

    #[test]
    fn identity_and_translation_transforms() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(transform_to_world(&p, &CameraExtrinsics::identity()), p);
        let e = CameraExtrinsics::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(transform_to_world(&p, &e), Vector3::new(1.0, 2.0, 4.0));
    }

    #[test]
    fn extrinsics_reject_reflections() {
        let flip = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(CameraExtrinsics::new(flip, Vector3::zeros()).is_err());
        assert!(CameraExtrinsics::new(Matrix3::identity() * 1.001, Vector3::zeros()).is_err());
    }

    fn rigid(axis: [f64; 3], angle: f64, t: [f64; 3]) -> CameraExtrinsics {
        let axis = Vector3::from(axis);
        let axis = if axis.norm() < 1e-6 { Vector3::z() } else { axis };
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        CameraExtrinsics::new(*r.matrix(), Vector3::from(t)).unwrap()
    }

    proptest! {
        #[test]
        fn projection_inverts_backprojection(x in 0.0f64..640.0, y in 0.0f64..480.0, z in 0.05f64..50.0) {
            let k = k640();
            let p = backproject(x, y, z, &k).unwrap();
            let (u, v) = k.project(&p).unwrap();
            prop_assert!((u - x).abs() < 1e-6 && (v - y).abs() < 1e-6);
        }

        #[test]
        fn backprojection_linear_in_depth(x in 0.0f64..640.0, y in 0.0f64..480.0, z in 0.05f64..50.0) {
            let k = k640();
            let p1 = backproject(x, y, z, &k).unwrap();
            let p2 = backproject(x, y, 2.0 * z, &k).unwrap();
            prop_assert!((p2 - 2.0 * p1).abs().max() <= 1e-12 * p2.abs().max().max(1.0));
        }

        #[test]
        fn world_transform_is_rigid_and_invertible(
            axis in prop::array::uniform3(-1.0f64..1.0), angle in -3.1f64..3.1,
            t in prop::array::uniform3(-10.0f64..10.0),
            p in prop::array::uniform3(-5.0f64..5.0), q in prop::array::uniform3(-5.0f64..5.0),
        ) {
            let e = rigid(axis, angle, t);
            let (p, q) = (Vector3::from(p), Vector3::from(q));
            let (pw, qw) = (transform_to_world(&p, &e), transform_to_world(&q, &e));
            prop_assert!(((pw - qw).norm() - (p - q).norm()).abs() < 1e-9);
            prop_assert!((e.to_camera(&pw) - p).norm() < 1e-9);
        }

        #[test]
        fn disparity_depth_monotone_decreasing(a in 0.01f64..10.0, b in 0.0f64..2.0, d1 in -5.0f32..5.0, d2 in -5.0f32..5.0) {
            let cal = DepthCalibration { mode: DepthMode::AffineDisparity, a, b, epsilon: 1e-6 };
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(cal.apply(hi) <= cal.apply(lo));
        }
    }
}
