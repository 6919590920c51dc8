//! Seeded synthetic scenes with exact ground truth.
//!
//! A box robot drives on a floor plane under a fixed downward-looking camera. Frames
//! are rendered per pixel with the slab method. The pose reference point is the
//! center of the robot's top face, which is what an overhead camera actually sees.
//!
//! Randomness comes from ChaCha20 seeded with [`SeedableRng::seed_from_u64`]; every
//! frame uses its own stream, so frames are independent and can be rendered in any
//! order or in parallel.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{backproject, transform_to_world, CameraExtrinsics, CameraIntrinsics};
use crate::fusion::{extract_cloud, fuse_mc_samples, Frame, LogitStack, WeightedPointCloud};
use crate::raster::Raster;
use crate::splat::GaussianSplat;
use crate::wpca::{dominant_axis_error_deg, estimate_pose, Pose6DoF, PoseQuality};

pub const ROBOT_LOGIT: f32 = 4.0;
pub const BACKGROUND_LOGIT: f32 = -4.0;
/// Overhead camera height above the floor.
pub const CAMERA_HEIGHT: f64 = 3.0;
/// Confidence threshold used when the oracle extracts clouds.
pub const ORACLE_TAU: f64 = 0.5;

const TRAJECTORY_STREAM: u64 = u64::MAX;
const OUTLIER_WINDOW: f64 = 3.0;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("frame index {index} out of range for trajectory of {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Additive depth noise (m).
    pub depth_sigma: f64,
    /// Additive noise on every logit sample.
    pub logit_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScenario {
    pub seed: u64,
    /// Box half-extents in the body frame (x longest).
    pub robot_shape: [f64; 3],
    /// Ground-truth world poses (top-face center, body axes as columns).
    pub trajectory: Vec<Pose6DoF>,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
    pub noise: NoiseConfig,
    /// Fraction of background pixels near the robot that get robot-like logits.
    pub outlier_frac: f64,
    /// Weight given to outlier points in the weighted ablation arm.
    pub outlier_weight: f64,
    pub n_samples: usize,
    pub floor_z: f64,
}

/// One rendered frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrame {
    /// Metric depth; NaN where the ray misses both robot and floor.
    pub depth: Raster,
    pub logits: LogitStack,
    pub truth: Pose6DoF,
    /// Row-major per-pixel flags.
    pub robot_mask: Vec<bool>,
    pub outlier_mask: Vec<bool>,
}

pub const DEFAULT_ROBOT_SHAPE: [f64; 3] = [0.3, 0.15, 0.04];

/// Camera `CAMERA_HEIGHT` above the origin looking straight down; image x along
/// world +x, image y along world −y. Focal length scales with width (500 px at 640).
pub fn overhead_camera(width: u32, height: u32) -> (CameraIntrinsics, CameraExtrinsics) {
    let f = 500.0 * width as f64 / 640.0;
    let k = CameraIntrinsics { fx: f, fy: f, cx: width as f64 / 2.0, cy: height as f64 / 2.0, width, height };
    let r = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
    let e = CameraExtrinsics::new(r, Vector3::new(0.0, 0.0, CAMERA_HEIGHT)).expect("proper rotation");
    (k, e)
}

/// Ground-truth pose of a robot resting on the floor at `(x, y)` with heading `yaw`.
pub fn floor_pose(shape: [f64; 3], floor_z: f64, x: f64, y: f64, yaw: f64, timestamp: f64) -> Pose6DoF {
    Pose6DoF {
        translation: Vector3::new(x, y, floor_z + 2.0 * shape[2]),
        rotation: Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).into_inner(),
        extents: [shape[0] * shape[0] / 3.0, shape[1] * shape[1] / 3.0, 0.0],
        quality: PoseQuality::Ok,
        timestamp,
        frame: Frame::World,
    }
}

impl SyntheticScenario {
    /// Noiseless, outlier-free scene with a seeded smooth loop of `frames` poses at 10 Hz.
    pub fn overhead(seed: u64, frames: usize, width: u32, height: u32) -> Self {
        let (intrinsics, extrinsics) = overhead_camera(width, height);
        let shape = DEFAULT_ROBOT_SHAPE;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(TRAJECTORY_STREAM);
        let (ax, ay) = (rng.random_range(0.2..0.35), rng.random_range(0.15..0.3));
        let (phase, yaw0) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(-3.0..3.0));
        let trajectory = (0..frames)
            .map(|i| {
                let s = phase + std::f64::consts::TAU * i as f64 / frames.max(1) as f64;
                floor_pose(shape, 0.0, ax * s.cos(), ay * (2.0 * s).sin(), yaw0 + s, i as f64 * 0.1)
            })
            .collect();
        Self {
            seed,
            robot_shape: shape,
            trajectory,
            intrinsics,
            extrinsics,
            noise: NoiseConfig::default(),
            outlier_frac: 0.0,
            outlier_weight: 1.0,
            n_samples: 8,
            floor_z: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidScenario(m.into()));
        if !self.robot_shape.iter().all(|&h| h > 0.0 && h.is_finite()) {
            return bad("robot half-extents must be positive");
        }
        if !(0.0..=1.0).contains(&self.outlier_frac) || !(0.0..=1.0).contains(&self.outlier_weight) {
            return bad("outlier_frac and outlier_weight must lie in [0, 1]");
        }
        if !(self.noise.depth_sigma >= 0.0 && self.noise.logit_sigma >= 0.0) {
            return bad("noise sigmas must be non-negative");
        }
        if self.n_samples == 0 {
            return bad("n_samples must be positive");
        }
        self.intrinsics.validate().map_err(|e| SynthError::InvalidScenario(e.to_string()))
    }

    /// A ring of floor splats outside the trajectory area, for map and collision fixtures.
    pub fn obstacle_splats(&self, count: usize) -> Vec<GaussianSplat> {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(TRAJECTORY_STREAM - 1);
        (0..count)
            .map(|_| {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let radius = rng.random_range(1.4..2.0);
                let s = rng.random_range(0.03..0.08);
                GaussianSplat {
                    mean: Vector3::new(radius * angle.cos(), radius * angle.sin(), self.floor_z + rng.random_range(0.05..0.4)),
                    scale: Vector3::new(s, s * rng.random_range(0.5..1.0), s * rng.random_range(0.5..1.0)),
                    orientation: UnitQuaternion::from_euler_angles(0.0, 0.0, angle),
                    opacity: rng.random_range(0.5..1.0),
                    color: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                }
            })
            .collect()
    }
}

/// Slab-method entry distance along `dir` from `origin` into an axis-aligned box.
fn ray_box(origin: &Vector3<f64>, dir: &Vector3<f64>, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Option<f64> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..3 {
        if dir[i] == 0.0 {
            if origin[i] < lo[i] || origin[i] > hi[i] {
                return None;
            }
            continue;
        }
        let (a, b) = ((lo[i] - origin[i]) / dir[i], (hi[i] - origin[i]) / dir[i]);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

pub fn render_frame(scn: &SyntheticScenario, frame_idx: usize) -> Result<SyntheticFrame, SynthError> {
    render_with_stream(scn, frame_idx, frame_idx as u64)
}

/// Renders trajectory pose `frame_idx` using noise stream `stream`.
pub fn render_with_stream(scn: &SyntheticScenario, frame_idx: usize, stream: u64) -> Result<SyntheticFrame, SynthError> {
    scn.validate()?;
    let truth = *scn
        .trajectory
        .get(frame_idx)
        .ok_or(SynthError::IndexOutOfRange { index: frame_idx, len: scn.trajectory.len() })?;
    let k = &scn.intrinsics;
    let (w, h) = (k.width as usize, k.height as usize);
    let [a, b, c] = scn.robot_shape;
    let (lo, hi) = (Vector3::new(-a, -b, -2.0 * c), Vector3::new(a, b, 0.0));
    let r_cw = scn.extrinsics.rotation();
    let center = scn.extrinsics.camera_center();
    let body_origin = truth.rotation.transpose() * (center - truth.translation);

    let mut depth = vec![f32::NAN; w * h];
    let mut robot_mask = vec![false; w * h];
    for (i, (d, m)) in depth.iter_mut().zip(robot_mask.iter_mut()).enumerate() {
        // Camera-frame direction has unit z, so the ray parameter is the depth.
        let dir = r_cw * k.ray((i % w) as f64, (i / w) as f64);
        let floor = if dir.z != 0.0 { Some((scn.floor_z - center.z) / dir.z).filter(|t| *t > 0.0) } else { None };
        let robot = ray_box(&body_origin, &(truth.rotation.transpose() * dir), &lo, &hi);
        match (robot, floor) {
            (Some(t), f) if f.is_none_or(|f| t <= f) => {
                *d = t as f32;
                *m = true;
            }
            (_, Some(f)) => *d = f as f32,
            _ => {}
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(scn.seed);
    rng.set_stream(stream);
    let outlier_mask = pick_outliers(&robot_mask, w, h, scn.outlier_frac, &mut rng);

    if scn.noise.depth_sigma > 0.0 {
        let n = Normal::new(0.0, scn.noise.depth_sigma).expect("finite sigma");
        for d in depth.iter_mut().filter(|d| d.is_finite()) {
            *d += n.sample(&mut rng) as f32;
        }
    }
    let base: Vec<f32> = robot_mask
        .iter()
        .zip(&outlier_mask)
        .map(|(&r, &o)| if r || o { ROBOT_LOGIT } else { BACKGROUND_LOGIT })
        .collect();
    let noise = (scn.noise.logit_sigma > 0.0).then(|| Normal::new(0.0, scn.noise.logit_sigma).expect("finite sigma"));
    let samples = (0..scn.n_samples)
        .map(|_| {
            let data = match &noise {
                Some(n) => base.iter().map(|&l| l + n.sample(&mut rng) as f32).collect(),
                None => base.clone(),
            };
            Raster::new(k.width, k.height, 1, data).expect("sized to intrinsics")
        })
        .collect();
    Ok(SyntheticFrame {
        depth: Raster::new(k.width, k.height, 1, depth).expect("sized to intrinsics"),
        logits: LogitStack::new(samples, "robot").expect("finite logits"),
        truth,
        robot_mask,
        outlier_mask,
    })
}

/// Background pixels inside a window of `OUTLIER_WINDOW`× the robot's image bounding
/// box, sampled without replacement.
fn pick_outliers(robot: &[bool], w: usize, h: usize, frac: f64, rng: &mut ChaCha20Rng) -> Vec<bool> {
    let mut mask = vec![false; robot.len()];
    if frac <= 0.0 {
        return mask;
    }
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (i, _) in robot.iter().enumerate().filter(|(_, &r)| r) {
        let (x, y) = (i % w, i / w);
        (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x), y1.max(y));
    }
    if x0 == usize::MAX {
        return mask;
    }
    let grow = |lo: usize, hi: usize, limit: usize| {
        let (mid, half) = ((lo + hi) as f64 / 2.0, (hi - lo + 1) as f64 * OUTLIER_WINDOW / 2.0);
        ((mid - half).floor().max(0.0) as usize, ((mid + half).ceil() as usize).min(limit - 1))
    };
    let ((wx0, wx1), (wy0, wy1)) = (grow(x0, x1, w), grow(y0, y1, h));
    let candidates: Vec<usize> = (wy0..=wy1)
        .flat_map(|y| (wx0..=wx1).map(move |x| y * w + x))
        .filter(|&i| !robot[i])
        .collect();
    let count = ((frac * candidates.len() as f64).round() as usize).min(candidates.len());
    for j in index::sample(rng, candidates.len(), count) {
        mask[candidates[j]] = true;
    }
    mask
}

/// World-frame cloud of a frame with fused confidences as weights, plus the per-point
/// outlier flags.
pub fn frame_cloud(scn: &SyntheticScenario, frame: &SyntheticFrame) -> (WeightedPointCloud, Vec<bool>) {
    let conf = fuse_mc_samples(&frame.logits);
    let cloud = extract_cloud(&conf, &frame.depth, &scn.intrinsics, ORACLE_TAU).expect("dimensions match");
    let w = scn.intrinsics.width as usize;
    // extract_cloud emits row-major order; recover the pixel of each point.
    let mut flags = Vec::with_capacity(cloud.len());
    for (i, (&c, &z)) in conf.field().data().iter().zip(frame.depth.data()).enumerate() {
        if c >= ORACLE_TAU && backproject((i % w) as f64, (i / w) as f64, z as f64, &scn.intrinsics).is_ok() {
            flags.push(frame.outlier_mask[i]);
        }
    }
    debug_assert_eq!(flags.len(), cloud.len());
    let points = cloud.points.iter().map(|p| transform_to_world(p, &scn.extrinsics)).collect();
    (WeightedPointCloud::new(points, cloud.weights, Frame::World), flags)
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Per-trial dominant-axis errors (degrees) of the confidence-weighted and the
/// uniform-weight estimators. Trial `t` renders pose `t mod |trajectory|` with noise
/// stream `t`.
pub fn ablation_errors(scn: &SyntheticScenario, trials: usize) -> Result<Vec<(f64, f64)>, SynthError> {
    if scn.trajectory.is_empty() {
        return Err(SynthError::InvalidScenario("empty trajectory".into()));
    }
    (0..trials)
        .map(|t| {
            let frame = render_with_stream(scn, t % scn.trajectory.len(), t as u64)?;
            let (cloud, outliers) = frame_cloud(scn, &frame);
            let weighted: Vec<f64> = cloud
                .weights
                .iter()
                .zip(&outliers)
                .map(|(&c, &o)| if o { scn.outlier_weight } else { c })
                .collect();
            let uniform = vec![1.0; cloud.len()];
            let err = |weights: Vec<f64>| {
                let pose = estimate_pose(&WeightedPointCloud::new(cloud.points.clone(), weights, Frame::World), None, 0.0);
                if pose.is_valid() {
                    dominant_axis_error_deg(&pose.rotation, &frame.truth.rotation)
                } else {
                    90.0
                }
            };
            Ok((err(weighted), err(uniform)))
        })
        .collect()
}

/// Median dominant-axis errors `(weighted, uniform)` in degrees.
pub fn run_ablation(scn: &SyntheticScenario, trials: usize) -> Result<(f64, f64), SynthError> {
    if trials == 0 {
        return Err(SynthError::InvalidScenario("trials must be positive".into()));
    }
    let errors = ablation_errors(scn, trials)?;
    let (mut w, mut u): (Vec<f64>, Vec<f64>) = errors.into_iter().unzip();
    Ok((median(&mut w), median(&mut u)))
}
