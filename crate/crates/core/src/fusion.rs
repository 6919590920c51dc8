//! Monte-Carlo dropout fusion: N logit rasters → per-pixel confidence, and
//! confidence-weighted back-projection into a point cloud.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{backproject, CameraIntrinsics};
use crate::raster::Raster;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("logit stack is empty")]
    EmptyStack,
    #[error("dimension mismatch: expected {expected:?}, got {found:?}")]
    DimensionMismatch { expected: (u32, u32), found: (u32, u32) },
    #[error("sample {index} has {channels} channels, expected 1")]
    NotSingleChannel { index: usize, channels: u32 },
    #[error("sample {index} contains a non-finite logit")]
    NonFiniteLogit { index: usize },
    #[error("variance needs at least 2 samples, got {0}")]
    InsufficientSamples(usize),
    #[error("confidence threshold {0} outside [0, 1)")]
    InvalidThreshold(f64),
}

/// Logistic function, evaluated without overflow for any finite input.
#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// N single-channel logit rasters produced for one frame under one text prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitStack {
    samples: Vec<Raster>,
    prompt: String,
}

impl LogitStack {
    pub fn new(samples: Vec<Raster>, prompt: impl Into<String>) -> Result<Self, FusionError> {
        let first = samples.first().ok_or(FusionError::EmptyStack)?;
        let dims = (first.width(), first.height());
        for (index, s) in samples.iter().enumerate() {
            if s.channels() != 1 {
                return Err(FusionError::NotSingleChannel { index, channels: s.channels() });
            }
            if (s.width(), s.height()) != dims {
                return Err(FusionError::DimensionMismatch { expected: dims, found: (s.width(), s.height()) });
            }
            if s.data().iter().any(|v| !v.is_finite()) {
                return Err(FusionError::NonFiniteLogit { index });
            }
        }
        Ok(Self { samples, prompt: prompt.into() })
    }

    /// Treats each channel of an N-channel raster as one MC sample.
    pub fn from_channels(raster: &Raster, prompt: impl Into<String>) -> Result<Self, FusionError> {
        Self::new(raster.split_channels(), prompt)
    }

    pub fn samples(&self) -> &[Raster] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn width(&self) -> u32 {
        self.samples[0].width()
    }

    pub fn height(&self) -> u32 {
        self.samples[0].height()
    }

    pub fn to_channels(&self) -> Raster {
        Raster::stack_channels(&self.samples).expect("stack invariants hold")
    }
}

/// Single-channel double-precision map (confidence, variance).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    width: u32,
    height: u32,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Option<Self> {
        (data.len() == width as usize * height as usize).then_some(Self { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    /// Narrowed to binary32 for ZSR output.
    pub fn to_raster(&self) -> Raster {
        Raster::new(self.width, self.height, 1, self.data.iter().map(|&v| v as f32).collect())
            .expect("shape preserved")
    }
}

/// Per-pixel segmentation confidence in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap(ScalarField);

impl ConfidenceMap {
    pub fn new(field: ScalarField) -> Option<Self> {
        field.data.iter().all(|v| (0.0..=1.0).contains(v)).then_some(Self(field))
    }

    pub fn field(&self) -> &ScalarField {
        &self.0
    }

    pub fn width(&self) -> u32 {
        self.0.width
    }

    pub fn height(&self) -> u32 {
        self.0.height
    }

    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.0.get(x, y)
    }

    pub fn to_raster(&self) -> Raster {
        self.0.to_raster()
    }
}

// Rows per parallel work item; the per-pixel arithmetic does not depend on it.
const ROW_BLOCK: usize = 16;

fn per_pixel<F>(stack: &LogitStack, f: F) -> ScalarField
where
    F: Fn(&mut dyn Iterator<Item = f64>) -> f64 + Sync,
{
    let (w, h) = (stack.width() as usize, stack.height() as usize);
    let mut out = vec![0.0f64; w * h];
    out.par_chunks_mut(w * ROW_BLOCK).enumerate().for_each(|(block, chunk)| {
        let base = block * w * ROW_BLOCK;
        for (i, v) in chunk.iter_mut().enumerate() {
            let mut it = stack.samples.iter().map(|s| sigmoid(s.data()[base + i] as f64));
            *v = f(&mut it);
        }
    });
    ScalarField { width: w as u32, height: h as u32, data: out }
}

/// Mean of sigmoid(logit) over the MC samples, per pixel.
pub fn fuse_mc_samples(stack: &LogitStack) -> ConfidenceMap {
    let n = stack.len() as f64;
    let field = per_pixel(stack, |it| (it.sum::<f64>() / n).clamp(0.0, 1.0));
    ConfidenceMap(field)
}

/// Unbiased per-pixel variance of the sigmoid outputs.
pub fn fuse_variance(stack: &LogitStack) -> Result<ScalarField, FusionError> {
    let n = stack.len();
    if n < 2 {
        return Err(FusionError::InsufficientSamples(n));
    }
    Ok(per_pixel(stack, |it| {
        // Welford keeps the two-pass accuracy in one pass.
        let (mut mean, mut m2) = (0.0f64, 0.0f64);
        for (k, s) in it.enumerate() {
            let d = s - mean;
            mean += d / (k + 1) as f64;
            m2 += d * (s - mean);
        }
        m2 / (n - 1) as f64
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Frame {
    Camera,
    World,
}

/// 3-D points with per-point confidence weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPointCloud {
    pub points: Vec<Vector3<f64>>,
    pub weights: Vec<f64>,
    pub frame: Frame,
}

impl WeightedPointCloud {
    pub fn new(points: Vec<Vector3<f64>>, weights: Vec<f64>, frame: Frame) -> Self {
        assert_eq!(points.len(), weights.len(), "one weight per point");
        Self { points, weights, frame }
    }

    pub fn empty(frame: Frame) -> Self {
        Self { points: Vec::new(), weights: Vec::new(), frame }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Usable for pose estimation: non-empty with positive total weight.
    pub fn is_valid(&self) -> bool {
        self.total_weight() > 0.0
    }

    pub fn mean_weight(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.total_weight() / self.len() as f64
        }
    }
}

/// Back-projects every pixel with `conf ≥ tau` and a finite positive depth.
/// `tau = 0` keeps every pixel that has depth. Points are in row-major pixel order.
pub fn extract_cloud(
    conf: &ConfidenceMap,
    depth: &Raster,
    k: &CameraIntrinsics,
    tau: f64,
) -> Result<WeightedPointCloud, FusionError> {
    if !(0.0..1.0).contains(&tau) {
        return Err(FusionError::InvalidThreshold(tau));
    }
    let expected = (k.width, k.height);
    for found in [(conf.width(), conf.height()), (depth.width(), depth.height())] {
        if found != expected {
            return Err(FusionError::DimensionMismatch { expected, found });
        }
    }
    if depth.channels() != 1 {
        return Err(FusionError::NotSingleChannel { index: 0, channels: depth.channels() });
    }
    let mut cloud = WeightedPointCloud::empty(Frame::Camera);
    let w = k.width as usize;
    for (i, (&c, &z)) in conf.field().data().iter().zip(depth.data()).enumerate() {
        if c < tau {
            continue;
        }
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        if let Ok(p) = backproject(x, y, z as f64, k) {
            cloud.points.push(p);
            cloud.weights.push(c);
        }
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane(w: u32, h: u32, v: f32) -> Raster {
        Raster::filled(w, h, 1, v).unwrap()
    }

    fn naive_sigmoid(t: f64) -> f64 {
        1.0 / (1.0 + (-t).exp())
    }

    #[test]
    fn sigmoid_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(800.0), 1.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert!(sigmoid(-745.0) >= 0.0);
        for t in [-30.0, -1.0, 0.3, 12.0] {
            assert!((sigmoid(t) - naive_sigmoid(t)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_logits_give_half() {
        let stack = LogitStack::new(vec![plane(3, 2, 0.0)], "robot").unwrap();
        assert!(fuse_mc_samples(&stack).field().data().iter().all(|&c| c == 0.5));
    }

    #[test]
    fn opposite_logits_cancel() {
        let stack = LogitStack::new(vec![plane(2, 2, 100.0), plane(2, 2, -100.0)], "").unwrap();
        for &c in fuse_mc_samples(&stack).field().data() {
            assert!((c - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn three_sample_scalar_value() {
        let stack = LogitStack::new(vec![plane(1, 1, 0.0), plane(1, 1, 1.0), plane(1, 1, 2.0)], "").unwrap();
        let expected = (0.5 + naive_sigmoid(1.0) + naive_sigmoid(2.0)) / 3.0;
        let got = fuse_mc_samples(&stack).get(0, 0);
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.703_951_9).abs() < 1e-7);
    }

    #[test]
    fn stack_validation() {
        assert_eq!(LogitStack::new(vec![], "").unwrap_err(), FusionError::EmptyStack);
        assert_eq!(
            LogitStack::new(vec![plane(2, 2, 0.0), plane(3, 2, 0.0)], "").unwrap_err(),
            FusionError::DimensionMismatch { expected: (2, 2), found: (3, 2) }
        );
        let nan = Raster::new(1, 1, 1, vec![f32::NAN]).unwrap();
        assert_eq!(LogitStack::new(vec![nan], "").unwrap_err(), FusionError::NonFiniteLogit { index: 0 });
    }

    #[test]
    fn multichannel_stack_matches_planes() {
        let planes = vec![plane(4, 3, 1.0), plane(4, 3, -2.0)];
        let packed = Raster::stack_channels(&planes).unwrap();
        let a = LogitStack::from_channels(&packed, "p").unwrap();
        let b = LogitStack::new(planes, "p").unwrap();
        assert_eq!(fuse_mc_samples(&a), fuse_mc_samples(&b));
    }

    #[test]
    fn variance_cases() {
        let same = LogitStack::new(vec![plane(2, 2, 0.7), plane(2, 2, 0.7)], "").unwrap();
        assert!(fuse_variance(&same).unwrap().data().iter().all(|&v| v == 0.0));

        let split = LogitStack::new(vec![plane(1, 1, 100.0), plane(1, 1, -100.0)], "").unwrap();
        assert!((fuse_variance(&split).unwrap().data()[0] - 0.5).abs() < 1e-6);

        let one = LogitStack::new(vec![plane(1, 1, 0.0)], "").unwrap();
        assert_eq!(fuse_variance(&one).unwrap_err(), FusionError::InsufficientSamples(1));
    }

    #[test]
    fn variance_matches_direct_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let logits: Vec<f32> = (0..4).map(|_| rng.random_range(-6.0..6.0)).collect();
            let stack = LogitStack::new(logits.iter().map(|&l| plane(1, 1, l)).collect(), "").unwrap();
            let s: Vec<f64> = logits.iter().map(|&l| naive_sigmoid(l as f64)).collect();
            let sum: f64 = s.iter().sum();
            let sum_sq: f64 = s.iter().map(|v| v * v).sum();
            let direct = (sum_sq - sum * sum / 4.0) / 3.0;
            assert!((fuse_variance(&stack).unwrap().data()[0] - direct).abs() < 1e-9);
        }
    }

    fn k32() -> CameraIntrinsics {
        CameraIntrinsics::new(40.0, 40.0, 16.0, 16.0, 32, 32).unwrap()
    }

    fn conf_map(w: u32, h: u32, data: Vec<f64>) -> ConfidenceMap {
        ConfidenceMap::new(ScalarField::new(w, h, data).unwrap()).unwrap()
    }

    #[test]
    fn below_threshold_gives_empty_cloud() {
        let k = k32();
        let conf = conf_map(32, 32, vec![0.2; 1024]);
        let cloud = extract_cloud(&conf, &plane(32, 32, 1.0), &k, 0.5).unwrap();
        assert!(cloud.is_empty());
        assert!(!cloud.is_valid());
    }

    #[test]
    fn single_principal_pixel() {
        let k = k32();
        let mut c = vec![0.0; 1024];
        c[16 * 32 + 16] = 0.9;
        let cloud = extract_cloud(&conf_map(32, 32, c), &plane(32, 32, 2.0), &k, 0.5).unwrap();
        assert_eq!(cloud.points, vec![Vector3::new(0.0, 0.0, 2.0)]);
        assert_eq!(cloud.weights, vec![0.9]);
        assert_eq!(cloud.frame, Frame::Camera);
    }

    #[test]
    fn nan_depth_excluded_and_dims_checked() {
        let k = k32();
        let conf = conf_map(32, 32, vec![1.0; 1024]);
        let depth = plane(32, 32, f32::NAN);
        assert!(extract_cloud(&conf, &depth, &k, 0.5).unwrap().is_empty());
        assert!(matches!(
            extract_cloud(&conf, &plane(16, 32, 1.0), &k, 0.5),
            Err(FusionError::DimensionMismatch { .. })
        ));
        assert_eq!(extract_cloud(&conf, &plane(32, 32, 1.0), &k, 1.0).unwrap_err(), FusionError::InvalidThreshold(1.0));
    }

    #[test]
    fn cloud_matches_brute_force_loop() {
        let k = k32();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let conf: Vec<f64> = (0..1024).map(|_| rng.random::<f64>()).collect();
            let depth: Vec<f32> = (0..1024)
                .map(|_| match rng.random_range(0..10) {
                    0 => f32::NAN,
                    1 => -1.0,
                    2 => 0.0,
                    _ => rng.random_range(0.1..5.0),
                })
                .collect();
            let tau = rng.random_range(0.0..0.9);
            let cmap = conf_map(32, 32, conf.clone());
            let draster = Raster::new(32, 32, 1, depth.clone()).unwrap();
            let cloud = extract_cloud(&cmap, &draster, &k, tau).unwrap();

            let (mut pts, mut ws) = (Vec::new(), Vec::new());
            for row in 0..32 {
                for col in 0..32 {
                    let c = conf[row * 32 + col];
                    let z = depth[row * 32 + col] as f64;
                    if c >= tau && z.is_finite() && z > 0.0 {
                        pts.push(Vector3::new(
                            (col as f64 - 16.0) * z / 40.0,
                            (row as f64 - 16.0) * z / 40.0,
                            z,
                        ));
                        ws.push(c);
                    }
                }
            }
            assert_eq!(cloud.points, pts);
            assert_eq!(cloud.weights, ws);
        }
    }

    proptest! {
        #[test]
        fn fusion_permutation_invariant(logits in prop::collection::vec(-20.0f32..20.0, 1..9), rot in 0usize..8) {
            let a = LogitStack::new(logits.iter().map(|&l| plane(1, 1, l)).collect(), "").unwrap();
            let mut rotated = logits.clone();
            let r = rot % rotated.len();
            rotated.rotate_left(r);
            rotated.reverse();
            let b = LogitStack::new(rotated.iter().map(|&l| plane(1, 1, l)).collect(), "").unwrap();
            let (ca, cb) = (fuse_mc_samples(&a).get(0, 0), fuse_mc_samples(&b).get(0, 0));
            prop_assert!((ca - cb).abs() < 1e-12);
        }

        #[test]
        fn fusion_monotone_in_each_logit(logits in prop::collection::vec(-20.0f32..20.0, 1..9), idx in 0usize..8, bump in 0.0f32..10.0) {
            let i = idx % logits.len();
            let a = LogitStack::new(logits.iter().map(|&l| plane(1, 1, l)).collect(), "").unwrap();
            let mut raised = logits.clone();
            raised[i] += bump;
            let b = LogitStack::new(raised.iter().map(|&l| plane(1, 1, l)).collect(), "").unwrap();
            prop_assert!(fuse_mc_samples(&b).get(0, 0) >= fuse_mc_samples(&a).get(0, 0));
        }

        #[test]
        fn single_sample_is_elementwise_sigmoid(data in prop::collection::vec(-50.0f32..50.0, 12)) {
            let r = Raster::new(4, 3, 1, data.clone()).unwrap();
            let conf = fuse_mc_samples(&LogitStack::new(vec![r], "").unwrap());
            for (c, l) in conf.field().data().iter().zip(&data) {
                prop_assert_eq!(*c, sigmoid(*l as f64));
            }
        }

        #[test]
        fn cloud_count_equals_predicate_count(seed in any::<u64>(), tau in 0.0f64..0.99) {
            let k = k32();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let conf: Vec<f64> = (0..1024).map(|_| rng.random::<f64>()).collect();
            let depth: Vec<f32> = (0..1024).map(|_| if rng.random_bool(0.2) { f32::NAN } else { rng.random_range(0.5..3.0) }).collect();
            let expected = conf.iter().zip(&depth).filter(|(c, z)| **c >= tau && z.is_finite()).count();
            let cloud = extract_cloud(&conf_map(32, 32, conf), &Raster::new(32, 32, 1, depth).unwrap(), &k, tau).unwrap();
            prop_assert_eq!(cloud.len(), expected);
        }
    }
}
