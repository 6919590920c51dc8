//! `key = value` pipeline configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Vector values are separated
//! by commas and/or whitespace. Only the six intrinsics are mandatory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use teleassist_core::camera::{CameraExtrinsics, CameraIntrinsics, DepthCalibration, DepthMode};
use teleassist_core::splat::{DEFAULT_OPACITY_FLOOR, DEFAULT_ROBOT_RADIUS, DEFAULT_SIGMA_GATE};
use teleassist_core::tracker::TrackerConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("bad value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendMode {
    Files,
    Http,
}

impl FromStr for BackendMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "FILES" => Ok(Self::Files),
            "HTTP" => Ok(Self::Http),
            other => Err(format!("unknown backend mode {other}")),
        }
    }
}

impl std::fmt::Display for BackendMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Files => "FILES",
            Self::Http => "HTTP",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
    pub calibration: DepthCalibration,
    pub tau: f64,
    pub n_samples: usize,
    pub degeneracy_ratio: f64,
    pub tracker: TrackerConfig,
    pub replan_period: f64,
    pub smooth_iterations: usize,
    pub seed: u64,
    pub backend: BackendMode,
    pub backend_url: Option<String>,
    pub backend_timeout_ms: u64,
    pub prompt: String,
    pub robot_radius: f64,
    pub sigma_gate: f64,
    pub warn_margin: f64,
    pub voxel_size: f64,
    pub opacity_floor: f64,
}

const KEYS: &[&str] = &[
    "fx", "fy", "cx", "cy", "width", "height", "rotation", "translation", "depth_mode", "depth_a", "depth_b",
    "depth_epsilon", "tau", "n_samples", "degeneracy_ratio", "alpha_t", "alpha_r", "kidnap_dist", "kidnap_conf",
    "ghost_limit", "rate_hz", "replan_period", "smooth_iterations", "seed", "backend", "backend_url",
    "backend_timeout_ms", "prompt", "robot_radius", "sigma_gate", "warn_margin", "voxel_size", "opacity_floor",
];

struct Entries(BTreeMap<String, String>);

impl Entries {
    fn raw(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn parse<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e: T::Err| bad(key, e.to_string())),
        }
    }

    fn required<T: FromStr>(&self, key: &'static str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key).ok_or(ConfigError::Missing(key))?;
        v.parse().map_err(|e: T::Err| bad(key, e.to_string()))
    }

    fn vector(&self, key: &str, n: usize) -> Result<Option<Vec<f64>>, ConfigError> {
        let Some(v) = self.raw(key) else { return Ok(None) };
        let vals = parse_numbers(v).map_err(|e| bad(key, e))?;
        if vals.len() != n {
            return Err(bad(key, format!("expected {n} numbers, found {}", vals.len())));
        }
        Ok(Some(vals))
    }
}

fn bad(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue { key: key.to_string(), reason: reason.into() }
}

/// Splits on commas and whitespace.
pub fn parse_numbers(s: &str) -> Result<Vec<f64>, String> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("`{t}` is not a number")))
        .collect()
}

impl PipelineConfig {
    /// Defaults for everything except the camera.
    pub fn with_camera(intrinsics: CameraIntrinsics, extrinsics: CameraExtrinsics) -> Self {
        Self {
            intrinsics,
            extrinsics,
            calibration: DepthCalibration::default(),
            tau: 0.5,
            n_samples: 8,
            degeneracy_ratio: teleassist_core::wpca::DEFAULT_DEGENERACY_RATIO,
            tracker: TrackerConfig::default(),
            replan_period: teleassist_core::planner::DEFAULT_REPLAN_PERIOD,
            smooth_iterations: 200,
            seed: 0,
            backend: BackendMode::Files,
            backend_url: None,
            backend_timeout_ms: 200,
            prompt: "robot".to_string(),
            robot_radius: DEFAULT_ROBOT_RADIUS,
            sigma_gate: DEFAULT_SIGMA_GATE,
            warn_margin: 0.3,
            voxel_size: 0.1,
            opacity_floor: DEFAULT_OPACITY_FLOOR,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        std::fs::read_to_string(path)?.parse()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.intrinsics.validate().map_err(|e| bad("intrinsics", e.to_string()))?;
        self.calibration.validate().map_err(|e| bad("depth_mode", e.to_string()))?;
        self.tracker.validate().map_err(|e| bad("tracker", e.to_string()))?;
        if !(0.0..1.0).contains(&self.tau) {
            return Err(bad("tau", "must lie in [0, 1)"));
        }
        if self.n_samples == 0 {
            return Err(bad("n_samples", "must be at least 1"));
        }
        for (key, v) in [
            ("replan_period", self.replan_period),
            ("robot_radius", self.robot_radius),
            ("warn_margin", self.warn_margin),
            ("degeneracy_ratio", self.degeneracy_ratio),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(key, "must be finite and non-negative"));
            }
        }
        for (key, v) in [("sigma_gate", self.sigma_gate), ("voxel_size", self.voxel_size)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(key, "must be positive"));
            }
        }
        if self.backend == BackendMode::Http && self.backend_url.is_none() {
            return Err(ConfigError::Missing("backend_url"));
        }
        Ok(())
    }

    /// Serializes in the same format `FromStr` reads.
    pub fn to_cfg_string(&self) -> String {
        let k = &self.intrinsics;
        let r = self.extrinsics.rotation();
        let t = self.extrinsics.translation();
        let mut s = String::new();
        let mut line = |key: &str, value: String| writeln!(s, "{key} = {value}").expect("write to String");
        line("fx", k.fx.to_string());
        line("fy", k.fy.to_string());
        line("cx", k.cx.to_string());
        line("cy", k.cy.to_string());
        line("width", k.width.to_string());
        line("height", k.height.to_string());
        let rot: Vec<String> = (0..3).flat_map(|i| (0..3).map(move |j| r[(i, j)].to_string())).collect();
        line("rotation", rot.join(", "));
        line("translation", format!("{}, {}, {}", t.x, t.y, t.z));
        line("depth_mode", self.calibration.mode.to_string());
        line("depth_a", self.calibration.a.to_string());
        line("depth_b", self.calibration.b.to_string());
        line("depth_epsilon", self.calibration.epsilon.to_string());
        line("tau", self.tau.to_string());
        line("n_samples", self.n_samples.to_string());
        line("degeneracy_ratio", self.degeneracy_ratio.to_string());
        line("alpha_t", self.tracker.alpha_t.to_string());
        line("alpha_r", self.tracker.alpha_r.to_string());
        line("kidnap_dist", self.tracker.kidnap_dist.to_string());
        line("kidnap_conf", self.tracker.kidnap_conf.to_string());
        line("ghost_limit", self.tracker.ghost_limit.to_string());
        line("rate_hz", self.tracker.rate_hz.to_string());
        line("replan_period", self.replan_period.to_string());
        line("smooth_iterations", self.smooth_iterations.to_string());
        line("seed", self.seed.to_string());
        line("backend", self.backend.to_string());
        if let Some(url) = &self.backend_url {
            line("backend_url", url.clone());
        }
        line("backend_timeout_ms", self.backend_timeout_ms.to_string());
        line("prompt", self.prompt.clone());
        line("robot_radius", self.robot_radius.to_string());
        line("sigma_gate", self.sigma_gate.to_string());
        line("warn_margin", self.warn_margin.to_string());
        line("voxel_size", self.voxel_size.to_string());
        line("opacity_floor", self.opacity_floor.to_string());
        s
    }
}

impl FromStr for PipelineConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: n + 1 })?;
            let key = k.trim().to_ascii_lowercase();
            if !KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key));
            }
            if map.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(ConfigError::DuplicateKey(key));
            }
        }
        let e = Entries(map);

        let intrinsics = CameraIntrinsics {
            fx: e.required("fx")?,
            fy: e.required("fy")?,
            cx: e.required("cx")?,
            cy: e.required("cy")?,
            width: e.required("width")?,
            height: e.required("height")?,
        };
        let rotation = e.vector("rotation", 9)?.map(|v| Matrix3::from_row_slice(&v)).unwrap_or_else(Matrix3::identity);
        let translation = e.vector("translation", 3)?.map(|v| Vector3::from_column_slice(&v)).unwrap_or_else(Vector3::zeros);
        let extrinsics = CameraExtrinsics::new(rotation, translation).map_err(|err| bad("rotation", err.to_string()))?;

        let mut cfg = Self::with_camera(intrinsics, extrinsics);
        let cal = DepthCalibration::default();
        cfg.calibration = DepthCalibration {
            mode: e.parse::<DepthMode>("depth_mode", cal.mode)?,
            a: e.parse("depth_a", cal.a)?,
            b: e.parse("depth_b", cal.b)?,
            epsilon: e.parse("depth_epsilon", cal.epsilon)?,
        };
        cfg.tau = e.parse("tau", cfg.tau)?;
        cfg.n_samples = e.parse("n_samples", cfg.n_samples)?;
        cfg.degeneracy_ratio = e.parse("degeneracy_ratio", cfg.degeneracy_ratio)?;
        let t = cfg.tracker;
        cfg.tracker = TrackerConfig {
            alpha_t: e.parse("alpha_t", t.alpha_t)?,
            alpha_r: e.parse("alpha_r", t.alpha_r)?,
            kidnap_dist: e.parse("kidnap_dist", t.kidnap_dist)?,
            kidnap_conf: e.parse("kidnap_conf", t.kidnap_conf)?,
            ghost_limit: e.parse("ghost_limit", t.ghost_limit)?,
            rate_hz: e.parse("rate_hz", t.rate_hz)?,
        };
        cfg.replan_period = e.parse("replan_period", cfg.replan_period)?;
        cfg.smooth_iterations = e.parse("smooth_iterations", cfg.smooth_iterations)?;
        cfg.seed = e.parse("seed", cfg.seed)?;
        cfg.backend = e.parse("backend", cfg.backend)?;
        cfg.backend_url = e.raw("backend_url").map(str::to_string);
        cfg.backend_timeout_ms = e.parse("backend_timeout_ms", cfg.backend_timeout_ms)?;
        if let Some(p) = e.raw("prompt") {
            cfg.prompt = p.to_string();
        }
        cfg.robot_radius = e.parse("robot_radius", cfg.robot_radius)?;
        cfg.sigma_gate = e.parse("sigma_gate", cfg.sigma_gate)?;
        cfg.warn_margin = e.parse("warn_margin", cfg.warn_margin)?;
        cfg.voxel_size = e.parse("voxel_size", cfg.voxel_size)?;
        cfg.opacity_floor = e.parse("opacity_floor", cfg.opacity_floor)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
