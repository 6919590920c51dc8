//! Scenario directories: per-frame rasters plus ground truth.
//!
//! ```text
//! frame_0000_depth.zsr     single-channel depth
//! frame_0000_mc00.zsr      one logit raster per MC sample
//! truth.jsonl              one TruthRecord per frame
//! scenario.cfg             pipeline config matching the camera
//! map.ply                  obstacle splats (optional)
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use teleassist_core::camera::DepthCalibration;
use teleassist_core::fusion::{FusionError, LogitStack};
use teleassist_core::raster::{read_raster, write_raster, Raster, RasterError};
use teleassist_core::splat::{write_ply, SplatError};
use teleassist_core::synth::{render_frame, SynthError, SyntheticScenario};
use teleassist_core::wpca::Pose6DoF;
use thiserror::Error;

use crate::config::PipelineConfig;

pub const CONFIG_FILE: &str = "scenario.cfg";
pub const TRUTH_FILE: &str = "truth.jsonl";
pub const MAP_FILE: &str = "map.ply";
/// Collision sphere for the synthetic robot; the obstacle ring starts 1.4 m out.
pub const SYNTH_ROBOT_RADIUS: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{0}: no frames found")]
    Empty(PathBuf),
    #[error("frame {0} has no MC samples")]
    NoSamples(usize),
    #[error("{path}: {source}")]
    Raster { path: PathBuf, source: RasterError },
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Splat(#[from] SplatError),
    #[error("truth line {line}: {source}")]
    Truth { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn depth_file(frame: usize) -> String {
    format!("frame_{frame:04}_depth.zsr")
}

pub fn sample_file(frame: usize, sample: usize) -> String {
    format!("frame_{frame:04}_mc{sample:02}.zsr")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub frame: usize,
    pub t: f64,
    pub translation: [f64; 3],
    /// Row-major.
    pub rotation: [f64; 9],
    pub extents: [f64; 3],
}

impl TruthRecord {
    pub fn new(frame: usize, pose: &Pose6DoF) -> Self {
        let r = &pose.rotation;
        Self {
            frame,
            t: pose.timestamp,
            translation: pose.translation.into(),
            rotation: std::array::from_fn(|i| r[(i / 3, i % 3)]),
            extents: pose.extents,
        }
    }
}

/// Read access to a scenario directory.
#[derive(Debug, Clone)]
pub struct ScenarioDir {
    root: PathBuf,
    frames: usize,
}

impl ScenarioDir {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ScenarioError> {
        let root = root.into();
        let frames = (0..).take_while(|&i| root.join(depth_file(i)).is_file()).count();
        if frames == 0 {
            return Err(ScenarioError::Empty(root));
        }
        Ok(Self { root, frames })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    fn read(&self, name: &str) -> Result<Raster, ScenarioError> {
        let path = self.root.join(name);
        read_raster(&path).map_err(|source| ScenarioError::Raster { path, source })
    }

    pub fn depth(&self, frame: usize) -> Result<Raster, ScenarioError> {
        self.read(&depth_file(frame))
    }

    pub fn depth_bytes(&self, frame: usize) -> Result<Vec<u8>, ScenarioError> {
        Ok(fs::read(self.root.join(depth_file(frame)))?)
    }

    pub fn logits(&self, frame: usize, prompt: &str) -> Result<LogitStack, ScenarioError> {
        let samples = (0..)
            .map(|s| self.root.join(sample_file(frame, s)))
            .take_while(|p| p.is_file())
            .map(|p| read_raster(&p).map_err(|source| ScenarioError::Raster { path: p.clone(), source }))
            .collect::<Result<Vec<_>, _>>()?;
        if samples.is_empty() {
            return Err(ScenarioError::NoSamples(frame));
        }
        Ok(LogitStack::new(samples, prompt)?)
    }

    pub fn config(&self) -> Option<PathBuf> {
        Some(self.root.join(CONFIG_FILE)).filter(|p| p.is_file())
    }

    pub fn truth(&self) -> Result<Vec<TruthRecord>, ScenarioError> {
        let file = fs::File::open(self.root.join(TRUTH_FILE))?;
        BufReader::new(file)
            .lines()
            .enumerate()
            .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
            .map(|(i, l)| serde_json::from_str(&l?).map_err(|source| ScenarioError::Truth { line: i + 1, source }))
            .collect()
    }
}

/// Pipeline config matching a synthetic scenario (metric depth, identity calibration).
pub fn scenario_config(scn: &SyntheticScenario) -> PipelineConfig {
    let mut cfg = PipelineConfig::with_camera(scn.intrinsics, scn.extrinsics);
    cfg.calibration = DepthCalibration::identity();
    cfg.n_samples = scn.n_samples;
    cfg.seed = scn.seed;
    cfg.robot_radius = SYNTH_ROBOT_RADIUS;
    cfg
}

/// Renders every frame of `scn` into `root` and writes truth, config and an obstacle map.
pub fn write_scenario(root: &Path, scn: &SyntheticScenario, obstacles: usize) -> Result<(), ScenarioError> {
    fs::create_dir_all(root)?;
    let truths = (0..scn.trajectory.len())
        .into_par_iter()
        .map(|i| -> Result<TruthRecord, ScenarioError> {
            let f = render_frame(scn, i)?;
            let write = |r: &Raster, name: String| {
                let path = root.join(name);
                write_raster(r, &path).map_err(|source| ScenarioError::Raster { path, source })
            };
            write(&f.depth, depth_file(i))?;
            for (s, sample) in f.logits.samples().iter().enumerate() {
                write(sample, sample_file(i, s))?;
            }
            Ok(TruthRecord::new(i, &f.truth))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = BufWriter::new(fs::File::create(root.join(TRUTH_FILE))?);
    for t in &truths {
        writeln!(out, "{}", serde_json::to_string(t).expect("plain data serializes"))?;
    }
    out.flush()?;
    fs::write(root.join(CONFIG_FILE), scenario_config(scn).to_cfg_string())?;
    if obstacles > 0 {
        write_ply(root.join(MAP_FILE), &scn.obstacle_splats(obstacles))?;
    }
    Ok(())
}
