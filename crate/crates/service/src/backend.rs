//! Where frames come from: pre-rendered files, memory, or an HTTP segmentation backend.
//!
//! HTTP protocol: `POST <endpoint>` with body `<BackendRequest JSON>\n<image bytes>`;
//! the response body is an N-channel ZSR raster of logits.

use std::io::Read;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use teleassist_core::fusion::LogitStack;
use teleassist_core::raster::Raster;
use thiserror::Error;

use crate::scenario::{ScenarioDir, ScenarioError};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend timed out after {0:?}")]
    BackendTimeout(Duration),
    #[error("malformed backend response: {0}")]
    BackendMalformed(String),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub frame_id: u64,
    pub image_ref: String,
    pub prompt: String,
    pub n_samples: usize,
}

/// Request body: header JSON, a newline, then the image.
pub fn encode_request(req: &BackendRequest, image: &[u8]) -> Vec<u8> {
    let mut body = serde_json::to_vec(req).expect("plain data serializes");
    body.push(b'\n');
    body.extend_from_slice(image);
    body
}

/// Splits a request body back into header and image.
pub fn decode_request(body: &[u8]) -> Option<(BackendRequest, &[u8])> {
    let nl = body.iter().position(|&b| b == b'\n')?;
    let req = serde_json::from_slice(&body[..nl]).ok()?;
    Some((req, &body[nl + 1..]))
}

pub fn fetch_backend(
    req: &BackendRequest,
    endpoint: &str,
    image: &[u8],
    timeout: Duration,
    expected: (u32, u32),
) -> Result<LogitStack, BackendError> {
    if req.n_samples == 0 {
        return Err(BackendError::BackendMalformed("n_samples must be at least 1".into()));
    }
    let started = Instant::now();
    let agent = ureq::AgentBuilder::new().timeout(timeout).build();
    let timed_out = |e: &dyn std::fmt::Display| {
        if started.elapsed() >= timeout {
            BackendError::BackendTimeout(timeout)
        } else {
            BackendError::Unavailable(e.to_string())
        }
    };
    let resp = agent
        .post(endpoint)
        .set("Content-Type", "application/octet-stream")
        .send_bytes(&encode_request(req, image))
        .map_err(|e| match e {
            ureq::Error::Status(code, _) => BackendError::Unavailable(format!("HTTP {code}")),
            other => timed_out(&other),
        })?;
    let mut body = Vec::new();
    resp.into_reader().read_to_end(&mut body).map_err(|e| timed_out(&e))?;
    let raster = Raster::from_zsr_bytes(&body).map_err(|e| BackendError::BackendMalformed(e.to_string()))?;
    let found = (raster.width(), raster.height());
    if found != expected {
        return Err(BackendError::BackendMalformed(format!(
            "raster is {}x{}, config expects {}x{}",
            found.0, found.1, expected.0, expected.1
        )));
    }
    LogitStack::from_channels(&raster, req.prompt.clone()).map_err(|e| BackendError::BackendMalformed(e.to_string()))
}

/// Supplies depth and logits for a frame id. Sources cycle through their frames.
pub trait FrameSource: Send {
    fn frame(&mut self, frame_id: u64, prompt: &str) -> Result<(Raster, LogitStack), BackendError>;
}

/// Frames held in memory.
pub struct MemorySource {
    frames: Vec<(Raster, LogitStack)>,
}

impl MemorySource {
    pub fn new(frames: Vec<(Raster, LogitStack)>) -> Self {
        assert!(!frames.is_empty(), "memory source needs at least one frame");
        Self { frames }
    }
}

impl FrameSource for MemorySource {
    fn frame(&mut self, frame_id: u64, _prompt: &str) -> Result<(Raster, LogitStack), BackendError> {
        Ok(self.frames[(frame_id % self.frames.len() as u64) as usize].clone())
    }
}

/// Depth and logits read from a scenario directory.
pub struct FilesSource {
    dir: ScenarioDir,
}

impl FilesSource {
    pub fn new(dir: ScenarioDir) -> Self {
        Self { dir }
    }
}

impl FrameSource for FilesSource {
    fn frame(&mut self, frame_id: u64, prompt: &str) -> Result<(Raster, LogitStack), BackendError> {
        let i = (frame_id % self.dir.frames() as u64) as usize;
        Ok((self.dir.depth(i)?, self.dir.logits(i, prompt)?))
    }
}

/// Depth from a scenario directory, logits from the HTTP backend. The depth file is
/// sent as the image.
pub struct HttpSource {
    dir: ScenarioDir,
    endpoint: String,
    timeout: Duration,
    n_samples: usize,
    expected: (u32, u32),
}

impl HttpSource {
    pub fn new(dir: ScenarioDir, endpoint: String, timeout: Duration, n_samples: usize, expected: (u32, u32)) -> Self {
        Self { dir, endpoint, timeout, n_samples, expected }
    }
}

impl FrameSource for HttpSource {
    fn frame(&mut self, frame_id: u64, prompt: &str) -> Result<(Raster, LogitStack), BackendError> {
        let i = (frame_id % self.dir.frames() as u64) as usize;
        let image = self.dir.depth_bytes(i)?;
        let req = BackendRequest {
            frame_id,
            image_ref: crate::scenario::depth_file(i),
            prompt: prompt.to_string(),
            n_samples: self.n_samples,
        };
        let logits = fetch_backend(&req, &self.endpoint, &image, self.timeout, self.expected)?;
        Ok((self.dir.depth(i)?, logits))
    }
}
