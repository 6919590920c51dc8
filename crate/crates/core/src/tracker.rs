//! Temporal pose tracking with ghosting and kidnap recovery.
//!
//! Mode machine:
//!
//! ```text
//!   TRACKED ──miss──▶ GHOSTED ──misses > ghost_limit──▶ LOST
//!      ▲                 │                               │
//!      └──── measurement ┘            confident measurement
//!      ▲                                                 │
//!      └─────────────────────────────────────────────────┘
//!   any ──confident jump > kidnap_dist──▶ KIDNAPPED (re-initialized) ──▶ TRACKED
//! ```
//!
//! A jump larger than `kidnap_dist` with mean confidence below `kidnap_conf` is an
//! outlier and counts as a missed detection.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::Frame;
use crate::wpca::{Pose6DoF, PoseQuality};

#[derive(Debug, Error, PartialEq)]
pub enum TrackError {
    #[error("time went backwards: last update {last}, now {now}")]
    TimeReversal { last: f64, now: f64 },
    #[error("measurement must be in the world frame")]
    FrameMismatch,
    #[error("invalid tracker config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrackMode {
    Tracked,
    Ghosted,
    Kidnapped,
    Lost,
}

impl TrackMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrackMode::Tracked => "TRACKED",
            TrackMode::Ghosted => "GHOSTED",
            TrackMode::Kidnapped => "KIDNAPPED",
            TrackMode::Lost => "LOST",
        }
    }
}

impl std::fmt::Display for TrackMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    /// Translation smoothing weight on the measurement, in (0, 1].
    pub alpha_t: f64,
    /// Fraction of the geodesic toward the measured rotation, in (0, 1].
    pub alpha_r: f64,
    pub kidnap_dist: f64,
    pub kidnap_conf: f64,
    pub ghost_limit: u32,
    pub rate_hz: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { alpha_t: 0.5, alpha_r: 0.5, kidnap_dist: 1.0, kidnap_conf: 0.6, ghost_limit: 10, rate_hz: 10.0 }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackError> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.alpha_t) || !unit(self.alpha_r) {
            return Err(TrackError::InvalidConfig("alpha_t and alpha_r must lie in (0, 1]".into()));
        }
        if !(self.kidnap_dist > 0.0 && self.kidnap_conf > 0.0 && self.rate_hz > 0.0 && self.ghost_limit > 0) {
            return Err(TrackError::InvalidConfig("thresholds and rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    pub pose: Pose6DoF,
    pub velocity: Vector3<f64>,
    pub mode: TrackMode,
    pub misses: u32,
    pub last_update: f64,
}

impl TrackState {
    /// No track yet.
    pub fn lost(now: f64, cfg: &TrackerConfig) -> Self {
        Self {
            pose: Pose6DoF::invalid(now, Frame::World, Matrix3::identity()),
            velocity: Vector3::zeros(),
            mode: TrackMode::Lost,
            misses: cfg.ghost_limit + 1,
            last_update: now,
        }
    }

    fn reinitialized(measurement: &Pose6DoF, now: f64, mode: TrackMode) -> Self {
        Self {
            pose: Pose6DoF { timestamp: now, ..*measurement },
            velocity: Vector3::zeros(),
            mode,
            misses: 0,
            last_update: now,
        }
    }

    /// Mode-dependent invariants.
    pub fn is_consistent(&self, cfg: &TrackerConfig) -> bool {
        match self.mode {
            TrackMode::Tracked | TrackMode::Kidnapped => self.misses == 0,
            TrackMode::Ghosted => self.misses > 0 && self.misses <= cfg.ghost_limit,
            TrackMode::Lost => self.misses > cfg.ghost_limit,
        }
    }
}

/// Constant-velocity extrapolation of the tracked pose to `now`.
pub fn predict(state: &TrackState, now: f64) -> Result<Pose6DoF, TrackError> {
    let dt = now - state.last_update;
    if dt < 0.0 {
        return Err(TrackError::TimeReversal { last: state.last_update, now });
    }
    Ok(Pose6DoF { translation: state.pose.translation + state.velocity * dt, timestamp: now, ..state.pose })
}

fn missed(state: &TrackState, now: f64, cfg: &TrackerConfig) -> Result<TrackState, TrackError> {
    let misses = state.misses.saturating_add(1);
    if state.mode == TrackMode::Lost || misses > cfg.ghost_limit {
        let mut lost = *state;
        lost.mode = TrackMode::Lost;
        lost.misses = misses.max(cfg.ghost_limit + 1);
        return Ok(lost);
    }
    Ok(TrackState { pose: predict(state, now)?, mode: TrackMode::Ghosted, misses, last_update: now, ..*state })
}

fn slerp(from: &Matrix3<f64>, to: &Matrix3<f64>, fraction: f64) -> Matrix3<f64> {
    let rel = Rotation3::from_matrix_unchecked(from.transpose() * to);
    from * rel.powf(fraction).into_inner()
}

pub fn update(
    state: &TrackState,
    measurement: &Pose6DoF,
    mean_conf: f64,
    now: f64,
    cfg: &TrackerConfig,
) -> Result<TrackState, TrackError> {
    if now < state.last_update {
        return Err(TrackError::TimeReversal { last: state.last_update, now });
    }
    if measurement.frame != Frame::World {
        return Err(TrackError::FrameMismatch);
    }
    if !measurement.is_valid() {
        return missed(state, now, cfg);
    }
    let confident = mean_conf >= cfg.kidnap_conf;
    if state.mode == TrackMode::Lost {
        return if confident { Ok(TrackState::reinitialized(measurement, now, TrackMode::Tracked)) } else { missed(state, now, cfg) };
    }
    let predicted = predict(state, now)?;
    if (measurement.translation - predicted.translation).norm() > cfg.kidnap_dist {
        return if confident { Ok(TrackState::reinitialized(measurement, now, TrackMode::Kidnapped)) } else { missed(state, now, cfg) };
    }

    let translation = predicted.translation + (measurement.translation - predicted.translation) * cfg.alpha_t;
    let rotation = if measurement.quality == PoseQuality::Ok {
        slerp(&predicted.rotation, &measurement.rotation, cfg.alpha_r)
    } else {
        predicted.rotation
    };
    let dt = now - state.last_update;
    let velocity = if dt > 0.0 { (translation - state.pose.translation) / dt } else { state.velocity };
    Ok(TrackState {
        pose: Pose6DoF {
            translation,
            rotation,
            extents: measurement.extents,
            quality: measurement.quality,
            timestamp: now,
            frame: Frame::World,
        },
        velocity,
        mode: TrackMode::Tracked,
        misses: 0,
        last_update: now,
    })
}

/// Mode changes the machine may take in one update (self-loops included).
pub fn transition_allowed(from: TrackMode, to: TrackMode) -> bool {
    use TrackMode::*;
    matches!(
        (from, to),
        (Tracked, Tracked)
            | (Tracked, Ghosted)
            | (Ghosted, Ghosted)
            | (Ghosted, Tracked)
            | (Ghosted, Lost)
            | (Lost, Lost)
            | (Lost, Tracked)
            | (_, Kidnapped)
            | (Kidnapped, Tracked)
            // A missed frame right after re-localization.
            | (Kidnapped, Ghosted)
    )
}
