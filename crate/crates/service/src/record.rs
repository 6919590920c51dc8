//! JSON payloads shared by the CLI, the HTTP API and the WebSocket stream.

use serde::{Deserialize, Serialize};
use teleassist_core::planner::Path;
use teleassist_core::splat::{AlertLevel, CollisionReport, SplatMap};
use teleassist_core::tracker::TrackState;

/// One line of the pose stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub t: f64,
    pub mode: String,
    pub translation: [f64; 3],
    /// Row-major.
    pub rotation: [f64; 9],
    pub extents: [f64; 3],
    pub mean_conf: f64,
}

impl PoseRecord {
    pub fn from_state(state: &TrackState, mean_conf: f64) -> Self {
        let r = &state.pose.rotation;
        Self {
            t: state.last_update,
            mode: state.mode.as_str().to_string(),
            translation: state.pose.translation.into(),
            rotation: std::array::from_fn(|i| r[(i / 3, i % 3)]),
            extents: state.pose.extents,
            mean_conf,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain data serializes")
    }
}

/// Collision alert for the latest pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRecord {
    pub t: f64,
    pub alert_level: AlertLevel,
    pub colliding: bool,
    /// `None` when no splat is within reach.
    pub min_mahalanobis: Option<f64>,
    pub nearest_splat: Option<usize>,
}

impl AlertRecord {
    pub fn new(t: f64, report: &CollisionReport) -> Self {
        Self {
            t,
            alert_level: report.alert_level,
            colliding: report.colliding,
            min_mahalanobis: report.min_mahalanobis.is_finite().then_some(report.min_mahalanobis),
            nearest_splat: report.nearest_splat,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub planned_at: f64,
    pub cost_m: f64,
    pub waypoints: Vec<[f64; 3]>,
}

impl From<&Path> for PathRecord {
    fn from(p: &Path) -> Self {
        Self { planned_at: p.planned_at, cost_m: p.cost, waypoints: p.waypoints.iter().map(|w| (*w).into()).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSplat {
    pub mean: [f64; 3],
    pub scale: [f64; 3],
    /// Linear RGB in [0, 1].
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRecord {
    /// Splats in the loaded map.
    pub total: usize,
    pub splats: Vec<MapSplat>,
}

const SH_C0: f64 = 0.282_094_791_773_878_14;

/// Evenly strided subset of at most `limit` splats.
pub fn map_record(map: &SplatMap, limit: usize) -> MapRecord {
    let all = map.splats();
    let stride = all.len().div_ceil(limit.max(1)).max(1);
    let splats = all
        .iter()
        .step_by(stride)
        .map(|s| MapSplat {
            mean: s.mean.into(),
            scale: s.scale.into(),
            color: s.color.map(|dc| (0.5 + SH_C0 * dc).clamp(0.0, 1.0)),
        })
        .collect();
    MapRecord { total: all.len(), splats }
}
