//! One frame through the full pipeline.

use teleassist_core::camera::depth_to_metric;
use teleassist_core::fusion::{extract_cloud, fuse_mc_samples, ConfidenceMap, Frame, LogitStack};
use teleassist_core::raster::Raster;
use teleassist_core::splat::{CollisionReport, SplatMap};
use teleassist_core::tracker::{update, TrackError, TrackMode, TrackState};
use teleassist_core::wpca::{Pose6DoF, PoseEstimator};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::record::{AlertRecord, PoseRecord};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tracker(#[from] TrackError),
}

/// Backend outputs for one frame.
#[derive(Debug, Clone)]
pub struct FrameInputs {
    pub frame_id: u64,
    pub timestamp: f64,
    /// Relative depth as emitted by the depth backend.
    pub depth: Raster,
    pub logits: LogitStack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Fuse,
    Extract,
    Estimate,
    ToWorld,
    Track,
    Collision,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub state: TrackState,
    pub confidence: ConfidenceMap,
    pub collision: Option<CollisionReport>,
    pub record: PoseRecord,
    pub alert: Option<AlertRecord>,
    /// Stages in execution order.
    pub stages: Vec<Stage>,
    /// Why the frame produced no measurement, if it did not.
    pub dropped: Option<String>,
}

/// Runs fusion, extraction, pose estimation, world transform, tracking and the
/// collision check. Frame-level failures become missed measurements; only tracker
/// contract violations are errors.
pub fn run_pipeline_step(
    inputs: &FrameInputs,
    state: &TrackState,
    cfg: &PipelineConfig,
    map: Option<&SplatMap>,
) -> Result<StepOutput, PipelineError> {
    let mut stages = Vec::with_capacity(6);
    let mut enter = |stage: Stage| {
        tracing::trace!(frame = inputs.frame_id, ?stage, "pipeline stage");
        stages.push(stage);
    };
    let ts = inputs.timestamp;

    enter(Stage::Fuse);
    let confidence = fuse_mc_samples(&inputs.logits);

    enter(Stage::Extract);
    let cloud = depth_to_metric(&inputs.depth, &cfg.calibration)
        .map_err(|e| e.to_string())
        .and_then(|depth| extract_cloud(&confidence, &depth, &cfg.intrinsics, cfg.tau).map_err(|e| e.to_string()));

    enter(Stage::Estimate);
    let r_cw = *cfg.extrinsics.rotation();
    let previous = (state.mode != TrackMode::Lost)
        .then(|| Pose6DoF { rotation: r_cw.transpose() * state.pose.rotation, frame: Frame::Camera, ..state.pose });
    let estimator = PoseEstimator { rho: cfg.degeneracy_ratio };
    let (camera_pose, mean_conf, mut dropped) = match &cloud {
        Ok(c) => (estimator.estimate(c, previous.as_ref(), ts), c.mean_weight(), None),
        Err(reason) => (Pose6DoF::invalid(ts, Frame::Camera, r_cw.transpose()), 0.0, Some(reason.clone())),
    };

    enter(Stage::ToWorld);
    let measurement = if camera_pose.is_valid() {
        camera_pose.to_world(&cfg.extrinsics)
    } else {
        dropped.get_or_insert_with(|| "no usable points".to_string());
        Pose6DoF::invalid(ts, Frame::World, state.pose.rotation)
    };

    enter(Stage::Track);
    let next = update(state, &measurement, mean_conf, ts, &cfg.tracker)?;

    enter(Stage::Collision);
    let collision = map
        .filter(|_| next.mode != TrackMode::Lost)
        .map(|m| m.collision_check(&next.pose.translation, cfg.robot_radius, cfg.sigma_gate, cfg.warn_margin));

    if let Some(reason) = &dropped {
        tracing::debug!(frame = inputs.frame_id, reason, mode = %next.mode, "frame missed");
    }
    Ok(StepOutput {
        record: PoseRecord::from_state(&next, mean_conf),
        alert: collision.as_ref().map(|c| AlertRecord::new(ts, c)),
        state: next,
        confidence,
        collision,
        stages,
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};
    use teleassist_core::camera::DepthCalibration;
    use teleassist_core::splat::{AlertLevel, GaussianSplat};
    use teleassist_core::synth::{render_frame, SyntheticScenario};
    use teleassist_core::tracker::TrackerConfig;
    use teleassist_core::wpca::dominant_axis_error_deg;

    fn setup() -> (SyntheticScenario, PipelineConfig) {
        let scn = SyntheticScenario::overhead(5, 10, 320, 240);
        let mut cfg = PipelineConfig::with_camera(scn.intrinsics, scn.extrinsics);
        cfg.calibration = DepthCalibration::identity();
        (scn, cfg)
    }

    fn inputs(scn: &SyntheticScenario, i: usize) -> FrameInputs {
        let f = render_frame(scn, i).unwrap();
        FrameInputs { frame_id: i as u64, timestamp: f.truth.timestamp, depth: f.depth, logits: f.logits }
    }

    #[test]
    fn noiseless_frame_is_tracked_at_truth() {
        let (scn, cfg) = setup();
        let state = TrackState::lost(-1.0, &cfg.tracker);
        let out = run_pipeline_step(&inputs(&scn, 0), &state, &cfg, None).unwrap();
        assert_eq!(out.stages, vec![Stage::Fuse, Stage::Extract, Stage::Estimate, Stage::ToWorld, Stage::Track, Stage::Collision]);
        assert_eq!(out.state.mode, TrackMode::Tracked);
        let truth = &scn.trajectory[0];
        assert!((out.state.pose.translation - truth.translation).norm() < 0.01 * 3.0);
        assert!(dominant_axis_error_deg(&out.state.pose.rotation, &truth.rotation) < 1.0);
        assert!(out.record.mean_conf > 0.98);
        assert!(out.collision.is_none() && out.dropped.is_none());
    }

    #[test]
    fn nan_depth_ghosts() {
        let (scn, cfg) = setup();
        let mut state = TrackState::lost(-1.0, &cfg.tracker);
        state = run_pipeline_step(&inputs(&scn, 0), &state, &cfg, None).unwrap().state;
        let mut frame = inputs(&scn, 1);
        frame.depth.data_mut().fill(f32::NAN);
        let out = run_pipeline_step(&frame, &state, &cfg, None).unwrap();
        assert_eq!(out.state.mode, TrackMode::Ghosted);
        assert_eq!(out.state.misses, 1);
        assert!(out.dropped.is_some());
        assert_eq!(out.stages.len(), 6);
    }

    #[test]
    fn wrong_size_frame_is_a_miss_not_an_error() {
        let (scn, mut cfg) = setup();
        cfg.intrinsics.width = 640;
        cfg.intrinsics.cx = 320.0;
        let state = TrackState::lost(-1.0, &TrackerConfig::default());
        let out = run_pipeline_step(&inputs(&scn, 0), &state, &cfg, None).unwrap();
        assert_eq!(out.state.mode, TrackMode::Lost);
        assert!(out.dropped.unwrap().contains("dimension"));
    }

    #[test]
    fn robot_inside_inflated_splat_is_critical() {
        let (scn, cfg) = setup();
        let truth = scn.trajectory[0].translation;
        let splat = GaussianSplat {
            // Within sigma_gate of the robot once scales are inflated by robot_radius.
            mean: truth + Vector3::new(cfg.robot_radius, 0.0, 0.0),
            scale: Vector3::repeat(0.05),
            orientation: UnitQuaternion::identity(),
            opacity: 1.0,
            color: [0.0; 3],
        };
        let map = SplatMap::new(vec![splat], cfg.robot_radius);
        let state = TrackState::lost(-1.0, &cfg.tracker);
        let out = run_pipeline_step(&inputs(&scn, 0), &state, &cfg, Some(&map)).unwrap();
        let report = out.collision.unwrap();
        assert_eq!(report.alert_level, AlertLevel::Critical);
        assert_eq!(out.alert.unwrap().alert_level, AlertLevel::Critical);
    }

    #[test]
    fn same_inputs_same_outputs() {
        let (scn, cfg) = setup();
        let state = TrackState::lost(-1.0, &cfg.tracker);
        let f = inputs(&scn, 3);
        let a = run_pipeline_step(&f, &state, &cfg, None).unwrap();
        let b = run_pipeline_step(&f, &state, &cfg, None).unwrap();
        assert_eq!(a.record, b.record);
    }
}
