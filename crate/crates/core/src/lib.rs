//! Core of the TeleAssist perception stack.
//!
//! A fixed external camera observes a robot. Per frame, a segmentation backend emits
//! N Monte-Carlo dropout logit rasters and a depth backend emits relative depth. This
//! crate turns those rasters into a world-frame 6-DoF pose and keeps the pose useful
//! for an operator:
//!
//! - [`raster`], [`camera`]: ZSR raster I/O, pinhole model, depth calibration.
//! - [`fusion`]: MC-dropout confidence fusion and weighted back-projection.
//! - [`wpca`]: weighted-PCA pose with sign disambiguation.
//! - [`splat`]: Gaussian-splat world map, spatial index, collision envelopes, occupancy.
//! - [`planner`]: A* over the occupancy grid plus shortcut smoothing.
//! - [`tracker`]: smoothing, ghosting through blind spots, kidnap recovery.
//! - [`synth`]: seeded synthetic scenes with ground truth.

pub mod camera;
pub mod fusion;
pub mod raster;
pub mod planner;
pub mod splat;
pub mod synth;
pub mod tracker;
pub mod wpca;
