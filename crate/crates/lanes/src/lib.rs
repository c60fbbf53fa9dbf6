//! Synthetic lane scenes and the downstream lane-detection harness.
//!
//! - [`scene`]: procedural road scenes with lane polylines and scenario effects.
//! - [`raster`]: polyline rasterization shared by the generator and the metrics.
//! - [`annotation`], [`dataset`]: CuLane-style `.lines.txt` files and dataset directories.
//! - [`model`]: encoder plus segmentation head, fine-tuned with per-pixel BCE.
//! - [`metrics`], [`report`]: lane extraction, IoU-matched F1, point accuracy and reports.

pub mod annotation;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod report;
pub mod scene;

pub use error::{Error, Result};
pub use raster::{render_lane_mask, Polyline};
pub use scene::{generate_scene, GeneratorConfig, LaneScene, Scenario};
