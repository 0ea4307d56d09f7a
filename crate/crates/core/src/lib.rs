//! Few-shot object detection via class-conditional feature reweighting: a
//! one-stage anchor-based detector whose query features are modulated per
//! class by vectors embedded from (support image, mask) pairs, trained with
//! a two-phase episodic scheme and evaluated with VOC-style mAP.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod episodes;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod model;
pub mod nn;
pub mod train;

pub use config::ExperimentConfig;
pub use geometry::{BBox, Detection};
