//! Lane-aware multi-modal trajectory prediction for road vehicles.
//!
//! The pipeline runs end to end at desk scale on synthetic scenes:
//! trajectory smoothing, dataset augmentation, lane-chunk processing into a
//! fixed three-lane masked model input, a transformer predictor with a
//! masked lane classifier, and ADE/FDE evaluation.

pub mod augment;
pub mod data;
pub mod dataset;
pub mod geometry;
pub mod kalman;
pub mod lane;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scene;
pub mod tensor;

pub use geometry::{Direction2, Point2};
pub use scene::{AgentRecord, OccupancyRaster, Scene, Trajectory};
