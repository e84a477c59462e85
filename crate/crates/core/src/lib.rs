//! Multi-camera 3D perception and planning pipeline on synthetic scenes.
//!
//! The crate is organized along the data path: [`scene`] produces synthetic
//! multi-camera sequences with dense ground truth, [`encoder`] turns images
//! into BEV and voxel feature maps, [`temporal`] fuses the frame sequence,
//! [`task_encoding`] specializes features per task, [`sparse`] runs query
//! based detection, [`heads`] holds decoders and losses, [`planning`] decodes
//! ego trajectories from task outputs, [`merge`] combines separately trained
//! encoders, and [`metrics`] scores everything.

pub mod checkpoint;
pub mod encoder;
pub mod geometry;
pub mod heads;
pub mod merge;
pub mod metrics;
pub mod planning;
pub mod scene;
pub mod sparse;
pub mod task_encoding;
pub mod temporal;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Configuration rejected; lists every offending field, not just the first.
    #[error("invalid {what}: {}", problems.join("; "))]
    Validation { what: String, problems: Vec<String> },

    #[error("shape mismatch in {what}: expected {expected:?}, got {actual:?}")]
    Shape { what: String, expected: Vec<usize>, actual: Vec<usize> },

    #[error("point behind camera (depth {depth})")]
    BehindCamera { depth: f64 },

    #[error("non-finite loss in component {component}: {value}")]
    NonFiniteLoss { component: String, value: f64 },

    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("bad file format in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("merge failed: {0}")]
    Merge(String),

    #[error(transparent)]
    Tensor(#[from] duoview_tensor::TensorError),
}

impl CoreError {
    pub fn io(path: impl Into<String>) -> impl FnOnce(std::io::Error) -> CoreError {
        let path = path.into();
        move |source| CoreError::Io { path, source }
    }
}
