use std::path::PathBuf;

use holovox_tensor::TensorError;
use thiserror::Error;

use crate::geometry::GeometryError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Image { path: PathBuf, msg: String },
    #[error("scene {scene}: bad cameras.json: {msg}")]
    Cameras { scene: String, msg: String },
    #[error("checkpoint format version {found} is not supported (this build reads version {expected})")]
    Version { found: u8, expected: u8 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("tensor {name}: stored shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("video {scene} has {have} frames, a training step needs {need}")]
    TooFewFrames {
        scene: String,
        have: usize,
        need: usize,
    },
    #[error("non-finite loss at step {step} (t = {t}, t' = {t_prime:?})")]
    NonFiniteLoss {
        step: u64,
        t: usize,
        t_prime: Option<usize>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
