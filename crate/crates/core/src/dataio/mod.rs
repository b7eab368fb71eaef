//! Synthetic data generation, dataset I/O and checkpoint persistence.

pub mod checkpoint;
pub mod container;
pub mod dataset;
pub mod scene;

pub use checkpoint::{load_grid, save_grid, Checkpoint};
pub use container::{Container, RecordData, FORMAT_VERSION};
pub use dataset::{generate_dataset, load_dataset, load_video, CamerasFile, FrameRecord, SceneSummary};
pub use scene::{integrate_adaptive, Ellipsoid, Field, SyntheticScene};
