//! Configuration files, checkpoints and text corpora.

pub mod checkpoint;
pub mod config;
pub mod text;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
