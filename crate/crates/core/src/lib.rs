//! Joint source-target sequence models, a small autodiff engine to train
//! them, and single-shot depth/width scaling.

pub mod error;
pub mod gradcheck;
pub mod io;
pub mod joint;
pub mod models;
pub mod nn;
pub mod params;
pub mod scaling;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
