pub mod autodiff;
pub mod camera;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod field;
pub mod image;
pub mod metrics;
pub mod refine;
pub mod render;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
