pub mod autodiff;
pub mod cache;
pub mod camera;
pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod service;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
