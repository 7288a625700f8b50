//! Content-aware personalized image enhancement with masked style modeling.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evalharness;
pub mod image;
pub mod metrics;
pub mod nets;
pub mod personalize;
pub mod retouch;
pub mod service;
pub mod training;

pub use error::{Error, Result};
pub use image::Image;
