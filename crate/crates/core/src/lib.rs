pub mod attnmixup;
pub mod autograd;
pub mod config;
pub mod encoders;
pub mod error;
pub mod heads;
pub mod intrafusion;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod synthgen;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
