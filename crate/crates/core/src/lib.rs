pub mod data;
pub mod error;
pub mod explain;
pub mod flow;
pub mod frames;
pub mod manifest;
pub mod metrics;
pub mod mil;
pub mod model;
pub mod nn;
pub mod optim;
pub mod report;
pub mod sampling;
pub mod synth;
pub mod training;
pub mod transfer;
pub mod types;

pub use error::{Error, Result};
