//! Mamba-3D video network with enclosure global tokens, spatial-temporal
//! chained masked video modeling, and the training harness around them.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod mamba;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod ssm;
pub mod tensor;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
