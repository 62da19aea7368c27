//! Heterogeneous graph learning for cross-modal multiple-choice reasoning.

pub mod autodiff;
pub mod config;
pub mod cvm;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod hetgraph;
pub mod inspect;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{HglError, Result};
