//! Training binarized neural networks with mixed-integer linear programming.

pub mod cli;
pub mod data;
pub mod datasplit;
pub mod localsearch;
pub mod error;
pub mod kmeans;
pub mod metrics;
pub mod model;
pub mod network;
pub mod robust;
pub mod solver;

pub use error::{Error, Result};
