//! Few-shot neural architecture search that splits a cell-based search space
//! by the number of nonlinear functions in each subnet.
//!
//! Pipeline: [`space`] defines and encodes architectures, [`partition`] bins
//! them into K subspaces, [`supernet`] holds K channel-reduced weight sets,
//! [`training`] updates them with supernet-balanced sampling, [`search`] picks
//! the best subnet, and [`evaloracle`] measures ranking fidelity against
//! stand-alone ground truth.

pub mod engine;
pub mod error;
pub mod evaloracle;
pub mod partition;
pub mod search;
pub mod seed;
pub mod space;
pub mod supernet;
pub mod training;

pub use error::{Error, Result};
pub use space::{SearchSpace, Subnet};
