//! Distributed control over a finite horizon: sparsity algebra, quadratic
//! invariance tests, and robust controller synthesis for constrained
//! linear systems.

pub mod binmat;
pub mod cli;
pub mod error;
pub mod infostruct;
pub mod lifted;
pub mod policy;
pub mod polytope;
pub mod problem;
pub mod qi;
pub mod qpsolve;
pub mod robust;
pub mod sim;

pub use error::{Error, Result};
