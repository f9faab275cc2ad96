#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod factors;
pub mod harness;
pub mod manifold;
pub mod preint;
pub mod processors;
pub mod sensors;
pub mod solver;
pub mod tree;

pub use error::{Error, Result};
