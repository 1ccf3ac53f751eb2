pub mod adjoint;
pub mod catalog;
pub mod config;
pub mod error;
pub mod expr;
pub mod fbsde;
pub mod linear;
pub mod linearize;
pub mod monotone;
pub mod optimizer;
pub mod perturbation;
pub mod problem;
pub mod sde;
pub mod tree;

pub use error::{Error, Result};
