//! Volterra neural ODE classifiers: tensor core with reverse-mode autodiff,
//! second-order Volterra filters, ODE solvers with adjoint gradients, model
//! assembly, training, dataset ingestion and checkpoints.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod ode;
pub mod tensor;
pub mod trainer;
pub mod volterra;

pub use error::{Error, Result};
