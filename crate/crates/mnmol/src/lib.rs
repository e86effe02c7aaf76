//! Locally monotone deep-equilibrium reconstruction for undersampled
//! multicoil MRI.
//!
//! The crate bundles a small reverse-mode autodiff engine, a simulated
//! Cartesian multicoil Fourier forward model, learned score operators whose
//! combination with the data term is constrained to be locally monotone,
//! deep-equilibrium forward/backward solvers, projected-gradient local
//! Lipschitz estimation, end-to-end training, and perturbation-robustness
//! evaluation. The `mnmol` binary exposes the experiment pipeline.

pub mod cli;
pub mod config;
pub mod container;
pub(crate) mod conv;
pub mod dataset;
pub mod diffgraph;
pub mod error;
pub mod fft;
pub mod lipschitz;
pub mod metrics;
pub mod mri;
pub mod operators;
pub mod robustness;
pub mod solvers;
pub mod tensor;
pub mod trainer;
pub mod verify;
pub mod viz;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
