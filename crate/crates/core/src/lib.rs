//! Morse neural networks: unnormalized densities `μ(x) = K(φ(x), a)` built
//! from a feature map `φ` and a kernel that equals 1 exactly on the diagonal.
//!
//! The crate covers the whole workflow: a small reverse-mode engine for dense
//! networks ([`autodiff`]), the kernel family ([`kernels`]), models and
//! ensembles ([`model`]), training ([`training`]), OOD evaluation and logit
//! calibration ([`eval`]), gradient-flow sampling ([`sampler`]), numerical
//! Morse-Bott checks ([`geometry`]), data and model files ([`data`],
//! [`persist`]) and the `morse` command line ([`cli`]).

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod kernels;
pub mod model;
pub mod persist;
pub mod rng;
pub mod sampler;
pub mod training;

pub use error::{Error, Result};
