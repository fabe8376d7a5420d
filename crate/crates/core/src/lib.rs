//! Model reduction with invertible autoencoders.
//!
//! The crate bundles a parametric Burgers full-order solver, POD, affine
//! coupling networks turned into autoencoders by zero-masking, DL-ROM style
//! latent regressors, and the projection/reduction error functionals used to
//! compare them. Everything runs on a small reverse-mode autodiff engine over
//! dense `f64` tensors.

pub mod autodiff;
pub mod autoencoders;
pub mod burgers;
pub mod container;
pub mod dataset;
pub mod dlrom;
pub mod error;
pub mod invnet;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pod;
pub mod spectral;
pub mod tensor;

pub use autodiff::{Gradients, ParamId, ParamStore, Tape, Var};
pub use error::{Error, FormatError, Result};
pub use tensor::Tensor;
