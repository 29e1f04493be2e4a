// Negated comparisons are used deliberately so that NaN inputs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub(crate) mod codec;
pub mod diffusion_kernels;
pub mod error;
pub mod gaussian_lab;
pub mod harness;
pub mod levy_kernels;
pub mod measure;
pub mod path_engine;
pub mod process;
pub mod quadrature;
pub mod rebirth_kernels;
pub mod rng;
pub mod stats;
pub mod verify;

pub use error::{LabError, Result};
