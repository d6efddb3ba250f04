//! Numeric core: dense `f64` tensors, define-by-run reverse-mode
//! differentiation, attention, finite-difference gradient checking and the
//! `UTSR` tensor file format.

pub mod attention;
pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod rng;
pub mod shape;
pub mod tensor;
pub mod utsr;

pub use attention::{cross_attention, self_attention, AttentionWeights};
pub use autodiff::{GradientMap, Graph, Var};
pub use error::{Error, Result};
pub use gradcheck::{
    finite_diff_check, finite_diff_check_entries, finite_diff_check_with, FiniteDiffOptions, GradCheckReport};
pub use params::ParamSet;
pub use tensor::Tensor;

/// Layer-norm epsilon used throughout.
pub const LAYER_NORM_EPS: f64 = 1e-5;
