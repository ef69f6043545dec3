//! The frozen decoder-only transformer.
//!
//! Pre-norm blocks (layer norm, causal multi-head attention, layer norm,
//! GELU MLP) over learned absolute positional embeddings, followed by a final
//! layer norm and an untied unembedding. Parameters live in [`Weights`]; once
//! wrapped in [`ModelParams`] they are read-only and checksummed.
//!
//! The backward pass returns gradients with respect to the input embedding
//! rows. Gradients for the weights are accumulated only when a separate
//! gradient buffer is passed in, which the trigger trainer never does.

mod backward;
mod forward;
mod params;

use std::fmt::Debug;
use std::ops::AddAssign;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

pub use backward::{backward, backward_to_triggers};
pub use forward::{forward, splice, EmbeddedInput, ForwardTrace, Readout};
pub use params::{LayerWeights, ModelConfig, ModelParams, Weights};

/// Floating-point element type of a model: `f32` by default, `f64` for gradient checks.
pub trait Scalar:
    LinalgScalar + ScalarOperand + Float + AddAssign + Debug + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;
