//! Data-driven discovery of symbolic Freidlin–Wentzell quasipotentials.
//!
//! The pipeline samples snapshot pairs from trajectories of an ODE system,
//! trains two tanh networks so that `f ≈ -∇V + g` with `g ⊥ ∇V`, then
//! regresses `V`, `g` and `f` jointly onto a polynomial library with a
//! constrained SR3 solver. The symbolic quasipotential is `U = 2V`.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below are what the pipeline and CLI use.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod decomposition;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod linalg;
pub mod neuralnet;
pub mod pipeline;
pub mod quasipotential;
pub mod rng;
pub mod sparse;
pub mod special;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub use error::{Error, Result};

/// Floating point scalar used throughout the numerical core.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Every `f64` is representable (possibly
    /// rounded) in the supported types, so this never fails.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal fits in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub type System64 = dynamics::System<f64>;
pub type Dataset64 = dynamics::SnapshotDataset<f64>;
pub type Mlp64 = neuralnet::Mlp<f64>;
pub type Mlp32 = neuralnet::Mlp<f32>;
pub type Model64 = decomposition::DecompositionModel<f64>;
pub type Model32 = decomposition::DecompositionModel<f32>;
pub type Coefficients64 = sparse::CoefficientBlock<f64>;
pub type SymbolicModel64 = quasipotential::SymbolicModel<f64>;

pub use config::PipelineConfig;
pub use pipeline::Pipeline;
pub use sparse::PolynomialLibrary as Library;
