//! CPU inference runtime.
//!
//! [`ExecutionPlan::build`] folds batch norm into convolution weights, fuses
//! activations and residual adds into convolutions, optionally pre-packs
//! weights into 8-channel blocks and lays activations out in a shared,
//! liveness-planned arena. [`reference`] keeps a direct, unoptimized
//! interpreter for equivalence checks.

mod arena;
mod bench;
mod config;
mod plan;
pub mod reference;
pub mod weights;

use thiserror::Error;

use crate::archdsl::{ShapeError, TensorShape};
use crate::train::ParamsError;

pub use arena::{plan_arena, ArenaLayout, Interval};
pub use bench::{bench, speedup, BenchReport};
pub use config::{parse_core_list, RuntimeConfig, ENV_KEYS};
pub use plan::{ExecutionPlan, OpSummary};

/// Dense NHWC batch of `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    /// `[batch, height, width, channels]`.
    pub shape: [usize; 4],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data does not match shape");
        Self { shape, data }
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn image_shape(&self) -> TensorShape {
        TensorShape::new(self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let n = self.image_shape().elements();
        &self.data[index * n..(index + 1) * n]
    }
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error("input images are {got}, plan expects {expected}")]
    InputShape { expected: TensorShape, got: TensorShape },
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },
    #[error("invalid runtime setting {key}={value}")]
    Config { key: String, value: String },
    #[error("weights file: {0}")]
    Weights(String),
    #[error("zero latency in benchmark report")]
    ZeroLatency,
    #[error("benchmark needs at least 3 timed iterations, got {0}")]
    TooFewIterations(usize),
    #[error("failed to start worker threads: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
