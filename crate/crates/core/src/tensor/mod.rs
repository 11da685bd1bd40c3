//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Everything the model computes goes through [`Tape`]: forward ops record
//! enough context to replay the tape backward and accumulate gradients for
//! every `requires_grad` leaf. Single-threaded per pass; arrays are plain
//! row-major buffers.

mod array;
mod gradcheck;
mod store;
mod tape;

pub use array::Array;
pub use gradcheck::{grad_check, GradCheckReport};
pub use store::{Init, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

/// Floating-point scalar the engine is generic over. 32-bit is the training
/// default; 64-bit is used for finite-difference verification.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            4 => Some(Dtype::F32),
            8 => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("shape {shape:?} does not fit {len} elements")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
