//! Dense tensor storage and the reverse-mode autodiff tape.
//!
//! Tensors are contiguous row-major buffers with an explicit shape. For
//! 5-D network activations the axis order is `(batch, channel, depth,
//! height, width)` with the width index moving fastest. Ops live on a
//! [`Tape`]: each op records its inputs and whatever it needs for the
//! backward pass, and [`Tape::backward`] walks the records in reverse.
//!
//! Two element types are supported: `f32` for training and `f64` for
//! gradient checking, where finite differences need the extra precision.

mod rng;
pub(crate) mod tape;

pub use rng::SplitMix64;
pub use tape::{Tape, TensorId};

use std::fmt;

/// Scalar element type of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    num_traits::Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Number of elements implied by a shape.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Errors from tensor construction and tape ops.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// A constructor received a zero extent or a data buffer whose length
    /// disagrees with the shape.
    InvalidShape { op: &'static str, detail: String },
    /// Two operands that must agree in shape do not.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Channel axis disagrees with what the op's parameters expect.
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    /// Op requires a non-empty tensor.
    EmptyTensor { op: &'static str },
    /// A spatial extent must be even (pooling) and is not.
    OddExtent {
        op: &'static str,
        axis: &'static str,
        extent: usize,
    },
    /// A spatial extent must be divisible by `required` and is not.
    NotDivisible {
        axis: &'static str,
        extent: usize,
        required: usize,
    },
    /// `backward` was called on a tensor that is not a scalar.
    NonScalarLoss { shape: Vec<usize> },
    /// `backward` was called twice without resetting the tape.
    BackwardAlreadyRun,
    /// An op produced or encountered a non-finite value.
    NonFinite { op: &'static str },
    /// Finite-difference epsilon outside the supported range.
    BadEpsilon { eps: f64 },
    /// An op argument (stride, alpha, padding combination, target values)
    /// is out of contract.
    BadParameter { op: &'static str, detail: String },
    /// Spatial extent smaller than the kernel in valid-padding mode.
    InputTooSmall {
        op: &'static str,
        axis: &'static str,
        extent: usize,
        kernel: usize,
    },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidShape { op, detail } => write!(f, "{op}: invalid shape: {detail}"),
            Self::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch: {lhs:?} vs {rhs:?}")
            }
            Self::ChannelMismatch { op, expected, got } => {
                write!(f, "{op}: expected {expected} channels, got {got}")
            }
            Self::EmptyTensor { op } => write!(f, "{op}: empty tensor"),
            Self::OddExtent { op, axis, extent } => {
                write!(f, "{op}: {axis} extent {extent} must be even")
            }
            Self::NotDivisible {
                axis,
                extent,
                required,
            } => write!(
                f,
                "axis {axis} extent {extent} is not divisible by {required}"
            ),
            Self::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Self::BackwardAlreadyRun => {
                write!(f, "backward already run on this tape; reset first")
            }
            Self::NonFinite { op } => write!(f, "{op}: non-finite value encountered"),
            Self::BadEpsilon { eps } => {
                write!(f, "grad_check epsilon {eps} outside [1e-6, 1e-3]")
            }
            Self::BadParameter { op, detail } => write!(f, "{op}: {detail}"),
            Self::InputTooSmall {
                op,
                axis,
                extent,
                kernel,
            } => write!(
                f,
                "{op}: {axis} extent {extent} smaller than kernel {kernel} (valid padding)"
            ),
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense n-dimensional array. `grad` is populated by [`Tape::backward`]
/// for tensors with `requires_grad`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element> {
    pub shape: Vec<usize>,
    pub data: Vec<E>,
    pub requires_grad: bool,
    pub grad: Option<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    /// Builds a tensor from a buffer, checking `product(shape) == data.len()`.
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self, TensorError> {
        check_shape("from_vec", shape)?;
        if numel(shape) != data.len() {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                detail: format!(
                    "shape {:?} implies {} elements, buffer has {}",
                    shape,
                    numel(shape),
                    data.len()
                ),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, TensorError> {
        check_shape("zeros", shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![E::zero(); numel(shape)],
            requires_grad: false,
            grad: None,
        })
    }

    pub fn full(shape: &[usize], value: E) -> Result<Self, TensorError> {
        check_shape("full", shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(value: E) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Deterministic pseudo-normal tensor: splitmix64-seeded Box-Muller,
    /// mean 0, standard deviation `scale`.
    pub fn randn(shape: &[usize], seed: u64, scale: f64) -> Result<Self, TensorError> {
        check_shape("randn", shape)?;
        let data = rng::randn_vec::<E>(numel(shape), seed, scale);
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Casts every element to another precision.
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<(), TensorError> {
    if shape.is_empty() {
        return Err(TensorError::InvalidShape {
            op,
            detail: "empty shape".into(),
        });
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::InvalidShape {
            op,
            detail: format!("zero extent in {shape:?}"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_extent_rejected() {
        assert!(matches!(
            Tensor::<f32>::zeros(&[2, 0, 3]),
            Err(TensorError::InvalidShape { .. })
        ));
        assert!(matches!(
            Tensor::<f32>::randn(&[0], 1, 1.0),
            Err(TensorError::InvalidShape { .. })
        ));
    }

    #[test]
    fn from_vec_length_checked() {
        assert!(Tensor::<f32>::from_vec(vec![1.0, 2.0], &[3]).is_err());
        let t = Tensor::<f32>::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        assert_eq!(t.numel(), 3);
    }

    #[test]
    fn randn_zero_scale_is_zeros() {
        let t = Tensor::<f64>::randn(&[4], 7, 0.0).unwrap();
        assert_eq!(t.data, vec![0.0; 4]);
    }

    #[test]
    fn randn_is_deterministic() {
        let a = Tensor::<f32>::randn(&[2, 3], 42, 1.0).unwrap();
        let b = Tensor::<f32>::randn(&[2, 3], 42, 1.0).unwrap();
        assert_eq!(a.data, b.data);
        let c = Tensor::<f32>::randn(&[2, 3], 43, 1.0).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn randn_sample_moments() {
        // Large-sample check against normal moments.
        let t = Tensor::<f64>::randn(&[10000], 1, 1.0).unwrap();
        let n = t.data.len() as f64;
        let mean = t.data.iter().sum::<f64>() / n;
        let var = t.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!(mean > -0.05 && mean < 0.05, "mean {mean}");
        assert!(std > 0.95 && std < 1.05, "std {std}");
    }
}
