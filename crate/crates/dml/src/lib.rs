//! Discrete mode learning for diverse image captioning.
//!
//! The numeric core ([`tensor`], [`linalg`], [`vq`], [`nn`]) is generic over the
//! scalar type through [`scalar::Scalar`]; the model stack, trainer, and tooling
//! run on the `f64` aliases exported below.

pub mod cdvae;
pub mod cli;
pub mod corpus;
pub mod linalg;
pub mod metrics;
pub mod mic;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod vq;

/// Scalar type used by the model stack and all serialized artifacts.
pub type Real = f64;

/// Autograd tensor over [`Real`].
pub type Tensor = tensor::TensorBase<Real>;

/// VQ codebook over [`Real`].
pub type Codebook = vq::CodebookBase<Real>;

