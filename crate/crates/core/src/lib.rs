//! Monomial-matrix symmetries of fully connected and convolutional network
//! weight spaces, and the equivariant and invariant layers built on them.

pub mod completeness;
pub mod equivariant;
pub mod error;
pub mod group;
pub mod invariant;
pub mod network;
pub mod preserve;
pub mod rng;
pub mod tensor;
pub mod trials;
pub mod weight_space;

pub use equivariant::{EquivariantLayer, ReluParams, SinTanhParams, Slot};
pub use error::{Error, Result};
pub use invariant::{AlphaBase, AlphaKind, InvariantPipelineConfig, PoolMode};
pub use group::{GroupElement, GroupSampler, MonomialElement, Permutation, SubgroupKind};
pub use network::{ActivationKind, Family, NetworkKind};
pub use rng::SplitMix64;
pub use tensor::Tensor;
pub use weight_space::{WeightSpacePoint, WeightSpaceSpec};
