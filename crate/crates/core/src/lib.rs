//! Large-kernel convolution toolkit: a small layer-graph IR, a reference
//! forward pass, lossless multi-branch reparameterization and MAC accounting
//! for hybrid optical/digital encoders.

pub mod analysis;
pub mod arch;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod inference;
pub mod reparam;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
pub use graph::{
    Activation, BatchNormSpec, Branch, BranchBlock, ConvGeometry, ConvSpec, LayerGraph, Node, Op,
};
pub use tensor::{Rng, Shape, Tensor};
