//! Differentiable building blocks: matrices, the autodiff tape, parameter
//! storage, transformer/adapter layers, a finite-difference oracle and the
//! checkpoint archive.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod mat;
pub mod params;
pub mod tape;

pub use gradcheck::{grad_check, grad_check_tape, tape_objective, GradCheckReport};
pub use layers::{
    adapter_forward, block_forward, extract_patches, patch_embed, AttnMask, BottleneckAdapter,
    Projection, TransformerBlock,
};
pub use mat::Mat;
pub use params::{ParamId, ParamStore, ParamTensor};
pub use tape::{AttnSpec, Gradients, Tape, Var};
