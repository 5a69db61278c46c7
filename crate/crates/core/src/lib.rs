//! Multi-modal dynamic facial expression recognition with positive/negative
//! label prompts, adapter-tuned frozen transformer towers and similarity
//! weighted late fusion.
//!
//! The crate is organised bottom-up:
//!
//! * [`netcore`]: tape autodiff, transformer blocks, bottleneck adapters.
//! * [`corpus`]: synthetic video corpus generation and loading.
//! * [`textproc`]: prompt templates, tokenizer, description refinement.
//! * [`encoders`]: the label, video, face-semantics and description towers.
//! * [`fusion`]: PN cosine similarity, adaptive weights, fused classification.
//! * [`training`]: weighted multi-modal loss, SGD, the training loop.
//! * [`eval`]: UAR/WAR metrics, evaluation, zero-shot transfer, ablations.

pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod netcore;
pub mod textproc;
pub mod training;

pub use error::{Error, Result};
