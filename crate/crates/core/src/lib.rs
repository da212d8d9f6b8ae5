//! Conditional diffusion over contrastive embeddings.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`tape`], [`gradcheck`]: dense `f64` tensors, reverse-mode
//!   differentiation and finite-difference verification.
//! * [`schedule`]: the linear-β noise schedule and its derived quantities.
//! * [`denoiser`]: the conditional noise-prediction MLP.
//! * [`diffusion`]: forward noising, the ε-prediction loss, DDPM and DDIM
//!   samplers.
//! * [`contrastive`]: a synthetic two-modality embedding corpus, the
//!   InfoNCE loss and a contrastive encoder trainer.
//! * [`corpus`], [`format`], [`seeds`]: paired embedding storage, the DGC1
//!   file format and named random substreams.
//! * [`trainer`]: Adam, bidirectional split training and checkpoints.
//! * [`eval`]: cosine retrieval, recall@k and generation metrics.

mod linalg;

pub mod contrastive;
pub mod corpus;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod format;
pub mod gradcheck;
pub mod schedule;
pub mod seeds;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Gradients, ParamId, ParamStore, Tape, Var};
pub use tensor::{Tensor, TensorError};
