//! Submodel co-training engine.
//!
//! A desk-scale training engine for residual networks in which, for every
//! batch, two stochastic-depth submodels of a single weight-shared network
//! teach each other through a soft-target loss. The crate also provides the
//! surrounding machinery needed to study that idea end to end:
//!
//! - [`autograd`]: a minimal reverse-mode tape over dense tensors, including
//!   the stop-gradient operator the co-training loss depends on.
//! - [`blocks`]: residual MLP and tiny ViT models exposing an ordered list of
//!   droppable residual blocks.
//! - [`sdepth`]: stochastic depth in two implementations — a naive masking
//!   oracle and the efficient permute-select kernel — plus drop-rate
//!   quantization analysis.
//! - [`losses`]: BCE/CE classification losses and the combined co-training
//!   objective with stop-gradient teachers.
//! - [`optim`]: AdamW with decoupled weight decay, sqrt batch-size LR
//!   scaling, and LayerDecay multipliers.
//! - [`strategies`]: supervised / KD / mean-teacher / co-training / cosub
//!   step functions and the epoch training loop.
//! - [`analysis`]: submodel extraction, population curves, single-block
//!   ablation, submodel counting, and the linear averaging check.
//! - [`dataio`]: synthetic datasets, IDX ingestion, augmentation, and
//!   duplicate-after-augment batching.
//! - [`commands`]: the operations behind the `cosub` CLI.

pub mod analysis;
pub mod autograd;
pub mod bench;
pub mod blocks;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataio;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod sdepth;
pub mod strategies;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
