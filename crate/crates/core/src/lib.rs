//! `gcdmoe` — a desk-scale training stack for generalized category discovery
//! with routed multi-expert adapters on a frozen transformer backbone.
//!
//! The crate is organized around eight subsystems:
//!
//! - [`tensor`] — dense 2-D `f64` tensors with record-by-execution reverse-mode
//!   differentiation; the substrate every other module computes on.
//! - [`backbone`] — a frozen toy vision-transformer encoder (patch/token
//!   embedding, multi-head self-attention, FFN, pre-norm blocks, class token).
//! - [`mea`] — the multi-expert adapter: bottleneck experts per adapted block,
//!   a softmax router, and gated residual fusion with the frozen FFN.
//! - [`objectives`] — supervised + self-supervised contrastive representation
//!   losses, prototype predictions, self-distilled classification losses with
//!   an entropy regularizer, and their λ-mix.
//! - [`routeconstraint`] — token-pooled route probabilities, the balanced
//!   assignment loss, and the category-aware balanced assignment loss.
//! - [`data`] — synthetic dataset generation, old/new split construction,
//!   two-view augmentation, and `.gcd` file I/O.
//! - [`metrics`] — clustering accuracy under the optimal cluster-to-class
//!   permutation (Hungarian matching) with old/new/all decomposition.
//! - [`harness`] — run configuration, SGD with cosine schedule, the training
//!   loop, gradient checking, evaluation, checkpointing, and ablations.
//!
//! Start with the `examples/` directory: each example is a runnable tour of
//! one capability. The `gcdmoe` binary exposes the same functionality as thin
//! subcommands (`gen-data`, `train`, `evaluate`, `grad-check`, `ablate`,
//! `dump-routes`).

pub mod backbone;
pub mod data;
pub mod error;
pub mod harness;
pub mod mea;
pub mod metrics;
pub mod objectives;
pub mod routeconstraint;
pub mod tensor;

pub use error::{Error, KernelError, Result};
