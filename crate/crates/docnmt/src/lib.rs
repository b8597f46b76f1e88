//! Document-level neural machine translation with cascaded multi-task
//! learning, built on a minimal reverse-mode autodiff core.
//!
//! The crate is organized bottom-up:
//! - [`tensor`]: dense tensors on a computation tape with reverse-mode
//!   gradients, Adam, and a finite-difference check harness.
//! - [`blocks`]: embeddings, multi-head attention, feed-forward, and
//!   encoder/decoder stacks shared by all architectures.
//! - [`arch`]: the four model graphs (vanilla, concat-context,
//!   inside-context, cascade MTL) plus the residual cascade variant, and
//!   the checkpoint container.
//! - [`data`]: document corpora, context selection, BPE subwords,
//!   triplet assembly, and batching.
//! - [`train`]: joint objective, noam schedule, optimization loop with
//!   early stopping.
//! - [`infer`]: beam-search translation and greedy reconstruction.
//! - [`eval`]: sacreBLEU-compatible s-BLEU/d-BLEU, APT pronoun accuracy,
//!   and paired bootstrap significance.
//! - [`experiment`]: experiment specs, the train/decode/evaluate pipeline,
//!   and the context probes.

pub mod arch;
pub mod blocks;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod infer;
pub mod tensor;
pub mod train;
