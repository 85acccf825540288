//! Desk-scale laboratory for parameter-group transfer in encoder-decoder
//! Transformers.
//!
//! The crate is organized around a small number of load-bearing pieces:
//!
//! - [`tensor`]: dense f64 tensors and a tape-based reverse-mode autodiff
//!   engine with a finite-difference checker.
//! - [`model`]: a post-norm encoder-decoder Transformer whose parameters are
//!   registered under five named groups (`SRC`, `TGT`, `ENC`, `DEC`, `XATTN`).
//! - [`train`]: Adam training with hard per-group freezing, the fine-tuning
//!   regime table, child initialization from a parent checkpoint, and a
//!   span-masking denoising pretrainer.
//! - [`ckpt`]: a binary checkpoint format (full and delta), lineage hashes,
//!   storage accounting, and the two composition operations (embedding
//!   restore and zero-shot recombination).
//! - [`lexicon`]: cosine nearest-neighbor bilingual lexicon induction over
//!   embedding tables.
//! - [`tasks`]: synthetic translation task generators (surface bijections
//!   over a shared concept vocabulary), span-mask noising, and corpus BLEU.
//!
//! Everything is deterministic given explicit seeds: no wall-clock entropy,
//! no thread-order dependence.

pub mod ckpt;
pub mod error;
pub mod lexicon;
pub mod model;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{GroupTag, Model, ModelConfig};
pub use tensor::{FiniteDiffReport, Graph, Tensor, TensorId};
pub use train::{FineTuneRegime, RegimeSetting, TrainConfig, TransferSide};
