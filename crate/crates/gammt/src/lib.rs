//! Ambiguity-aware sequence modeling with parallel transformer decoders.
//!
//! A sequence's law is treated as a *set* of probability measures rather
//! than a single one: M independently parameterized causal transformer
//! decoders each produce next-token conditionals, and a selection
//! mechanism (maximum or random head choice) combines them per position
//! for training and generation. The [`ambiguity`] module realizes the
//! matching finite framework (explicit path measures, pasting,
//! rectangularity checks) and [`ambiguity::induced_set`] bridges a trained
//! ensemble into it.
//!
//! Compute is 64-bit throughout, driven by a small reverse-mode tape in
//! [`autodiff`]; checkpoints store 32-bit values. Every random draw flows
//! from a caller-seeded stream, so training and generation are
//! reproducible bit-for-bit.
//!
//! See the crate examples for runnable tours of each capability, or the
//! `gammt` binary for the file-driven workflow (`train`, `generate`,
//! `verify`, `inspect`).
//!
//! ```
//! use gammt::decoder::{Activation, DecoderConfig};
//! use gammt::inference::{generate, GenConfig};
//! use gammt::model::{GammtParams, SelectionMechanism};
//! use gammt::tokenizer::{encode_corpus_lines, Vocabulary};
//! use gammt::training::{train, TrainConfig};
//!
//! let corpus = "abab\nbaba\n";
//! let vocab = Vocabulary::from_corpus(corpus)?;
//! let dataset = encode_corpus_lines(corpus, &vocab, 8)?;
//!
//! let head = DecoderConfig {
//!     vocab_size: vocab.size(),
//!     max_len: 8,
//!     d_model: 8,
//!     d_mlp: 16,
//!     n_layers: 1,
//!     n_heads: 2,
//!     activation: Activation::Gelu,
//! };
//! let params = GammtParams::init(&[head.clone(), head], 0)?;
//! let trained = train(
//!     &dataset,
//!     params,
//!     &TrainConfig {
//!         learning_rate: 0.05,
//!         epochs: 2,
//!         seed: 0,
//!         selection: SelectionMechanism::Max,
//!         grad_clip: None,
//!         log_every: 1,
//!     },
//!     |_| {},
//! )?
//! .params;
//!
//! let prompt = vocab.encode("ab")?;
//! let out = generate(
//!     &prompt,
//!     &trained,
//!     vocab.eos_id(),
//!     &GenConfig {
//!         temperature: 1.0,
//!         max_new_tokens: 4,
//!         seed: 0,
//!         selection: SelectionMechanism::Max,
//!     },
//! )?;
//! assert!(out.starts_with(&prompt));
//! println!("{}", vocab.decode(&out)?);
//! # Ok::<(), gammt::Error>(())
//! ```

pub mod ambiguity;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod error;
pub mod inference;
pub mod model;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
