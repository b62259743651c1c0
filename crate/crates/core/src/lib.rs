//! Desk-scale laboratory for pretraining and finetuning small
//! encoder-decoder dialogue models, with probes for measuring what
//! finetuning forgets.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] — dense 2-D matrices over `f32`/`f64` with the three matmul
//!   variants a transformer needs, plus stable softmax helpers.
//! - [`rng`] — deterministic, purpose-tagged random streams so every
//!   stochastic choice is reproducible from one master seed.
//! - [`par`] — order-preserving parallel map with a sequential fallback
//!   (feature `parallel`).
//! - [`graph`] — per-example reverse-mode autodiff tape.

pub mod corpus;
pub mod decoding;
pub mod graph;
pub mod model;
pub mod par;
pub mod probes;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod training;
