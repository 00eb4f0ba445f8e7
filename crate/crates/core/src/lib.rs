//! Factorized latent reasoning (FLR) for generative sequential recommendation.
//!
//! A tiny decoder-only transformer reads a textual interaction history,
//! refines an appended thought token through `K` factor-attention heads for
//! `N` iterations, and then generates the next item's title under a
//! catalog prefix-trie constraint.

pub mod backbone;
pub mod config;
pub mod data;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod flr;
pub mod grpo;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod optim;
pub mod pipeline;

pub use error::{FlrError, Result};
