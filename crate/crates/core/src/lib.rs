//! Desk-scale detection transformer with query-based global aggregation
//! for cross-domain weakly supervised detection.
//!
//! The crate provides, bottom up: a reverse-mode autodiff tape
//! ([`tensor`]), attention/FFN/embedding building blocks ([`nn`]), a toy
//! convolutional backbone with domain-alignment losses ([`backbone`]), an
//! encoder with per-class queries ([`encoder`]), a decoder with object
//! queries plus one position-free foreground query ([`decoder`]), Hungarian
//! set matching and the hybrid weak+strong objective ([`matching`]), a
//! deterministic two-domain synthetic benchmark ([`data`]), and the
//! training/evaluation/ablation harness ([`harness`]).

pub mod backbone;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod nn;
pub mod matching;
pub mod model;
pub mod par;
pub mod tensor;

pub use error::{Error, Result};
