//! Language-specific encoder-decoder translation modules with a speech
//! frontend, trainable end to end on synthetic corpora.
//!
//! The crate is organized around a small reverse-mode autodiff tape
//! ([`tensor`]), transformer building blocks ([`nn`]), a residual bridging
//! module ([`adapter`]), a convolutional speech encoder ([`speech`]), a
//! registry of per-language encoder/decoder modules ([`registry`]), training
//! procedures ([`training`]), synthetic data ([`corpus`]) and evaluation /
//! analysis tooling ([`eval`]).

pub mod adapter;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod compose;
pub mod corpus;
pub mod nn;
pub mod registry;
pub mod seeding;
pub mod speech;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
