//! Long-context CTC speech recognition.
//!
//! The crate covers the full path from 16 kHz audio to scored transcripts:
//! log-mel features ([`dsp`]), a FastConformer encoder ([`encoder`]) built on a
//! small reverse-mode tape ([`numerics`]), CTC loss and decoding ([`ctc`]),
//! moving-window long-form decoding ([`window`]), sequence-length warmup
//! ([`curriculum`]), training ([`trainer`]) and WER scoring ([`eval`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod ctc;
pub mod curriculum;
pub mod dsp;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod numerics;
pub mod synth;
pub mod trainer;
pub mod window;

pub use error::{Error, Result};
