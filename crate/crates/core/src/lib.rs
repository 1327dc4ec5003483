//! Multimodal phoneme recognition: a Conformer encoder with an LSTM decoder
//! trained under CTC on paired acoustic/articulatory feature sequences, plus
//! the analysis tools used to compare what unimodal and multimodal models
//! learn (per-phoneme error rates, latent projections, attention timing).

pub mod corpus;
pub mod ctc;
pub mod error;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{SeqLayout, Tape, Tensor, Var};
