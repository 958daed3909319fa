//! Museformer: fine- and coarse-grained attention for symbolic music.
//!
//! The pipeline runs MIDI files through compression/quantization/filtering
//! ([`midi`]), bar-aware tokenization ([`tokenize`]), bar-similarity
//! statistics ([`similarity`]), sparse attention-layout construction
//! ([`layout`]), and a small autoregressive transformer built on
//! FC-Attention ([`attention`], [`model`]) with training ([`train`]) and
//! generation utilities.

pub mod attention;
pub mod layout;
pub mod midi;
pub mod model;
pub mod similarity;
pub mod synth;
pub mod train;
pub mod tokenize;
