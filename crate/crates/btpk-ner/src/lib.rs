//! BTPK-based explanations for BRNN sequence taggers.
//!
//! The pipeline: train a bidirectional Elman tagger on BIO data
//! ([`brnn`]), locate the context spans whose zero-masking flips an
//! entity's predicted label ([`announce`]), assemble those findings into
//! a binary time-action tree with public-announcement edges ([`btpk`]),
//! and model-check TPK formulas against that tree ([`logic`]) to render
//! human-readable explanations ([`explain`]). [`cli`] wires the stages
//! into reproducible command-line runs.

pub mod announce;
pub mod brnn;
pub mod btpk;
pub mod cli;
pub mod corpus;
pub mod explain;
pub mod logic;

#[cfg(test)]
pub(crate) mod testutil;
