//! Hand-crafted fixtures shared across module tests: tiny corpora plus two
//! fully analyzable models whose announcement/branch behavior is known on
//! paper, so intervention code can be checked without training.

use ndarray::{Array1, Array2};

use crate::brnn::{model_from_parts, BrnnModel, MaskPropagation, ModelConfig};
use crate::corpus::{build_vocab, TaggedSequence, Tagset, Vocab};

pub(crate) fn seq(tokens: &[&str], labels: &[&str]) -> TaggedSequence {
    TaggedSequence::new(
        tokens.iter().map(|s| s.to_string()).collect(),
        labels.iter().map(|s| s.to_string()).collect(),
    )
    .unwrap()
}

/// A few short sequences over a six-word vocabulary; enough for vocab,
/// batching, and gradient tests.
pub(crate) fn tiny_corpus() -> Vec<TaggedSequence> {
    vec![
        seq(&["the", "dune", "a", "the", "movie", "a"], &["O", "B_video", "O", "O", "O", "O"]),
        seq(&["the", "movie", "a"], &["O", "O", "O"]),
        seq(&["dune", "movie"], &["B_video", "O"]),
        seq(&["a", "dune", "the"], &["O", "B_video", "O"]),
    ]
}

/// Vocabulary with fixed ids: `<UNK>`=0, `<s>`=1, dune=2, movie=3, the=4, a=5.
pub(crate) fn handcraft_vocab() -> Vocab {
    let order = seq(&["dune", "movie", "the", "a"], &["O", "O", "O", "O"]);
    build_vocab(&[order], 1).unwrap()
}

fn handcraft_base() -> (ModelConfig, Vocab, Tagset, Array2<f64>, Array2<f64>) {
    let vocab = handcraft_vocab();
    let dim = vocab.len();
    let config = ModelConfig {
        embedding_dim: dim,
        hidden_dim: dim,
        ..ModelConfig::default()
    };
    // one-hot embeddings + w_in = 5·I drive each tanh unit to ±saturation,
    // so hidden states read as near-boolean token indicators
    let embedding = Array2::eye(dim);
    let w_in = Array2::eye(dim) * 5.0;
    (config, vocab, Tagset::default(), embedding, w_in)
}

/// Predicts `B_video` on "dune" from the forward state alone: no
/// recurrence, no backward readout. Context interventions change nothing,
/// and forward-only predictions equal the full ones.
pub(crate) fn context_free_model() -> BrnnModel {
    let (config, vocab, tagset, embedding, w_in) = handcraft_base();
    let dim = config.hidden_dim;
    let mut out_w = Array2::zeros((tagset.len(), 2 * dim));
    out_w[[5, 2]] = 8.0; // B_video row ← forward "dune" unit
    let mut out_b = Array1::zeros(tagset.len());
    out_b[0] = 1.0;
    out_b[5] = -1.0;
    model_from_parts(
        config,
        vocab,
        tagset,
        embedding,
        (w_in.clone(), Array2::zeros((dim, dim)), Array1::zeros(dim)),
        (w_in, Array2::zeros((dim, dim)), Array1::zeros(dim)),
        out_w,
        out_b,
    )
}

pub(crate) fn context_free_sequence() -> TaggedSequence {
    seq(&["the", "dune", "a"], &["O", "B_video", "O"])
}

/// Predicts `B_video` on "dune" only when a "movie" lies somewhere to its
/// right: the backward cell's w_rec = 5·I carries the keyword indicator
/// leftward, and the readout ANDs it with the forward "dune" unit
/// (4 + 4 − 6 clears the O logit of 1; either signal alone does not).
pub(crate) fn and_gate_model() -> BrnnModel {
    let (config, vocab, tagset, embedding, w_in) = handcraft_base();
    let dim = config.hidden_dim;
    let mut out_w = Array2::zeros((tagset.len(), 2 * dim));
    out_w[[5, 2]] = 4.0; // B_video row ← forward "dune" unit
    out_w[[5, dim + 3]] = 4.0; // B_video row ← backward "movie" unit
    let mut out_b = Array1::zeros(tagset.len());
    out_b[0] = 1.0;
    out_b[5] = -6.0;
    model_from_parts(
        config,
        vocab,
        tagset,
        embedding,
        (w_in.clone(), Array2::zeros((dim, dim)), Array1::zeros(dim)),
        (w_in, Array2::eye(dim) * 5.0, Array1::zeros(dim)),
        out_w,
        out_b,
    )
}

/// Same parameters as [`and_gate_model`] but with output-only masking.
pub(crate) fn and_gate_model_output_only() -> BrnnModel {
    let mut model = and_gate_model();
    model.config.mask_propagation = MaskPropagation::OutputOnly;
    model
}

/// "dune" at position 1, "movie" at position 4: the and-gate tags dune as
/// `B_video`, and masking any backward state in 2..=4 flips it to `O`.
pub(crate) fn and_gate_sequence() -> TaggedSequence {
    seq(&["the", "dune", "a", "the", "movie", "a"], &["O", "B_video", "O", "O", "O", "O"])
}
