//! Bidirectional Elman tagger trained from scratch, with a masked forward
//! pass that zeroes chosen hidden states ("physical intervention") either
//! at the readout only or through the recurrence as well.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TaggedSequence, Tagset, Vocab};

/// Serialized model layout version; bumped on any breaking change.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BrnnError {
    #[error("empty vocab or tagset")]
    EmptyVocabOrTagset,
    #[error("empty input sequence")]
    EmptyInput,
    #[error("token id {id} out of range (vocab size {vocab})")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("mask position {pos} out of range for sequence length {len}")]
    MaskOutOfRange { pos: usize, len: usize },
    #[error("label `{0}` not in the model tagset")]
    UnknownLabel(String),
    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFinite { what: &'static str, epoch: usize, batch: usize },
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("model file format version {found}, expected {expected}")]
    FormatVersion { found: u32, expected: u32 },
    #[error("failed to read model: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to decode model: {0}")]
    Decode(#[from] serde_json::Error),
}

/// Which recurrence a masked position is zeroed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Both,
    Forward,
    Backward,
}

impl Side {
    pub fn masks_forward(self) -> bool {
        matches!(self, Side::Forward | Side::Both)
    }

    pub fn masks_backward(self) -> bool {
        matches!(self, Side::Backward | Side::Both)
    }
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Both => "both",
            Side::Forward => "forward",
            Side::Backward => "backward",
        })
    }
}

/// How a zeroed hidden state is consumed downstream: `Propagate` feeds the
/// zero vector to the next recurrence step, `OutputOnly` zeroes just the
/// readout and lets the raw state flow on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskPropagation {
    #[default]
    Propagate,
    OutputOnly,
}

/// Set of (position, side) pairs whose hidden states are zeroed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Mask {
    forward: BTreeSet<usize>,
    backward: BTreeSet<usize>,
}

impl Mask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pos: usize, side: Side) {
        if side.masks_forward() {
            self.forward.insert(pos);
        }
        if side.masks_backward() {
            self.backward.insert(pos);
        }
    }

    /// Mask covering every position of `start..=end` on `side`.
    pub fn span(start: usize, end: usize, side: Side) -> Self {
        let mut mask = Self::new();
        for pos in start..=end {
            mask.add(pos, side);
        }
        mask
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty() && self.backward.is_empty()
    }

    pub fn masks_forward(&self, pos: usize) -> bool {
        self.forward.contains(&pos)
    }

    pub fn masks_backward(&self, pos: usize) -> bool {
        self.backward.contains(&pos)
    }

    fn max_pos(&self) -> Option<usize> {
        self.forward
            .iter()
            .next_back()
            .max(self.backward.iter().next_back())
            .copied()
    }
}

/// Tagger hyperparameters; defaults match the reference training setup
/// (batch 32, learning rate 1e-4, both dims 128).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mask_propagation: MaskPropagation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 128,
            hidden_dim: 128,
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 50,
            seed: 0,
            mask_propagation: MaskPropagation::Propagate,
        }
    }
}

/// One recurrent cell: pre-activation = w_in·x + w_rec·h_prev + b.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Cell {
    w_in: Array2<f64>,
    w_rec: Array2<f64>,
    b: Array1<f64>,
}

impl Cell {
    fn zeros(hidden: usize, input: usize) -> Self {
        Self {
            w_in: Array2::zeros((hidden, input)),
            w_rec: Array2::zeros((hidden, hidden)),
            b: Array1::zeros(hidden),
        }
    }
}

/// All trainable tensors; also reused as the gradient/optimizer-moment
/// container since those share every shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Params {
    pub(crate) embedding: Array2<f64>,
    fwd: Cell,
    bwd: Cell,
    pub(crate) out_w: Array2<f64>,
    pub(crate) out_b: Array1<f64>,
}

impl Params {
    fn zeros(vocab: usize, tags: usize, cfg: &ModelConfig) -> Self {
        Self {
            embedding: Array2::zeros((vocab, cfg.embedding_dim)),
            fwd: Cell::zeros(cfg.hidden_dim, cfg.embedding_dim),
            bwd: Cell::zeros(cfg.hidden_dim, cfg.embedding_dim),
            out_w: Array2::zeros((tags, 2 * cfg.hidden_dim)),
            out_b: Array1::zeros(tags),
        }
    }

    /// Uniform parameter groups, in a fixed order shared by the gradient
    /// checker and the optimizer.
    fn tensors(&self) -> Vec<(&'static str, ArrayViewD<'_, f64>)> {
        vec![
            ("embedding", self.embedding.view().into_dyn()),
            ("fwd.w_in", self.fwd.w_in.view().into_dyn()),
            ("fwd.w_rec", self.fwd.w_rec.view().into_dyn()),
            ("fwd.b", self.fwd.b.view().into_dyn()),
            ("bwd.w_in", self.bwd.w_in.view().into_dyn()),
            ("bwd.w_rec", self.bwd.w_rec.view().into_dyn()),
            ("bwd.b", self.bwd.b.view().into_dyn()),
            ("out_w", self.out_w.view().into_dyn()),
            ("out_b", self.out_b.view().into_dyn()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, f64>)> {
        vec![
            ("embedding", self.embedding.view_mut().into_dyn()),
            ("fwd.w_in", self.fwd.w_in.view_mut().into_dyn()),
            ("fwd.w_rec", self.fwd.w_rec.view_mut().into_dyn()),
            ("fwd.b", self.fwd.b.view_mut().into_dyn()),
            ("bwd.w_in", self.bwd.w_in.view_mut().into_dyn()),
            ("bwd.w_rec", self.bwd.w_rec.view_mut().into_dyn()),
            ("bwd.b", self.bwd.b.view_mut().into_dyn()),
            ("out_w", self.out_w.view_mut().into_dyn()),
            ("out_b", self.out_b.view_mut().into_dyn()),
        ]
    }

    fn add_scaled(&mut self, other: &Params, factor: f64) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            Zip::from(&mut a).and(&b).for_each(|a, &b| *a += factor * b);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// The trained tagger: embeddings, one Elman cell per direction, and a
/// linear readout over the concatenated hidden states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrnnModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub tagset: Tagset,
    pub(crate) params: Params,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    model: BrnnModel,
}

/// Per-position activations and predictions from one (possibly masked)
/// forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    /// Forward hidden states as seen by the readout (zeroed where masked).
    pub forward_hidden: Vec<Array1<f64>>,
    /// Backward hidden states as seen by the readout.
    pub backward_hidden: Vec<Array1<f64>>,
    pub logits: Vec<Array1<f64>>,
    /// Argmax tag ids; ties break toward the lowest id.
    pub predictions: Vec<usize>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.mapv(|v| (v - max).exp());
    let sum = exps.sum();
    exps / sum
}

fn argmax(xs: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean over positions of the negative log softmax probability of the
/// gold tag. Panics if lengths differ (caller contract).
pub fn loss(trace: &Trace, gold_ids: &[usize]) -> f64 {
    assert_eq!(trace.len(), gold_ids.len(), "trace/gold length mismatch");
    let mut total = 0.0;
    for (logits, &gold) in trace.logits.iter().zip(gold_ids) {
        let probs = softmax(logits);
        total -= probs[gold].max(f64::MIN_POSITIVE).ln();
    }
    total / gold_ids.len() as f64
}

/// Per-direction activation caches kept for backpropagation.
struct DirCache {
    /// tanh outputs before any masking
    raw: Vec<Array1<f64>>,
    /// what the readout sees (zeroed where masked)
    stored: Vec<Array1<f64>>,
    /// the recurrent input each step actually received
    inbound: Vec<Array1<f64>>,
}

struct Caches {
    x: Vec<Array1<f64>>,
    fwd: DirCache,
    bwd: DirCache,
    probs: Vec<Array1<f64>>,
}

/// Draws every parameter uniform [-0.1, 0.1] from a generator seeded by
/// `config.seed`; the same (config, vocab, tagset) always yields
/// bit-identical parameters.
pub fn init_model(config: &ModelConfig, vocab: &Vocab, tagset: &Tagset) -> Result<BrnnModel, BrnnError> {
    if vocab.is_empty() || tagset.is_empty() {
        return Err(BrnnError::EmptyVocabOrTagset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = Params::zeros(vocab.len(), tagset.len(), config);
    for (_, mut t) in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
    Ok(BrnnModel {
        config: config.clone(),
        vocab: vocab.clone(),
        tagset: tagset.clone(),
        params,
    })
}

impl BrnnModel {
    fn check_input(&self, token_ids: &[usize], mask: &Mask) -> Result<(), BrnnError> {
        if token_ids.is_empty() {
            return Err(BrnnError::EmptyInput);
        }
        for &id in token_ids {
            if id >= self.vocab.len() {
                return Err(BrnnError::TokenOutOfRange { id, vocab: self.vocab.len() });
            }
        }
        if let Some(pos) = mask.max_pos() {
            if pos >= token_ids.len() {
                return Err(BrnnError::MaskOutOfRange { pos, len: token_ids.len() });
            }
        }
        Ok(())
    }

    fn run_direction(&self, cell: &Cell, x: &[Array1<f64>], mask: &Mask, forward: bool) -> DirCache {
        let n = x.len();
        let hidden = self.config.hidden_dim;
        let mut raw = vec![Array1::zeros(hidden); n];
        let mut stored = vec![Array1::zeros(hidden); n];
        let mut inbound = vec![Array1::zeros(hidden); n];
        let masked = |i: usize| {
            if forward {
                mask.masks_forward(i)
            } else {
                mask.masks_backward(i)
            }
        };
        let order: Vec<usize> = if forward {
            (0..n).collect()
        } else {
            (0..n).rev().collect()
        };
        let mut prev: Option<usize> = None;
        for &i in &order {
            if let Some(p) = prev {
                inbound[i] = match self.config.mask_propagation {
                    MaskPropagation::Propagate => stored[p].clone(),
                    MaskPropagation::OutputOnly => raw[p].clone(),
                };
            }
            let pre = cell.w_in.dot(&x[i]) + cell.w_rec.dot(&inbound[i]) + &cell.b;
            raw[i] = pre.mapv(f64::tanh);
            stored[i] = if masked(i) {
                Array1::zeros(hidden)
            } else {
                raw[i].clone()
            };
            prev = Some(i);
        }
        DirCache { raw, stored, inbound }
    }

    fn forward_cached(&self, token_ids: &[usize], mask: &Mask) -> Result<(Trace, Caches), BrnnError> {
        self.check_input(token_ids, mask)?;
        let x: Vec<Array1<f64>> = token_ids
            .iter()
            .map(|&id| self.params.embedding.row(id).to_owned())
            .collect();
        let fwd = self.run_direction(&self.params.fwd, &x, mask, true);
        let bwd = self.run_direction(&self.params.bwd, &x, mask, false);
        let hidden = self.config.hidden_dim;
        let mut logits = Vec::with_capacity(x.len());
        let mut probs = Vec::with_capacity(x.len());
        let mut predictions = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let mut concat = Array1::zeros(2 * hidden);
            concat.slice_mut(s![..hidden]).assign(&fwd.stored[i]);
            concat.slice_mut(s![hidden..]).assign(&bwd.stored[i]);
            let l = self.params.out_w.dot(&concat) + &self.params.out_b;
            predictions.push(argmax(&l));
            probs.push(softmax(&l));
            logits.push(l);
        }
        let trace = Trace {
            forward_hidden: fwd.stored.clone(),
            backward_hidden: bwd.stored.clone(),
            logits,
            predictions,
        };
        Ok((trace, Caches { x, fwd, bwd, probs }))
    }

    /// Runs both recurrences and the readout, zeroing hidden states where
    /// `mask` says so; an empty mask gives the reference pass.
    pub fn forward(&self, token_ids: &[usize], mask: &Mask) -> Result<Trace, BrnnError> {
        Ok(self.forward_cached(token_ids, mask)?.0)
    }

    /// Predicted tag strings for a token sequence (out-of-vocab tokens go
    /// through `<UNK>`).
    pub fn tag(&self, tokens: &[String]) -> Result<Vec<String>, BrnnError> {
        let ids = self.vocab.encode(tokens);
        let trace = self.forward(&ids, &Mask::new())?;
        Ok(trace
            .predictions
            .iter()
            .map(|&t| self.tagset.tag(t).to_string())
            .collect())
    }

    pub fn gold_ids(&self, labels: &[String]) -> Result<Vec<usize>, BrnnError> {
        labels
            .iter()
            .map(|l| {
                self.tagset
                    .id_of(l)
                    .ok_or_else(|| BrnnError::UnknownLabel(l.clone()))
            })
            .collect()
    }

    /// Mean NLL and gradients for one sequence under `mask`. Masked states
    /// contribute no gradient where the zero replaced them: under
    /// `Propagate` the whole node is dead, under `OutputOnly` only the
    /// readout edge is cut.
    fn backward(
        &self,
        token_ids: &[usize],
        gold_ids: &[usize],
        mask: &Mask,
    ) -> Result<(f64, Params), BrnnError> {
        let (trace, caches) = self.forward_cached(token_ids, mask)?;
        let n = token_ids.len();
        let hidden = self.config.hidden_dim;
        let scale = 1.0 / n as f64;
        let mut g = Params::zeros(self.vocab.len(), self.tagset.len(), &self.config);

        let mut d_stored_f = vec![Array1::zeros(hidden); n];
        let mut d_stored_b = vec![Array1::zeros(hidden); n];
        for i in 0..n {
            let mut d_logits = caches.probs[i].clone();
            d_logits[gold_ids[i]] -= 1.0;
            d_logits *= scale;
            let mut concat = Array1::zeros(2 * hidden);
            concat.slice_mut(s![..hidden]).assign(&caches.fwd.stored[i]);
            concat.slice_mut(s![hidden..]).assign(&caches.bwd.stored[i]);
            g.out_w += &d_logits
                .view()
                .insert_axis(Axis(1))
                .dot(&concat.view().insert_axis(Axis(0)));
            g.out_b += &d_logits;
            d_stored_f[i] = self.params.out_w.slice(s![.., ..hidden]).t().dot(&d_logits);
            d_stored_b[i] = self.params.out_w.slice(s![.., hidden..]).t().dot(&d_logits);
        }

        let mut d_x = vec![Array1::zeros(self.config.embedding_dim); n];
        for forward in [true, false] {
            let (cell, cache, d_stored) = if forward {
                (&self.params.fwd, &caches.fwd, &d_stored_f)
            } else {
                (&self.params.bwd, &caches.bwd, &d_stored_b)
            };
            let (g_cell, masked): (&mut Cell, Box<dyn Fn(usize) -> bool>) = if forward {
                (&mut g.fwd, Box::new(|i| mask.masks_forward(i)))
            } else {
                (&mut g.bwd, Box::new(|i| mask.masks_backward(i)))
            };
            // walk against the recurrence direction
            let order: Vec<usize> = if forward {
                (0..n).rev().collect()
            } else {
                (0..n).collect()
            };
            let mut d_inbound = Array1::zeros(hidden);
            for &i in &order {
                let mut d_raw = if masked(i) {
                    Array1::zeros(hidden)
                } else {
                    d_stored[i].clone()
                };
                let raw_feeds_next = match self.config.mask_propagation {
                    MaskPropagation::Propagate => !masked(i),
                    MaskPropagation::OutputOnly => true,
                };
                if raw_feeds_next {
                    d_raw += &d_inbound;
                }
                let d_pre = &d_raw * &cache.raw[i].mapv(|h| 1.0 - h * h);
                g_cell.w_in += &d_pre
                    .view()
                    .insert_axis(Axis(1))
                    .dot(&caches.x[i].view().insert_axis(Axis(0)));
                g_cell.w_rec += &d_pre
                    .view()
                    .insert_axis(Axis(1))
                    .dot(&cache.inbound[i].view().insert_axis(Axis(0)));
                g_cell.b += &d_pre;
                d_x[i] += &cell.w_in.t().dot(&d_pre);
                d_inbound = cell.w_rec.t().dot(&d_pre);
            }
        }
        for i in 0..n {
            let mut row = g.embedding.row_mut(token_ids[i]);
            row += &d_x[i];
        }
        Ok((loss(&trace, gold_ids), g))
    }

    pub fn save(&self, path: &Path) -> Result<(), BrnnError> {
        let file = ModelFile {
            format_version: FORMAT_VERSION,
            model: self.clone(),
        };
        let text = serde_json::to_string(&file)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BrnnError> {
        let text = std::fs::read_to_string(path)?;
        // Peek at the version before decoding tensors so mismatches get a
        // dedicated error rather than a field-level decode failure.
        #[derive(Deserialize)]
        struct VersionOnly {
            format_version: u32,
        }
        let v: VersionOnly = serde_json::from_str(&text)?;
        if v.format_version != FORMAT_VERSION {
            return Err(BrnnError::FormatVersion {
                found: v.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let file: ModelFile = serde_json::from_str(&text)?;
        Ok(file.model)
    }
}

#[cfg(test)]
#[allow(clippy::too_many_arguments)]
pub(crate) fn model_from_parts(
    config: ModelConfig,
    vocab: Vocab,
    tagset: Tagset,
    embedding: Array2<f64>,
    fwd: (Array2<f64>, Array2<f64>, Array1<f64>),
    bwd: (Array2<f64>, Array2<f64>, Array1<f64>),
    out_w: Array2<f64>,
    out_b: Array1<f64>,
) -> BrnnModel {
    BrnnModel {
        config,
        vocab,
        tagset,
        params: Params {
            embedding,
            fwd: Cell { w_in: fwd.0, w_rec: fwd.1, b: fwd.2 },
            bwd: Cell { w_in: bwd.0, w_rec: bwd.1, b: bwd.2 },
            out_w,
            out_b,
        },
    }
}

/// Loss and dev accuracy recorded after each epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// None when the dev set is empty.
    pub dev_accuracy: Option<f64>,
}

/// Fraction of tokens whose predicted tag equals the gold tag.
pub fn token_accuracy(model: &BrnnModel, data: &[TaggedSequence]) -> Result<f64, BrnnError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for seq in data {
        let predicted = model.tag(&seq.tokens)?;
        for (p, gold) in predicted.iter().zip(&seq.labels) {
            if model.tagset.id_of(gold).is_none() {
                return Err(BrnnError::UnknownLabel(gold.clone()));
            }
            if p == gold {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

struct Adam {
    m: Params,
    v: Params,
    t: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(vocab: usize, tags: usize, cfg: &ModelConfig) -> Self {
        Self {
            m: Params::zeros(vocab, tags, cfg),
            v: Params::zeros(vocab, tags, cfg),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for (((_, mut p), (_, g)), ((_, mut m), (_, mut v))) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()))
        {
            Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                    *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
                });
        }
    }
}

/// Adam training over length-bucketed mini-batches with a seeded per-epoch
/// shuffle. Aborts with a diagnostic if the loss or any parameter goes
/// non-finite.
pub fn train(
    mut model: BrnnModel,
    train_data: &[TaggedSequence],
    dev_data: &[TaggedSequence],
    config: &ModelConfig,
) -> Result<(BrnnModel, Vec<EpochMetrics>), BrnnError> {
    if train_data.is_empty() {
        return Err(BrnnError::EmptyTrainingSet);
    }
    let encoded: Vec<(Vec<usize>, Vec<usize>)> = train_data
        .iter()
        .map(|seq| Ok((model.vocab.encode(&seq.tokens), model.gold_ids(&seq.labels)?)))
        .collect::<Result<_, BrnnError>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(model.vocab.len(), model.tagset.len(), config);
    let empty_mask = Mask::new();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        order.shuffle(&mut rng);

        // Group the shuffled walk into same-length buckets; a bucket
        // flushes as a batch when full, remainders flush at epoch end in
        // first-occurrence order.
        let mut buckets: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut batches: Vec<Vec<usize>> = Vec::new();
        for &idx in &order {
            let len = encoded[idx].0.len();
            let bucket = match buckets.iter_mut().find(|(l, _)| *l == len) {
                Some((_, b)) => b,
                None => {
                    buckets.push((len, Vec::new()));
                    &mut buckets.last_mut().unwrap().1
                }
            };
            bucket.push(idx);
            if bucket.len() == config.batch_size {
                batches.push(std::mem::take(bucket));
            }
        }
        for (_, bucket) in buckets {
            if !bucket.is_empty() {
                batches.push(bucket);
            }
        }

        let mut epoch_loss = 0.0;
        for (batch_no, batch) in batches.iter().enumerate() {
            let mut grads = Params::zeros(model.vocab.len(), model.tagset.len(), config);
            let mut batch_loss = 0.0;
            for &idx in batch {
                let (ids, gold) = &encoded[idx];
                let (l, g) = model.backward(ids, gold, &empty_mask)?;
                batch_loss += l;
                grads.add_scaled(&g, 1.0);
            }
            let inv = 1.0 / batch.len() as f64;
            batch_loss *= inv;
            if !batch_loss.is_finite() {
                return Err(BrnnError::NonFinite { what: "loss", epoch, batch: batch_no });
            }
            let mut mean = Params::zeros(model.vocab.len(), model.tagset.len(), config);
            mean.add_scaled(&grads, inv);
            adam.step(&mut model.params, &mean, config.learning_rate);
            if !model.params.all_finite() {
                return Err(BrnnError::NonFinite { what: "parameters", epoch, batch: batch_no });
            }
            epoch_loss += batch_loss * batch.len() as f64;
        }
        let dev_accuracy = if dev_data.is_empty() {
            None
        } else {
            Some(token_accuracy(&model, dev_data)?)
        };
        history.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss / encoded.len() as f64,
            dev_accuracy,
        });
    }
    Ok((model, history))
}

/// Report from one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// (group name, max relative error within the group)
    pub groups: Vec<(&'static str, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-10 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Central finite differences against the analytic gradient on a random
/// subsample of at least 20 coordinates per parameter group (or the whole
/// group when smaller). Returns the max relative error over all groups.
pub fn grad_check(model: &BrnnModel, sample: &TaggedSequence, epsilon: f64) -> Result<f64, BrnnError> {
    Ok(grad_check_masked(model, sample, &Mask::new(), epsilon)?.max_rel_err())
}

/// Like [`grad_check`] but for the loss under an intervention mask.
pub fn grad_check_masked(
    model: &BrnnModel,
    sample: &TaggedSequence,
    mask: &Mask,
    epsilon: f64,
) -> Result<GradCheckReport, BrnnError> {
    assert!(epsilon > 0.0 && epsilon <= 1e-2, "epsilon must be in (0, 1e-2]");
    let ids = model.vocab.encode(&sample.tokens);
    let gold = model.gold_ids(&sample.labels)?;
    let (_, analytic) = model.backward(&ids, &gold, mask)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x9d1c_e5ee);
    let mut groups = Vec::new();
    let group_sizes: Vec<(usize, &'static str)> = analytic
        .tensors()
        .iter()
        .map(|(name, t)| (t.len(), *name))
        .collect();
    for (gi, (len, name)) in group_sizes.iter().enumerate() {
        let mut coords: Vec<usize> = (0..*len).collect();
        if *len > 20 {
            coords.shuffle(&mut rng);
            coords.truncate(20);
            coords.sort_unstable();
        }
        let mut worst = 0.0f64;
        for &k in &coords {
            let a = analytic.tensors()[gi].1.as_slice().unwrap()[k];
            let mut probe = model.clone();
            {
                let mut ts = probe.params.tensors_mut();
                ts[gi].1.as_slice_mut().unwrap()[k] += epsilon;
            }
            let plus = loss(&probe.forward(&ids, mask)?, &gold);
            {
                let mut ts = probe.params.tensors_mut();
                ts[gi].1.as_slice_mut().unwrap()[k] -= 2.0 * epsilon;
            }
            let minus = loss(&probe.forward(&ids, mask)?, &gold);
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(rel_err(a, numeric));
        }
        groups.push((*name, worst));
    }
    Ok(GradCheckReport { groups })
}
