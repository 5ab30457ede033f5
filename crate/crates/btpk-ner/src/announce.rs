//! Public-announcement extraction: enumerate candidate grams, zero their
//! hidden states, and keep the minimal spans whose removal flips the
//! target entity's coarse label (method of difference — the masked run
//! differs from the reference run in exactly one gram).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::brnn::{BrnnError, BrnnModel, Mask, Side, Trace};
use crate::corpus::split_tag;

#[derive(Debug, Error)]
pub enum AnnounceError {
    #[error("target span {start}..={end} out of range for sequence length {len}")]
    TargetOutOfRange { start: usize, end: usize, len: usize },
    #[error(
        "target predictions are not a single coarse label: position {position} \
         predicts `{found}` but position {first} predicts `{expected}`"
    )]
    InconsistentTarget {
        position: usize,
        found: String,
        first: usize,
        expected: String,
    },
    #[error(transparent)]
    Brnn(#[from] BrnnError),
}

/// A contiguous candidate span, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[usize; 2]", into = "[usize; 2]")]
pub struct GramSpan {
    pub start: usize,
    pub end: usize,
}

impl GramSpan {
    pub fn new(start: usize, end: usize) -> Self {
        assert!(start <= end, "gram start {start} > end {end}");
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, start: usize, end: usize) -> bool {
        self.start <= end && start <= self.end
    }

    /// True when `self` covers `other` and is strictly larger.
    pub fn strictly_contains(&self, other: &GramSpan) -> bool {
        self.start <= other.start && other.end <= self.end && self != other
    }
}

impl TryFrom<[usize; 2]> for GramSpan {
    type Error = String;

    fn try_from(v: [usize; 2]) -> Result<Self, String> {
        if v[0] > v[1] {
            return Err(format!("gram start {} > end {}", v[0], v[1]));
        }
        Ok(Self { start: v[0], end: v[1] })
    }
}

impl From<GramSpan> for [usize; 2] {
    fn from(g: GramSpan) -> Self {
        [g.start, g.end]
    }
}

/// A maximal predicted entity run, inclusive on both ends.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub entity_type: String,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, entity_type: impl Into<String>) -> Self {
        assert!(start <= end, "entity start {start} > end {end}");
        Self { start, end, entity_type: entity_type.into() }
    }

    pub fn covers(&self, pos: usize) -> bool {
        self.start <= pos && pos <= self.end
    }
}

/// A gram whose masking on `side` reproducibly flips the target span's
/// coarse label from `original_label` to `flipped_label`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "AnnouncementRepr", into = "AnnouncementRepr")]
pub struct Announcement {
    pub gram: GramSpan,
    pub side: Side,
    pub target: EntitySpan,
    pub original_label: String,
    pub flipped_label: String,
}

/// Flat serialized shape; the target's type string is the original label,
/// so it is not stored twice.
#[derive(Serialize, Deserialize)]
struct AnnouncementRepr {
    target: [usize; 2],
    original: String,
    gram: [usize; 2],
    side: Side,
    flipped_to: String,
}

impl TryFrom<AnnouncementRepr> for Announcement {
    type Error = String;

    fn try_from(r: AnnouncementRepr) -> Result<Self, String> {
        if r.target[0] > r.target[1] {
            return Err(format!("target start {} > end {}", r.target[0], r.target[1]));
        }
        Ok(Self {
            gram: GramSpan::try_from(r.gram)?,
            side: r.side,
            target: EntitySpan::new(r.target[0], r.target[1], r.original.clone()),
            original_label: r.original,
            flipped_label: r.flipped_to,
        })
    }
}

impl From<Announcement> for AnnouncementRepr {
    fn from(a: Announcement) -> Self {
        Self {
            target: [a.target.start, a.target.end],
            original: a.original_label,
            gram: a.gram.into(),
            side: a.side,
            flipped_to: a.flipped_label,
        }
    }
}

/// One target's announcements in the report shape
/// `{target, original, announcements:[{gram, side, flipped_to}…]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnouncementReport {
    pub target: [usize; 2],
    pub original: String,
    pub announcements: Vec<ReportEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub gram: [usize; 2],
    pub side: Side,
    pub flipped_to: String,
}

impl AnnouncementReport {
    /// Assembles the report for one target from its extracted announcements.
    pub fn new(target: &EntitySpan, original: &str, announcements: &[Announcement]) -> Self {
        Self {
            target: [target.start, target.end],
            original: original.to_string(),
            announcements: announcements
                .iter()
                .map(|a| ReportEntry {
                    gram: a.gram.into(),
                    side: a.side,
                    flipped_to: a.flipped_label.clone(),
                })
                .collect(),
        }
    }
}

fn coarse_of(tag: &str) -> String {
    match split_tag(tag) {
        Some((_, ty)) => ty.to_string(),
        None => tag.to_string(),
    }
}

/// Groups predicted tags into maximal entity runs. A stray `I_x` (no head,
/// or after a different type) leniently starts a new span.
pub fn entity_spans(predictions: &[String]) -> Vec<EntitySpan> {
    let mut spans: Vec<EntitySpan> = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, tag) in predictions.iter().enumerate() {
        match split_tag(tag) {
            Some(('B', ty)) => {
                if let Some((start, t)) = open.take() {
                    spans.push(EntitySpan::new(start, i - 1, t));
                }
                open = Some((i, ty.to_string()));
            }
            Some(('I', ty)) => match &open {
                Some((_, t)) if t == ty => {}
                _ => {
                    if let Some((start, t)) = open.take() {
                        spans.push(EntitySpan::new(start, i - 1, t));
                    }
                    open = Some((i, ty.to_string()));
                }
            },
            _ => {
                if let Some((start, t)) = open.take() {
                    spans.push(EntitySpan::new(start, i - 1, t));
                }
            }
        }
    }
    if let Some((start, t)) = open {
        spans.push(EntitySpan::new(start, predictions.len() - 1, t));
    }
    spans
}

/// All contiguous spans of length ≤ `max_len` that avoid `exclude`,
/// ordered by (length, start).
pub fn enumerate_grams(n: usize, max_len: usize, exclude: Option<(usize, usize)>) -> Vec<GramSpan> {
    assert!(max_len >= 1, "max_len must be at least 1");
    let mut grams = Vec::new();
    for len in 1..=max_len.min(n) {
        for start in 0..=(n - len) {
            let gram = GramSpan::new(start, start + len - 1);
            if let Some((a, b)) = exclude {
                if gram.overlaps(a, b) {
                    continue;
                }
            }
            grams.push(gram);
        }
    }
    grams
}

/// Forward pass with the gram's positions zeroed on `side`.
pub fn intervene(
    model: &BrnnModel,
    token_ids: &[usize],
    gram: GramSpan,
    side: Side,
) -> Result<Trace, BrnnError> {
    model.forward(token_ids, &Mask::span(gram.start, gram.end, side))
}

/// Coarse label of the target span under `predictions`, requiring every
/// position to agree.
fn uniform_coarse(
    tagset_tags: &dyn Fn(usize) -> String,
    predictions: &[usize],
    target: &EntitySpan,
) -> Result<String, AnnounceError> {
    let first = coarse_of(&tagset_tags(predictions[target.start]));
    for pos in target.start + 1..=target.end {
        let found = coarse_of(&tagset_tags(predictions[pos]));
        if found != first {
            return Err(AnnounceError::InconsistentTarget {
                position: pos,
                found,
                first: target.start,
                expected: first,
            });
        }
    }
    Ok(first)
}

/// Majority coarse label over the target under a masked run; `None` when
/// the original keeps a strict majority, otherwise the label flipped to
/// (the most frequent non-original coarse label, ties broken
/// lexicographically; a tie with the original counts as a flip).
fn flip_of(
    tagset_tags: &dyn Fn(usize) -> String,
    predictions: &[usize],
    target: &EntitySpan,
    original: &str,
) -> Option<String> {
    let mut counts: std::collections::BTreeMap<String, usize> = std::collections::BTreeMap::new();
    for pos in target.start..=target.end {
        *counts.entry(coarse_of(&tagset_tags(predictions[pos]))).or_insert(0) += 1;
    }
    let max = *counts.values().max().unwrap();
    let original_wins =
        counts.get(original) == Some(&max) && counts.values().filter(|&&c| c == max).count() == 1;
    if original_wins {
        return None;
    }
    counts
        .iter()
        .filter(|(label, _)| label.as_str() != original)
        .max_by(|(la, ca), (lb, cb)| ca.cmp(cb).then(lb.cmp(la)))
        .map(|(label, _)| label.clone())
}

/// Scan settings; defaults mirror the CLI (`max_len` 3, all three sides).
#[derive(Debug, Clone)]
pub struct ExtractOptions {
    pub max_len: usize,
    pub sides: Vec<Side>,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self { max_len: 3, sides: vec![Side::Both, Side::Forward, Side::Backward] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractStats {
    /// Number of masked forward passes run (|grams| × |sides|).
    pub interventions: usize,
}

/// Masks every candidate gram on every requested side and reports the
/// minimal flips: an announcement is dropped if its gram strictly contains
/// another announcement's gram with the same side. Results are ordered by
/// (gram length, gram start, side both < forward < backward).
pub fn extract_announcements_opts(
    model: &BrnnModel,
    token_ids: &[usize],
    target: &EntitySpan,
    opts: &ExtractOptions,
) -> Result<(Vec<Announcement>, ExtractStats), AnnounceError> {
    let n = token_ids.len();
    if target.end >= n {
        return Err(AnnounceError::TargetOutOfRange {
            start: target.start,
            end: target.end,
            len: n,
        });
    }
    let tags = |id: usize| model.tagset.tag(id).to_string();
    let base = model.forward(token_ids, &Mask::new())?;
    let original = uniform_coarse(&tags, &base.predictions, target)?;

    let grams = enumerate_grams(n, opts.max_len, Some((target.start, target.end)));
    let mut candidates = Vec::new();
    let mut interventions = 0;
    for gram in &grams {
        for &side in &opts.sides {
            let trace = intervene(model, token_ids, *gram, side)?;
            interventions += 1;
            if let Some(flipped) = flip_of(&tags, &trace.predictions, target, &original) {
                candidates.push(Announcement {
                    gram: *gram,
                    side,
                    target: EntitySpan::new(target.start, target.end, original.clone()),
                    original_label: original.clone(),
                    flipped_label: flipped,
                });
            }
        }
    }

    let minimal: Vec<Announcement> = candidates
        .iter()
        .filter(|a| {
            !candidates
                .iter()
                .any(|b| b.side == a.side && a.gram.strictly_contains(&b.gram))
        })
        .cloned()
        .collect();
    let mut out = minimal;
    out.sort_by_key(|a| (a.gram.len(), a.gram.start, a.side));
    Ok((out, ExtractStats { interventions }))
}

/// [`extract_announcements_opts`] with all three sides and the given
/// gram-length bound.
pub fn extract_announcements(
    model: &BrnnModel,
    token_ids: &[usize],
    target: &EntitySpan,
    max_len: usize,
) -> Result<Vec<Announcement>, AnnounceError> {
    let opts = ExtractOptions { max_len, ..ExtractOptions::default() };
    Ok(extract_announcements_opts(model, token_ids, target, &opts)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil;

    fn tags(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn entity_spans_finds_canonical_run() {
        let spans = entity_spans(&tags(&["O", "B_video", "I_video", "O"]));
        assert_eq!(spans, vec![EntitySpan::new(1, 2, "video")]);
    }

    #[test]
    fn entity_spans_splits_adjacent_b_tags() {
        let spans = entity_spans(&tags(&["B_book", "B_book"]));
        assert_eq!(
            spans,
            vec![EntitySpan::new(0, 0, "book"), EntitySpan::new(1, 1, "book")]
        );
    }

    #[test]
    fn entity_spans_empty_on_all_o() {
        assert!(entity_spans(&tags(&["O", "O"])).is_empty());
    }

    #[test]
    fn entity_spans_recovers_stray_inside_tags() {
        let spans = entity_spans(&tags(&["O", "I_video", "I_video"]));
        assert_eq!(spans, vec![EntitySpan::new(1, 2, "video")]);
        let spans = entity_spans(&tags(&["B_book", "I_video"]));
        assert_eq!(
            spans,
            vec![EntitySpan::new(0, 0, "book"), EntitySpan::new(1, 1, "video")]
        );
    }

    #[test]
    fn grams_singletons_only() {
        let grams = enumerate_grams(3, 1, None);
        assert_eq!(grams, vec![GramSpan::new(0, 0), GramSpan::new(1, 1), GramSpan::new(2, 2)]);
    }

    #[test]
    fn grams_count_all_spans() {
        assert_eq!(enumerate_grams(3, 3, None).len(), 6);
    }

    #[test]
    fn grams_respect_exclusion() {
        let grams = enumerate_grams(3, 1, Some((1, 1)));
        assert_eq!(grams, vec![GramSpan::new(0, 0), GramSpan::new(2, 2)]);
    }

    #[test]
    fn grams_are_ordered_by_length_then_start() {
        let grams = enumerate_grams(5, 3, None);
        let mut sorted = grams.clone();
        sorted.sort_by_key(|g| (g.len(), g.start));
        assert_eq!(grams, sorted);
    }

    #[test]
    fn whole_sequence_intervention_yields_constant_logits() {
        let m = testutil::and_gate_model();
        let seq = testutil::and_gate_sequence();
        let ids = m.vocab.encode(&seq.tokens);
        let trace = intervene(&m, &ids, GramSpan::new(0, ids.len() - 1), Side::Both).unwrap();
        for i in 1..ids.len() {
            for (a, b) in trace.logits[0].iter().zip(trace.logits[i].iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn context_free_model_has_no_announcements() {
        let m = testutil::context_free_model();
        let seq = testutil::context_free_sequence();
        let ids = m.vocab.encode(&seq.tokens);
        let target = EntitySpan::new(1, 1, "video");
        let opts = ExtractOptions { max_len: ids.len(), ..ExtractOptions::default() };
        let (anns, stats) = extract_announcements_opts(&m, &ids, &target, &opts).unwrap();
        assert!(anns.is_empty());
        // every non-overlapping span was tried on every side
        let grams = enumerate_grams(ids.len(), ids.len(), Some((1, 1)));
        assert_eq!(stats.interventions, 3 * grams.len());
    }

    #[test]
    fn and_gate_reports_every_backward_cut_as_minimal() {
        let m = testutil::and_gate_model();
        let seq = testutil::and_gate_sequence();
        let ids = m.vocab.encode(&seq.tokens);
        let target = EntitySpan::new(1, 1, "video");
        let anns = extract_announcements(&m, &ids, &target, 1).unwrap();
        let got: Vec<(usize, usize, Side, &str)> = anns
            .iter()
            .map(|a| (a.gram.start, a.gram.end, a.side, a.flipped_label.as_str()))
            .collect();
        assert_eq!(
            got,
            vec![
                (2, 2, Side::Both, "O"),
                (2, 2, Side::Backward, "O"),
                (3, 3, Side::Both, "O"),
                (3, 3, Side::Backward, "O"),
                (4, 4, Side::Both, "O"),
                (4, 4, Side::Backward, "O"),
            ]
        );
        for a in &anns {
            assert_eq!(a.original_label, "video");
            assert_eq!(a.target, EntitySpan::new(1, 1, "video"));
        }
    }

    #[test]
    fn longer_grams_lose_to_contained_minimal_ones() {
        let m = testutil::and_gate_model();
        let seq = testutil::and_gate_sequence();
        let ids = m.vocab.encode(&seq.tokens);
        let target = EntitySpan::new(1, 1, "video");
        // raising max_len adds flipping pairs/triples like (3,4) and (4,5),
        // but each strictly contains a flipping singleton on the same side
        let anns = extract_announcements(&m, &ids, &target, 3).unwrap();
        assert!(anns.iter().all(|a| a.gram.len() == 1), "{anns:?}");
        assert_eq!(anns.len(), 6);
    }

    #[test]
    fn announced_flips_reproduce() {
        let m = testutil::and_gate_model();
        let seq = testutil::and_gate_sequence();
        let ids = m.vocab.encode(&seq.tokens);
        let target = EntitySpan::new(1, 1, "video");
        for a in extract_announcements(&m, &ids, &target, 3).unwrap() {
            let trace = intervene(&m, &ids, a.gram, a.side).unwrap();
            let tag = m.tagset.tag(trace.predictions[1]).to_string();
            assert_eq!(coarse_of(&tag), a.flipped_label);
            assert!(!a.gram.overlaps(target.start, target.end));
            assert_ne!(a.original_label, a.flipped_label);
        }
    }

    #[test]
    fn inconsistent_target_predictions_are_rejected() {
        let m = testutil::and_gate_model();
        let seq = testutil::and_gate_sequence();
        let ids = m.vocab.encode(&seq.tokens);
        // positions 1..=2 predict B_video then O
        let err = extract_announcements(&m, &ids, &EntitySpan::new(1, 2, "video"), 1).unwrap_err();
        assert!(matches!(err, AnnounceError::InconsistentTarget { position: 2, .. }));
    }

    #[test]
    fn all_o_target_is_allowed_and_quiet() {
        let m = testutil::and_gate_model();
        let seq = testutil::and_gate_sequence();
        let ids = m.vocab.encode(&seq.tokens);
        let anns = extract_announcements(&m, &ids, &EntitySpan::new(3, 3, "O"), 1).unwrap();
        assert!(anns.is_empty());
    }

    #[test]
    fn out_of_range_target_is_rejected() {
        let m = testutil::and_gate_model();
        let ids = m.vocab.encode(&testutil::and_gate_sequence().tokens);
        let err = extract_announcements(&m, &ids, &EntitySpan::new(5, 6, "video"), 1).unwrap_err();
        assert!(matches!(err, AnnounceError::TargetOutOfRange { .. }));
    }

    #[test]
    fn report_serializes_to_the_documented_shape() {
        let target = EntitySpan::new(1, 1, "video");
        let ann = Announcement {
            gram: GramSpan::new(4, 4),
            side: Side::Both,
            target: target.clone(),
            original_label: "video".into(),
            flipped_label: "O".into(),
        };
        let report = AnnouncementReport::new(&target, "video", &[ann]);
        assert_eq!(
            serde_json::to_string(&report).unwrap(),
            r#"{"target":[1,1],"original":"video","announcements":[{"gram":[4,4],"side":"both","flipped_to":"O"}]}"#
        );
    }

    #[test]
    fn announcement_round_trips_through_json() {
        let ann = Announcement {
            gram: GramSpan::new(4, 5),
            side: Side::Backward,
            target: EntitySpan::new(1, 2, "video"),
            original_label: "video".into(),
            flipped_label: "book".into(),
        };
        let text = serde_json::to_string(&ann).unwrap();
        assert_eq!(
            text,
            r#"{"target":[1,2],"original":"video","gram":[4,5],"side":"backward","flipped_to":"book"}"#
        );
        let back: Announcement = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ann);
    }

    #[test]
    fn majority_ties_count_as_flips() {
        // two-position target predicting [video, O] after masking: tie, so
        // the original no longer strictly wins and the flip goes to `O`
        let tagnames = ["O", "B_video"];
        let f = |id: usize| tagnames[id].to_string();
        let target = EntitySpan::new(0, 1, "video");
        assert_eq!(flip_of(&f, &[1, 0], &target, "video"), Some("O".to_string()));
        assert_eq!(flip_of(&f, &[1, 1], &target, "video"), None);
        assert_eq!(flip_of(&f, &[0, 0], &target, "video"), Some("O".to_string()));
    }
}
