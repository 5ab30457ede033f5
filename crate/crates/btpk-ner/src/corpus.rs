//! BIO-tagged corpora: CoNLL parsing, tag-scheme validation, vocab
//! construction, dataset splitting, and a synthetic disambiguation
//! generator.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved token for out-of-vocabulary words.
pub const UNK_TOKEN: &str = "<UNK>";
/// Reserved start marker (the height-0 vertex of a tree; never tagged).
pub const START_TOKEN: &str = "<s>";

pub const UNK_ID: usize = 0;
pub const START_ID: usize = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: expected `token<TAB>label`, got {fields} fields")]
    BadFieldCount { line: usize, fields: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("tokens/labels length mismatch: {tokens} vs {labels}")]
    LengthMismatch { tokens: usize, labels: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("test_fraction must be in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("invalid tagset: {0}")]
    BadTagset(String),
    #[error("synthetic spec needs at least 2 entity types, got {0}")]
    TooFewTypes(usize),
    #[error("synthetic spec type `{0}`: {1}")]
    BadTypeSpec(String, String),
}

/// A token sequence with one BIO label per token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSequence {
    pub tokens: Vec<String>,
    pub labels: Vec<String>,
}

impl TaggedSequence {
    pub fn new(tokens: Vec<String>, labels: Vec<String>) -> Result<Self, CorpusError> {
        if tokens.is_empty() {
            return Err(CorpusError::EmptySequence);
        }
        if tokens.len() != labels.len() {
            return Err(CorpusError::LengthMismatch {
                tokens: tokens.len(),
                labels: labels.len(),
            });
        }
        Ok(Self { tokens, labels })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// The BIO tag inventory: `O` plus `B_<type>`/`I_<type>` pairs.
///
/// Both `_` and `-` are accepted as prefix separators so files tagged
/// `B-PER` work alongside the default `B_video` style.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tagset {
    tags: Vec<String>,
    types: Vec<String>,
}

/// Split a tag into its BIO prefix and type name, e.g. `B_video` ->
/// `('B', "video")`. `O` and malformed tags return `None`.
pub fn split_tag(tag: &str) -> Option<(char, &str)> {
    let mut chars = tag.chars();
    let prefix = chars.next()?;
    if prefix != 'B' && prefix != 'I' {
        return None;
    }
    let rest = chars.as_str();
    let sep = rest.chars().next()?;
    if sep != '_' && sep != '-' {
        return None;
    }
    let ty = &rest[sep.len_utf8()..];
    if ty.is_empty() {
        None
    } else {
        Some((prefix, ty))
    }
}

impl Default for Tagset {
    /// The three-type tagset used by the synthetic generator.
    fn default() -> Self {
        Self::from_types(&["book", "music", "video"]).expect("three-type tagset is well formed")
    }
}

impl Tagset {
    /// Builds a tagset from an explicit tag list. Requires `O`, well-formed
    /// `B_`/`I_` tags, and both variants for every type.
    pub fn new(tags: Vec<String>) -> Result<Self, CorpusError> {
        if !tags.iter().any(|t| t == "O") {
            return Err(CorpusError::BadTagset("missing `O`".into()));
        }
        let mut b_types = Vec::new();
        let mut i_types = Vec::new();
        for tag in &tags {
            if tag == "O" {
                continue;
            }
            match split_tag(tag) {
                Some(('B', ty)) => b_types.push(ty.to_string()),
                Some(('I', ty)) => i_types.push(ty.to_string()),
                _ => {
                    return Err(CorpusError::BadTagset(format!(
                        "tag `{tag}` is not `O`, `B_<type>` or `I_<type>`"
                    )))
                }
            }
        }
        for ty in &b_types {
            if !i_types.contains(ty) {
                return Err(CorpusError::BadTagset(format!("type `{ty}` has B_ but no I_")));
            }
        }
        for ty in &i_types {
            if !b_types.contains(ty) {
                return Err(CorpusError::BadTagset(format!("type `{ty}` has I_ but no B_")));
            }
        }
        let mut types = b_types;
        types.sort();
        types.dedup();
        Ok(Self { tags, types })
    }

    /// The canonical tagset for a set of type names: `O` first, then
    /// `B_<type>`, `I_<type>` pairs in sorted type order.
    pub fn from_types<S: AsRef<str>>(types: &[S]) -> Result<Self, CorpusError> {
        let mut names: Vec<String> = types.iter().map(|s| s.as_ref().to_string()).collect();
        names.sort();
        names.dedup();
        let mut tags = vec!["O".to_string()];
        for ty in &names {
            tags.push(format!("B_{ty}"));
            tags.push(format!("I_{ty}"));
        }
        Self::new(tags)
    }

    /// Collects every label in `data` into a tagset, adding any missing
    /// `B_`/`I_` twin so files with singleton entities still validate.
    pub fn infer(data: &[TaggedSequence]) -> Result<Self, CorpusError> {
        let mut tags: Vec<String> = vec!["O".to_string()];
        for seq in data {
            for label in &seq.labels {
                if !tags.contains(label) {
                    tags.push(label.clone());
                }
            }
        }
        let mut extra = Vec::new();
        for tag in &tags {
            if let Some((prefix, ty)) = split_tag(tag) {
                let sep = tag.chars().nth(1).unwrap();
                let twin = format!("{}{}{}", if prefix == 'B' { 'I' } else { 'B' }, sep, ty);
                if !tags.contains(&twin) && !extra.contains(&twin) {
                    extra.push(twin);
                }
            }
        }
        tags.extend(extra);
        Self::new(tags)
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t == tag)
    }

    pub fn id_of(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }

    pub fn tag(&self, id: usize) -> &str {
        &self.tags[id]
    }
}

/// Token-to-id mapping with reserved `<UNK>` (id 0) and start marker (id 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
}

impl From<VocabRepr> for Vocab {
    fn from(repr: VocabRepr) -> Self {
        Vocab::from_tokens(repr.tokens)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { tokens: v.tokens }
    }
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id for a token, falling back to `<UNK>` for out-of-vocab words.
    pub fn id_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Maps a token sequence to ids, with unknown tokens going to `<UNK>`.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_of(t)).collect()
    }
}

/// Parses two-column CoNLL text: `token<TAB>label` lines, blank-line
/// separated sentences. Labels are not checked against any tagset here;
/// run [`validate_bio`] for that.
pub fn parse_conll(text: &str) -> Result<Vec<TaggedSequence>, CorpusError> {
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            if !tokens.is_empty() {
                out.push(TaggedSequence::new(
                    std::mem::take(&mut tokens),
                    std::mem::take(&mut labels),
                )?);
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(CorpusError::BadFieldCount {
                line: lineno + 1,
                fields: fields.len(),
            });
        }
        tokens.push(fields[0].to_string());
        labels.push(fields[1].to_string());
    }
    if !tokens.is_empty() {
        out.push(TaggedSequence::new(tokens, labels)?);
    }
    Ok(out)
}

/// Renders sequences back to the CoNLL format accepted by [`parse_conll`].
pub fn render_conll(data: &[TaggedSequence]) -> String {
    let mut out = String::new();
    for (i, seq) in data.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (tok, lab) in seq.tokens.iter().zip(&seq.labels) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(lab);
            out.push('\n');
        }
    }
    out
}

/// One BIO violation: the offending position and what rule it breaks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BioViolation {
    pub position: usize,
    pub reason: String,
}

/// Checks tagset membership and B/I adjacency. Every violating position
/// is reported; an empty list means the sequence is well-formed.
pub fn validate_bio(seq: &TaggedSequence, tagset: &Tagset) -> Vec<BioViolation> {
    let mut violations = Vec::new();
    let mut prev: Option<&str> = None;
    for (i, label) in seq.labels.iter().enumerate() {
        if !tagset.contains(label) {
            violations.push(BioViolation {
                position: i,
                reason: format!("label `{label}` not in tagset"),
            });
            prev = None;
            continue;
        }
        if let Some(('I', ty)) = split_tag(label) {
            let ok = match prev.and_then(split_tag) {
                Some((_, prev_ty)) => prev_ty == ty,
                None => false,
            };
            if !ok {
                violations.push(BioViolation {
                    position: i,
                    reason: format!("`{label}` not preceded by B/I of type `{ty}`"),
                });
            }
        }
        prev = Some(label);
    }
    violations
}

/// Assigns dense ids to tokens with frequency >= `min_freq`, in first-
/// occurrence order after the reserved `<UNK>` and start-marker slots.
pub fn build_vocab(data: &[TaggedSequence], min_freq: usize) -> Result<Vocab, CorpusError> {
    if data.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }
    let min_freq = min_freq.max(1);
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for seq in data {
        for tok in &seq.tokens {
            *freq.entry(tok).or_insert(0) += 1;
        }
    }
    let mut tokens = vec![UNK_TOKEN.to_string(), START_TOKEN.to_string()];
    let mut seen: HashMap<&str, ()> = HashMap::new();
    for seq in data {
        for tok in &seq.tokens {
            if seen.contains_key(tok.as_str()) {
                continue;
            }
            seen.insert(tok, ());
            if freq[tok.as_str()] >= min_freq && tok != UNK_TOKEN && tok != START_TOKEN {
                tokens.push(tok.clone());
            }
        }
    }
    Ok(Vocab::from_tokens(tokens))
}

/// Deterministic seeded shuffle-and-cut: the first `round(n * test_fraction)`
/// shuffled sequences become the test set.
pub fn split_dataset(
    data: &[TaggedSequence],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<TaggedSequence>, Vec<TaggedSequence>), CorpusError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CorpusError::BadFraction(test_fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..data.len()).collect();
    indices.shuffle(&mut rng);
    let test_n = (data.len() as f64 * test_fraction).round() as usize;
    let test = indices[..test_n].iter().map(|&i| data[i].clone()).collect();
    let train = indices[test_n..].iter().map(|&i| data[i].clone()).collect();
    Ok((train, test))
}

/// Per-type generation inputs: ambiguous entity surfaces and the context
/// keywords that mark the type.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeSpec {
    pub entities: Vec<String>,
    pub keywords: Vec<String>,
}

/// Config document for [`generate_synthetic`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub sequences: usize,
    /// Keyed by entity type name; BTreeMap keeps generation order stable.
    pub types: BTreeMap<String, TypeSpec>,
}

impl SyntheticSpec {
    /// The built-in three-way disambiguation spec: a shared pool of quoted
    /// names that read as a video, book, or music title depending on the
    /// keyword nearby ("movie", "book", "song").
    pub fn default_three_way(sequences: usize) -> Self {
        let pool: Vec<String> = ["hobbits", "avatar", "dune", "coco", "titanic", "matrix"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut types = BTreeMap::new();
        for (ty, kw) in [("video", "movie"), ("book", "book"), ("music", "song")] {
            types.insert(
                ty.to_string(),
                TypeSpec {
                    entities: pool.clone(),
                    keywords: vec![kw.to_string()],
                },
            );
        }
        Self { sequences, types }
    }

    pub fn tagset(&self) -> Result<Tagset, CorpusError> {
        let names: Vec<&String> = self.types.keys().collect();
        Tagset::from_types(&names)
    }
}

const OPENERS: &[&[&str]] = &[
    &["see"],
    &["we", "like"],
    &["people", "often", "mention"],
    &["folks", "around", "here", "say"],
];
const LINKS: &[&str] = &["over", "unlike"];
const TRAILERS: &[&[&str]] = &[&[], &["rocks"], &["was", "fun"], &["was", "really", "fun"]];

/// Generates quoted-name sentences where a single context keyword is the
/// only evidence for the entity's type (and for its being an entity at
/// all). Each sentence holds three quoted spans drawn from one shared
/// surface pool: one typed span whose close quote is immediately followed
/// by the keyword, and two plain spans labeled `O` with no adjacent
/// keyword. The typed span's slot is uniform over the three positions, so
/// neither position nor surface form carries label signal — keyword
/// adjacency is the lone difference between a typed span and an `O` span,
/// and erasing the keyword leaves exactly an attested `O` pattern.
///
/// Shape (`E` typed, `D` labeled `O`, `E` in any slot):
/// `opener " D " link " E " KEYWORD link " D "`, with an optional short
/// trailer only when the keyword lands at the end; a sentence whose last
/// span is plain always stops at its close quote.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<Vec<TaggedSequence>, CorpusError> {
    if spec.types.len() < 2 {
        return Err(CorpusError::TooFewTypes(spec.types.len()));
    }
    for (name, ts) in &spec.types {
        if ts.entities.is_empty() {
            return Err(CorpusError::BadTypeSpec(name.clone(), "empty entity pool".into()));
        }
        if ts.keywords.is_empty() {
            return Err(CorpusError::BadTypeSpec(name.clone(), "no keywords".into()));
        }
    }
    let type_names: Vec<&String> = spec.types.keys().collect();
    // Plain spans draw from the same surface pool as typed ones, so
    // surface form never separates the two.
    let mut pool: Vec<&str> = spec
        .types
        .values()
        .flat_map(|ts| ts.entities.iter())
        .map(|e| e.as_str())
        .collect();
    pool.sort();
    pool.dedup();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.sequences);
    // Types rotate, and every structural choice that could correlate with
    // the type — entity surface, slot, opener, trailer — advances on its
    // own cycle instead of being sampled. That keeps the joint counts
    // flat, so nothing but the keyword can tip the type decision; only the
    // plain spans and link words stay random.
    let mut surface_cursor: BTreeMap<&str, usize> = BTreeMap::new();
    let mut trailer_cursor = 0usize;
    for i in 0..spec.sequences {
        let ty = type_names[i % type_names.len()];
        let ts = &spec.types[ty];
        let cursor = surface_cursor.entry(ty).or_insert(0);
        let entity = &ts.entities[*cursor % ts.entities.len()];
        *cursor += 1;
        let keyword = &ts.keywords[rng.gen_range(0..ts.keywords.len())];
        // The typed span lands in the first slot less often: early spans
        // read as entities too eagerly when every slot is equally likely,
        // which blunts the O fallback that keyword erasure should expose.
        const SLOT_CYCLE: [usize; 12] = [1, 2, 1, 2, 0, 1, 2, 1, 2, 0, 1, 2];
        let entity_slot = SLOT_CYCLE[(i / type_names.len()) % SLOT_CYCLE.len()];
        let opener = OPENERS[(i / (type_names.len() * 3)) % OPENERS.len()];

        let mut tokens: Vec<String> = Vec::new();
        let mut labels: Vec<String> = Vec::new();
        let push_o = |tokens: &mut Vec<String>, labels: &mut Vec<String>, tok: &str| {
            tokens.push(tok.to_string());
            labels.push("O".to_string());
        };
        let push_quoted = |tokens: &mut Vec<String>,
                           labels: &mut Vec<String>,
                           surface: &str,
                           ty: Option<&str>| {
            tokens.push("\"".to_string());
            labels.push("O".to_string());
            for (i, part) in surface.split(' ').enumerate() {
                tokens.push(part.to_string());
                labels.push(match ty {
                    Some(ty) if i == 0 => format!("B_{ty}"),
                    Some(ty) => format!("I_{ty}"),
                    None => "O".to_string(),
                });
            }
            tokens.push("\"".to_string());
            labels.push("O".to_string());
        };

        for tok in opener {
            push_o(&mut tokens, &mut labels, tok);
        }
        for slot in 0..3 {
            if slot > 0 {
                push_o(&mut tokens, &mut labels, LINKS[rng.gen_range(0..LINKS.len())]);
            }
            if slot == entity_slot {
                push_quoted(&mut tokens, &mut labels, entity, Some(ty));
                push_o(&mut tokens, &mut labels, keyword);
            } else {
                push_quoted(&mut tokens, &mut labels, pool[rng.gen_range(0..pool.len())], None);
            }
        }
        // A trailer is only grammatical after the keyword; a sentence whose
        // last span is plain must end at its close quote, since a quoted
        // name with nothing after it is the very pattern a keyword-erased
        // entity collapses to.
        if entity_slot == 2 {
            for tok in TRAILERS[trailer_cursor % TRAILERS.len()] {
                push_o(&mut tokens, &mut labels, tok);
            }
            trailer_cursor += 1;
        }
        out.push(TaggedSequence::new(tokens, labels)?);
    }
    Ok(out)
}
