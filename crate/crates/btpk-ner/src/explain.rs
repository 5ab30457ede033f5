//! Rendering: turn announcements plus model-check verdicts into prose,
//! and export trees as Graphviz DOT or canonical JSON.

use thiserror::Error;

use crate::announce::{Announcement, EntitySpan};
use crate::btpk::BtpkModel;
use crate::corpus::split_tag;
use crate::logic::{verify_recognition, LogicError};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("unknown tag `{0}`")]
    UnknownTag(String),
    #[error(transparent)]
    Logic(#[from] LogicError),
    #[error("tree JSON rejected: {0}")]
    Import(#[from] serde_json::Error),
}

/// Strips the BIO prefix: `B_video`/`I_video` → `video`, `O` → `O`.
pub fn coarse_label(tag: &str) -> Result<String, ExplainError> {
    if tag == "O" {
        return Ok("O".to_string());
    }
    match split_tag(tag) {
        Some((_, ty)) => Ok(ty.to_string()),
        None => Err(ExplainError::UnknownTag(tag.to_string())),
    }
}

/// One entity's rendered explanation with its supporting material.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Explanation {
    pub question: String,
    pub answer: String,
    pub evidence: Vec<Announcement>,
    pub formula: String,
    /// Verdict along the announcement-corrected path.
    pub corrected: bool,
    /// Verdict along the forward-only trunk.
    pub trunk: bool,
}

impl Explanation {
    /// Plain-text block: question, answer, then the checked formula,
    /// verdicts, and evidence list.
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n{}\n\n", self.question, self.answer);
        out.push_str(&format!("Formula: {}\n", self.formula));
        let verdict = |ok: bool| if ok { "satisfied" } else { "not satisfied" };
        out.push_str(&format!("Corrected path: {}\n", verdict(self.corrected)));
        out.push_str(&format!("Trunk path: {}\n", verdict(self.trunk)));
        out.push_str("Announcements:\n");
        if self.evidence.is_empty() {
            out.push_str("  (none)\n");
        }
        for a in &self.evidence {
            out.push_str(&format!(
                "  - gram {}..{} ({}): {} -> {}\n",
                a.gram.start, a.gram.end, a.side, a.original_label, a.flipped_label
            ));
        }
        out
    }
}

fn direction(ann: &Announcement, entity: &EntitySpan) -> &'static str {
    if ann.gram.start > entity.end {
        "following"
    } else {
        "preceding"
    }
}

/// Phrases why the entity reads as its label: one sentence per distinct
/// (announcement surface, direction), hedged when the model check does not
/// confirm the corrected reading, with an honest fallback when no
/// announcement exists.
pub fn render_explanation(
    btpk: &BtpkModel,
    entity: &EntitySpan,
    announcements: &[Announcement],
    tokens: &[String],
) -> Result<Explanation, ExplainError> {
    if entity.end >= tokens.len() {
        return Err(LogicError::EntityOutOfRange {
            start: entity.start,
            end: entity.end,
            n: tokens.len(),
        }
        .into());
    }
    let label = entity.entity_type.as_str();
    let surface = tokens[entity.start..=entity.end].join(" ");
    let verdict = verify_recognition(btpk, entity, label)?;

    let evidence: Vec<Announcement> = announcements
        .iter()
        .filter(|a| a.target.start == entity.start && a.target.end == entity.end)
        .cloned()
        .collect();

    let mut sentences = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for a in &evidence {
        let gram_surface = tokens[a.gram.start..=a.gram.end].join(" ");
        let dir = direction(a, entity);
        if !seen.insert((gram_surface.clone(), dir)) {
            continue;
        }
        if verdict.corrected {
            sentences.push(format!(
                "Because the \"{gram_surface}\" (public announcement) appears in the {dir} \
                 words, it is more reasonable to be recognized as \"{label}\"."
            ));
        } else {
            sentences.push(format!(
                "The \"{gram_surface}\" (public announcement) appears in the {dir} words \
                 and suggests \"{label}\", but the model check did not confirm this reading."
            ));
        }
    }
    let answer = if sentences.is_empty() {
        format!(
            "No public announcement was found: no context span's masking flips the \
             label away from \"{label}\"."
        )
    } else {
        sentences.join(" ")
    };

    Ok(Explanation {
        question: format!(
            "Why is \"{surface}\" recognized as a {label} name rather than other labels?"
        ),
        answer,
        evidence,
        formula: verdict.formula.to_string(),
        corrected: verdict.corrected,
        trunk: verdict.trunk,
    })
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz DOT rendering: boxes labeled with the state name, its token,
/// and its atoms; solid successor edges; dashed ρ edges labeled "ρ".
pub fn export_dot(btpk: &BtpkModel, tokens: &[String]) -> String {
    let mut out = String::from("digraph btpk {\n  rankdir=LR;\n  node [shape=box];\n");
    for s in btpk.states() {
        let mut label = if s.primed {
            format!("s'_{}", s.height)
        } else {
            format!("s_{}", s.height)
        };
        if s.height >= 1 && s.height - 1 < tokens.len() {
            label.push_str("\\n");
            label.push_str(&dot_escape(&tokens[s.height - 1]));
        }
        if !s.atoms.is_empty() {
            let atoms: Vec<&str> = s.atoms.iter().map(|a| a.as_str()).collect();
            label.push_str("\\n{");
            label.push_str(&dot_escape(&atoms.join(", ")));
            label.push('}');
        }
        out.push_str(&format!("  \"{}\" [label=\"{label}\"];\n", dot_escape(&s.id)));
    }
    for (u, v) in btpk.r1_edges() {
        out.push_str(&format!("  \"{}\" -> \"{}\";\n", dot_escape(u), dot_escape(v)));
    }
    for (u, v) in btpk.rho_edges() {
        out.push_str(&format!(
            "  \"{}\" -> \"{}\" [style=dashed, label=\"ρ\"];\n",
            dot_escape(u),
            dot_escape(v)
        ));
    }
    out.push_str("}\n");
    out
}

/// Canonical pretty JSON with a trailing newline; the same tree always
/// serializes to the same bytes.
pub fn export_json(btpk: &BtpkModel) -> String {
    let mut text = serde_json::to_string_pretty(btpk).expect("tree serializes");
    text.push('\n');
    text
}

/// Inverse of [`export_json`]; structural problems in the document are
/// rejected.
pub fn import_json(text: &str) -> Result<BtpkModel, ExplainError> {
    Ok(serde_json::from_str(text)?)
}
