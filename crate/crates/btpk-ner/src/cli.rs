//! Command-line front end: train, tag, explain, check, export, and synth
//! subcommands over the library, with exit codes 0 (ok), 1 (formula
//! checked false), 2 (usage), 3 (bad data or model).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::builder::ArgGroup;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::announce::{
    entity_spans, extract_announcements_opts, Announcement, EntitySpan, ExtractOptions,
};
use crate::brnn::{init_model, train, BrnnModel, MaskPropagation, ModelConfig, Side};
use crate::btpk::{build_btpk, find_branch_points};
use crate::corpus::{
    build_vocab, generate_synthetic, parse_conll, render_conll, validate_bio, SyntheticSpec,
    Tagset,
};
use crate::explain::{coarse_label, export_dot, export_json, import_json, render_explanation};
use crate::logic::{check, check_all, parse_formula};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

/// Run settings accepted via `--config`; unknown keys are rejected so
/// misspellings fail loudly instead of silently using defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mask_propagation: MaskPropagation,
    /// Longest announcement gram scanned.
    pub max_len: usize,
    /// Mask sides scanned during extraction.
    pub sides: Vec<Side>,
    /// Explicit tag list; inferred from the training data when absent.
    pub tagset: Option<Vec<String>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mc = ModelConfig::default();
        Self {
            data: None,
            model: None,
            out: None,
            embedding_dim: mc.embedding_dim,
            hidden_dim: mc.hidden_dim,
            learning_rate: mc.learning_rate,
            batch_size: mc.batch_size,
            epochs: mc.epochs,
            seed: mc.seed,
            mask_propagation: mc.mask_propagation,
            max_len: 3,
            sides: vec![Side::Both, Side::Forward, Side::Backward],
            tagset: None,
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embedding_dim: self.embedding_dim,
            hidden_dim: self.hidden_dim,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            mask_propagation: self.mask_propagation,
        }
    }
}

/// Reads and strictly parses a run config; errors name the offending key.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))?;
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(CliError::Data(format!(
            "config {}: learning_rate must be a positive real, got {}",
            path.display(),
            cfg.learning_rate
        )));
    }
    Ok(cfg)
}

fn load_config_opt(path: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => load_config(p),
        None => Ok(RunConfig::default()),
    }
}

#[derive(Parser)]
#[command(name = "btpk", version, about = "BIO tagger with announcement-tree explanations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a tagger on a CoNLL file and write model.bin
    Train {
        /// Training data, `token<TAB>label` with blank-line separators
        #[arg(long)]
        data: PathBuf,
        /// JSON run config
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Tag a CoNLL file and print the predictions
    Tag {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Extract announcements, build the tree, and write btpk.json,
    /// tree.dot, and explanation.txt
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Target span `start:end` (inclusive); all predicted spans when absent
        #[arg(long)]
        entity: Option<String>,
        /// Which sequence of the input to explain
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Check a formula against a tree (exit 1 when false at --state)
    #[command(group(ArgGroup::new("where").required(true).args(["state", "all"])))]
    Check {
        #[arg(long)]
        btpk: PathBuf,
        #[arg(long)]
        formula: String,
        /// State id to check at
        #[arg(long)]
        state: Option<String>,
        /// Print every satisfying state instead
        #[arg(long)]
        all: bool,
    },
    /// Re-render a tree file as DOT or canonical JSON on stdout
    Export {
        #[arg(long)]
        btpk: PathBuf,
        #[arg(long, value_enum)]
        format: ExportFormat,
    },
    /// Generate a synthetic CoNLL corpus from a JSON spec
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportFormat {
    Dot,
    Json,
}

/// Parses argv and runs one subcommand, returning the process exit code.
pub fn run(argv: Vec<OsString>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<i32, CliError> {
    match cmd {
        Cmd::Train { data, config, out } => cmd_train(&data, config.as_ref(), &out),
        Cmd::Tag { model, input } => cmd_tag(&model, &input),
        Cmd::Explain { model, input, entity, index, config, out } => {
            cmd_explain(&model, &input, entity.as_deref(), index, config.as_ref(), &out)
        }
        Cmd::Check { btpk, formula, state, all } => cmd_check(&btpk, &formula, state.as_deref(), all),
        Cmd::Export { btpk, format } => cmd_export(&btpk, format),
        Cmd::Synth { spec, seed, out } => cmd_synth(&spec, seed, &out),
    }
}

fn read_data(path: &Path) -> Result<Vec<crate::corpus::TaggedSequence>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    parse_conll(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn cmd_train(data_path: &Path, config: Option<&PathBuf>, out: &Path) -> Result<i32, CliError> {
    let cfg = load_config_opt(config)?;
    let data = read_data(data_path)?;
    let tagset = match &cfg.tagset {
        Some(tags) => Tagset::new(tags.clone()),
        None => Tagset::infer(&data),
    }
    .map_err(data_err)?;

    let mut violations = Vec::new();
    for (i, seq) in data.iter().enumerate() {
        for v in validate_bio(seq, &tagset) {
            violations.push(format!("sequence {i}, position {}: {}", v.position, v.reason));
        }
    }
    if !violations.is_empty() {
        let shown = violations.iter().take(5).cloned().collect::<Vec<_>>().join("\n  ");
        return Err(CliError::Data(format!(
            "{} BIO violations, e.g.\n  {shown}",
            violations.len()
        )));
    }

    let vocab = build_vocab(&data, 1).map_err(data_err)?;
    let mc = cfg.model_config();
    let model = init_model(&mc, &vocab, &tagset).map_err(data_err)?;
    let (model, history) = train(model, &data, &data, &mc).map_err(data_err)?;
    for m in &history {
        match m.dev_accuracy {
            Some(acc) => eprintln!(
                "epoch {}: train_loss {:.4}, accuracy {:.4}",
                m.epoch, m.train_loss, acc
            ),
            None => eprintln!("epoch {}: train_loss {:.4}", m.epoch, m.train_loss),
        }
    }
    fs::create_dir_all(out).map_err(data_err)?;
    let model_path = out.join("model.bin");
    model.save(&model_path).map_err(data_err)?;
    eprintln!("wrote {}", model_path.display());
    Ok(0)
}

fn cmd_tag(model_path: &Path, input: &Path) -> Result<i32, CliError> {
    let model = BrnnModel::load(model_path).map_err(data_err)?;
    let data = read_data(input)?;
    let mut tagged = Vec::with_capacity(data.len());
    for seq in &data {
        let labels = model.tag(&seq.tokens).map_err(data_err)?;
        tagged.push(
            crate::corpus::TaggedSequence::new(seq.tokens.clone(), labels).map_err(data_err)?,
        );
    }
    print!("{}", render_conll(&tagged));
    Ok(0)
}

fn parse_entity_flag(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("--entity must be `start:end`, got `{s}`"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let start: usize = a.trim().parse().map_err(|_| bad())?;
    let end: usize = b.trim().parse().map_err(|_| bad())?;
    if start > end {
        return Err(CliError::Usage(format!("--entity start {start} exceeds end {end}")));
    }
    Ok((start, end))
}

fn cmd_explain(
    model_path: &Path,
    input: &Path,
    entity: Option<&str>,
    index: usize,
    config: Option<&PathBuf>,
    out: &Path,
) -> Result<i32, CliError> {
    let cfg = load_config_opt(config)?;
    let model = BrnnModel::load(model_path).map_err(data_err)?;
    let data = read_data(input)?;
    let seq = data.get(index).ok_or_else(|| {
        CliError::Data(format!("--index {index} out of range: {} sequences", data.len()))
    })?;
    let ids = model.vocab.encode(&seq.tokens);
    let predicted = model.tag(&seq.tokens).map_err(data_err)?;

    let targets: Vec<EntitySpan> = match entity {
        Some(flag) => {
            let (start, end) = parse_entity_flag(flag)?;
            if end >= seq.len() {
                return Err(CliError::Data(format!(
                    "--entity {start}:{end} out of range: sequence has {} tokens",
                    seq.len()
                )));
            }
            let ty = coarse_label(&predicted[start]).map_err(data_err)?;
            vec![EntitySpan::new(start, end, ty)]
        }
        None => entity_spans(&predicted),
    };

    let opts = ExtractOptions { max_len: cfg.max_len, sides: cfg.sides.clone() };
    let mut per_target: Vec<(EntitySpan, Vec<Announcement>)> = Vec::new();
    for target in targets {
        let (anns, _) =
            extract_announcements_opts(&model, &ids, &target, &opts).map_err(data_err)?;
        per_target.push((target, anns));
    }
    let all: Vec<Announcement> =
        per_target.iter().flat_map(|(_, anns)| anns.iter().cloned()).collect();
    let points = find_branch_points(&model, &ids).map_err(data_err)?;
    let mut tree = build_btpk(&model, &ids, &all, &points).map_err(data_err)?;

    let cfg_value = serde_json::to_value(&cfg).map_err(data_err)?;
    let cfg_line = serde_json::to_string(&cfg).map_err(data_err)?;
    tree.set_run_info(serde_json::json!({
        "config": cfg_value,
        "seed": cfg.seed,
        "tokens": seq.tokens,
    }));

    fs::create_dir_all(out).map_err(data_err)?;
    fs::write(out.join("btpk.json"), export_json(&tree)).map_err(data_err)?;
    fs::write(
        out.join("tree.dot"),
        format!("// seed: {}\n// config: {}\n{}", cfg.seed, cfg_line, export_dot(&tree, &seq.tokens)),
    )
    .map_err(data_err)?;

    let mut blocks = vec![format!("# seed: {}\n# config: {}\n", cfg.seed, cfg_line)];
    if per_target.is_empty() {
        blocks.push("No entity spans were predicted; nothing to explain.\n".to_string());
    }
    for (target, anns) in &per_target {
        let explanation =
            render_explanation(&tree, target, anns, &seq.tokens).map_err(data_err)?;
        blocks.push(explanation.to_text());
    }
    let text = blocks.join("\n");
    fs::write(out.join("explanation.txt"), &text).map_err(data_err)?;
    print!("{text}");
    Ok(0)
}

fn cmd_check(btpk: &Path, formula: &str, state: Option<&str>, all: bool) -> Result<i32, CliError> {
    let text = fs::read_to_string(btpk)
        .map_err(|e| CliError::Data(format!("{}: {e}", btpk.display())))?;
    let tree = import_json(&text).map_err(data_err)?;
    let parsed = parse_formula(formula).map_err(|e| CliError::Usage(e.to_string()))?;
    if all {
        for id in check_all(&tree, &parsed) {
            println!("{id}");
        }
        return Ok(0);
    }
    let state = state.expect("clap group guarantees --state when --all is absent");
    let holds = check(&tree, state, &parsed).map_err(data_err)?;
    println!("{holds}");
    Ok(if holds { 0 } else { 1 })
}

fn cmd_export(btpk: &Path, format: ExportFormat) -> Result<i32, CliError> {
    let text = fs::read_to_string(btpk)
        .map_err(|e| CliError::Data(format!("{}: {e}", btpk.display())))?;
    let tree = import_json(&text).map_err(data_err)?;
    match format {
        ExportFormat::Json => print!("{}", export_json(&tree)),
        ExportFormat::Dot => {
            let tokens: Vec<String> = tree
                .run_info()
                .and_then(|run| run.get("tokens"))
                .and_then(|t| t.as_array())
                .map(|items| {
                    items.iter().filter_map(|v| v.as_str().map(String::from)).collect()
                })
                .unwrap_or_default();
            print!("{}", export_dot(&tree, &tokens));
        }
    }
    Ok(0)
}

fn cmd_synth(spec_path: &Path, seed: u64, out: &Path) -> Result<i32, CliError> {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", spec_path.display())))?;
    let spec: SyntheticSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", spec_path.display())))?;
    let data = generate_synthetic(&spec, seed).map_err(data_err)?;
    fs::write(out, render_conll(&data)).map_err(data_err)?;
    eprintln!("wrote {} sequences to {}", data.len(), out.display());
    Ok(0)
}
