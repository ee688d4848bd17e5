//! Subcommands of the `picot` binary. Every command prints one JSON value on
//! stdout; progress goes to stderr.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use picot::corpus::{generate_synthetic, load_descriptions, load_examples, write_descriptions, write_examples, Example, SynthSpec, TypeDescription};
use picot::eval::{cluster_quality, export_embeddings, score, Granularity, VectorRole};
use picot::ontology::{Taxonomy, TaxonomyOptions, TypePath};
use picot::prompt::{build_description_rich, build_type_rich, build_type_scarce, build_vocab, EntPosition, ExpressionKind};
use picot::trainer::{apply_bbn_rules, fit, DecodeOptions, Model, TrainConfig, TrainError};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_MISMATCH: u8 = 4;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const DEV_FILE: &str = "dev.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const TAXONOMY_FILE: &str = "taxonomy.txt";
pub const DESCRIPTIONS_FILE: &str = "descriptions.jsonl";
pub const CHECKPOINT_FILE: &str = "best.pict";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// An error carrying its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

fn fail(code: u8, message: impl Into<String>) -> anyhow::Error {
    Failure {
        code,
        message: message.into(),
    }
    .into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(f) = e.downcast_ref::<Failure>() {
        return f.code;
    }
    match e.downcast_ref::<TrainError>() {
        Some(TrainError::TrainingDiverged { .. }) => EXIT_DIVERGED,
        Some(TrainError::InvalidConfig(_)) => EXIT_USAGE,
        _ => 1,
    }
}

#[derive(Debug, Parser)]
#[command(name = "picot", version, about = "Prompt-guided contrastive fine-grained entity typing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Flat JSON config; omitted fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory with train/dev/test JSONL, taxonomy.txt and descriptions.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lambda_f: Option<f64>,
    #[arg(long)]
    pub lambda_c: Option<f64>,
    #[arg(long)]
    pub no_type_rich: bool,
    #[arg(long)]
    pub no_descriptions: bool,
    #[arg(long, value_enum)]
    pub ent_position: Option<EntPositionArg>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum EntPositionArg {
    BeforePrompt,
    AfterCls,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus.
    Synth {
        /// JSON synthetic-corpus spec; defaults apply to omitted fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and keep the best dev checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to taxonomy.txt next to the split file.
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        bbn_rules: bool,
        #[arg(long)]
        closure: bool,
    },
    /// Export [CLS]/[ENT] vectors with a PCA projection as CSV.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated subset of ts,tr,desc.
        #[arg(long, default_value = "ts")]
        kinds: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        /// Defaults to descriptions.jsonl next to the split file.
        #[arg(long)]
        descriptions: Option<PathBuf>,
    },
    /// Train and test-score every (lambda_f, lambda_c) in {0.01, 0.1, 0.5}^2.
    Sweep(TrainArgs),
    /// Print the decoded expressions built for the first examples of a split.
    ShowExpressions {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        n: usize,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out } => cmd_synth(spec.as_deref(), &out),
        Command::Train(args) => cmd_train(&args),
        Command::Eval {
            checkpoint,
            data,
            taxonomy,
            bbn_rules,
            closure,
        } => cmd_eval(&checkpoint, &data, taxonomy.as_deref(), bbn_rules, closure),
        Command::Embed {
            checkpoint,
            data,
            kinds,
            out,
            taxonomy,
            descriptions,
        } => cmd_embed(&checkpoint, &data, &kinds, &out, taxonomy.as_deref(), descriptions.as_deref()),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::ShowExpressions { data, taxonomy, n } => cmd_show_expressions(&data, taxonomy.as_deref(), n),
    }
}

fn print_json(v: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn cmd_synth(spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec: SynthSpec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| fail(EXIT_USAGE, format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| fail(EXIT_USAGE, format!("invalid spec: {e}")))?
        }
        None => SynthSpec::default(),
    };
    let corpus = generate_synthetic(&spec).map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
    fs::create_dir_all(out)?;
    for (name, split) in [(TRAIN_FILE, &corpus.train), (DEV_FILE, &corpus.dev), (TEST_FILE, &corpus.test)] {
        let mut w = BufWriter::new(File::create(out.join(name))?);
        write_examples(&mut w, split)?;
        w.flush()?;
    }
    fs::write(out.join(TAXONOMY_FILE), corpus.taxonomy.to_file_text())?;
    let mut w = BufWriter::new(File::create(out.join(DESCRIPTIONS_FILE))?);
    write_descriptions(&mut w, &corpus.descriptions)?;
    w.flush()?;
    let mut hashes = BTreeMap::new();
    for name in [TRAIN_FILE, DEV_FILE, TEST_FILE, TAXONOMY_FILE, DESCRIPTIONS_FILE] {
        hashes.insert(name, sha256_file(&out.join(name))?);
    }
    print_json(&json!({ "out": out, "files": hashes }))
}

fn load_taxonomy(path: &Path) -> Result<Taxonomy> {
    Taxonomy::load(path, TaxonomyOptions::default()).map_err(|e| fail(EXIT_USAGE, format!("{}: {e}", path.display())))
}

fn load_split(path: &Path, tax: &Taxonomy) -> Result<Vec<Example>> {
    load_examples(path, tax).map_err(|e| fail(EXIT_USAGE, format!("{}: {e}", path.display())))
}

fn load_descs(path: &Path, tax: &Taxonomy) -> Result<Vec<TypeDescription>> {
    if !path.exists() {
        log::warn!("{} not found; training without descriptions", path.display());
        return Ok(Vec::new());
    }
    load_descriptions(path, tax).map_err(|e| fail(EXIT_USAGE, format!("{}: {e}", path.display())))
}

struct Dataset {
    taxonomy: Taxonomy,
    train: Vec<Example>,
    dev: Vec<Example>,
    test: Vec<Example>,
    descriptions: Vec<TypeDescription>,
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    let taxonomy = load_taxonomy(&dir.join(TAXONOMY_FILE))?;
    Ok(Dataset {
        train: load_split(&dir.join(TRAIN_FILE), &taxonomy)?,
        dev: load_split(&dir.join(DEV_FILE), &taxonomy)?,
        test: load_split(&dir.join(TEST_FILE), &taxonomy)?,
        descriptions: load_descs(&dir.join(DESCRIPTIONS_FILE), &taxonomy)?,
        taxonomy,
    })
}

/// Config file, then flags, then `PICOT_SEED`.
fn resolve_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| fail(EXIT_USAGE, format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| fail(EXIT_USAGE, format!("invalid config: {e}")))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = args.lambda_f {
        cfg.lambda_f = v;
    }
    if let Some(v) = args.lambda_c {
        cfg.lambda_c = v;
    }
    if args.no_type_rich {
        cfg.use_type_rich = false;
    }
    if args.no_descriptions {
        cfg.use_descriptions = false;
    }
    if let Some(p) = args.ent_position {
        cfg.ent_position = match p {
            EntPositionArg::BeforePrompt => EntPosition::BeforePrompt,
            EntPositionArg::AfterCls => EntPosition::AfterCls,
        };
    }
    if let Some(v) = args.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Ok(v) = std::env::var("PICOT_SEED") {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| fail(EXIT_USAGE, format!("PICOT_SEED `{v}` is not an unsigned integer")))?;
    }
    cfg.validate().map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    config: &'a TrainConfig,
    corpus_hashes: BTreeMap<&'static str, String>,
    seed: u64,
    version: &'static str,
    data_dir: &'a Path,
    output_dir: &'a Path,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    out: PathBuf,
    checkpoint: PathBuf,
    epochs: usize,
    best_epoch: usize,
    best_dev_macro_f1: f64,
}

fn train_into(cfg: &TrainConfig, data_dir: &Path, data: &Dataset, out: &Path) -> Result<TrainSummary> {
    fs::create_dir_all(out)?;
    let mut corpus_hashes = BTreeMap::new();
    for name in [TRAIN_FILE, DEV_FILE, TEST_FILE, TAXONOMY_FILE, DESCRIPTIONS_FILE] {
        let p = data_dir.join(name);
        if p.exists() {
            corpus_hashes.insert(name, sha256_file(&p)?);
        }
    }
    let manifest = RunManifest {
        config: cfg,
        corpus_hashes,
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION"),
        data_dir,
        output_dir: out,
    };
    fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;

    let mut model = Model::for_corpus(cfg, &data.train, &data.descriptions, &data.taxonomy)?;
    let mut log = BufWriter::new(File::create(out.join(LOG_FILE))?);
    let mut log_err = None;
    let outcome = fit(&mut model, &data.train, &data.dev, &data.descriptions, |r| {
        let line = serde_json::to_string(r).expect("epoch records serialize");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let checkpoint = out.join(CHECKPOINT_FILE);
    model.save(&checkpoint)?;
    Ok(TrainSummary {
        out: out.to_path_buf(),
        checkpoint,
        epochs: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        best_dev_macro_f1: outcome.best_dev_macro_f1,
    })
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    let data = load_dataset(&args.data)?;
    let summary = train_into(&cfg, &args.data, &data, &args.out)?;
    print_json(&summary)
}

fn load_checkpoint(path: &Path) -> Result<Model> {
    Model::load(path).map_err(|e| fail(EXIT_MISMATCH, format!("cannot load {}: {e}", path.display())))
}

fn sibling(data: &Path, name: &str) -> PathBuf {
    data.parent().unwrap_or_else(|| Path::new(".")).join(name)
}

fn check_types(model: &Model, tax: &Taxonomy) -> Result<()> {
    let expected: Vec<&TypePath> = tax.types().collect();
    let actual: Vec<&TypePath> = model.types.iter().collect();
    if expected != actual {
        return Err(fail(
            EXIT_MISMATCH,
            format!(
                "checkpoint has {} output types, taxonomy has {}; type lists differ",
                actual.len(),
                expected.len()
            ),
        ));
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, taxonomy: Option<&Path>, bbn: bool, closure: bool) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let tax = load_taxonomy(&taxonomy.map_or_else(|| sibling(data, TAXONOMY_FILE), Path::to_path_buf))?;
    check_types(&model, &tax)?;
    let examples = load_split(data, &tax)?;
    if examples.is_empty() {
        return Err(fail(EXIT_USAGE, format!("{} has no examples", data.display())));
    }
    let report = evaluate(&model, &examples, bbn, closure || model.config.closure)?;
    print_json(&report)
}

fn evaluate(model: &Model, examples: &[Example], bbn: bool, closure: bool) -> Result<picot::eval::MetricsReport> {
    let opts = DecodeOptions {
        threshold: model.config.threshold,
        closure,
    };
    let mut preds = model.predict_all(examples, opts)?;
    let golds: Vec<BTreeSet<TypePath>> = examples.iter().map(|e| e.gold_types.clone()).collect();
    if bbn {
        preds = preds.iter().map(apply_bbn_rules).collect();
    }
    Ok(score(&golds, &preds)?)
}

fn parse_kinds(s: &str) -> Result<BTreeSet<ExpressionKind>> {
    let kinds: BTreeSet<ExpressionKind> = s
        .split(',')
        .map(|k| ExpressionKind::from_short_name(k.trim()).ok_or_else(|| fail(EXIT_USAGE, format!("unknown kind `{k}` (expected ts, tr or desc)"))))
        .collect::<Result<_>>()?;
    if kinds.is_empty() {
        return Err(fail(EXIT_USAGE, "no kinds given"));
    }
    Ok(kinds)
}

fn cmd_embed(
    checkpoint: &Path,
    data: &Path,
    kinds: &str,
    out: &Path,
    taxonomy: Option<&Path>,
    descriptions: Option<&Path>,
) -> Result<()> {
    let kinds = parse_kinds(kinds)?;
    let model = load_checkpoint(checkpoint)?;
    let tax = load_taxonomy(&taxonomy.map_or_else(|| sibling(data, TAXONOMY_FILE), Path::to_path_buf))?;
    check_types(&model, &tax)?;
    let examples = load_split(data, &tax)?;
    let descs = if kinds.contains(&ExpressionKind::DescriptionRich) {
        load_descs(&descriptions.map_or_else(|| sibling(data, DESCRIPTIONS_FILE), Path::to_path_buf), &tax)?
    } else {
        Vec::new()
    };
    let dump = export_embeddings(&model, &examples, &descs, &kinds, out)?;
    let mut silhouettes = Vec::new();
    for &kind in &kinds {
        for role in [VectorRole::Cls, VectorRole::Ent] {
            let part = dump.select(kind, role);
            for (name, gran) in [("coarse", Granularity::Coarse), ("fine", Granularity::Fine)] {
                let value = cluster_quality(&part, gran).ok();
                match value {
                    Some(v) => log::info!("silhouette {} {} {name}: {v:.4}", kind.short_name(), role.as_str()),
                    None => log::info!("silhouette {} {} {name}: undefined", kind.short_name(), role.as_str()),
                }
                silhouettes.push(json!({
                    "kind": kind.short_name(),
                    "role": role.as_str(),
                    "granularity": name,
                    "silhouette": value,
                }));
            }
        }
    }
    print_json(&json!({ "out": out, "rows": dump.rows.len(), "silhouette": silhouettes }))
}

pub const SWEEP_GRID: [f64; 3] = [0.01, 0.1, 0.5];

fn cmd_sweep(args: &TrainArgs) -> Result<()> {
    let base = resolve_config(args)?;
    let data = load_dataset(&args.data)?;
    if data.test.is_empty() {
        return Err(fail(EXIT_USAGE, "test split is empty"));
    }
    let mut rows = Vec::new();
    for &lf in &SWEEP_GRID {
        for &lc in &SWEEP_GRID {
            let cfg = TrainConfig {
                lambda_f: lf,
                lambda_c: lc,
                ..base.clone()
            };
            let dir = args.out.join(format!("lf{lf}_lc{lc}"));
            log::info!("sweep cell lambda_f={lf} lambda_c={lc}");
            let summary = train_into(&cfg, &args.data, &data, &dir)?;
            let model = load_checkpoint(&summary.checkpoint)?;
            let report = evaluate(&model, &data.test, false, cfg.closure)?;
            rows.push(json!({
                "lambda_f": lf,
                "lambda_c": lc,
                "dir": dir,
                "best_dev_macro_f1": summary.best_dev_macro_f1,
                "test": report,
            }));
        }
    }
    print_json(&json!({ "grid": rows }))
}

fn cmd_show_expressions(data: &Path, taxonomy: Option<&Path>, n: usize) -> Result<()> {
    let tax = load_taxonomy(&taxonomy.map_or_else(|| sibling(data, TAXONOMY_FILE), Path::to_path_buf))?;
    let examples = load_split(data, &tax)?;
    let descs = load_descs(&sibling(data, DESCRIPTIONS_FILE), &tax)?;
    let vocab = build_vocab(&examples, &descs, &tax, 1);
    let opts = TrainConfig::default().prompt_options();
    let mut out = Vec::new();
    for ex in examples.iter().take(n) {
        out.push(json!({ "id": ex.id, "kind": "ts", "text": vocab.decode(&build_type_scarce(ex, &vocab, opts).token_ids) }));
        if let Ok(e) = build_type_rich(ex, &vocab, opts) {
            out.push(json!({ "id": ex.id, "kind": "tr", "text": vocab.decode(&e.token_ids) }));
        }
    }
    for d in descs.iter().take(n) {
        for e in build_description_rich(d, &vocab, opts) {
            out.push(json!({ "id": d.type_path, "kind": "desc", "text": vocab.decode(&e.token_ids) }));
        }
    }
    print_json(&out)
}
