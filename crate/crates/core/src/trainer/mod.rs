//! Prediction head, joint objective, and the epoch loop with early stopping.

mod bbn;
mod config;
mod model;

pub use bbn::apply_bbn_rules;
pub use config::TrainConfig;
pub use model::{decode, init_predictor, meta_path, predictor_logits, DecodeOptions, Model, ModelMeta, PredictorParams, META_FILE};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adamw_step, AdamWState, AutodiffError, Graph, Var};
use crate::contrast::{coarse_losses, fine_losses, group_batch, ContrastError, ContrastItem};
use crate::corpus::{Example, TypeDescription};
use crate::encoder::{encode, EncoderError};
use crate::eval::score;
use crate::ontology::TypePath;
use crate::prompt::{build_description_rich, build_type_rich, build_type_scarce, Expression, PromptError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step}: {detail}")]
    TrainingDiverged { step: u64, detail: String },
    #[error("empty corpus: {0}")]
    EmptyCorpus(&'static str),
    #[error("model artifact: {0}")]
    Artifact(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Contrast(#[from] ContrastError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TrainError {
    fn is_non_finite(&self) -> bool {
        let ad = match self {
            TrainError::Autodiff(e) => Some(e),
            TrainError::Encoder(EncoderError::Autodiff(e)) => Some(e),
            TrainError::Contrast(ContrastError::Autodiff(e)) => Some(e),
            _ => None,
        };
        matches!(ad, Some(AutodiffError::NonFinite { .. }))
    }
}

/// Mean multi-label binary cross-entropy of `logits` against 0/1 `gold`.
pub fn bce_with_logits(g: &mut Graph, logits: Var, gold: &[f64]) -> Result<Var, TrainError> {
    Ok(g.bce_with_logits(logits, gold)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_f_plus: f64,
    pub l_f_minus: f64,
    pub l_c_plus: f64,
    pub l_c_minus: f64,
    pub total: f64,
}

/// Type descriptions keyed by the type they describe.
#[derive(Debug, Clone, Default)]
pub struct DescriptionIndex {
    by_type: BTreeMap<TypePath, TypeDescription>,
}

impl DescriptionIndex {
    pub fn new(descs: &[TypeDescription]) -> Self {
        let mut by_type: BTreeMap<TypePath, TypeDescription> = BTreeMap::new();
        for d in descs {
            by_type
                .entry(d.type_path.clone())
                .and_modify(|e| e.descriptions.extend(d.descriptions.iter().cloned()))
                .or_insert_with(|| d.clone());
        }
        Self { by_type }
    }

    pub fn get(&self, t: &TypePath) -> Option<&TypeDescription> {
        self.by_type.get(t)
    }
}

/// Expressions for one batch, in the order they are encoded.
#[derive(Debug, Clone)]
pub struct BatchExpressions {
    pub type_scarce: Vec<Expression>,
    pub type_rich: Vec<Expression>,
    pub descriptions: Vec<Expression>,
}

pub fn build_batch_expressions(
    model: &Model,
    batch: &[Example],
    descs: &DescriptionIndex,
) -> Result<BatchExpressions, TrainError> {
    let cfg = &model.config;
    let opts = model.prompt_options();
    let type_scarce = batch.iter().map(|ex| build_type_scarce(ex, &model.vocab, opts)).collect();
    let contrast = cfg.contrast_active();
    let mut type_rich = Vec::new();
    if contrast && cfg.use_type_rich {
        for ex in batch {
            match build_type_rich(ex, &model.vocab, opts) {
                Ok(e) => type_rich.push(e),
                Err(PromptError::NoFineType(id)) => log::debug!("no type-rich expression for `{id}`"),
                Err(e) => return Err(e.into()),
            }
        }
    }
    let mut descriptions = Vec::new();
    if contrast && cfg.use_descriptions {
        let fine: BTreeSet<&TypePath> = batch.iter().flat_map(Example::fine_types).collect();
        for t in fine {
            if let Some(d) = descs.get(t) {
                descriptions.extend(build_description_rich(d, &model.vocab, opts));
            }
        }
    }
    Ok(BatchExpressions {
        type_scarce,
        type_rich,
        descriptions,
    })
}

/// FNV-1a over the parts, used to give every expression its own dropout
/// stream independent of which other expressions share the batch.
fn stream_seed(seed: u64, step: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed
        .to_le_bytes()
        .iter()
        .chain(&step.to_le_bytes())
        .chain(key.as_bytes())
    {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn multi_hot(types: &[TypePath], gold: &BTreeSet<TypePath>) -> Vec<f64> {
    types.iter().map(|t| if gold.contains(t) { 1.0 } else { 0.0 }).collect()
}

/// Forward pass of the joint objective on a fresh graph. `step` only seeds
/// dropout; `train` selects dropout.
pub fn joint_loss(
    g: &mut Graph,
    model: &Model,
    batch: &[Example],
    descs: &DescriptionIndex,
    step: u64,
    train: bool,
) -> Result<(Var, LossBreakdown), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyCorpus("batch"));
    }
    let cfg = &model.config;
    let exprs = build_batch_expressions(model, batch, descs)?;
    let encode_one = |g: &mut Graph, e: &Expression, key: &str| {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, step, key));
        let rng = if train { Some(&mut rng) } else { None };
        encode(g, &model.store, &model.encoder, e, rng)
    };

    let mut items = Vec::new();
    let mut cls_rows = Vec::with_capacity(batch.len());
    let all = exprs
        .type_scarce
        .iter()
        .chain(&exprs.type_rich)
        .chain(&exprs.descriptions);
    let mut desc_ordinal: BTreeMap<&BTreeSet<TypePath>, usize> = BTreeMap::new();
    for e in all {
        let ordinal = desc_ordinal.entry(&e.carried_fine_types).or_insert(0);
        let key = e.sort_key(*ordinal);
        if e.source_example_id.is_none() {
            *ordinal += 1;
        }
        let enc = encode_one(g, e, &key)?;
        if e.kind == crate::prompt::ExpressionKind::TypeScarce {
            cls_rows.push(enc.h_cls);
        }
        items.push(ContrastItem {
            key,
            h_ent: enc.h_ent,
            fine_types: e.carried_fine_types.clone(),
            coarse_types: e.carried_coarse_types.clone(),
        });
    }

    let h = g.concat_rows(&cls_rows)?;
    let z = predictor_logits(g, &model.store, &model.predictor, h)?;
    let gold: Vec<f64> = batch
        .iter()
        .flat_map(|ex| multi_hot(&model.types, &ex.gold_types))
        .collect();
    let l_cls = bce_with_logits(g, z, &gold)?;
    let mut out = LossBreakdown {
        l_cls: g.scalar(l_cls),
        ..Default::default()
    };
    let mut total = l_cls;
    let mut total_value = out.l_cls;
    if cfg.contrast_active() {
        let ccfg = cfg.contrast();
        let groups = group_batch(items)?;
        if cfg.lambda_f > 0.0 {
            let (p, m) = fine_losses(g, &groups, &ccfg)?;
            out.l_f_plus = g.scalar(p);
            out.l_f_minus = g.scalar(m);
            let s = g.add(p, m)?;
            let s = g.scale(s, cfg.lambda_f)?;
            total = g.add(total, s)?;
            total_value += cfg.lambda_f * (out.l_f_plus + out.l_f_minus);
        }
        if cfg.lambda_c > 0.0 {
            let (p, m) = coarse_losses(g, &groups, &ccfg)?;
            out.l_c_plus = g.scalar(p);
            out.l_c_minus = g.scalar(m);
            let s = g.add(p, m)?;
            let s = g.scale(s, cfg.lambda_c)?;
            total = g.add(total, s)?;
            total_value += cfg.lambda_c * (out.l_c_plus + out.l_c_minus);
        }
    }
    debug_assert_eq!(g.scalar(total).to_bits(), total_value.to_bits());
    out.total = g.scalar(total);
    Ok((total, out))
}

/// Optimizer state carried across steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub adam: AdamWState,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: &Model) -> Self {
        Self {
            adam: AdamWState::new(&model.store),
            step: 0,
        }
    }
}

/// One joint AdamW update of encoder and predictor.
pub fn train_step(
    model: &mut Model,
    state: &mut TrainState,
    batch: &[Example],
    descs: &DescriptionIndex,
) -> Result<LossBreakdown, TrainError> {
    let step = state.step;
    let diverged = |e: TrainError| {
        if e.is_non_finite() {
            TrainError::TrainingDiverged {
                step,
                detail: e.to_string(),
            }
        } else {
            e
        }
    };
    let mut g = Graph::new();
    let (loss, breakdown) = joint_loss(&mut g, model, batch, descs, step, true).map_err(diverged)?;
    model.store.zero_grad();
    g.backward(loss, &mut model.store).map_err(|e| diverged(e.into()))?;
    let adam = model.config.adamw();
    adamw_step(&mut model.store, &mut state.adam, &adam).map_err(|e| diverged(e.into()))?;
    state.step += 1;
    Ok(breakdown)
}

pub fn predict(model: &Model, ex: &Example) -> Result<BTreeSet<TypePath>, TrainError> {
    let mut out = model.predict_all(std::slice::from_ref(ex), model.decode_options())?;
    Ok(out.pop().expect("one prediction per example"))
}

/// Tracks the best dev metric; `observe` returns true on strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_f_plus: f64,
    pub l_f_minus: f64,
    pub l_c_plus: f64,
    pub l_c_minus: f64,
    pub total: f64,
    pub dev_macro_f1: f64,
    pub dev_micro_f1: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_macro_f1: f64,
}

/// Trains until `max_epochs` or early stopping, then restores the
/// parameters of the best dev epoch. `on_epoch` sees each record as it is
/// produced.
pub fn fit(
    model: &mut Model,
    train: &[Example],
    dev: &[Example],
    descs: &[TypeDescription],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome, TrainError> {
    model.config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus("train"));
    }
    if dev.is_empty() {
        return Err(TrainError::EmptyCorpus("dev"));
    }
    let cfg = model.config.clone();
    let descs = DescriptionIndex::new(descs);
    let mut state = TrainState::new(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_store = model.store.clone();
    let mut history = Vec::new();
    let dev_gold: Vec<BTreeSet<TypePath>> = dev.iter().map(|e| e.gold_types.clone()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut n = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| train[i].clone()).collect();
            let b = train_step(model, &mut state, &batch, &descs)?;
            sum.l_cls += b.l_cls;
            sum.l_f_plus += b.l_f_plus;
            sum.l_f_minus += b.l_f_minus;
            sum.l_c_plus += b.l_c_plus;
            sum.l_c_minus += b.l_c_minus;
            sum.total += b.total;
            n += 1;
        }
        let preds = model.predict_all(dev, model.decode_options())?;
        let report = score(&dev_gold, &preds)?;
        let k = n as f64;
        let record = EpochRecord {
            epoch,
            l_cls: sum.l_cls / k,
            l_f_plus: sum.l_f_plus / k,
            l_f_minus: sum.l_f_minus / k,
            l_c_plus: sum.l_c_plus / k,
            l_c_minus: sum.l_c_minus / k,
            total: sum.total / k,
            dev_macro_f1: report.macro_f1,
            dev_micro_f1: report.micro_f1,
            lr: cfg.lr,
        };
        log::info!(
            "epoch {epoch}: total {:.4} l_cls {:.4} dev macro-f1 {:.4}",
            record.total,
            record.l_cls,
            record.dev_macro_f1
        );
        on_epoch(&record);
        history.push(record);
        if stopper.observe(epoch, report.macro_f1) {
            best_store = model.store.clone();
        }
        if stopper.should_stop() {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    best_store.zero_grad();
    model.store = best_store;
    Ok(FitOutcome {
        history,
        best_epoch: stopper.best_epoch,
        best_dev_macro_f1: stopper.best,
    })
}
