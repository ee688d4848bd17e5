use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use crate::corpus::{Example, TypeDescription};
use crate::encoder::{encode, init_params, EncoderConfig, EncoderParams};
use crate::ontology::{Taxonomy, TypePath};
use crate::prompt::{build_type_scarce, build_vocab, PromptOptions, Vocabulary};

use super::{TrainConfig, TrainError};

pub const META_FILE: &str = "model.json";

/// Prediction head `d -> 2d (gelu) -> |Y|`, tensors prefixed `pred.`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("finite init")
}

pub fn init_predictor(store: &mut ParamStore, dim: usize, n_types: usize, seed: u64) -> PredictorParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_BEEF);
    let hidden = 2 * dim;
    PredictorParams {
        w1: store.add("pred.w1", xavier(&mut rng, dim, hidden)),
        b1: store.add("pred.b1", Tensor::zeros(vec![hidden])),
        w2: store.add("pred.w2", xavier(&mut rng, hidden, n_types)),
        b2: store.add("pred.b2", Tensor::zeros(vec![n_types])),
    }
}

/// Logits `[rows, |Y|]` for stacked `[CLS]` rows `[rows, d]`.
pub fn predictor_logits(
    g: &mut Graph,
    store: &ParamStore,
    p: &PredictorParams,
    h: Var,
) -> Result<Var, TrainError> {
    let (w1, b1, w2, b2) = (
        g.param(store, p.w1),
        g.param(store, p.b1),
        g.param(store, p.w2),
        g.param(store, p.b2),
    );
    let x = g.matmul(h, w1)?;
    let x = g.add_row(x, b1)?;
    let x = g.gelu(x)?;
    let x = g.matmul(x, w2)?;
    Ok(g.add_row(x, b2)?)
}

/// Everything needed to rebuild a model around its checkpoint tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub encoder: EncoderConfig,
    pub vocab: Vec<String>,
    pub types: Vec<TypePath>,
    pub train_config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub predictor: PredictorParams,
    pub vocab: Vocabulary,
    /// Output order of the predictor: lexicographic by canonical text.
    pub types: Vec<TypePath>,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub threshold: f64,
    pub closure: bool,
}

impl Model {
    pub fn new(cfg: &TrainConfig, vocab: Vocabulary, types: Vec<TypePath>) -> Result<Self, TrainError> {
        cfg.validate()?;
        if types.is_empty() {
            return Err(TrainError::InvalidConfig("no output types".into()));
        }
        let mut store = ParamStore::new();
        let encoder = init_params(&cfg.encoder_config(vocab.len()), &mut store)?;
        let predictor = init_predictor(&mut store, cfg.dim, types.len(), cfg.seed);
        Ok(Self {
            store,
            encoder,
            predictor,
            vocab,
            types,
            config: cfg.clone(),
        })
    }

    /// Vocabulary from the training split and descriptions; outputs are all
    /// taxonomy types.
    pub fn for_corpus(
        cfg: &TrainConfig,
        train: &[Example],
        descs: &[TypeDescription],
        tax: &Taxonomy,
    ) -> Result<Self, TrainError> {
        let vocab = build_vocab(train, descs, tax, cfg.min_count);
        Self::new(cfg, vocab, tax.types().cloned().collect())
    }

    pub fn prompt_options(&self) -> PromptOptions {
        self.config.prompt_options()
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions {
            threshold: self.config.threshold,
            closure: self.config.closure,
        }
    }

    /// Evaluation-mode logits, one row per example.
    pub fn logits(&self, examples: &[Example]) -> Result<Vec<Vec<f64>>, TrainError> {
        let mut out = Vec::with_capacity(examples.len());
        let opts = self.prompt_options();
        for chunk in examples.chunks(64) {
            let mut g = Graph::new();
            let mut rows = Vec::with_capacity(chunk.len());
            for ex in chunk {
                let expr = build_type_scarce(ex, &self.vocab, opts);
                rows.push(encode(&mut g, &self.store, &self.encoder, &expr, None)?.h_cls);
            }
            let h = g.concat_rows(&rows)?;
            let z = predictor_logits(&mut g, &self.store, &self.predictor, h)?;
            out.extend(g.value(z).chunks(self.types.len()).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    pub fn predict_all(&self, examples: &[Example], opts: DecodeOptions) -> Result<Vec<BTreeSet<TypePath>>, TrainError> {
        Ok(self
            .logits(examples)?
            .iter()
            .map(|z| decode(z, &self.types, opts))
            .collect())
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            encoder: self.encoder.config,
            vocab: self.vocab.tokens().to_vec(),
            types: self.types.clone(),
            train_config: self.config.clone(),
        }
    }

    /// Writes the tensors to `checkpoint` and the metadata to a sibling
    /// `model.json`.
    pub fn save(&self, checkpoint_path: &Path) -> Result<(), TrainError> {
        let mut w = BufWriter::new(File::create(checkpoint_path)?);
        checkpoint::write_store(&mut w, &self.store)?;
        w.flush()?;
        let meta = serde_json::to_string_pretty(&self.meta())?;
        std::fs::write(meta_path(checkpoint_path), meta + "\n")?;
        Ok(())
    }

    pub fn load(checkpoint_path: &Path) -> Result<Self, TrainError> {
        let meta: ModelMeta = serde_json::from_reader(BufReader::new(File::open(meta_path(checkpoint_path))?))?;
        let vocab = Vocabulary::from_tokens(meta.vocab).map_err(TrainError::Artifact)?;
        if vocab.len() != meta.encoder.vocab_size {
            return Err(TrainError::Artifact("vocabulary size disagrees with encoder config".into()));
        }
        let mut store = ParamStore::new();
        let encoder = init_params(&meta.encoder, &mut store)?;
        let predictor = init_predictor(&mut store, meta.encoder.dim, meta.types.len(), meta.encoder.seed);
        let tensors = checkpoint::read_tensors(BufReader::new(File::open(checkpoint_path)?))?;
        checkpoint::load_into(&mut store, tensors).map_err(|e| TrainError::Artifact(e.to_string()))?;
        Ok(Self {
            store,
            encoder,
            predictor,
            vocab,
            types: meta.types,
            config: meta.train_config,
        })
    }
}

pub fn meta_path(checkpoint_path: &Path) -> PathBuf {
    checkpoint_path.with_file_name(META_FILE)
}

/// Types whose sigmoid exceeds the threshold; if none does, the single
/// argmax (lowest index on ties). Closure adds every ancestor.
pub fn decode(logits: &[f64], types: &[TypePath], opts: DecodeOptions) -> BTreeSet<TypePath> {
    let mut out: BTreeSet<TypePath> = logits
        .iter()
        .zip(types)
        .filter(|(&z, _)| crate::autodiff::sigmoid(z) > opts.threshold)
        .map(|(_, t)| t.clone())
        .collect();
    if out.is_empty() {
        let mut best = 0;
        for (i, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = i;
            }
        }
        out.insert(types[best].clone());
    }
    if opts.closure {
        let ancestors: Vec<TypePath> = out
            .iter()
            .flat_map(|t| std::iter::successors(t.parent(), TypePath::parent))
            .collect();
        out.extend(ancestors);
    }
    out
}
