//! Shared siamese transformer encoder.
//!
//! One parameter set encodes every expression kind. Attention heads keep
//! separate projection matrices (`d x d/h` in, `d/h x d` out), which is the
//! usual multi-head layer with its weight matrices split by head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::prompt::Expression;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("token id {id} at position {pos} is outside the vocabulary ({vocab_size})")]
    TokenOutOfRange {
        id: usize,
        pos: usize,
        vocab_size: usize,
    },
    #[error("expression of length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            max_len: 128,
            dim: 64,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 128,
            dropout_rate: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::InvalidConfig(m.into()));
        if [self.vocab_size, self.max_len, self.dim, self.n_layers, self.n_heads, self.ffn_dim]
            .contains(&0)
        {
            return bad("sizes must be positive");
        }
        if self.dim % self.n_heads != 0 {
            return bad("dim must be divisible by n_heads");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    pub bo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

/// Handles to the encoder's tensors inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub emb_ln_gain: ParamId,
    pub emb_ln_bias: ParamId,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb, self.emb_ln_gain, self.emb_ln_bias];
        for l in &self.layers {
            for h in &l.heads {
                ids.extend([h.wq, h.bq, h.wk, h.bk, h.wv, h.bv, h.wo]);
            }
            ids.extend([l.bo, l.ln1_gain, l.ln1_bias, l.w1, l.b1, l.w2, l.b2, l.ln2_gain, l.ln2_bias]);
        }
        ids
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("finite init")
}

pub(crate) fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    uniform(rng, vec![fan_in, fan_out], (6.0 / (fan_in + fan_out) as f64).sqrt())
}

/// Registers freshly initialized encoder tensors (names prefixed `enc.`).
/// Embeddings are uniform in (-0.05, 0.05), projections Xavier-uniform,
/// layer-norm gains 1 and all biases 0.
pub fn init_params(cfg: &EncoderConfig, store: &mut ParamStore) -> Result<EncoderParams, EncoderError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d, dh, f) = (cfg.dim, cfg.head_dim(), cfg.ffn_dim);
    let tok_emb = store.add("enc.tok_emb", uniform(&mut rng, vec![cfg.vocab_size, d], 0.05));
    let pos_emb = store.add("enc.pos_emb", uniform(&mut rng, vec![cfg.max_len, d], 0.05));
    let emb_ln_gain = store.add("enc.emb_ln.gain", Tensor::filled(vec![d], 1.0));
    let emb_ln_bias = store.add("enc.emb_ln.bias", Tensor::zeros(vec![d]));
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = format!("enc.layer{l}");
        let heads = (0..cfg.n_heads)
            .map(|h| {
                let hp = format!("{p}.head{h}");
                HeadParams {
                    wq: store.add(format!("{hp}.wq"), xavier(&mut rng, d, dh)),
                    bq: store.add(format!("{hp}.bq"), Tensor::zeros(vec![dh])),
                    wk: store.add(format!("{hp}.wk"), xavier(&mut rng, d, dh)),
                    bk: store.add(format!("{hp}.bk"), Tensor::zeros(vec![dh])),
                    wv: store.add(format!("{hp}.wv"), xavier(&mut rng, d, dh)),
                    bv: store.add(format!("{hp}.bv"), Tensor::zeros(vec![dh])),
                    wo: store.add(format!("{hp}.wo"), xavier(&mut rng, dh, d)),
                }
            })
            .collect();
        layers.push(LayerParams {
            heads,
            bo: store.add(format!("{p}.bo"), Tensor::zeros(vec![d])),
            ln1_gain: store.add(format!("{p}.ln1.gain"), Tensor::filled(vec![d], 1.0)),
            ln1_bias: store.add(format!("{p}.ln1.bias"), Tensor::zeros(vec![d])),
            w1: store.add(format!("{p}.ffn.w1"), xavier(&mut rng, d, f)),
            b1: store.add(format!("{p}.ffn.b1"), Tensor::zeros(vec![f])),
            w2: store.add(format!("{p}.ffn.w2"), xavier(&mut rng, f, d)),
            b2: store.add(format!("{p}.ffn.b2"), Tensor::zeros(vec![d])),
            ln2_gain: store.add(format!("{p}.ln2.gain"), Tensor::filled(vec![d], 1.0)),
            ln2_bias: store.add(format!("{p}.ln2.bias"), Tensor::zeros(vec![d])),
        });
    }
    Ok(EncoderParams {
        config: *cfg,
        tok_emb,
        pos_emb,
        emb_ln_gain,
        emb_ln_bias,
        layers,
    })
}

/// Dropout source; `None` means evaluation mode.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub h_cls: Var,
    pub h_ent: Var,
    pub all_positions: Var,
}

fn dropout(g: &mut Graph, x: Var, rate: f64, rng: &mut DropoutRng<'_>) -> Result<Var, AutodiffError> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let mask = (0..g.value(x).len())
                .map(|_| if rng.gen_bool(rate) { 0.0 } else { keep })
                .collect();
            g.mul_const(x, mask)
        }
        _ => Ok(x),
    }
}

/// Encodes one expression onto `g`. Passing a dropout generator selects
/// training mode.
pub fn encode(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    expr: &Expression,
    mut rng: DropoutRng<'_>,
) -> Result<Encoded, EncoderError> {
    let cfg = &params.config;
    let n = expr.token_ids.len();
    if n > cfg.max_len {
        return Err(EncoderError::TooLong {
            len: n,
            max_len: cfg.max_len,
        });
    }
    if let Some((pos, &id)) = expr
        .token_ids
        .iter()
        .enumerate()
        .find(|(_, &id)| id >= cfg.vocab_size)
    {
        return Err(EncoderError::TokenOutOfRange {
            id,
            pos,
            vocab_size: cfg.vocab_size,
        });
    }
    let rate = cfg.dropout_rate;
    let positions: Vec<usize> = (0..n).collect();

    let tok = g.param(store, params.tok_emb);
    let pos = g.param(store, params.pos_emb);
    let te = g.embedding_lookup(tok, &expr.token_ids)?;
    let pe = g.embedding_lookup(pos, &positions)?;
    let x = g.add(te, pe)?;
    let (lg, lb) = (g.param(store, params.emb_ln_gain), g.param(store, params.emb_ln_bias));
    let x = g.layer_norm(x, lg, lb)?;
    let mut x = dropout(g, x, rate, &mut rng)?;

    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    for layer in &params.layers {
        let mut attn: Option<Var> = None;
        for h in &layer.heads {
            let proj = |g: &mut Graph, w: ParamId, b: ParamId| -> Result<Var, AutodiffError> {
                let (w, b) = (g.param(store, w), g.param(store, b));
                let y = g.matmul(x, w)?;
                g.add_row(y, b)
            };
            let q = proj(g, h.wq, h.bq)?;
            let k = proj(g, h.wk, h.bk)?;
            let v = proj(g, h.wv, h.bv)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale)?;
            let weights = g.softmax(scores)?;
            let ctx = g.matmul(weights, v)?;
            let wo = g.param(store, h.wo);
            let out = g.matmul(ctx, wo)?;
            attn = Some(match attn {
                Some(a) => g.add(a, out)?,
                None => out,
            });
        }
        let bo = g.param(store, layer.bo);
        let attn = g.add_row(attn.expect("n_heads >= 1"), bo)?;
        let attn = dropout(g, attn, rate, &mut rng)?;
        let res = g.add(x, attn)?;
        let (g1, b1) = (g.param(store, layer.ln1_gain), g.param(store, layer.ln1_bias));
        let h1 = g.layer_norm(res, g1, b1)?;

        let (w1, bb1) = (g.param(store, layer.w1), g.param(store, layer.b1));
        let f = g.matmul(h1, w1)?;
        let f = g.add_row(f, bb1)?;
        let f = g.gelu(f)?;
        let (w2, bb2) = (g.param(store, layer.w2), g.param(store, layer.b2));
        let f = g.matmul(f, w2)?;
        let f = g.add_row(f, bb2)?;
        let f = dropout(g, f, rate, &mut rng)?;
        let res = g.add(h1, f)?;
        let (g2, b2) = (g.param(store, layer.ln2_gain), g.param(store, layer.ln2_bias));
        x = g.layer_norm(res, g2, b2)?;
    }
    let h_cls = g.slice_row(x, expr.cls_pos)?;
    let h_ent = g.slice_row(x, expr.ent_pos)?;
    Ok(Encoded {
        h_cls,
        h_ent,
        all_positions: x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{ExpressionKind, Vocabulary};
    use std::collections::BTreeSet;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            dropout_rate: 0.0,
            max_len: 16,
            ..EncoderConfig::with_vocab(20)
        }
    }

    fn expr(ids: Vec<usize>, ent_pos: usize) -> Expression {
        Expression {
            kind: ExpressionKind::TypeScarce,
            token_ids: ids,
            cls_pos: 0,
            ent_pos,
            mask_pos: None,
            source_example_id: None,
            carried_fine_types: BTreeSet::new(),
            carried_coarse_types: BTreeSet::new(),
        }
    }

    fn sample() -> Expression {
        let e = Vocabulary::ENT_ID;
        expr(vec![2, 7, 8, 9, 10, e, 8, 11, 12, 5, 13, 3], 5)
    }

    fn run(store: &ParamStore, p: &EncoderParams, e: &Expression) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let out = encode(&mut g, store, p, e, None).unwrap();
        (g.value(out.h_cls).to_vec(), g.value(out.h_ent).to_vec())
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut store = ParamStore::new();
        let p = init_params(&cfg(), &mut store).unwrap();
        assert_eq!(run(&store, &p, &sample()), run(&store, &p, &sample()));
    }

    #[test]
    fn train_mode_dropout_uses_the_rng() {
        let c = EncoderConfig {
            dropout_rate: 0.3,
            ..cfg()
        };
        let mut store = ParamStore::new();
        let p = init_params(&c, &mut store).unwrap();
        let train = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let out = encode(&mut g, &store, &p, &sample(), Some(&mut rng)).unwrap();
            g.value(out.h_cls).to_vec()
        };
        assert_eq!(train(1), train(1));
        assert_ne!(train(1), train(2));
        assert_ne!(train(1), run(&store, &p, &sample()).0);
    }

    #[test]
    fn positions_matter() {
        let mut store = ParamStore::new();
        let p = init_params(&cfg(), &mut store).unwrap();
        let a = sample();
        let mut b = sample();
        b.token_ids.swap(2, 3);
        assert_ne!(run(&store, &p, &a), run(&store, &p, &b));
    }

    #[test]
    fn scarce_and_rich_siblings_differ_at_init() {
        let mut store = ParamStore::new();
        let p = init_params(&cfg(), &mut store).unwrap();
        let scarce = sample();
        let mut rich = sample();
        rich.token_ids[9] = 14; // [MASK] replaced by a type word
        let (a, b) = (run(&store, &p, &scarce).1, run(&store, &p, &rich).1);
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-6, "h_ent identical: {diff}");
    }

    #[test]
    fn seeds_control_init() {
        let init = |seed| {
            let mut store = ParamStore::new();
            init_params(&EncoderConfig { seed, ..cfg() }, &mut store).unwrap();
            store
        };
        assert_eq!(init(3), init(3));
        assert_ne!(init(3), init(4));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let c = EncoderConfig::with_vocab(100);
        let mut store = ParamStore::new();
        init_params(&c, &mut store).unwrap();
        let (v, l, d, f) = (100, 128, 64, 128);
        let per_layer = 4 * d * d + 4 * d // q, k, v, o with biases
            + 2 * d                       // ln1
            + d * f + f + f * d + d       // ffn
            + 2 * d; // ln2
        assert_eq!(store.num_scalars(), v * d + l * d + 2 * d + 2 * per_layer);
        assert_eq!(store.num_scalars(), 81_664);
    }

    #[test]
    fn layer_norm_init() {
        let mut store = ParamStore::new();
        let p = init_params(&cfg(), &mut store).unwrap();
        assert!(store.get(p.emb_ln_gain).data.iter().all(|&x| x == 1.0));
        assert!(store.get(p.layers[1].ln2_bias).data.iter().all(|&x| x == 0.0));
        assert!(store.get(p.tok_emb).data.iter().all(|x| x.abs() < 0.05));
    }

    #[test]
    fn input_errors() {
        let mut store = ParamStore::new();
        let p = init_params(&cfg(), &mut store).unwrap();
        let mut g = Graph::new();
        let long = expr(vec![2; 17], 1);
        assert!(matches!(
            encode(&mut g, &store, &p, &long, None),
            Err(EncoderError::TooLong { len: 17, max_len: 16 })
        ));
        let oov = expr(vec![2, 4, 25], 1);
        assert!(matches!(
            encode(&mut g, &store, &p, &oov, None),
            Err(EncoderError::TokenOutOfRange { id: 25, pos: 2, .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig { n_heads: 3, ..cfg() }.validate().is_err());
        assert!(EncoderConfig { dropout_rate: 1.0, ..cfg() }.validate().is_err());
        assert!(EncoderConfig { dim: 0, ..cfg() }.validate().is_err());
    }

    #[test]
    fn both_roles_share_one_parameter_node() {
        let mut store = ParamStore::new();
        let p = init_params(&cfg(), &mut store).unwrap();
        let mut g = Graph::new();
        encode(&mut g, &store, &p, &sample(), None).unwrap();
        let before = g.param(&store, p.tok_emb);
        let mut rich = sample();
        rich.kind = ExpressionKind::TypeRich;
        encode(&mut g, &store, &p, &rich, None).unwrap();
        assert_eq!(g.param(&store, p.tok_emb), before);
    }
}
