//! Constrained hierarchical contrast over `[ENT]` representations.
//!
//! Fine-grained contrast only compares siblings: two items are a fine
//! negative pair when their fine type sets are disjoint but they share a
//! coarse type. Coarse contrast ignores fine identity altogether. The pair
//! score is a log-softmax of temperature-scaled l2 distances, normalized over
//! the pair set being scored:
//!
//! ```text
//! s(i, j; B) = d(i, j)/tau - log sum_{(i', j') in B} exp(d(i', j')/tau)
//! L+ = 1/|Y| sum_y 1/(2|P(y)|) sum_{(i,j) in P(y), i != j} s(i, j; pairs of P(y))
//! L- = -1/(2 |items of N|) sum_{(i,j) in N} s(i, j; N)
//! ```
//!
//! Pairs are ordered, so each unordered pair is counted twice. Empty pair
//! sets contribute exactly zero.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::ontology::TypePath;

#[derive(Debug, Error, PartialEq)]
pub enum ContrastError {
    #[error("normalizer pair set is empty")]
    EmptyNormalizer,
    #[error("pair ({0}, {1}) is not in the normalizer set")]
    PairNotInNormalizer(usize, usize),
    #[error("duplicate contrast item key `{0}`")]
    DuplicateKey(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    Natural,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub tau: f64,
    pub lambda_f: f64,
    pub lambda_c: f64,
    pub log_base: LogBase,
    /// Treat the log-sum-exp normalizer as a constant when differentiating.
    pub detach_normalizer: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda_f: 0.1,
            lambda_c: 0.1,
            log_base: LogBase::Natural,
            detach_normalizer: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ContrastItem {
    /// Unique within a batch; items are ordered by key before grouping.
    pub key: String,
    pub h_ent: Var,
    pub fine_types: BTreeSet<TypePath>,
    pub coarse_types: BTreeSet<TypePath>,
}

pub type Pair = (usize, usize);

/// Contrast groups of one batch. Indices refer to `items`, which is sorted
/// by key.
#[derive(Debug, Clone)]
pub struct ContrastGroups {
    pub items: Vec<ContrastItem>,
    pub fine_positive: BTreeMap<TypePath, Vec<usize>>,
    pub fine_negative: Vec<Pair>,
    pub coarse_positive: BTreeMap<TypePath, Vec<usize>>,
    pub coarse_negative: Vec<Pair>,
}

fn disjoint(a: &BTreeSet<TypePath>, b: &BTreeSet<TypePath>) -> bool {
    a.intersection(b).next().is_none()
}

pub fn group_batch(mut items: Vec<ContrastItem>) -> Result<ContrastGroups, ContrastError> {
    items.sort_by(|a, b| a.key.cmp(&b.key));
    if let Some(w) = items.windows(2).find(|w| w[0].key == w[1].key) {
        return Err(ContrastError::DuplicateKey(w[0].key.clone()));
    }
    let mut fine_positive: BTreeMap<TypePath, Vec<usize>> = BTreeMap::new();
    let mut coarse_positive: BTreeMap<TypePath, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        for t in &it.fine_types {
            fine_positive.entry(t.clone()).or_default().push(i);
        }
        for t in &it.coarse_types {
            coarse_positive.entry(t.clone()).or_default().push(i);
        }
    }
    let mut fine_negative = Vec::new();
    let mut coarse_negative = Vec::new();
    for (i, a) in items.iter().enumerate() {
        for (j, b) in items.iter().enumerate() {
            if i == j {
                continue;
            }
            if !a.fine_types.is_empty()
                && !b.fine_types.is_empty()
                && disjoint(&a.fine_types, &b.fine_types)
                && !disjoint(&a.coarse_types, &b.coarse_types)
            {
                fine_negative.push((i, j));
            }
            if disjoint(&a.coarse_types, &b.coarse_types) {
                coarse_negative.push((i, j));
            }
        }
    }
    Ok(ContrastGroups {
        items,
        fine_positive,
        fine_negative,
        coarse_positive,
        coarse_negative,
    })
}

/// All ordered pairs `(i, j)`, `i != j`, drawn from `members`.
pub fn ordered_pairs(members: &[usize]) -> Vec<Pair> {
    let mut out = Vec::with_capacity(members.len() * members.len().saturating_sub(1));
    for &i in members {
        for &j in members {
            if i != j {
                out.push((i, j));
            }
        }
    }
    out
}

/// Distinct items appearing in a pair set.
pub fn items_in(pairs: &[Pair]) -> usize {
    pairs
        .iter()
        .flat_map(|&(i, j)| [i, j])
        .collect::<BTreeSet<_>>()
        .len()
}

/// Memoized l2 distances; `(i, j)` and `(j, i)` share one node.
struct Distances<'a> {
    items: &'a [ContrastItem],
    cache: HashMap<Pair, Var>,
}

impl<'a> Distances<'a> {
    fn new(items: &'a [ContrastItem]) -> Self {
        Self {
            items,
            cache: HashMap::new(),
        }
    }

    fn get(&mut self, g: &mut Graph, (i, j): Pair) -> Result<Var, AutodiffError> {
        let key = (i.min(j), i.max(j));
        if let Some(&v) = self.cache.get(&key) {
            return Ok(v);
        }
        let v = g.l2_distance(self.items[key.0].h_ent, self.items[key.1].h_ent)?;
        self.cache.insert(key, v);
        Ok(v)
    }
}

/// `log sum exp(d/tau)` over `pairs`, shifted by the max exponent.
/// Returns the scaled distances and the normalizer.
fn scaled_and_normalizer(
    g: &mut Graph,
    dist: &mut Distances<'_>,
    pairs: &[Pair],
    cfg: &ContrastConfig,
) -> Result<(Var, Var), ContrastError> {
    if pairs.is_empty() {
        return Err(ContrastError::EmptyNormalizer);
    }
    let ds = pairs
        .iter()
        .map(|&p| dist.get(g, p))
        .collect::<Result<Vec<_>, _>>()?;
    let stacked = g.concat_rows(&ds)?;
    let scaled = g.scale(stacked, 1.0 / cfg.tau)?;
    let max = g.value(scaled).iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = if cfg.detach_normalizer {
        let total: f64 = g.value(scaled).iter().map(|v| (v - max).exp()).sum();
        g.scalar_const(total.ln() + max)?
    } else {
        let shifted = g.add_scalar(scaled, -max)?;
        let e = g.exp(shifted)?;
        let total = g.sum(e)?;
        let l = g.log(total)?;
        g.add_scalar(l, max)?
    };
    Ok((scaled, lse))
}

/// s(i, j) with the given normalizer pair set.
pub fn similarity_s(
    g: &mut Graph,
    items: &[ContrastItem],
    pair: Pair,
    normalizer: &[Pair],
    cfg: &ContrastConfig,
) -> Result<Var, ContrastError> {
    if normalizer.is_empty() {
        return Err(ContrastError::EmptyNormalizer);
    }
    let k = normalizer
        .iter()
        .position(|&p| p == pair)
        .ok_or(ContrastError::PairNotInNormalizer(pair.0, pair.1))?;
    let mut dist = Distances::new(items);
    let (scaled, lse) = scaled_and_normalizer(g, &mut dist, normalizer, cfg)?;
    // pick coordinate k by a one-hot product
    let mut onehot = vec![0.0; normalizer.len()];
    onehot[k] = 1.0;
    let masked = g.mul_const(scaled, onehot)?;
    let dk = g.sum(masked)?;
    Ok(g.sub(dk, lse)?)
}

/// Sum of s(i, j; pairs) over every pair in `pairs`: sum(d/tau) - n * lse.
fn pair_set_total(
    g: &mut Graph,
    dist: &mut Distances<'_>,
    pairs: &[Pair],
    cfg: &ContrastConfig,
) -> Result<Var, ContrastError> {
    let (scaled, lse) = scaled_and_normalizer(g, dist, pairs, cfg)?;
    let sum = g.sum(scaled)?;
    let n_lse = g.scale(lse, pairs.len() as f64)?;
    Ok(g.sub(sum, n_lse)?)
}

fn positive_loss(
    g: &mut Graph,
    items: &[ContrastItem],
    positives: &BTreeMap<TypePath, Vec<usize>>,
    cfg: &ContrastConfig,
) -> Result<Var, ContrastError> {
    let mut dist = Distances::new(items);
    let mut terms = Vec::new();
    for members in positives.values() {
        if members.len() < 2 {
            continue;
        }
        let pairs = ordered_pairs(members);
        let total = pair_set_total(g, &mut dist, &pairs, cfg)?;
        terms.push(g.scale(total, 1.0 / (2.0 * members.len() as f64))?);
    }
    if terms.is_empty() {
        return Ok(g.scalar_const(0.0)?);
    }
    let stacked = g.concat_rows(&terms)?;
    let sum = g.sum(stacked)?;
    Ok(g.scale(sum, 1.0 / positives.len() as f64)?)
}

fn negative_loss(
    g: &mut Graph,
    items: &[ContrastItem],
    negatives: &[Pair],
    cfg: &ContrastConfig,
) -> Result<Var, ContrastError> {
    if negatives.is_empty() {
        return Ok(g.scalar_const(0.0)?);
    }
    let mut dist = Distances::new(items);
    let total = pair_set_total(g, &mut dist, negatives, cfg)?;
    Ok(g.scale(total, -1.0 / (2.0 * items_in(negatives) as f64))?)
}

/// (L_f+, L_f-)
pub fn fine_losses(
    g: &mut Graph,
    groups: &ContrastGroups,
    cfg: &ContrastConfig,
) -> Result<(Var, Var), ContrastError> {
    Ok((
        positive_loss(g, &groups.items, &groups.fine_positive, cfg)?,
        negative_loss(g, &groups.items, &groups.fine_negative, cfg)?,
    ))
}

/// (L_c+, L_c-)
pub fn coarse_losses(
    g: &mut Graph,
    groups: &ContrastGroups,
    cfg: &ContrastConfig,
) -> Result<(Var, Var), ContrastError> {
    Ok((
        positive_loss(g, &groups.items, &groups.coarse_positive, cfg)?,
        negative_loss(g, &groups.items, &groups.coarse_negative, cfg)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ParamStore, Tensor};
    use crate::ontology::{coarse_of, parse_type};

    fn tp(s: &str) -> TypePath {
        parse_type(s).unwrap()
    }

    fn item(g: &mut Graph, key: &str, v: &[f64], types: &[&str]) -> ContrastItem {
        let h = g
            .leaf(Tensor::new(vec![v.len()], v.to_vec()).unwrap().with_grad())
            .unwrap();
        let all: BTreeSet<TypePath> = types.iter().map(|s| tp(s)).collect();
        ContrastItem {
            key: key.into(),
            h_ent: h,
            fine_types: all.iter().filter(|t| t.is_fine()).cloned().collect(),
            coarse_types: all.iter().map(coarse_of).collect(),
        }
    }

    fn cfg() -> ContrastConfig {
        ContrastConfig::default()
    }

    #[test]
    fn homogeneous_batch() {
        let mut g = Graph::new();
        let items: Vec<_> = (0..3)
            .map(|i| item(&mut g, &format!("k{i}"), &[i as f64, 0.0], &["/person/actor"]))
            .collect();
        let groups = group_batch(items).unwrap();
        assert!(groups.fine_negative.is_empty() && groups.coarse_negative.is_empty());
        assert_eq!(groups.fine_positive[&tp("/person/actor")], vec![0, 1, 2]);
        let (_, lfm) = fine_losses(&mut g, &groups, &cfg()).unwrap();
        let (_, lcm) = coarse_losses(&mut g, &groups, &cfg()).unwrap();
        assert_eq!(g.scalar(lfm), 0.0);
        assert_eq!(g.scalar(lcm), 0.0);
    }

    #[test]
    fn siblings_are_fine_negatives_only() {
        let mut g = Graph::new();
        let items = vec![
            item(&mut g, "a", &[0.0], &["/person", "/person/actor"]),
            item(&mut g, "b", &[1.0], &["/person", "/person/coach"]),
        ];
        let groups = group_batch(items).unwrap();
        assert_eq!(groups.fine_negative, vec![(0, 1), (1, 0)]);
        assert!(groups.coarse_negative.is_empty());
    }

    #[test]
    fn different_coarse_are_coarse_negatives_only() {
        let mut g = Graph::new();
        let items = vec![
            item(&mut g, "a", &[0.0], &["/person/actor"]),
            item(&mut g, "b", &[1.0], &["/location/city"]),
        ];
        let groups = group_batch(items).unwrap();
        assert!(groups.fine_negative.is_empty());
        assert_eq!(groups.coarse_negative, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn coarse_only_items_skip_fine_groups() {
        let mut g = Graph::new();
        let items = vec![
            item(&mut g, "a", &[0.0], &["/person"]),
            item(&mut g, "b", &[1.0], &["/person/coach"]),
        ];
        let groups = group_batch(items).unwrap();
        assert!(groups.fine_negative.is_empty());
        assert_eq!(groups.coarse_positive[&tp("/person")], vec![0, 1]);
        assert_eq!(groups.fine_positive.len(), 1);
    }

    #[test]
    fn sibling_swap_keeps_coarse_membership() {
        let mut g = Graph::new();
        let build = |g: &mut Graph, t: &str| {
            let items = vec![
                item(g, "a", &[0.0], &["/person/actor"]),
                item(g, "b", &[1.0], &[t]),
                item(g, "c", &[2.0], &["/location/city"]),
            ];
            group_batch(items).unwrap()
        };
        let x = build(&mut g, "/person/actor");
        let y = build(&mut g, "/person/coach");
        assert_eq!(x.coarse_positive, y.coarse_positive);
        assert_eq!(x.coarse_negative, y.coarse_negative);
    }

    #[test]
    fn duplicate_keys_rejected() {
        let mut g = Graph::new();
        let items = vec![
            item(&mut g, "a", &[0.0], &["/person"]),
            item(&mut g, "a", &[1.0], &["/person"]),
        ];
        assert!(matches!(group_batch(items), Err(ContrastError::DuplicateKey(_))));
    }

    #[test]
    fn singleton_normalizer_gives_zero() {
        let mut g = Graph::new();
        let items = vec![
            item(&mut g, "a", &[0.0, 1.0], &["/person"]),
            item(&mut g, "b", &[3.0, -2.0], &["/person"]),
        ];
        let s = similarity_s(&mut g, &items, (0, 1), &[(0, 1)], &cfg()).unwrap();
        assert_eq!(g.scalar(s), 0.0);
    }

    #[test]
    fn uniform_distances_give_minus_log_n() {
        // corners of a square: all four sides have length 1
        let mut g = Graph::new();
        let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let items: Vec<_> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| item(&mut g, &i.to_string(), p, &["/person"]))
            .collect();
        let norm = [(0, 1), (1, 2), (2, 3), (3, 0), (1, 0)];
        for tau in [0.05, 0.1, 1.0, 7.0] {
            let c = ContrastConfig { tau, ..cfg() };
            let s = similarity_s(&mut g, &items, (1, 2), &norm, &c).unwrap();
            assert!((g.scalar(s) + 5f64.ln()).abs() < 1e-12, "tau {tau}");
        }
    }

    #[test]
    fn similarity_errors() {
        let mut g = Graph::new();
        let items = vec![
            item(&mut g, "a", &[0.0], &["/person"]),
            item(&mut g, "b", &[1.0], &["/person"]),
        ];
        assert_eq!(
            similarity_s(&mut g, &items, (0, 1), &[], &cfg()).unwrap_err(),
            ContrastError::EmptyNormalizer
        );
        assert_eq!(
            similarity_s(&mut g, &items, (0, 1), &[(1, 0)], &cfg()).unwrap_err(),
            ContrastError::PairNotInNormalizer(0, 1)
        );
    }

    #[test]
    fn one_item_per_fine_type_has_no_positive_loss() {
        let mut g = Graph::new();
        let items = vec![
            item(&mut g, "a", &[0.0], &["/person/actor"]),
            item(&mut g, "b", &[1.0], &["/person/coach"]),
            item(&mut g, "c", &[3.0], &["/location/city"]),
        ];
        let groups = group_batch(items).unwrap();
        let (lfp, _) = fine_losses(&mut g, &groups, &cfg()).unwrap();
        assert_eq!(g.scalar(lfp), 0.0);
    }

    #[test]
    fn empty_groups_give_zero_losses_and_gradients() {
        let mut g = Graph::new();
        let items = vec![item(&mut g, "a", &[0.5, 0.5], &["/person/actor"])];
        let h = items[0].h_ent;
        let groups = group_batch(items).unwrap();
        let (a, b) = fine_losses(&mut g, &groups, &cfg()).unwrap();
        let (c, d) = coarse_losses(&mut g, &groups, &cfg()).unwrap();
        let parts = g.concat_rows(&[a, b, c, d]).unwrap();
        assert!(g.value(parts).iter().all(|&x| x == 0.0));
        let total = g.sum(parts).unwrap();
        // the leaf is unreachable from the loss: it receives no gradient at all
        g.backward(total, &mut ParamStore::new()).unwrap();
        assert!(g.grad(h).is_none());
    }

    #[test]
    fn detached_normalizer_step_pulls_positives_together() {
        // two actors, two coaches; gradient on L_f+ alone with a frozen normalizer
        let pts = [[0.0, 0.0], [1.0, 0.5], [3.0, 0.0], [3.5, 2.0]];
        let types = ["/person/actor", "/person/actor", "/person/coach", "/person/coach"];
        let c = ContrastConfig {
            detach_normalizer: true,
            ..cfg()
        };
        let eval = |pts: &[[f64; 2]; 4]| {
            let mut g = Graph::new();
            let items: Vec<_> = (0..4)
                .map(|i| item(&mut g, &i.to_string(), &pts[i], &[types[i]]))
                .collect();
            let hs: Vec<Var> = items.iter().map(|it| it.h_ent).collect();
            let groups = group_batch(items).unwrap();
            let (lfp, _) = fine_losses(&mut g, &groups, &c).unwrap();
            g.backward(lfp, &mut ParamStore::new()).unwrap();
            let grads: Vec<Vec<f64>> = hs.iter().map(|&h| g.grad(h).unwrap().to_vec()).collect();
            grads
        };
        let mean_pos = |p: &[[f64; 2]; 4]| {
            let d = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            (d(p[0], p[1]) + d(p[2], p[3])) / 2.0
        };
        let grads = eval(&pts);
        let mut next = pts;
        for i in 0..4 {
            for k in 0..2 {
                next[i][k] -= 0.01 * grads[i][k];
            }
        }
        assert!(mean_pos(&next) < mean_pos(&pts));
    }
}
