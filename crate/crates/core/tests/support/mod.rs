//! Shared helpers for the integration tests: direct-formula oracles and
//! small fixture builders.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::Path;

use picot::autodiff::{Graph, Tensor};
use picot::contrast::ContrastItem;
use picot::ontology::{coarse_of, parse_type, TypePath};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn tp(s: &str) -> TypePath {
    parse_type(s).unwrap()
}

pub fn set(xs: &[&str]) -> BTreeSet<TypePath> {
    xs.iter().map(|s| tp(s)).collect()
}

/// One contrast item as plain data.
#[derive(Debug, Clone)]
pub struct OracleItem {
    pub key: String,
    pub h: Vec<f64>,
    pub fine: BTreeSet<TypePath>,
    pub coarse: BTreeSet<TypePath>,
}

impl OracleItem {
    pub fn new(key: &str, h: &[f64], types: &[&str]) -> Self {
        let all = set(types);
        let fine: BTreeSet<TypePath> = all.iter().filter(|t| t.is_fine()).cloned().collect();
        let mut coarse: BTreeSet<TypePath> = all.iter().filter(|t| t.is_coarse()).cloned().collect();
        coarse.extend(fine.iter().map(coarse_of));
        Self {
            key: key.into(),
            h: h.to_vec(),
            fine,
            coarse,
        }
    }

    pub fn to_item(&self, g: &mut Graph) -> ContrastItem {
        let h = g
            .leaf(Tensor::new(vec![self.h.len()], self.h.clone()).unwrap().with_grad())
            .unwrap();
        ContrastItem {
            key: self.key.clone(),
            h_ent: h,
            fine_types: self.fine.clone(),
            coarse_types: self.coarse.clone(),
        }
    }
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// s(i, j) as the plain log of a ratio of exponentials.
pub fn oracle_s(items: &[OracleItem], (i, j): (usize, usize), normalizer: &[(usize, usize)], tau: f64) -> f64 {
    let num = (dist(&items[i].h, &items[j].h) / tau).exp();
    let den: f64 = normalizer
        .iter()
        .map(|&(a, b)| (dist(&items[a].h, &items[b].h) / tau).exp())
        .sum();
    (num / den).ln()
}

fn meets(a: &BTreeSet<TypePath>, b: &BTreeSet<TypePath>) -> bool {
    a.iter().any(|t| b.contains(t))
}

/// (L+, L-) at one granularity by enumerating pairs straight from the
/// definitions. Items must already be sorted by key.
fn oracle_losses(items: &[OracleItem], fine: bool, tau: f64) -> (f64, f64) {
    let types_of = |it: &OracleItem| if fine { it.fine.clone() } else { it.coarse.clone() };
    let labels: BTreeSet<TypePath> = items.iter().flat_map(types_of).collect();

    let mut plus = 0.0;
    for y in &labels {
        let members: Vec<usize> = (0..items.len()).filter(|&i| types_of(&items[i]).contains(y)).collect();
        let mut pairs = Vec::new();
        for &i in &members {
            for &j in &members {
                if i != j {
                    pairs.push((i, j));
                }
            }
        }
        let mut acc = 0.0;
        for &p in &pairs {
            acc += oracle_s(items, p, &pairs, tau);
        }
        plus += acc / (2.0 * members.len() as f64);
    }
    if !labels.is_empty() {
        plus /= labels.len() as f64;
    }

    let mut negatives = Vec::new();
    for i in 0..items.len() {
        for j in 0..items.len() {
            if i == j {
                continue;
            }
            let (a, b) = (&items[i], &items[j]);
            let neg = if fine {
                !a.fine.is_empty() && !b.fine.is_empty() && !meets(&a.fine, &b.fine) && meets(&a.coarse, &b.coarse)
            } else {
                !meets(&a.coarse, &b.coarse)
            };
            if neg {
                negatives.push((i, j));
            }
        }
    }
    let mut minus = 0.0;
    if !negatives.is_empty() {
        let involved: BTreeSet<usize> = negatives.iter().flat_map(|&(i, j)| [i, j]).collect();
        for &p in &negatives {
            minus += oracle_s(items, p, &negatives, tau);
        }
        minus *= -1.0 / (2.0 * involved.len() as f64);
    }
    (plus, minus)
}

/// [L_f+, L_f-, L_c+, L_c-]
pub fn oracle_all(items: &[OracleItem], tau: f64) -> [f64; 4] {
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| a.key.cmp(&b.key));
    let (fp, fm) = oracle_losses(&sorted, true, tau);
    let (cp, cm) = oracle_losses(&sorted, false, tau);
    [fp, fm, cp, cm]
}

const RANDOM_TYPES: &[&str] = &[
    "/person/actor",
    "/person/coach",
    "/location/city",
    "/location/river",
    "/organization/company",
];
const RANDOM_COARSE: &[&str] = &["/person", "/location", "/organization"];

/// Random batch of 1..=8 items with dim 1..=8, small embeddings and a mix of
/// single-label, multi-label and coarse-only items.
pub fn random_batch(rng: &mut impl Rng) -> Vec<OracleItem> {
    let n = rng.gen_range(1..=8);
    let d = rng.gen_range(1..=8);
    // keys in shuffled order so grouping has to sort
    let mut keys: Vec<usize> = (0..n).collect();
    keys.shuffle(rng);
    keys.into_iter()
        .map(|k| {
            let h: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let types: Vec<&str> = match rng.gen_range(0..10) {
                0 => vec![RANDOM_COARSE[rng.gen_range(0..RANDOM_COARSE.len())]],
                1 => vec![
                    RANDOM_TYPES[rng.gen_range(0..RANDOM_TYPES.len())],
                    RANDOM_TYPES[rng.gen_range(0..RANDOM_TYPES.len())],
                ],
                _ => vec![RANDOM_TYPES[rng.gen_range(0..RANDOM_TYPES.len())]],
            };
            OracleItem::new(&format!("k{k:02}"), &h, &types)
        })
        .collect()
}

/// Silhouette from the textbook per-point definition.
pub fn oracle_silhouette(rows: &[Vec<f64>], labels: &[&str]) -> f64 {
    let n = rows.len();
    let mut total = 0.0;
    for i in 0..n {
        let same: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let a = same.iter().map(|&j| dist(&rows[i], &rows[j])).sum::<f64>() / same.len() as f64;
        let others: BTreeSet<&str> = labels.iter().copied().filter(|l| *l != labels[i]).collect();
        let b = others
            .iter()
            .map(|l| {
                let m: Vec<usize> = (0..n).filter(|&j| labels[j] == *l).collect();
                m.iter().map(|&j| dist(&rows[i], &rows[j])).sum::<f64>() / m.len() as f64
            })
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        total += if denom == 0.0 { 0.0 } else { (b - a) / denom };
    }
    total / n as f64
}

pub fn picot_bin() -> &'static str {
    env!("CARGO_BIN_EXE_picot")
}

/// Write a synthetic corpus through the binary into `dir`.
pub fn synth_into(dir: &Path, spec_json: &str) -> std::process::Output {
    let spec = dir.join("synth.json");
    std::fs::write(&spec, spec_json).unwrap();
    std::process::Command::new(picot_bin())
        .args(["synth", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(dir.join("data"))
        .output()
        .unwrap()
}
