//! Macro/Micro-F1 scoring, silhouette cluster quality, and embedding export
//! with a 2-D PCA projection.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Graph;
use crate::corpus::{Example, TypeDescription};
use crate::encoder::{encode, EncoderError};
use crate::ontology::TypePath;
use crate::prompt::{build_description_rich, build_type_rich, build_type_scarce, Expression, ExpressionKind, PromptError};
use crate::trainer::{DescriptionIndex, Model};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{golds} gold sets vs {preds} predicted sets")]
    LengthMismatch { golds: usize, preds: usize },
    #[error("nothing to score")]
    Empty,
    #[error("silhouette needs at least 2 labels with at least 2 rows each: {0}")]
    DegenerateLabels(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub macro_p: f64,
    pub macro_r: f64,
    pub macro_f1: f64,
    pub micro_p: f64,
    pub micro_r: f64,
    pub micro_f1: f64,
    pub n_examples: usize,
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// |num| / |den| with 1 when both sets are empty and 0 when only `den` is.
fn ratio(hits: usize, den: usize, other: usize) -> f64 {
    match (den, other) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ => hits as f64 / den as f64,
    }
}

pub fn score(golds: &[BTreeSet<TypePath>], preds: &[BTreeSet<TypePath>]) -> Result<MetricsReport, EvalError> {
    if golds.len() != preds.len() {
        return Err(EvalError::LengthMismatch {
            golds: golds.len(),
            preds: preds.len(),
        });
    }
    if golds.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut mp, mut mr) = (0.0, 0.0);
    let (mut hits, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
    for (g, p) in golds.iter().zip(preds) {
        let h = g.intersection(p).count();
        mp += ratio(h, p.len(), g.len());
        mr += ratio(h, g.len(), p.len());
        hits += h;
        n_pred += p.len();
        n_gold += g.len();
    }
    let n = golds.len() as f64;
    let (macro_p, macro_r) = (mp / n, mr / n);
    let micro_p = if n_pred == 0 { 0.0 } else { hits as f64 / n_pred as f64 };
    let micro_r = if n_gold == 0 { 0.0 } else { hits as f64 / n_gold as f64 };
    Ok(MetricsReport {
        macro_p,
        macro_r,
        macro_f1: f1(macro_p, macro_r),
        micro_p,
        micro_r,
        micro_f1: f1(micro_p, micro_r),
        n_examples: golds.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VectorRole {
    #[serde(rename = "CLS")]
    Cls,
    #[serde(rename = "ENT")]
    Ent,
}

impl VectorRole {
    pub fn as_str(self) -> &'static str {
        match self {
            VectorRole::Cls => "CLS",
            VectorRole::Ent => "ENT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub example_id: String,
    pub kind: ExpressionKind,
    pub role: VectorRole,
    pub fine_types: BTreeSet<TypePath>,
    pub coarse_types: BTreeSet<TypePath>,
    pub vector: Vec<f64>,
    pub pca: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingDump {
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingDump {
    pub fn select(&self, kind: ExpressionKind, role: VectorRole) -> EmbeddingDump {
        EmbeddingDump {
            rows: self
                .rows
                .iter()
                .filter(|r| r.kind == kind && r.role == role)
                .cloned()
                .collect(),
        }
    }

    pub fn dim(&self) -> Option<usize> {
        self.rows.first().map(|r| r.vector.len())
    }

    /// Fits PCA on these rows and stores each row's projection.
    pub fn project(&mut self) {
        let data: Vec<Vec<f64>> = self.rows.iter().map(|r| r.vector.clone()).collect();
        let proj = pca_2d(&data);
        for (r, p) in self.rows.iter_mut().zip(proj) {
            r.pca = Some(p);
        }
    }

    pub fn write_csv(&self, w: impl Write) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        let d = self.dim().unwrap_or(0);
        let mut header: Vec<String> = ["id", "kind", "role", "fine_types", "coarse_types"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..d).map(|i| format!("v{i}")));
        header.extend(["pc0".to_string(), "pc1".to_string()]);
        out.write_record(&header)?;
        let join = |s: &BTreeSet<TypePath>| {
            s.iter()
                .map(TypePath::canonical_text)
                .collect::<Vec<_>>()
                .join(";")
        };
        for r in &self.rows {
            let mut rec = vec![
                r.example_id.clone(),
                r.kind.short_name().to_string(),
                r.role.as_str().to_string(),
                join(&r.fine_types),
                join(&r.coarse_types),
            ];
            rec.extend(r.vector.iter().map(|x| x.to_string()));
            match r.pca {
                Some([a, b]) => rec.extend([a.to_string(), b.to_string()]),
                None => rec.extend([String::new(), String::new()]),
            }
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn label_of(row: &EmbeddingRow, granularity: Granularity) -> Option<&TypePath> {
    match granularity {
        Granularity::Coarse => row.coarse_types.iter().next(),
        Granularity::Fine => row.fine_types.iter().next(),
    }
}

/// Silhouette at the chosen granularity. Rows without a label at that
/// granularity (coarse-only rows at fine granularity) are left out.
pub fn cluster_quality(dump: &EmbeddingDump, granularity: Granularity) -> Result<f64, EvalError> {
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    for r in &dump.rows {
        if let Some(l) = label_of(r, granularity) {
            vectors.push(r.vector.clone());
            labels.push(l.canonical_text().to_string());
        }
    }
    silhouette(&vectors, &labels)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient with l2 distance; a point whose `a` and `b`
/// are both zero scores 0.
pub fn silhouette(rows: &[Vec<f64>], labels: &[String]) -> Result<f64, EvalError> {
    if rows.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            golds: labels.len(),
            preds: rows.len(),
        });
    }
    let mut clusters: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        clusters.entry(l.as_str()).or_default().push(i);
    }
    if clusters.len() < 2 {
        return Err(EvalError::DegenerateLabels(format!("{} label(s)", clusters.len())));
    }
    if let Some((l, m)) = clusters.iter().find(|(_, m)| m.len() < 2) {
        return Err(EvalError::DegenerateLabels(format!("`{l}` has {} row(s)", m.len())));
    }
    let mut total = 0.0;
    for (i, row) in rows.iter().enumerate() {
        let own = labels[i].as_str();
        let mut a = 0.0;
        let mut b = f64::INFINITY;
        for (&l, members) in &clusters {
            let sum: f64 = members.iter().filter(|&&j| j != i).map(|&j| l2(row, &rows[j])).sum();
            if l == own {
                a = sum / (members.len() - 1) as f64;
            } else {
                b = b.min(sum / members.len() as f64);
            }
        }
        let m = a.max(b);
        total += if m == 0.0 { 0.0 } else { (b - a) / m };
    }
    Ok(total / rows.len() as f64)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and column eigenvectors (`vecs[k][i]` is coordinate
/// `i` of vector `k`), sorted by descending eigenvalue.
fn symmetric_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>() + off;
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y][y].total_cmp(&a[x][x]).then(x.cmp(&y)));
    let values = order.iter().map(|&k| a[k][k]).collect();
    let vectors = order.iter().map(|&k| (0..n).map(|i| v[i][k]).collect()).collect();
    (values, vectors)
}

/// Top-2 principal component scores. Each component is sign-fixed so its
/// largest-magnitude coordinate is positive; a component with negligible
/// variance scores exactly 0 for every row.
pub fn pca_2d(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        return vec![[0.0, 0.0]; n];
    }
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in &centered {
        for i in 0..d {
            for j in i..d {
                cov[i][j] += r[i] * r[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= n as f64;
            cov[j][i] = cov[i][j];
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i][i]).sum();
    let (values, vectors) = symmetric_eigen(cov);
    let mut comps: Vec<Option<Vec<f64>>> = Vec::new();
    for k in 0..2 {
        let keep = k < d && trace > 0.0 && values[k] > 1e-10 * trace;
        comps.push(keep.then(|| {
            let mut c = vectors[k].clone();
            let lead = c
                .iter()
                .enumerate()
                .fold(0, |best, (i, x)| if x.abs() > c[best].abs() { i } else { best });
            if c[lead] < 0.0 {
                c.iter_mut().for_each(|x| *x = -*x);
            }
            c
        }));
    }
    centered
        .iter()
        .map(|r| {
            let proj = |c: &Option<Vec<f64>>| match c {
                Some(c) => r.iter().zip(c).map(|(x, y)| x * y).sum(),
                None => 0.0,
            };
            [proj(&comps[0]), proj(&comps[1])]
        })
        .collect()
}

fn row(
    id: &str,
    e: &Expression,
    role: VectorRole,
    vector: Vec<f64>,
) -> EmbeddingRow {
    EmbeddingRow {
        example_id: id.to_string(),
        kind: e.kind,
        role,
        fine_types: e.carried_fine_types.clone(),
        coarse_types: e.carried_coarse_types.clone(),
        vector,
        pca: None,
    }
}

/// Evaluation-mode `[CLS]`/`[ENT]` vectors for the requested expression
/// kinds, ordered by (id, kind, role), with a PCA fit on exactly these rows.
/// Description rows use ids `desc:<type>:<n>` and cover every fine type
/// present in `examples`.
pub fn collect_embeddings(
    model: &Model,
    examples: &[Example],
    descs: &[TypeDescription],
    kinds: &BTreeSet<ExpressionKind>,
) -> Result<EmbeddingDump, EvalError> {
    let opts = model.prompt_options();
    let mut exprs: Vec<(String, Expression)> = Vec::new();
    for ex in examples {
        if kinds.contains(&ExpressionKind::TypeScarce) {
            exprs.push((ex.id.clone(), build_type_scarce(ex, &model.vocab, opts)));
        }
        if kinds.contains(&ExpressionKind::TypeRich) {
            match build_type_rich(ex, &model.vocab, opts) {
                Ok(e) => exprs.push((ex.id.clone(), e)),
                Err(PromptError::NoFineType(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
    if kinds.contains(&ExpressionKind::DescriptionRich) {
        let index = DescriptionIndex::new(descs);
        let fine: BTreeSet<&TypePath> = examples.iter().flat_map(Example::fine_types).collect();
        for t in fine {
            if let Some(d) = index.get(t) {
                for (k, e) in build_description_rich(d, &model.vocab, opts).into_iter().enumerate() {
                    exprs.push((format!("desc:{}:{k}", t.canonical_text()), e));
                }
            }
        }
    }
    let mut rows = Vec::with_capacity(2 * exprs.len());
    for (id, e) in &exprs {
        let mut g = Graph::new();
        let enc = encode(&mut g, &model.store, &model.encoder, e, None)?;
        rows.push(row(id, e, VectorRole::Cls, g.value(enc.h_cls).to_vec()));
        rows.push(row(id, e, VectorRole::Ent, g.value(enc.h_ent).to_vec()));
    }
    rows.sort_by(|a, b| {
        (a.example_id.as_str(), a.kind, a.role).cmp(&(b.example_id.as_str(), b.kind, b.role))
    });
    let mut dump = EmbeddingDump { rows };
    dump.project();
    Ok(dump)
}

/// [`collect_embeddings`] followed by a CSV write to `out`.
pub fn export_embeddings(
    model: &Model,
    examples: &[Example],
    descs: &[TypeDescription],
    kinds: &BTreeSet<ExpressionKind>,
    out: &Path,
) -> Result<EmbeddingDump, EvalError> {
    let dump = collect_embeddings(model, examples, descs, kinds)?;
    let mut f = std::io::BufWriter::new(File::create(out)?);
    dump.write_csv(&mut f)?;
    f.flush()?;
    Ok(dump)
}
