use std::collections::HashMap;

use super::{numel, AutodiffError, ParamId, ParamStore, Result, Tensor};

/// Added under the square root of [`Graph::l2_distance`] so the derivative
/// stays bounded when both arguments coincide.
pub const L2_EPS: f64 = 1e-12;
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    MatMul(Var, Var),
    Transpose(Var),
    Embedding(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    ConcatRows(Vec<Var>),
    SliceRow(Var, usize),
    Sum(Var),
    Mean(Var),
    Neg(Var),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Sigmoid(Var),
    L2Distance(Var, Var),
    BceWithLogits(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// A tape of recorded operations. Nodes are appended in evaluation order, so
/// the tape is acyclic and its recording order is a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    leaf_grads: HashMap<usize, Vec<f64>>,
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

/// Rows and columns of a rank-1 or rank-2 shape (vectors are one row).
fn rows_cols(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [c] => Some((1, *c)),
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, name: &'static str) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|x| !x.is_finite()) {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            other => parents(other).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input tensor. Gradients for it are kept on the graph when
    /// `requires_grad` is set (see [`Graph::grad`]).
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        let rg = t.requires_grad;
        let v = self.push(Op::Leaf, t.shape, t.data, "leaf")?;
        self.nodes[v.0].requires_grad = rg;
        Ok(v)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(mismatch("constant", format!("{shape:?} vs {} values", data.len())));
        }
        self.push(Op::Leaf, shape, data, "constant")
    }

    pub fn scalar_const(&mut self, v: f64) -> Result<Var> {
        self.constant(vec![], vec![v])
    }

    /// The graph node for a stored parameter; recorded once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value: t.data.clone(),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Gradient of a non-parameter leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(op, self.shape(a).to_vec(), value, name)
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(op, self.shape(a).to_vec(), value, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds vector `b` (length m) to every row of `a` (n x m).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(a)).ok_or_else(|| mismatch("add_row", "lhs rank".into()))?;
        if self.shape(b) != [cols] {
            return Err(mismatch("add_row", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let bias = self.value(b);
        let value = self
            .value(a)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
            .collect();
        self.push(Op::AddRow(a, b), self.shape(a).to_vec(), value, "add_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("scale", a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    /// Elementwise product with a constant (used for dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(mismatch("mul_const", format!("{} vs {}", self.value(a).len(), c.len())));
        }
        let value = self.value(a).iter().zip(&c).map(|(x, y)| x * y).collect();
        self.push(Op::MulConst(a, c), self.shape(a).to_vec(), value, "mul_const")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.map("neg", a, Op::Neg(a), |x| -x)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = match self.shape(a) {
            [n, k] => (*n, *k),
            s => return Err(mismatch("matmul", format!("lhs {s:?} is not a matrix"))),
        };
        let m = match self.shape(b) {
            [k2, m] if *k2 == k => *m,
            s => return Err(mismatch("matmul", format!("[{n}, {k}] x {s:?}"))),
        };
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = av[i * k + p];
                if x != 0.0 {
                    let brow = &bv[p * m..(p + 1) * m];
                    row.iter_mut().zip(brow).for_each(|(o, y)| *o += x * y);
                }
            }
        }
        self.push(Op::MatMul(a, b), vec![n, m], out, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = match self.shape(a) {
            [n, m] => (*n, *m),
            s => return Err(mismatch("transpose", format!("{s:?}"))),
        };
        let av = self.value(a);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = av[i * m + j];
            }
        }
        self.push(Op::Transpose(a), vec![m, n], out, "transpose")
    }

    /// Gathers rows of `table` (V x d) into an (n x d) matrix.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = match self.shape(table) {
            [r, d] => (*r, *d),
            s => return Err(mismatch("embedding_lookup", format!("{s:?}"))),
        };
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: id,
                    len: rows,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        self.push(Op::Embedding(table, ids.to_vec()), vec![ids.len(), d], out, "embedding_lookup")
    }

    /// Softmax over the last axis of a vector or matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(a)).ok_or_else(|| mismatch("softmax", "rank".into()))?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        self.push(Op::Softmax(a), self.shape(a).to_vec(), out, "softmax")
    }

    /// Row-wise layer normalization with learned gain and bias (length d).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (_, d) = rows_cols(self.shape(x)).ok_or_else(|| mismatch("layer_norm", "rank".into()))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(mismatch("layer_norm", format!("gain/bias must be [{d}]")));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.len() / d);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            shape,
            out,
            "layer_norm",
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map("gelu", a, Op::Gelu(a), |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        })
    }

    /// Stacks inputs along the first axis. Matrices contribute their rows,
    /// vectors one row each; all-scalar input yields a vector.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| mismatch("concat_rows", "no inputs".into()))?;
        if parts.iter().all(|&p| self.shape(p).is_empty()) {
            let value = parts.iter().map(|&p| self.value(p)[0]).collect();
            return self.push(Op::ConcatRows(parts.to_vec()), vec![parts.len()], value, "concat_rows");
        }
        let width = rows_cols(self.shape(first))
            .ok_or_else(|| mismatch("concat_rows", "rank".into()))?
            .1;
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            match rows_cols(self.shape(p)) {
                Some((r, c)) if c == width => {
                    rows += r;
                    value.extend_from_slice(self.value(p));
                }
                _ => {
                    return Err(mismatch(
                        "concat_rows",
                        format!("width {width} vs {:?}", self.shape(p)),
                    ))
                }
            }
        }
        self.push(Op::ConcatRows(parts.to_vec()), vec![rows, width], value, "concat_rows")
    }

    /// Row `i` of a matrix, as a vector.
    pub fn slice_row(&mut self, a: Var, i: usize) -> Result<Var> {
        let (n, d) = match self.shape(a) {
            [n, d] => (*n, *d),
            s => return Err(mismatch("slice_row", format!("{s:?}"))),
        };
        if i >= n {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice_row",
                index: i,
                len: n,
            });
        }
        let value = self.value(a)[i * d..(i + 1) * d].to_vec();
        self.push(Op::SliceRow(a, i), vec![d], value, "slice_row")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push(Op::Sum(a), vec![], vec![s], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(mismatch("mean", "empty tensor".into()));
        }
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Op::Mean(a), vec![], vec![s], "mean")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map("log", a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.map("sqrt", a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    /// `sqrt(sum((a - b)^2) + L2_EPS)` as a scalar.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l2_distance", a, b)?;
        let sq: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Op::L2Distance(a, b), vec![], vec![(sq + L2_EPS).sqrt()], "l2_distance")
    }

    /// Mean over entries of `max(z,0) - z*y + ln(1 + e^{-|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() || z.is_empty() {
            return Err(mismatch(
                "bce_with_logits",
                format!("{} logits vs {} targets", z.len(), targets.len()),
            ));
        }
        let total: f64 = z
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / z.len() as f64;
        self.push(
            Op::BceWithLogits(logits, targets.to_vec()),
            vec![],
            vec![loss],
            "bce_with_logits",
        )
    }

    /// Back-propagates from a scalar `loss`. Parameter gradients are added to
    /// `store`; gradients of `requires_grad` leaves are added to this graph.
    /// Calling it twice accumulates twice.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if !self.shape(loss).is_empty() {
            return Err(AutodiffError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(AutodiffError::NonFinite { op: "backward" });
            }
            match &node.op {
                Op::Leaf => match self.leaf_grads.get_mut(&i) {
                    Some(acc) => add_into(acc, &g),
                    None => {
                        self.leaf_grads.insert(i, g);
                    }
                },
                Op::Param(id) => store.accumulate_grad(*id, &g),
                op => self.propagate(op, i, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        // accumulate into parent `v` if it needs a gradient
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(slot);
            }
        };
        let val = |v: Var| nodes[v.0].value.as_slice();
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * av[k];
                    }
                });
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                let cols = val(*b).len();
                acc(*b, &mut |s| {
                    for row in g.chunks(cols) {
                        add_into(s, row);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::AddScalar(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::Neg(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y)),
            Op::MulConst(a, c) => acc(*a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * c[k];
                }
            }),
            Op::MatMul(a, b) => {
                let (n, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let m = nodes[b.0].shape[1];
                let (av, bv) = (val(*a), val(*b));
                // dA = G B^T
                acc(*a, &mut |s| {
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for p in 0..k {
                            let brow = &bv[p * m..(p + 1) * m];
                            s[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = A^T G
                acc(*b, &mut |s| {
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x != 0.0 {
                                s[p * m..(p + 1) * m]
                                    .iter_mut()
                                    .zip(grow)
                                    .for_each(|(o, y)| *o += x * y);
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (n, m) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                acc(*a, &mut |s| {
                    for r in 0..n {
                        for c in 0..m {
                            s[r * m + c] += g[c * n + r];
                        }
                    }
                });
            }
            Op::Embedding(table, ids) => {
                let d = nodes[table.0].shape[1];
                acc(*table, &mut |s| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut s[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Softmax(a) => {
                let cols = *nodes[i].shape.last().unwrap();
                acc(*a, &mut |s| {
                    for ((srow, yrow), grow) in s.chunks_mut(cols).zip(out.chunks(cols)).zip(g.chunks(cols)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for c in 0..cols {
                            srow[c] += yrow[c] * (grow[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain);
                let d = gv.len();
                acc(*x, &mut |s| {
                    let mut dxhat = vec![0.0; d];
                    for (r, is) in inv_std.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            dxhat[j] = grow[j] * gv[j];
                            mean_dh += dxhat[j];
                            mean_dh_h += dxhat[j] * hrow[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            s[r * d + j] += is * (dxhat[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |s| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            s[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*bias, &mut |s| {
                    for grow in g.chunks(d) {
                        add_into(s, grow);
                    }
                });
            }
            Op::Gelu(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        let x = av[k];
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        s[k] += g[k] * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |s| add_into(s, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRow(a, r) => {
                let d = g.len();
                acc(*a, &mut |s| add_into(&mut s[r * d..(r + 1) * d], g));
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Log(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / av[k];
                    }
                });
            }
            Op::Exp(a) => acc(*a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * out[k];
                }
            }),
            Op::Sqrt(a) => acc(*a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] / (2.0 * out[k]);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::L2Distance(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let scale = g[0] / out[0];
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += scale * (av[k] - bv[k]);
                    }
                });
                acc(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] -= scale * (av[k] - bv[k]);
                    }
                });
            }
            Op::BceWithLogits(z, y) => {
                let zv = val(*z);
                let n = zv.len() as f64;
                acc(*z, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[0] * (sigmoid(zv[k]) - y[k]) / n;
                    }
                });
            }
        }
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Param(_) => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MatMul(a, b) | Op::L2Distance(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::MulConst(a, _)
        | Op::Transpose(a)
        | Op::Embedding(a, _)
        | Op::Softmax(a)
        | Op::Gelu(a)
        | Op::SliceRow(a, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Neg(a)
        | Op::Log(a)
        | Op::Exp(a)
        | Op::Sqrt(a)
        | Op::Sigmoid(a)
        | Op::BceWithLogits(a, _) => vec![*a],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::ConcatRows(ps) => ps.clone(),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
