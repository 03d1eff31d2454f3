use std::sync::Arc;

use super::gemm::{gemm, matmul, MatRef};
use super::{AutodiffError, Tensor};
use crate::instrument;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index_for_tests(i: usize) -> Self {
        Var(i)
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    AddBias(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    MulCols(Var, Var),
    Threshold(Var),
    Dropout(Var, Arc<Vec<f64>>),
    Gather { table: Var, ids: Arc<Vec<usize>> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Arc<Vec<usize>>, probs: Vec<f64> },
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::AddBias(..) => "add_bias",
            Op::MatMul { .. } => "matmul",
            Op::MulCols(..) => "mul_cols",
            Op::Threshold(..) => "threshold",
            Op::Dropout(..) => "dropout",
            Op::Gather { .. } => "gather",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Reshape(..) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::MulCols(a, b) => vec![a, b],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Threshold(a) | Op::Gelu(a) | Op::Reshape(a) => vec![a],
            Op::Dropout(a, _) => vec![a],
            Op::Gather { table, .. } => vec![table],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Attention { q, k, v, .. } => vec![q, k, v],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run tape: every operation is evaluated eagerly and recorded in
/// topological order, so the backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros of length `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn data(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.data()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Var {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if cfg!(debug_assertions) && inputs.iter().all(|v| self.nodes[v.0].value.is_finite()) {
            debug_assert!(data.iter().all(|x| x.is_finite()), "{} produced a non-finite value from finite inputs", op.name());
        }
        let value = Tensor::new(shape, data).expect("op output shape is consistent");
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, var: Var, op: &'static str) -> Result<(usize, usize), AutodiffError> {
        match self.shape(var) {
            [r, c] => Ok((*r, *c)),
            other => Err(mismatch(op, format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add(a, b), shape, data))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Mul(a, b), shape, data))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, factor), shape, data)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.data(a).iter().sum();
        self.push(Op::Sum(a), vec![1], vec![total])
    }

    /// Row-broadcast bias addition: `x[N, M] + b[M]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (n, m) = self.matrix_dims(x, "add_bias")?;
        if self.shape(bias) != [m] {
            return Err(mismatch("add_bias", format!("bias {:?} for rows of width {m}", self.shape(bias))));
        }
        let b = self.data(bias);
        let mut data = self.data(x).to_vec();
        for row in data.chunks_exact_mut(m.max(1)).take(n) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok(self.push(Op::AddBias(x, bias), vec![n, m], data))
    }

    /// `op(a) · op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, AutodiffError> {
        let (ar, ac) = self.matrix_dims(a, "matmul")?;
        let (br, bc) = self.matrix_dims(b, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(mismatch(
                "matmul",
                format!("inner dimensions differ: {:?}{} x {:?}{}", self.shape(a), if ta { "ᵀ" } else { "" }, self.shape(b), if tb { "ᵀ" } else { "" }),
            ));
        }
        let mut am = MatRef::new(self.data(a), ar, ac);
        let mut bm = MatRef::new(self.data(b), br, bc);
        if ta {
            am = am.t();
        }
        if tb {
            bm = bm.t();
        }
        let data = matmul(am, bm);
        Ok(self.push(Op::MatMul { a, b, ta, tb }, vec![m, n], data))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.matmul_t(a, b, false, false)
    }

    /// `a · bᵀ`, the natural form for `x · Wᵀ` with `W` stored as out × in.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.matmul_t(a, b, false, true)
    }

    /// Scales column `j` of `h[N, R]` by `s[j]`.
    pub fn mul_cols(&mut self, h: Var, s: Var) -> Result<Var, AutodiffError> {
        let (n, r) = self.matrix_dims(h, "mul_cols")?;
        if self.shape(s) != [r] {
            return Err(mismatch("mul_cols", format!("scale {:?} for {r} columns", self.shape(s))));
        }
        let sv = self.data(s);
        let mut data = self.data(h).to_vec();
        if r > 0 {
            for row in data.chunks_exact_mut(r) {
                for (v, f) in row.iter_mut().zip(sv) {
                    *v *= f;
                }
            }
        }
        Ok(self.push(Op::MulCols(h, s), vec![n, r], data))
    }

    /// Hard threshold `x > 0 → 1, x ≤ 0 → 0` with a straight-through backward.
    pub fn threshold(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Threshold(x), shape, data)
    }

    /// Multiplies by a fixed mask (entries 0 or 1/(1-p) for inverted dropout).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var, AutodiffError> {
        if mask.len() != self.value(x).len() {
            return Err(mismatch("dropout", format!("mask of {} for {} values", mask.len(), self.value(x).len())));
        }
        let data = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Dropout(x, Arc::new(mask)), shape, data))
    }

    /// Row lookup `table[ids[i], :]`.
    pub fn gather(&mut self, table: Var, ids: Arc<Vec<usize>>) -> Result<Var, AutodiffError> {
        let (rows, width) = self.matrix_dims(table, "gather")?;
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(mismatch("gather", format!("row {bad} out of range for table of {rows} rows")));
        }
        let t = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * width);
        for &i in ids.iter() {
            data.extend_from_slice(&t[i * width..(i + 1) * width]);
        }
        let n = ids.len();
        Ok(self.push(Op::Gather { table, ids }, vec![n, width], data))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (n, d) = self.matrix_dims(x, "layer_norm")?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(mismatch("layer_norm", format!("affine params {:?}/{:?} for width {d}", self.shape(gain), self.shape(bias))));
        }
        let xs = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut out = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(Op::LayerNorm { x, gain, bias, xhat, rstd }, vec![n, d], out))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh())).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Gelu(x), shape, data)
    }

    /// Causal multi-head self-attention over `q, k, v` of shape
    /// `[batch·seq, heads·head_dim]`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var, AutodiffError> {
        let (rows, d) = self.matrix_dims(q, "attention")?;
        if self.shape(k) != [rows, d] || self.shape(v) != [rows, d] {
            return Err(mismatch("attention", "q, k, v shapes differ".into()));
        }
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(mismatch("attention", format!("{rows}x{d} is not {batch}x{seq} tokens split over {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                let qm = MatRef::strided(&qd[off..], seq, dh, d);
                let km = MatRef::strided(&kd[off..], seq, dh, d);
                gemm(scale, qm, km.t(), 0.0, p, seq);
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let max = row[..=i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for v in &mut row[..=i] {
                        *v = (*v - max).exp();
                        total += *v;
                    }
                    for v in &mut row[..=i] {
                        *v /= total;
                    }
                    for v in &mut row[i + 1..] {
                        *v = 0.0;
                    }
                }
                let vm = MatRef::strided(&vd[off..], seq, dh, d);
                gemm(1.0, MatRef::new(p, seq, seq), vm, 0.0, &mut out[off..], d);
            }
        }
        Ok(self.push(Op::Attention { q, k, v, batch, seq, heads, probs }, vec![rows, d], out))
    }

    /// Mean next-token negative log-likelihood of `logits[N, V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Arc<Vec<usize>>) -> Result<Var, AutodiffError> {
        let (n, vocab) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != n || n == 0 {
            return Err(mismatch("cross_entropy", format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(mismatch("cross_entropy", format!("target {bad} outside vocabulary of {vocab}")));
        }
        let z = self.data(logits);
        let mut probs = vec![0.0; n * vocab];
        let mut total = 0.0;
        for i in 0..n {
            let row = &z[i * vocab..(i + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (p, &v) in probs[i * vocab..(i + 1) * vocab].iter_mut().zip(row) {
                *p = (v - max).exp();
                s += *p;
            }
            for p in &mut probs[i * vocab..(i + 1) * vocab] {
                *p /= s;
            }
            total += max + s.ln() - row[targets[i]];
        }
        Ok(self.push(Op::CrossEntropy { logits, targets, probs }, vec![1], vec![total / n as f64]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let t = self.value(x).reshape(shape)?;
        let data = t.data().to_vec();
        let shape = t.shape().to_vec();
        Ok(self.push(Op::Reshape(x), shape, data))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients, AutodiffError> {
        if self.nodes.is_empty() || output.0 >= self.nodes.len() {
            return Err(AutodiffError::NoForward);
        }
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(AutodiffError::NonScalarOutput(out.value.shape().to_vec()));
        }
        instrument::record_backward();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        macro_rules! acc {
            ($v:expr, $body:expr) => {{
                if self.wants($v) {
                    let len = self.nodes[$v.0].value.len();
                    let buf = grads[$v.0].get_or_insert_with(|| vec![0.0; len]);
                    #[allow(clippy::redundant_closure_call)]
                    ($body)(buf.as_mut_slice());
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |d: &mut [f64]| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc!(*b, |d: &mut [f64]| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a).to_vec(), self.data(*b).to_vec());
                acc!(*a, |d: &mut [f64]| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc!(*b, |d: &mut [f64]| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, f) => acc!(*a, |d: &mut [f64]| d.iter_mut().zip(g).for_each(|(x, y)| *x += f * y)),
            Op::Sum(a) => acc!(*a, |d: &mut [f64]| d.iter_mut().for_each(|x| *x += g[0])),
            Op::AddBias(x, b) => {
                acc!(*x, |d: &mut [f64]| d.iter_mut().zip(g).for_each(|(p, q)| *p += q));
                let m = self.value(*b).len();
                acc!(*b, |d: &mut [f64]| {
                    if m > 0 {
                        for row in g.chunks_exact(m) {
                            for (p, q) in d.iter_mut().zip(row) {
                                *p += q;
                            }
                        }
                    }
                });
            }
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = (self.value(*a).rows(), self.value(*a).cols());
                let (br, bc) = (self.value(*b).rows(), self.value(*b).cols());
                let m = if *ta { ac } else { ar };
                let n = if *tb { br } else { bc };
                let gm = MatRef::new(g, m, n);
                let mut am = MatRef::new(self.data(*a), ar, ac);
                let mut bm = MatRef::new(self.data(*b), br, bc);
                if *ta {
                    am = am.t();
                }
                if *tb {
                    bm = bm.t();
                }
                acc!(*a, |d: &mut [f64]| {
                    if *ta {
                        gemm(1.0, bm, gm.t(), 1.0, d, ac);
                    } else {
                        gemm(1.0, gm, bm.t(), 1.0, d, ac);
                    }
                });
                acc!(*b, |d: &mut [f64]| {
                    if *tb {
                        gemm(1.0, gm.t(), am, 1.0, d, bc);
                    } else {
                        gemm(1.0, am.t(), gm, 1.0, d, bc);
                    }
                });
            }
            Op::MulCols(h, s) => {
                let r = self.value(*s).len();
                let sv = self.data(*s).to_vec();
                acc!(*h, |d: &mut [f64]| {
                    for (i, x) in d.iter_mut().enumerate() {
                        *x += g[i] * sv[i % r];
                    }
                });
                let hv = self.data(*h);
                acc!(*s, |d: &mut [f64]| {
                    for (i, (gv, x)) in g.iter().zip(hv).enumerate() {
                        d[i % r] += gv * x;
                    }
                });
            }
            // Straight-through estimator: the incoming gradient passes unchanged.
            Op::Threshold(x) => acc!(*x, |d: &mut [f64]| d.iter_mut().zip(g).for_each(|(p, q)| *p += q)),
            Op::Dropout(x, mask) => acc!(*x, |d: &mut [f64]| {
                for i in 0..d.len() {
                    d[i] += g[i] * mask[i];
                }
            }),
            Op::Gather { table, ids } => {
                let width = self.value(*table).cols();
                acc!(*table, |d: &mut [f64]| {
                    for (row, &i) in ids.iter().enumerate() {
                        for j in 0..width {
                            d[i * width + j] += g[row * width + j];
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.value(*gain).len();
                let n = rstd.len();
                let gv = self.data(*gain).to_vec();
                acc!(*gain, |dg: &mut [f64]| {
                    for i in 0..n * d {
                        dg[i % d] += g[i] * xhat[i];
                    }
                });
                acc!(*bias, |db: &mut [f64]| {
                    for i in 0..n * d {
                        db[i % d] += g[i];
                    }
                });
                acc!(*x, |dx: &mut [f64]| {
                    let mut dxhat = vec![0.0; d];
                    for i in 0..n {
                        let gr = &g[i * d..(i + 1) * d];
                        let xr = &xhat[i * d..(i + 1) * d];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xr[j];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for j in 0..d {
                            dx[i * d + j] += rstd[i] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.data(*x);
                acc!(*x, |d: &mut [f64]| {
                    for i in 0..d.len() {
                        let v = xv[i];
                        let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        d[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                });
            }
            Op::Attention { q, k, v, batch, seq, heads, probs } => {
                self.attention_backward(g, (*q, *k, *v), (*batch, *seq, *heads), probs, grads);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                let vocab = probs.len() / n;
                let f = g[0] / n as f64;
                acc!(*logits, |d: &mut [f64]| {
                    for i in 0..n {
                        for j in 0..vocab {
                            d[i * vocab + j] += f * probs[i * vocab + j];
                        }
                        d[i * vocab + targets[i]] -= f;
                    }
                });
            }
            Op::Reshape(x) => acc!(*x, |d: &mut [f64]| d.iter_mut().zip(g).for_each(|(p, q)| *p += q)),
        }
    }

    fn attention_backward(
        &self,
        g: &[f64],
        (q, k, v): (Var, Var, Var),
        (batch, seq, heads): (usize, usize, usize),
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.value(q).cols();
        let rows = batch * seq;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dp = vec![0.0; seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                let pm = MatRef::new(p, seq, seq);
                let gm = MatRef::strided(&g[off..], seq, dh, d);
                let qm = MatRef::strided(&qd[off..], seq, dh, d);
                let km = MatRef::strided(&kd[off..], seq, dh, d);
                let vm = MatRef::strided(&vd[off..], seq, dh, d);
                gemm(1.0, pm.t(), gm, 1.0, &mut dv[off..], d);
                gemm(1.0, gm, vm.t(), 0.0, &mut dp, seq);
                for i in 0..seq {
                    let pr = &p[i * seq..(i + 1) * seq];
                    let dr = &mut dp[i * seq..(i + 1) * seq];
                    let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                    for x in &mut dr[i + 1..] {
                        *x = 0.0;
                    }
                }
                let dsm = MatRef::new(&dp, seq, seq);
                gemm(1.0, dsm, km, 1.0, &mut dq[off..], d);
                gemm(1.0, dsm.t(), qm, 1.0, &mut dk[off..], d);
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(var) {
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&local).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(local),
                }
            }
        }
    }
}
