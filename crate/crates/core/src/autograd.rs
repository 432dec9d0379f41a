//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Each forward computation appends nodes to a [`Tape`]; [`Tape::backward`]
//! walks the tape in reverse and returns the gradient of a scalar output with
//! respect to every node that requires one. Only nodes reachable from a leaf
//! marked as trainable carry gradients, so frozen weights cost nothing in the
//! backward pass.

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, softmax_rows, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Geometry of a batched multi-head attention call.
///
/// Queries are laid out as `batch * q_len` rows and keys/values as
/// `batch * k_len` rows, all `d_model` wide; heads split the columns.
#[derive(Debug, Clone)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
    /// `batch * k_len` flags; `false` marks a padding key that gets zero weight.
    pub key_valid: Vec<bool>,
}

impl AttentionSpec {
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.key_valid[b * self.k_len + j] && (!self.causal || j <= i)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    AddRow { a: Var, bias: Var, cols: usize },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    Gelu { a: Var },
    MaskMul { a: Var, mask: Vec<f64> },
    LayerNorm { x: Var, gain: Var, bias: Var, cols: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize>, dim: usize },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    Sum { a: Var },
    Reshape { a: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        let value = Tensor::new(shape, data).expect("op produced consistent shape");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf; its gradient is reported by `backward`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `a * b^T` where `b` is stored `n x k`; this is how linear layers apply
    /// an `out x in` weight to row-major activations.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul_nt {m}x{k} by ({n}x{k2})^T")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, vec![m, n], Op::MatMulNt { a, b, m, k, n }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, Op::Add { a, b }, rg))
    }

    /// Adds a length-`cols` bias to every row; the only broadcast supported.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.value(a).dims2()?;
        if self.value(bias).len() != cols {
            return Err(Error::Shape(format!(
                "bias of length {} for {cols} columns",
                self.value(bias).len()
            )));
        }
        let bv = self.value(bias).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bv).map(|(x, b)| x + b))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, shape, Op::AddRow { a, bias, cols }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).data().iter().map(|x| x * s).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        self.push(out, shape, Op::Scale { a, s }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        self.push(out, shape, Op::Gelu { a }, rg)
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mask_mul(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::Shape("mask length".into()));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(out, shape, Op::MaskMul { a, mask }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.value(x).dims2()?;
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::Shape("layer norm gain/bias width".into()));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let bb = self.value(bias).data();
        let rows = xv.len() / cols;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + bb[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gain,
                bias,
                cols,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of a `vocab x dim` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::Shape("embedding of an empty id list".into()));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!("token {id} outside vocabulary {vocab}")));
            }
            out.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            out,
            vec![ids.len(), dim],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                dim,
            },
            rg,
        ))
    }

    /// Scaled dot-product multi-head attention. Disallowed positions receive
    /// exactly zero weight; a query with no allowed key outputs zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qr, d) = self.value(q).dims2()?;
        let (kr, dk) = self.value(k).dims2()?;
        let (vr, dv) = self.value(v).dims2()?;
        if qr != spec.batch * spec.q_len || kr != spec.batch * spec.k_len || vr != kr {
            return Err(Error::Shape("attention row counts disagree with spec".into()));
        }
        if dk != d || dv != d || spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::Shape("attention widths".into()));
        }
        if spec.key_valid.len() != kr {
            return Err(Error::Shape("key mask length".into()));
        }
        let probs = attention_probs(self.value(q).data(), self.value(k).data(), d, &spec);
        let dh = d / spec.heads;
        let vv = self.value(v).data();
        let mut out = vec![0.0; qr * d];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                for i in 0..spec.q_len {
                    let prow = &probs[((b * spec.heads + h) * spec.q_len + i) * spec.k_len..][..spec.k_len];
                    let orow = &mut out[(b * spec.q_len + i) * d + h * dh..][..dh];
                    for (j, &p) in prow.iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        let vrow = &vv[(b * spec.k_len + j) * d + h * dh..][..dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(out, vec![qr, d], Op::Attention { q, k, v, spec, probs }, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`; `None` targets are masked out.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, vocab) = self.value(logits).dims2()?;
        if targets.len() != rows {
            return Err(Error::Shape(format!("{} targets for {rows} rows", targets.len())));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Usage("cross entropy with every position masked".into()));
        }
        if let Some(&t) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::Index(format!("target {t} outside vocabulary {vocab}")));
        }
        let lv = self.value(logits).data();
        let probs = softmax_rows(lv, vocab);
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = &lv[r * vocab..(r + 1) * vocab];
                loss += log_sum_exp(row) - row[t];
            }
        }
        loss /= count as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(vec![s], vec![1], Op::Sum { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        let shape = t.shape().to_vec();
        Ok(self.push(t.into_data(), shape, Op::Reshape { a }, rg))
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(&node.op, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = self.acc(grads, a) {
                    // dA = G B^T
                    gemm_nt(g, self.value(b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, b) {
                    // dB = A^T G
                    gemm_tn(self.value(a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulNt { a, b, m, k, n } => {
                if let Some(ga) = self.acc(grads, a) {
                    // dA = G B
                    gemm_nn(g, self.value(b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, b) {
                    // dB = G^T A
                    gemm_tn(g, self.value(a).data(), gb, m, n, k);
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::AddRow { a, bias, cols } => {
                if let Some(ga) = self.acc(grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, bias) {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul { a, b } => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(self.value(b).data()) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(self.value(a).data()) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale { a, s } => {
                if let Some(ga) = self.acc(grads, a) {
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += s * x;
                    }
                }
            }
            Op::Gelu { a } => {
                let xs = self.value(a).data();
                if let Some(ga) = self.acc(grads, a) {
                    for ((o, gy), &x) in ga.iter_mut().zip(g).zip(xs) {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        *o += gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                    }
                }
            }
            Op::MaskMul { a, ref mask } => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((o, x), m) in ga.iter_mut().zip(g).zip(mask) {
                        *o += x * m;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cols,
                ref xhat,
                ref rstd,
            } => {
                let gv = self.value(gain).data();
                if let Some(gx) = self.acc(grads, x) {
                    let mut dxhat = vec![0.0; cols];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gy = &g[r * cols..(r + 1) * cols];
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            dxhat[c] = gy[c] * gv[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xh[c];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        let out = &mut gx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            out[c] += rs * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, gain) {
                    for (gy, xh) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += gy[c] * xh[c];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, bias) {
                    for gy in g.chunks(cols) {
                        add_into(gb, gy);
                    }
                }
            }
            Op::Embedding { table, ref ids, dim } => {
                if let Some(gt) = self.acc(grads, table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                ref spec,
                ref probs,
            } => self.attention_backward(q, k, v, spec, probs, g, grads),
            Op::CrossEntropy {
                logits,
                ref targets,
                ref probs,
                count,
            } => {
                if let Some(gl) = self.acc(grads, logits) {
                    let vocab = probs.len() / targets.len();
                    let s = g[0] / count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &mut gl[r * vocab..(r + 1) * vocab];
                        for (c, o) in row.iter_mut().enumerate() {
                            let p = probs[r * vocab + c];
                            *o += s * if c == t { p - 1.0 } else { p };
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.acc(grads, a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = self.acc(grads, a) {
                    add_into(ga, g);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.value(q).dims2().expect("2-D").1;
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; spec.k_len];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                for i in 0..spec.q_len {
                    let prow = &probs[((b * spec.heads + h) * spec.q_len + i) * spec.k_len..][..spec.k_len];
                    let qoff = (b * spec.q_len + i) * d + h * dh;
                    let go = &g[qoff..qoff + dh];
                    let mut dot = 0.0;
                    for j in 0..spec.k_len {
                        let p = prow[j];
                        if p == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let koff = (b * spec.k_len + j) * d + h * dh;
                        let vrow = &vv[koff..koff + dh];
                        let mut s = 0.0;
                        for (x, y) in go.iter().zip(vrow) {
                            s += x * y;
                        }
                        dp[j] = s;
                        dot += p * s;
                        for (o, x) in dv[koff..koff + dh].iter_mut().zip(go) {
                            *o += p * x;
                        }
                    }
                    for j in 0..spec.k_len {
                        let p = prow[j];
                        if p == 0.0 {
                            continue;
                        }
                        let ds = p * (dp[j] - dot) * scale;
                        let koff = (b * spec.k_len + j) * d + h * dh;
                        for c in 0..dh {
                            dq[qoff + c] += ds * kv[koff + c];
                            dk[koff + c] += ds * qv[qoff + c];
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(gv) = self.acc(grads, var) {
                add_into(gv, &local);
            }
        }
    }
}

/// Attention weights laid out `[batch][head][q][k]`.
pub fn attention_probs(q: &[f64], k: &[f64], d: usize, spec: &AttentionSpec) -> Vec<f64> {
    let dh = d / spec.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; spec.batch * spec.heads * spec.q_len * spec.k_len];
    for b in 0..spec.batch {
        for h in 0..spec.heads {
            for i in 0..spec.q_len {
                let row = &mut probs[((b * spec.heads + h) * spec.q_len + i) * spec.k_len..][..spec.k_len];
                let qrow = &q[(b * spec.q_len + i) * d + h * dh..][..dh];
                let mut max = f64::NEG_INFINITY;
                for (j, slot) in row.iter_mut().enumerate() {
                    if !spec.allowed(b, i, j) {
                        continue;
                    }
                    let krow = &k[(b * spec.k_len + j) * d + h * dh..][..dh];
                    let s: f64 = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
                    *slot = s;
                    max = max.max(s);
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut sum = 0.0;
                for (j, slot) in row.iter_mut().enumerate() {
                    if spec.allowed(b, i, j) {
                        *slot = (*slot - max).exp();
                        sum += *slot;
                    } else {
                        *slot = 0.0;
                    }
                }
                for slot in row.iter_mut() {
                    *slot /= sum;
                }
            }
        }
    }
    probs
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
