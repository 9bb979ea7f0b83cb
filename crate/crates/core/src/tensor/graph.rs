use rand::Rng;

use super::kernels::{gelu, gelu_grad, gemm, log_sum_exp};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-position training target. `Ignore` positions contribute nothing to the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Class(usize),
    Ignore,
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Ignore => None,
        }
    }
}

/// Layout of a fused multi-head attention call.
///
/// Queries are `[batch·q_len, d]`, keys and values `[batch·k_len, d]`, with
/// heads occupying contiguous column blocks of width `d / heads`.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
    /// `true` marks a padded key, `batch·k_len` entries.
    pub key_padding: Option<Vec<bool>>,
}

impl AttentionSpec {
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return false;
        }
        match &self.key_padding {
            Some(pad) => !pad[b * self.k_len + j],
            None => true,
        }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Mix {
        states: Vec<Var>,
        logits: Var,
        weights: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<Label>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records the forward computation; [`Graph::backward`] replays it in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// `a[.., k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[.., k] · b[n, k]ᵀ`, used for output projections stored like embedding tables.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.shape().is_empty() {
            return Err(shape_err("matmul", av, bv));
        }
        let (k, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if av.cols() != k {
            return Err(shape_err("matmul", av, bv));
        }
        let m = av.rows();
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            av.data(),
            false,
            bv.data(),
            trans_b,
            &mut out,
            false,
        );
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// Adds a `[n]` vector to every row of `x[.., n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.shape() != [xv.cols()] {
            return Err(shape_err("add_row", xv, bv));
        }
        let n = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (r, b) in row.iter_mut().zip(bv.data()) {
                *r += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.ng(&[x, bias]);
        Ok(self.push(value, Op::AddRow { x, bias }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data: xv.data().iter().map(|v| v * c).collect(),
        };
        let ng = self.ng(&[x]);
        self.push(value, Op::Scale(x, c), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data: xv.data().iter().map(|&v| gelu(v)).collect(),
        };
        let ng = self.ng(&[x]);
        self.push(value, Op::Gelu(x), ng)
    }

    /// Per-row normalization over the trailing dimension (biased variance).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if d == 0 || gv.shape() != [d] || bv.shape() != [d] {
            return Err(shape_err("layer_norm", xv, gv));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Row lookup into a `[V, d]` table; output is `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::invalid("embedding table must be 2-D"));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange {
                    id: id as u32,
                    vocab,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let ng = self.ng(&[table]);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Scaled dot-product multi-head attention over pre-projected q, k, v.
    ///
    /// Disallowed (causal or padded) keys are excluded from the softmax
    /// entirely, so their contents cannot influence the output. A query row
    /// with no allowed key yields zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if kv.cols() != d || vv.shape() != kv.shape() {
            return Err(shape_err("attention", qv, kv));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::invalid(format!(
                "attention width {d} not divisible by {} heads",
                spec.heads
            )));
        }
        if qv.rows() != spec.batch * spec.q_len || kv.rows() != spec.batch * spec.k_len {
            return Err(shape_err("attention", qv, kv));
        }
        if let Some(pad) = &spec.key_padding {
            if pad.len() != spec.batch * spec.k_len {
                return Err(Error::invalid("key padding mask has wrong length"));
            }
        }
        let (bsz, tq, tk, h) = (spec.batch, spec.q_len, spec.k_len, spec.heads);
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; bsz * h * tq * tk];
        let mut out = vec![0.0; bsz * tq * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for b in 0..bsz {
            for head in 0..h {
                let off = head * dh;
                for i in 0..tq {
                    let qrow = &qd[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                    let prow = &mut probs[((b * h + head) * tq + i) * tk..][..tk];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..tk {
                        if !spec.allowed(b, i, j) {
                            continue;
                        }
                        let krow = &kd[(b * tk + j) * d + off..][..dh];
                        let s = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
                        prow[j] = s;
                        max = max.max(s);
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut sum = 0.0;
                    for (j, p) in prow.iter_mut().enumerate() {
                        if spec.allowed(b, i, j) {
                            *p = (*p - max).exp();
                            sum += *p;
                        }
                    }
                    let orow = &mut out[(b * tq + i) * d + off..][..dh];
                    for j in 0..tk {
                        if !spec.allowed(b, i, j) {
                            continue;
                        }
                        prow[j] /= sum;
                        let p = prow[j];
                        let vrow = &vd[(b * tk + j) * d + off..][..dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![bsz * tq, d], out)?;
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            ng,
        ))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data: xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        };
        let ng = self.ng(&[x]);
        self.push(value, Op::Dropout { x, mask }, ng)
    }

    /// Selects rows of a `[R, d]` tensor; output is `[rows.len(), d]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= xv.rows() {
                return Err(Error::invalid(format!(
                    "gather row {r} out of range for {} rows",
                    xv.rows()
                )));
            }
            out.extend_from_slice(xv.row(r));
        }
        let value = Tensor::new(vec![rows.len(), d], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Convex combination `Σᵢ softmax(logits)ᵢ · statesᵢ`.
    ///
    /// Terms whose weight underflows to exactly zero are skipped, so a
    /// saturated one-hot weighting returns the selected state bit for bit.
    pub fn mix(&mut self, states: &[Var], logits: Var) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != [states.len()] || states.is_empty() {
            return Err(Error::invalid(format!(
                "mixing logits of shape {:?} for {} states",
                lv.shape(),
                states.len()
            )));
        }
        let mut weights = lv.data().to_vec();
        super::kernels::softmax_in_place(&mut weights);
        let shape = self.value(states[0]).shape().to_vec();
        let mut out: Option<Vec<f64>> = None;
        for (s, &w) in states.iter().zip(&weights) {
            let sv = self.value(*s);
            if sv.shape() != shape.as_slice() {
                return Err(shape_err("mix", self.value(states[0]), sv));
            }
            if w == 0.0 {
                continue;
            }
            match out.as_mut() {
                None => out = Some(sv.data().iter().map(|x| w * x).collect()),
                Some(acc) => {
                    for (a, x) in acc.iter_mut().zip(sv.data()) {
                        *a += w * x;
                    }
                }
            }
        }
        let data = out.unwrap_or_else(|| vec![0.0; shape.iter().product()]);
        let value = Tensor::new(shape, data)?;
        let mut deps = states.to_vec();
        deps.push(logits);
        let ng = self.ng(&deps);
        Ok(self.push(
            value,
            Op::Mix {
                states: states.to_vec(),
                logits,
                weights,
            },
            ng,
        ))
    }

    /// Mean token negative log-likelihood of `logits[N, V]` over non-ignored labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Label]) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.cols();
        if lv.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} label(s) for {} logit rows",
                labels.len(),
                lv.rows()
            )));
        }
        let mut probs = vec![0.0; lv.numel()];
        let mut total = 0.0;
        let mut count = 0;
        for (r, label) in labels.iter().enumerate() {
            let Label::Class(c) = *label else { continue };
            if c >= v {
                return Err(Error::LabelOutOfRange {
                    label: c,
                    classes: v,
                });
            }
            let row = lv.row(r);
            let lse = log_sum_exp(row);
            total += lse - row[c];
            count += 1;
            for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let loss = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Reverse sweep from a scalar `loss`; every node is visited once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor {
            shape: lv.shape().to_vec(),
            data: vec![1.0],
        });
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        match &mut grads[v.0] {
            Some(t) => {
                for (a, d) in t.data.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor {
                    shape: self.value(v).shape().to_vec(),
                    data: delta,
                })
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let m = av.rows();
                let k = av.cols();
                let n = node.value.cols();
                if self.wants(*a) {
                    // dA[m,k] = dC[m,n] · B[k,n]ᵀ  (or dC · B[n,k] when trans_b)
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, bv.data(), !*trans_b, &mut da, false);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        // dB[n,k] = dCᵀ · A
                        gemm(n, m, k, gd, true, av.data(), false, &mut db, false);
                    } else {
                        // dB[k,n] = Aᵀ · dC
                        gemm(k, m, n, av.data(), true, gd, false, &mut db, false);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, gd.to_vec());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, gd.to_vec());
                }
            }
            Op::AddRow { x, bias } => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, gd.to_vec());
                }
                if self.wants(*bias) {
                    let n = node.value.cols();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, gd.iter().map(|g| g * c).collect());
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let d = gd
                        .iter()
                        .zip(xv.data())
                        .map(|(g, &v)| g * gelu_grad(v))
                        .collect();
                    self.accumulate(grads, *x, d);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let gv = self.value(*gain).data();
                if self.wants(*gain) {
                    let mut dg = vec![0.0; d];
                    for (grow, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; d];
                    for grow in gd.chunks(d) {
                        for j in 0..d {
                            db[j] += grow[j];
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let grow = &gd[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            dx[r * d + j] = rs * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let tv = self.value(*table);
                    let d = tv.cols();
                    let mut dt = vec![0.0; tv.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += gd[r * d + j];
                        }
                    }
                    self.accumulate(grads, *table, dt);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, spec, probs, gd, grads),
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    let d = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                    self.accumulate(grads, *x, d);
                }
            }
            Op::GatherRows { x, rows } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let d = xv.cols();
                    let mut dx = vec![0.0; xv.numel()];
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            dx[r * d + j] += gd[i * d + j];
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Mix {
                states,
                logits,
                weights,
            } => {
                for (s, &w) in states.iter().zip(weights) {
                    if self.wants(*s) {
                        self.accumulate(grads, *s, gd.iter().map(|g| g * w).collect());
                    }
                }
                if self.wants(*logits) {
                    let dw: Vec<f64> = states
                        .iter()
                        .map(|s| {
                            self.value(*s)
                                .data()
                                .iter()
                                .zip(gd)
                                .map(|(x, g)| x * g)
                                .sum()
                        })
                        .collect();
                    let dot: f64 = weights.iter().zip(&dw).map(|(w, d)| w * d).sum();
                    let dl = weights
                        .iter()
                        .zip(&dw)
                        .map(|(w, d)| w * (d - dot))
                        .collect();
                    self.accumulate(grads, *logits, dl);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                count,
            } => {
                if self.wants(*logits) {
                    let lv = self.value(*logits);
                    let v = lv.cols();
                    let mut dl = vec![0.0; lv.numel()];
                    if *count > 0 {
                        let s = gd[0] / *count as f64;
                        for (r, label) in labels.iter().enumerate() {
                            let Label::Class(c) = *label else { continue };
                            for j in 0..v {
                                dl[r * v + j] = probs[r * v + j] * s;
                            }
                            dl[r * v + c] -= s;
                        }
                    }
                    self.accumulate(grads, *logits, dl);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).numel();
                    self.accumulate(grads, *x, vec![gd[0]; n]);
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
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let (bsz, tq, tk, h) = (spec.batch, spec.q_len, spec.k_len, spec.heads);
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; tk];
        for b in 0..bsz {
            for head in 0..h {
                let off = head * dh;
                for i in 0..tq {
                    let prow = &probs[((b * h + head) * tq + i) * tk..][..tk];
                    let go = &gd[(b * tq + i) * d + off..][..dh];
                    let mut dot = 0.0;
                    for j in 0..tk {
                        if prow[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vrow = &vd[(b * tk + j) * d + off..][..dh];
                        dp[j] = go.iter().zip(vrow).map(|(g, x)| g * x).sum();
                        dot += prow[j] * dp[j];
                        let dvrow = &mut dv[(b * tk + j) * d + off..][..dh];
                        for (a, g) in dvrow.iter_mut().zip(go) {
                            *a += prow[j] * g;
                        }
                    }
                    let qrow = &qd[(b * tq + i) * d + off..][..dh];
                    for j in 0..tk {
                        if prow[j] == 0.0 {
                            continue;
                        }
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        let krow = &kd[(b * tk + j) * d + off..][..dh];
                        let dqrow = &mut dq[(b * tq + i) * d + off..][..dh];
                        for (a, x) in dqrow.iter_mut().zip(krow) {
                            *a += ds * x;
                        }
                        let dkrow = &mut dk[(b * tk + j) * d + off..][..dh];
                        for (a, x) in dkrow.iter_mut().zip(qrow) {
                            *a += ds * x;
                        }
                    }
                }
            }
        }
        if self.wants(q) {
            self.accumulate(grads, q, dq);
        }
        if self.wants(k) {
            self.accumulate(grads, k, dk);
        }
        if self.wants(v) {
            self.accumulate(grads, v, dv);
        }
    }
}
