//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every value produced during one forward trace. Nodes are
//! appended in evaluation order, which is a topological order of the dataflow
//! DAG, so `backward` simply walks the tape in reverse.

use super::kernels::{dot, matmul_nn, matmul_nt, matmul_tn};
use super::{log_sum_exp, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Graph::custom`]: receives the input values, the
/// output value and the output gradient; returns one optional gradient per
/// input.
pub type BackwardFn<R> =
    Box<dyn Fn(&[&Tensor<R>], &Tensor<R>, &[R]) -> Vec<Option<Vec<R>>> + Send + Sync>;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const SIMPLEX_TOL: f64 = 1e-5;

enum Op<R: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<R>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    RowSoftmax(Var),
    RowLogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
    KlRows {
        p: Var,
        log_q: Var,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<R>,
    },
    Sum(Var),
    Mean(Var),
    NegLogSigmoid(Var),
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn<R>,
    },
}

impl<R: Real> Op<R> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::SelectRows { .. } => "select_rows",
            Op::RowSoftmax(..) => "row_softmax",
            Op::RowLogSoftmax(..) => "row_log_softmax",
            Op::CrossEntropy { .. } => "cross_entropy_masked",
            Op::KlRows { .. } => "kl_divergence_rows",
            Op::CausalAttention { .. } => "causal_attention",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::NegLogSigmoid(..) => "neg_log_sigmoid",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node<R: Real> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
    grad: Option<Vec<R>>,
}

/// One forward trace plus the gradients produced by [`Graph::backward`].
pub struct Graph<R: Real = f32> {
    nodes: Vec<Node<R>>,
    backward_done: bool,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `v`, if any
    /// gradient reached it.
    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<R>> {
        self.nodes[v.0].grad.take()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Clears every gradient so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn dims2(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("{op}: expected a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions disagree, {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![R::zero(); m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_nt: inner dimensions disagree, {:?} x {:?}ᵀ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![R::zero(); m * n];
        matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(R, R) -> R) -> Result<Tensor<R>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape(), data)
        } else if tb.is_scalar() {
            let y = tb.item();
            Tensor::new(ta.shape(), ta.data().iter().map(|&x| f(x, y)).collect())
        } else if ta.is_scalar() {
            let x = ta.item();
            Tensor::new(tb.shape(), tb.data().iter().map(|&y| f(x, y)).collect())
        } else {
            Err(Error::Shape(format!(
                "{name}: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let c = R::of(factor);
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|&x| x * c).collect(),
        };
        let rg = self.tracked(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .map(|&x| {
                let (c, k, half) = (R::of(GELU_C), R::of(0.044715), R::of(0.5));
                half * x * (R::one() + (c * (x + k * x * x * x)).tanh())
            })
            .collect();
        let t = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        let rg = self.tracked(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|&x| x.tanh()).collect(),
        };
        let rg = self.tracked(&[a]);
        self.push(t, Op::Tanh(a), rg)
    }

    /// Layer normalization over the last axis with per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        for (v, what) in [(gain, "gain"), (bias, "bias")] {
            if self.value(v).len() != cols {
                return Err(Error::Shape(format!(
                    "layer_norm: {what} {:?} vs input {:?}",
                    self.value(v).shape(),
                    self.value(x).shape()
                )));
            }
        }
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let mut out = Vec::with_capacity(rows * cols);
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / cols as f64;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for (c, &v) in row.iter().enumerate() {
                let h = (v.f64() - mean) * rs;
                xhat.push(R::of(h));
                out.push(R::of(h * tg.data()[c].f64() + tb.data()[c].f64()));
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let rg = self.tracked(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of `table` by token id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::Shape("embedding: no ids".into()));
        }
        let tt = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!("token id {id} >= vocabulary {vocab}")));
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        let rg = self.tracked(&[table]);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).rows_cols();
        if rows.is_empty() {
            return Err(Error::Shape("select_rows: empty selection".into()));
        }
        let tx = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Index(format!("row {i} >= {r}")));
            }
            out.extend_from_slice(tx.row(i));
        }
        let t = Tensor::new(&[rows.len(), c], out)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(
            t,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn row_softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (r, _) = tx.rows_cols();
        let mut data = Vec::with_capacity(tx.len());
        for i in 0..r {
            data.extend(super::softmax_row(tx.row(i)));
        }
        let t = Tensor {
            shape: tx.shape().to_vec(),
            data,
        };
        let rg = self.tracked(&[x]);
        self.push(t, Op::RowSoftmax(x), rg)
    }

    pub fn row_log_softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (r, _) = tx.rows_cols();
        let mut data = Vec::with_capacity(tx.len());
        for i in 0..r {
            data.extend(super::log_softmax_row(tx.row(i)));
        }
        let t = Tensor {
            shape: tx.shape().to_vec(),
            data,
        };
        let rg = self.tracked(&[x]);
        self.push(t, Op::RowLogSoftmax(x), rg)
    }

    /// Mean of `-log softmax(logits[t])[targets[t]]` over positions with
    /// `mask[t]` set. Masked-out targets are never read.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let (rows, vocab) = self.dims2(logits, "cross_entropy_masked")?;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Shape(format!(
                "cross_entropy_masked: {rows} logit rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLossSupport);
        }
        let tl = self.value(logits);
        let mut total = 0.0f64;
        for t in 0..rows {
            if !mask[t] {
                continue;
            }
            if targets[t] >= vocab {
                return Err(Error::Index(format!(
                    "target id {} at position {t} >= vocabulary {vocab}",
                    targets[t]
                )));
            }
            let row = tl.row(t);
            total += log_sum_exp(row) - row[targets[t]].f64();
        }
        let loss = total / count as f64;
        let rg = self.tracked(&[logits]);
        Ok(self.push(
            Tensor::scalar(R::of(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Mean over rows of `KL(p ‖ q) = Σ p (log p − log q)` with `0·log 0 = 0`.
    pub fn kl_divergence_rows(&mut self, p: Var, log_q: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(p, "kl_divergence_rows")?;
        self.value(p)
            .assert_same_shape(self.value(log_q), "kl_divergence_rows")?;
        let (tp, tq) = (self.value(p), self.value(log_q));
        let mut total = 0.0f64;
        for r in 0..rows {
            let (pr, qr) = (tp.row(r), tq.row(r));
            let mut psum = 0.0f64;
            let mut qsum = 0.0f64;
            let mut row_kl = 0.0f64;
            for c in 0..cols {
                let pv = pr[c].f64();
                if pv < -SIMPLEX_TOL || pv.is_nan() {
                    return Err(Error::Domain(format!(
                        "kl_divergence_rows: p[{r},{c}] = {pv} is negative"
                    )));
                }
                psum += pv;
                qsum += qr[c].f64().exp();
                if pv > 0.0 {
                    row_kl += pv * (pv.ln() - qr[c].f64());
                }
            }
            if (psum - 1.0).abs() > SIMPLEX_TOL || (qsum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Domain(format!(
                    "kl_divergence_rows: row {r} is not a distribution (Σp = {psum}, Σq = {qsum})"
                )));
            }
            total += row_kl;
        }
        let loss = total / rows as f64;
        let rg = self.tracked(&[p, log_q]);
        Ok(self.push(
            Tensor::scalar(R::of(loss)),
            Op::KlRows { p, log_q },
            rg,
        ))
    }

    /// Multi-head causal self-attention over already-projected `q`, `k`, `v`
    /// (each `[T×d]`, heads laid out contiguously along the feature axis).
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (t, d) = self.dims2(q, "causal_attention")?;
        for other in [k, v] {
            self.value(q)
                .assert_same_shape(self.value(other), "causal_attention")?;
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "causal_attention: width {d} not divisible into {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![R::zero(); heads * t * t];
        let mut out = vec![R::zero(); t * d];
        let mut scores = vec![0.0f64; t];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let qi = &tq[i * d + off..i * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let s = dot(qi, &tk[j * d + off..j * d + off + dh]).f64() * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut().take(i + 1) {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let prow = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    let pij = R::of(scores[j] / z);
                    prow[j] = pij;
                    super::kernels::axpy(pij, &tv[j * d + off..j * d + off + dh], orow);
                }
            }
        }
        let tout = Tensor::new(&[t, d], out)?;
        let rg = self.tracked(&[q, k, v]);
        Ok(self.push(
            tout,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        let rg = self.tracked(&[x]);
        self.push(Tensor::scalar(R::of(s)), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s: f64 = tx.data().iter().map(|v| v.f64()).sum::<f64>() / tx.len() as f64;
        let rg = self.tracked(&[x]);
        self.push(Tensor::scalar(R::of(s)), Op::Mean(x), rg)
    }

    /// Elementwise `-log σ(x) = log(1 + e^{-x})`.
    pub fn neg_log_sigmoid(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| R::of(softplus(-v.f64())))
            .collect();
        let t = Tensor {
            shape: tx.shape().to_vec(),
            data,
        };
        let rg = self.tracked(&[x]);
        self.push(t, Op::NegLogSigmoid(x), rg)
    }

    /// Node with a caller-supplied value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<R>, backward: BackwardFn<R>) -> Var {
        let rg = self.tracked(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    /// Propagates gradients from a scalar `root` to every tracked leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autograd(
                "backward called twice without reset_grads".into(),
            ));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::Autograd(format!(
                "backward root must be a scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![R::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.as_deref() else {
                continue;
            };
            let contributions = self.node_backward(i, g);
            for (parent, delta) in contributions {
                let node = &mut self.nodes[parent.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(delta) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &[R]) -> Vec<(Var, Vec<R>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![R::zero(); m * k];
                    matmul_nt(g, tb.data(), &mut da, m, n, k);
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![R::zero(); k * n];
                    matmul_tn(ta.data(), g, &mut db, m, k, n);
                    out.push((*b, db));
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[0];
                if self.wants(*a) {
                    let mut da = vec![R::zero(); m * k];
                    matmul_nn(g, tb.data(), &mut da, m, n, k);
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![R::zero(); n * k];
                    matmul_tn(g, ta.data(), &mut db, m, n, k);
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -R::one()
                } else {
                    R::one()
                };
                if self.wants(*a) {
                    out.push((*a, reduce_to(self.value(*a), g, |x| x)));
                }
                if self.wants(*b) {
                    out.push((*b, reduce_to(self.value(*b), g, |x| x * sign)));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let prod: Vec<R> = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gj)| gj * broadcast_at(tb, j))
                        .collect();
                    out.push((*a, reduce_to(ta, &prod, |x| x)));
                }
                if self.wants(*b) {
                    let prod: Vec<R> = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gj)| gj * broadcast_at(ta, j))
                        .collect();
                    out.push((*b, reduce_to(tb, &prod, |x| x)));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.iter().map(|&x| x * *c).collect())),
            Op::Gelu(a) => {
                let ta = self.value(*a);
                let d = ta
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| {
                        let (c, k, half, one) = (R::of(GELU_C), R::of(0.044715), R::of(0.5), R::one());
                        let th = (c * (x + k * x * x * x)).tanh();
                        let du = c * (one + R::of(3.0) * k * x * x);
                        gy * (half * (one + th) + half * x * (one - th * th) * du)
                    })
                    .collect();
                out.push((*a, d));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                out.push((
                    *a,
                    y.iter().zip(g).map(|(&y, &gy)| gy * (R::one() - y * y)).collect(),
                ));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, cols) = self.value(*x).rows_cols();
                let tg = self.value(*gain).data();
                if self.wants(*x) {
                    let mut dx = vec![R::zero(); rows * cols];
                    let mut dxhat = vec![0.0f64; cols];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let v = g[r * cols + c].f64() * tg[c].f64();
                            dxhat[c] = v;
                            mean_d += v;
                            mean_dx += v * xhat[r * cols + c].f64();
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        for c in 0..cols {
                            dx[r * cols + c] = R::of(
                                rstd[r] * (dxhat[c] - mean_d - xhat[r * cols + c].f64() * mean_dx),
                            );
                        }
                    }
                    out.push((*x, dx));
                }
                if self.wants(*gain) {
                    let mut dg = vec![0.0f64; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += g[r * cols + c].f64() * xhat[r * cols + c].f64();
                        }
                    }
                    out.push((*gain, dg.into_iter().map(R::of).collect()));
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0f64; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g[r * cols + c].f64();
                        }
                    }
                    out.push((*bias, db.into_iter().map(R::of).collect()));
                }
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let (_, d) = tt.rows_cols();
                let mut dt = vec![R::zero(); tt.len()];
                for (p, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += g[p * d + c];
                    }
                }
                out.push((*table, dt));
            }
            Op::SelectRows { x, rows } => {
                let tx = self.value(*x);
                let (_, c) = tx.rows_cols();
                let mut dx = vec![R::zero(); tx.len()];
                for (p, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        dx[r * c + j] += g[p * c + j];
                    }
                }
                out.push((*x, dx));
            }
            Op::RowSoftmax(x) => {
                let y = &node.value;
                let (r, c) = y.rows_cols();
                let mut dx = vec![R::zero(); y.len()];
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = &g[i * c..(i + 1) * c];
                    let s: f64 = yr.iter().zip(gr).map(|(&a, &b)| a.f64() * b.f64()).sum();
                    for j in 0..c {
                        dx[i * c + j] = R::of(yr[j].f64() * (gr[j].f64() - s));
                    }
                }
                out.push((*x, dx));
            }
            Op::RowLogSoftmax(x) => {
                let y = &node.value;
                let (r, c) = y.rows_cols();
                let mut dx = vec![R::zero(); y.len()];
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = &g[i * c..(i + 1) * c];
                    let s: f64 = gr.iter().map(|v| v.f64()).sum();
                    for j in 0..c {
                        dx[i * c + j] = R::of(gr[j].f64() - yr[j].f64().exp() * s);
                    }
                }
                out.push((*x, dx));
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                count,
            } => {
                let tl = self.value(*logits);
                let (rows, vocab) = tl.rows_cols();
                let scale = g[0].f64() / *count as f64;
                let mut dl = vec![R::zero(); tl.len()];
                for t in 0..rows {
                    if !mask[t] {
                        continue;
                    }
                    let row = tl.row(t);
                    let lse = log_sum_exp(row);
                    let drow = &mut dl[t * vocab..(t + 1) * vocab];
                    for (j, &x) in row.iter().enumerate() {
                        drow[j] = R::of((x.f64() - lse).exp() * scale);
                    }
                    drow[targets[t]] -= R::of(scale);
                }
                out.push((*logits, dl));
            }
            Op::KlRows { p, log_q } => {
                let (tp, tq) = (self.value(*p), self.value(*log_q));
                let (rows, _) = tp.rows_cols();
                let scale = g[0].f64() / rows as f64;
                if self.wants(*p) {
                    let d = tp
                        .data()
                        .iter()
                        .zip(tq.data())
                        .map(|(&pv, &lq)| {
                            let pv = pv.f64();
                            if pv > 0.0 {
                                R::of(scale * (pv.ln() - lq.f64() + 1.0))
                            } else {
                                R::zero()
                            }
                        })
                        .collect();
                    out.push((*p, d));
                }
                if self.wants(*log_q) {
                    let d = tp.data().iter().map(|&pv| R::of(-scale * pv.f64())).collect();
                    out.push((*log_q, d));
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (t, d) = (tq.shape()[0], tq.shape()[1]);
                let dh = d / heads;
                let scale = R::of(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
                let mut dq = vec![R::zero(); t * d];
                let mut dk = vec![R::zero(); t * d];
                let mut dv = vec![R::zero(); t * d];
                let mut dp = vec![R::zero(); t];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..t {
                        let prow = &probs[(h * t + i) * t..(h * t + i + 1) * t];
                        let gi = &g[i * d + off..i * d + off + dh];
                        let mut s = 0.0f64;
                        for j in 0..=i {
                            let vj = &vd[j * d + off..j * d + off + dh];
                            dp[j] = dot(gi, vj);
                            s += prow[j].f64() * dp[j].f64();
                            super::kernels::axpy(prow[j], gi, &mut dv[j * d + off..j * d + off + dh]);
                        }
                        for j in 0..=i {
                            let ds = R::of(prow[j].f64() * (dp[j].f64() - s)) * scale;
                            if ds == R::zero() {
                                continue;
                            }
                            let kj = &kd[j * d + off..j * d + off + dh];
                            super::kernels::axpy(ds, kj, &mut dq[i * d + off..i * d + off + dh]);
                            let qi = &qd[i * d + off..i * d + off + dh];
                            super::kernels::axpy(ds, qi, &mut dk[j * d + off..j * d + off + dh]);
                        }
                    }
                }
                if self.wants(*q) {
                    out.push((*q, dq));
                }
                if self.wants(*k) {
                    out.push((*k, dk));
                }
                if self.wants(*v) {
                    out.push((*v, dv));
                }
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                out.push((*x, vec![R::of(g[0].f64() / n as f64); n]));
            }
            Op::NegLogSigmoid(x) => {
                let tx = self.value(*x);
                let d = tx
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gy)| R::of(-gy.f64() * sigmoid(-v.f64())))
                    .collect();
                out.push((*x, d));
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor<R>> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = backward(&vals, &node.value, g);
                for (v, d) in inputs.iter().zip(grads) {
                    if let Some(d) = d {
                        out.push((*v, d));
                    }
                }
            }
        }
        out
    }
}

fn broadcast_at<R: Real>(t: &Tensor<R>, j: usize) -> R {
    if t.is_scalar() {
        t.item()
    } else {
        t.data()[j]
    }
}

/// Folds an output-shaped gradient back onto an operand that may have been
/// broadcast from a scalar.
fn reduce_to<R: Real>(target: &Tensor<R>, g: &[R], f: impl Fn(R) -> R) -> Vec<R> {
    if target.len() == g.len() {
        g.iter().map(|&x| f(x)).collect()
    } else {
        let s: f64 = g.iter().map(|x| x.f64()).sum();
        vec![f(R::of(s))]
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

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
