//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op in execution order; [`Graph::backward`] walks the
//! tape in exact reverse and accumulates adjoints additively, so a value consumed
//! twice receives the sum of both contributions. Reductions accumulate in `f64`.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op with a hand-written adjoint, recorded as a single tape node.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Adjoints for each input. `needs[i]` is false when input `i` does not require a gradient,
    /// in which case the returned slot may be `None`.
    fn backward(&self, inputs: &[&Tensor], needs: &[bool], grad_out: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    /// `broadcast` means `b` is a trailing vector applied to every row of `a`.
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Scale(Var, f64),
    AddScalar(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Reshape(Var),
    SplitHeads {
        x: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
    },
    AssembleTokens {
        patches: Var,
        cls: Var,
        pos: Var,
        batch: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Execution record for one forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    grad_enabled: bool,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// A graph that never tracks gradients; every node has `requires_grad == false`.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adjoint of `v` after [`Graph::backward`], if one was propagated to it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Record a fused op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: Vec<Var>, value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.any_grad(&inputs);
        self.push(value, Op::Custom { inputs, op }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let value = ta.matmul(tb)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Batched product of `[n, m, k]` with `[n, k, p]` (or `[n, p, k]` when `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 3 || tb.ndim() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(Error::dim("batch_matmul", ta.shape(), tb.shape()));
        }
        let (n, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, p) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if kb != k {
            return Err(Error::dim("batch_matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; n * m * p];
        for i in 0..n {
            gemm(
                m,
                k,
                p,
                &ta.data()[i * m * k..(i + 1) * m * k],
                false,
                &tb.data()[i * k * p..(i + 1) * k * p],
                trans_b,
                &mut out[i * m * p..(i + 1) * m * p],
                false,
            );
        }
        let value = Tensor::new(vec![n, m, p], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let broadcast = if ta.shape() == tb.shape() {
            false
        } else if tb.ndim() == 1 && tb.numel() == ta.last_dim() {
            true
        } else {
            return Err(Error::dim("elementwise", ta.shape(), tb.shape()));
        };
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
        };
        let cols = tb.numel();
        let data: Vec<f64> = if broadcast {
            ta.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, tb.data()[i % cols]))
                .collect()
        } else {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Binary { kind, a, b, broadcast }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// Softmax over the last axis, shifted by the row maximum.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.last_dim();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::dim("layer_norm", tx.shape(), tg.shape()));
        }
        if eps <= 0.0 {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh form: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.ndim() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::dim("cross_entropy", t.shape(), &[labels.len()]));
        }
        let (b, c) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index {
                what: "class label",
                index: bad,
                limit: c,
            });
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[r]];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / b as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `[(batch·tokens), heads·dh]` → `[(batch·heads), tokens, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if t.ndim() != 2 || t.shape()[0] != batch * tokens || !d.is_multiple_of(heads) {
            return Err(Error::dim("split_heads", t.shape(), &[batch, tokens, heads]));
        }
        let value = permute_heads(t.data(), batch, tokens, heads, d / heads, true);
        let value = Tensor::new(vec![batch * heads, tokens, d / heads], value)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            value,
            Op::SplitHeads {
                x,
                batch,
                tokens,
                heads,
            },
            rg,
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 3 || t.shape()[0] != batch * heads || t.shape()[1] != tokens {
            return Err(Error::dim("merge_heads", t.shape(), &[batch, tokens, heads]));
        }
        let dh = t.shape()[2];
        let value = permute_heads(t.data(), batch, tokens, heads, dh, false);
        let value = Tensor::new(vec![batch * tokens, heads * dh], value)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            value,
            Op::MergeHeads {
                x,
                batch,
                tokens,
                heads,
            },
            rg,
        ))
    }

    /// Prepend a class token to each image's patch rows and add positional embeddings.
    ///
    /// `patches` is `[(batch·P), d]`, `cls` is `[d]`, `pos` is `[P+1, d]`; output is `[(batch·(P+1)), d]`.
    pub fn assemble_tokens(&mut self, patches: Var, cls: Var, pos: Var, batch: usize) -> Result<Var> {
        let (tp, tc, tpos) = (self.value(patches), self.value(cls), self.value(pos));
        let d = tp.last_dim();
        let p = tp.rows() / batch.max(1);
        if tp.ndim() != 2 || tp.rows() != batch * p || tc.shape() != [d] || tpos.shape() != [p + 1, d] {
            return Err(Error::dim("assemble_tokens", tp.shape(), tpos.shape()));
        }
        let t = p + 1;
        let mut out = vec![0.0; batch * t * d];
        for b in 0..batch {
            for tok in 0..t {
                let dst = &mut out[(b * t + tok) * d..(b * t + tok + 1) * d];
                let src = if tok == 0 {
                    tc.data()
                } else {
                    &tp.data()[(b * p + tok - 1) * d..(b * p + tok) * d]
                };
                let pe = &tpos.data()[tok * d..(tok + 1) * d];
                for j in 0..d {
                    dst[j] = src[j] + pe[j];
                }
            }
        }
        let value = Tensor::new(vec![batch * t, d], out)?;
        let rg = self.any_grad(&[patches, cls, pos]);
        Ok(self.push(
            value,
            Op::AssembleTokens {
                patches,
                cls,
                pos,
                batch,
            },
            rg,
        ))
    }

    /// Gather rows of a 2-D value.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 {
            return Err(Error::contract("select_rows expects a 2-D value"));
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    what: "row",
                    index: r,
                    limit: n,
                });
            }
            out.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vec![rows.len(), d], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SelectRows { x, rows: rows.to_vec() }, rg))
    }

    /// Clear all adjoints so that [`Graph::backward`] may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Propagate adjoints from a scalar `loss` back to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract(
                "backward already ran on this graph; call reset_grads first",
            ));
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let seed_shape = lt.shape().to_vec();
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(&seed_shape, 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.grads[idx] = Some(gout);
                continue;
            }
            let contributions = self.node_backward(idx, &gout)?;
            // Interior adjoints are kept so callers can inspect them.
            self.grads[idx] = Some(gout);
            for (v, g) in contributions {
                accumulate(&mut self.grads[v.0], g);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, idx: usize, gout: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gout.data(), false, tb.data(), true, &mut da, false);
                    out.push((*a, Tensor::new(vec![m, k], da)?));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, gout.data(), false, &mut db, false);
                    out.push((*b, Tensor::new(vec![k, n], db)?));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (nb, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let p = gout.shape()[2];
                let (sa, sb, so) = (m * k, k * p, m * p);
                if self.needs(*a) {
                    let mut da = vec![0.0; nb * sa];
                    for i in 0..nb {
                        // dA = dY · op(B)ᵀ
                        gemm(
                            m,
                            p,
                            k,
                            &gout.data()[i * so..(i + 1) * so],
                            false,
                            &tb.data()[i * sb..(i + 1) * sb],
                            !trans_b,
                            &mut da[i * sa..(i + 1) * sa],
                            false,
                        );
                    }
                    out.push((*a, Tensor::new(ta.shape().to_vec(), da)?));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; nb * sb];
                    for i in 0..nb {
                        let ga = &gout.data()[i * so..(i + 1) * so];
                        let av = &ta.data()[i * sa..(i + 1) * sa];
                        let dst = &mut db[i * sb..(i + 1) * sb];
                        if *trans_b {
                            // B stored p×k: dB = dYᵀ · A
                            gemm(p, m, k, ga, true, av, false, dst, false);
                        } else {
                            gemm(k, m, p, av, true, ga, false, dst, false);
                        }
                    }
                    out.push((*b, Tensor::new(tb.shape().to_vec(), db)?));
                }
            }
            Op::Binary { kind, a, b, broadcast } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let cols = tb.numel();
                let bval = |i: usize| if *broadcast { tb.data()[i % cols] } else { tb.data()[i] };
                if self.needs(*a) {
                    let da: Vec<f64> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => gout.data().to_vec(),
                        BinaryKind::Mul => gout.data().iter().enumerate().map(|(i, g)| g * bval(i)).collect(),
                    };
                    out.push((*a, Tensor::new(ta.shape().to_vec(), da)?));
                }
                if self.needs(*b) {
                    let sign = if *kind == BinaryKind::Sub { -1.0 } else { 1.0 };
                    let per_elem: Vec<f64> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => gout.data().iter().map(|g| sign * g).collect(),
                        BinaryKind::Mul => gout.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect(),
                    };
                    let db = if *broadcast {
                        let mut acc = vec![0.0; cols];
                        for (i, v) in per_elem.iter().enumerate() {
                            acc[i % cols] += v;
                        }
                        acc
                    } else {
                        per_elem
                    };
                    out.push((*b, Tensor::new(tb.shape().to_vec(), db)?));
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    out.push((*a, gout.map(|g| g * c)));
                }
            }
            Op::AddScalar(a) => {
                if self.needs(*a) {
                    out.push((*a, gout.clone()));
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = y.last_dim();
                let mut dx = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let ys = &y.data()[r * n..(r + 1) * n];
                    let gs = &gout.data()[r * n..(r + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] = ys[j] * (gs[j] - dot);
                    }
                }
                out.push((*x, Tensor::new(y.shape().to_vec(), dx)?));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gamma);
                let d = tg.numel();
                let rows = rstd.len();
                if self.needs(*gamma) {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gout.data()[r * d + j] * xhat[r * d + j];
                        }
                    }
                    out.push((*gamma, Tensor::new(vec![d], dg)?));
                }
                if self.needs(*beta) {
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += gout.data()[r * d + j];
                        }
                    }
                    out.push((*beta, Tensor::new(vec![d], db)?));
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gout.data()[r * d + j] * tg.data()[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gout.data()[r * d + j] * tg.data()[j];
                            dx[r * d + j] = rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                    out.push((*x, Tensor::new(self.value(*x).shape().to_vec(), dx)?));
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                out.push((*x, tx.zip_map(gout, |v, g| g * gelu_grad(v))?));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let t = self.value(*logits);
                let (b, c) = (t.shape()[0], t.shape()[1]);
                let scale = gout.item() / b as f64;
                let mut d = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * c + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                out.push((*logits, Tensor::new(vec![b, c], d)?));
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(self.value(*x).shape(), gout.item())));
            }
            Op::Reshape(x) => {
                out.push((*x, gout.reshape(self.value(*x).shape())?));
            }
            Op::SplitHeads {
                x,
                batch,
                tokens,
                heads,
            } => {
                let d = self.value(*x).last_dim();
                let data = permute_heads(gout.data(), *batch, *tokens, *heads, d / heads, false);
                out.push((*x, Tensor::new(vec![batch * tokens, d], data)?));
            }
            Op::MergeHeads {
                x,
                batch,
                tokens,
                heads,
            } => {
                let dh = self.value(*x).shape()[2];
                let data = permute_heads(gout.data(), *batch, *tokens, *heads, dh, true);
                out.push((*x, Tensor::new(vec![batch * heads, *tokens, dh], data)?));
            }
            Op::AssembleTokens {
                patches,
                cls,
                pos,
                batch,
            } => {
                let tpos = self.value(*pos);
                let (t, d) = (tpos.shape()[0], tpos.shape()[1]);
                let p = t - 1;
                let g = gout.data();
                if self.needs(*patches) {
                    let mut dp = vec![0.0; batch * p * d];
                    for b in 0..*batch {
                        for tok in 1..t {
                            let src = &g[(b * t + tok) * d..(b * t + tok + 1) * d];
                            dp[(b * p + tok - 1) * d..(b * p + tok) * d].copy_from_slice(src);
                        }
                    }
                    out.push((*patches, Tensor::new(vec![batch * p, d], dp)?));
                }
                if self.needs(*cls) {
                    let mut dc = vec![0.0; d];
                    for b in 0..*batch {
                        for j in 0..d {
                            dc[j] += g[b * t * d + j];
                        }
                    }
                    out.push((*cls, Tensor::new(vec![d], dc)?));
                }
                if self.needs(*pos) {
                    let mut dpos = vec![0.0; t * d];
                    for b in 0..*batch {
                        for (k, v) in dpos.iter_mut().enumerate() {
                            *v += g[b * t * d + k];
                        }
                    }
                    out.push((*pos, Tensor::new(vec![t, d], dpos)?));
                }
            }
            Op::SelectRows { x, rows } => {
                let tx = self.value(*x);
                let d = tx.last_dim();
                let mut dx = vec![0.0; tx.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        dx[r * d + j] += gout.data()[i * d + j];
                    }
                }
                out.push((*x, Tensor::new(tx.shape().to_vec(), dx)?));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                let grads = op.backward(&vals, &needs, gout);
                for ((&v, g), &need) in inputs.iter().zip(grads).zip(&needs) {
                    if let (Some(g), true) = (g, need) {
                        if g.shape() != self.value(v).shape() {
                            return Err(Error::dim(op.name(), g.shape(), self.value(v).shape()));
                        }
                        out.push((v, g));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Moves between token-major `[(b·T), h·dh]` and head-major `[(b·h), T, dh]` layouts.
fn permute_heads(src: &[f64], batch: usize, tokens: usize, heads: usize, dh: usize, split: bool) -> Vec<f64> {
    let d = heads * dh;
    let mut dst = vec![0.0; src.len()];
    for b in 0..batch {
        for t in 0..tokens {
            for h in 0..heads {
                let tok_major = (b * tokens + t) * d + h * dh;
                let head_major = ((b * heads + h) * tokens + t) * dh;
                let (from, to) = if split {
                    (tok_major, head_major)
                } else {
                    (head_major, tok_major)
                };
                dst[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
    dst
}
