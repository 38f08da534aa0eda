//! Score-gated LoRA/DoRA blocks and the gate-score regularizers.
//!
//! Each block carries a scalar score `s`. In the forward pass the block's delta is
//! applied iff `s >= tau`. In the backward pass the score receives the gradient of
//! the relaxation `y(m) = x·w0 + m·delta` at `m = indicator(s)`, i.e. the hard
//! indicator is treated as having unit derivative.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::model::SiteId;
use crate::tensor::{gemm, Tensor};

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_SCORE_INIT: f64 = 0.5;
pub const ADAPTER_INIT_STD: f64 = 0.02;

/// Hard threshold gate: 1 iff `score >= tau`.
pub fn indicator(score: f64, tau: f64) -> Result<u8> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("gate threshold must be positive, got {tau}")));
    }
    Ok(u8::from(score >= tau))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateState {
    pub score: f64,
    pub threshold: f64,
    pub trainable: bool,
}

impl GateState {
    pub fn new(score: f64, threshold: f64) -> Result<Self> {
        indicator(score, threshold)?;
        Ok(Self {
            score,
            threshold,
            trainable: true,
        })
    }

    pub fn indicator(&self) -> u8 {
        u8::from(self.score >= self.threshold)
    }

    pub fn is_active(&self) -> bool {
        self.indicator() == 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Lora,
    Dora,
}

/// Low-rank residual `(alpha / r)·a·b` attached to one frozen weight.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBlock {
    pub site: SiteId,
    pub kind: AdapterKind,
    /// `[m, r]`
    pub a: Tensor,
    /// `[r, n]`
    pub b: Tensor,
    pub alpha: f64,
    /// Per-column magnitude `[n]`, DoRA only.
    pub magnitude: Option<Tensor>,
    pub gate: GateState,
}

impl AdapterBlock {
    /// Fresh block with `a ~ N(0, 0.02²)` and `b = 0`, so the initial delta is zero.
    ///
    /// DoRA magnitudes start at the column norms of `w0`.
    pub fn init<R: Rng + ?Sized>(
        site: SiteId,
        kind: AdapterKind,
        w0: &Tensor,
        rank: usize,
        alpha: f64,
        gate: GateState,
        rng: &mut R,
    ) -> Result<Self> {
        if w0.ndim() != 2 {
            return Err(Error::contract("adapter base weight must be 2-D"));
        }
        let (m, n) = (w0.shape()[0], w0.shape()[1]);
        let magnitude = match kind {
            AdapterKind::Lora => None,
            AdapterKind::Dora => Some(column_norms(w0)),
        };
        let blk = Self {
            site,
            kind,
            a: Tensor::randn(&[m, rank.max(1)], ADAPTER_INIT_STD, rng),
            b: Tensor::zeros(&[rank.max(1), n]),
            alpha,
            magnitude,
            gate,
        };
        blk.validate()?;
        if rank == 0 {
            return Err(Error::config("adapter rank must be at least 1"));
        }
        Ok(blk)
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn in_dim(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.b.shape()[1]
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.a.ndim() != 2 || self.b.ndim() != 2 || self.a.shape()[1] != self.b.shape()[0] {
            return Err(Error::dim("adapter", self.a.shape(), self.b.shape()));
        }
        let (m, r, n) = (self.in_dim(), self.rank(), self.out_dim());
        if r > m.min(n) {
            return Err(Error::config(format!("rank {r} exceeds min({m}, {n})")));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config("adapter alpha must be positive"));
        }
        indicator(self.gate.score, self.gate.threshold)?;
        match (self.kind, &self.magnitude) {
            (AdapterKind::Lora, None) => Ok(()),
            (AdapterKind::Dora, Some(mag)) if mag.shape() == [n] => Ok(()),
            (AdapterKind::Lora, Some(_)) => Err(Error::config("LoRA block must not carry a magnitude")),
            (AdapterKind::Dora, _) => Err(Error::config(format!("DoRA block needs a magnitude of {n} entries"))),
        }
    }

    /// Dense delta `(alpha/r)·a·b`, shape `[m, n]`.
    pub fn delta(&self) -> Tensor {
        let mut d = self.a.matmul(&self.b).expect("validated shapes");
        let s = self.scale();
        d.data_mut().iter_mut().for_each(|v| *v *= s);
        d
    }

    /// The weight this block makes effective when its gate is on.
    pub fn effective_weight(&self, w0: &Tensor) -> Result<Tensor> {
        let v = w0.zip_map(&self.delta(), |a, b| a + b)?;
        match self.kind {
            AdapterKind::Lora => Ok(v),
            AdapterKind::Dora => {
                let mag = self.magnitude.as_ref().expect("validated");
                let (w, _) = dora_direction(&v, mag)?;
                Ok(w)
            }
        }
    }
}

/// Euclidean norm of each column of a 2-D tensor.
pub fn column_norms(w: &Tensor) -> Tensor {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let mut acc = vec![0.0; n];
    for i in 0..m {
        for j in 0..n {
            let v = w.data()[i * n + j];
            acc[j] += v * v;
        }
    }
    Tensor::new(vec![n], acc.into_iter().map(f64::sqrt).collect()).expect("n > 0")
}

/// `magnitude ⊙_col v / ‖v‖_col`; also returns the raw column norms.
fn dora_direction(v: &Tensor, magnitude: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let n = v.shape()[1];
    let norms = column_norms(v).into_data();
    if let Some(j) = norms.iter().position(|&c| c == 0.0) {
        return Err(Error::Numeric(format!("zero column {j} in DoRA weight")));
    }
    let factors: Vec<f64> = norms.iter().zip(magnitude.data()).map(|(c, m)| m / c).collect();
    let data = v.data().iter().enumerate().map(|(k, x)| x * factors[k % n]).collect();
    Ok((Tensor::new(v.shape().to_vec(), data)?, norms))
}

/// Runtime switches for the fused gated op.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateMode {
    /// Score receives the straight-through gradient.
    pub ste: bool,
    /// Adapter weights receive gradients even while the gate is off.
    pub grad_when_off: bool,
}

impl Default for GateMode {
    fn default() -> Self {
        Self {
            ste: true,
            grad_when_off: false,
        }
    }
}

/// Graph handles for one block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub a: Var,
    pub b: Var,
    pub magnitude: Option<Var>,
    /// `None` for an ungated block (always on, no score).
    pub score: Option<Var>,
}

/// Static description of one gated application.
#[derive(Clone, Copy, Debug)]
pub struct AdapterApply {
    pub kind: AdapterKind,
    pub scale: f64,
    pub gate_on: bool,
    pub mode: GateMode,
}

struct DoraCache {
    v: Tensor,
    norms: Vec<f64>,
    w_prime: Tensor,
}

struct GatedAdapterOp {
    apply: AdapterApply,
    has_magnitude: bool,
    has_score: bool,
    xa: Option<Tensor>,
    dora: Option<DoraCache>,
}

/// Record `y = x·w0 + I(s)·delta` on the graph.
///
/// With the gate off the output is exactly `x·w0`; the adapter path is evaluated only
/// when its score needs a straight-through gradient.
pub fn record_gated(g: &mut Graph, x: Var, w0: Var, p: AdapterVars, apply: AdapterApply) -> Result<Var> {
    let tx = g.value(x);
    let tw = g.value(w0);
    let (ta, tb) = (g.value(p.a), g.value(p.b));
    if tx.ndim() != 2 || tw.ndim() != 2 || tx.shape()[1] != tw.shape()[0] {
        return Err(Error::dim("gated_adapter", tx.shape(), tw.shape()));
    }
    let (m, n) = (tw.shape()[0], tw.shape()[1]);
    if ta.shape().first() != Some(&m) || tb.shape().get(1) != Some(&n) || ta.shape()[1] != tb.shape()[0] {
        return Err(Error::dim("gated_adapter", ta.shape(), tb.shape()));
    }
    let rows = tx.shape()[0];
    let r = ta.shape()[1];
    let on = apply.gate_on;
    let score_wants_grad = apply.mode.ste && p.score.is_some_and(|s| g.requires_grad(s));
    let weights_want_grad = (on || apply.mode.grad_when_off) && (g.requires_grad(p.a) || g.requires_grad(p.b));
    let need_path = on || (g.grad_enabled() && (score_wants_grad || weights_want_grad));

    let mut base = vec![0.0; rows * n];
    gemm(rows, m, n, tx.data(), false, tw.data(), false, &mut base, false);

    let mut op = GatedAdapterOp {
        apply,
        has_magnitude: p.magnitude.is_some(),
        has_score: p.score.is_some(),
        xa: None,
        dora: None,
    };

    let out = match apply.kind {
        AdapterKind::Lora => {
            if need_path {
                let mut xa = vec![0.0; rows * r];
                gemm(rows, m, r, tx.data(), false, ta.data(), false, &mut xa, false);
                if on {
                    let mut d = vec![0.0; rows * n];
                    gemm(rows, r, n, &xa, false, tb.data(), false, &mut d, false);
                    for (y, dv) in base.iter_mut().zip(&d) {
                        *y += apply.scale * dv;
                    }
                }
                op.xa = Some(Tensor::new(vec![rows, r], xa)?);
            }
            base
        }
        AdapterKind::Dora => {
            let mag = p
                .magnitude
                .ok_or_else(|| Error::contract("DoRA application without magnitude"))?;
            if need_path {
                let mut v = tw.data().to_vec();
                let mut ab = vec![0.0; m * n];
                gemm(m, r, n, ta.data(), false, tb.data(), false, &mut ab, false);
                for (w, d) in v.iter_mut().zip(&ab) {
                    *w += apply.scale * d;
                }
                let v = Tensor::new(vec![m, n], v)?;
                let (w_prime, norms) = dora_direction(&v, g.value(mag))?;
                let y = if on {
                    let mut y = vec![0.0; rows * n];
                    gemm(rows, m, n, tx.data(), false, w_prime.data(), false, &mut y, false);
                    y
                } else {
                    base
                };
                op.dora = Some(DoraCache { v, norms, w_prime });
                y
            } else {
                base
            }
        }
    };

    let value = Tensor::new(vec![rows, n], out)?;
    let mut inputs = vec![x, w0, p.a, p.b];
    inputs.extend(p.magnitude);
    inputs.extend(p.score);
    Ok(g.custom(inputs, value, Box::new(op)))
}

impl CustomOp for GatedAdapterOp {
    fn name(&self) -> &'static str {
        "gated_adapter"
    }

    fn backward(&self, inputs: &[&Tensor], needs: &[bool], gy: &Tensor) -> Vec<Option<Tensor>> {
        let (x, w0, a, b) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let mag_idx = self.has_magnitude.then_some(4);
        let score_idx = self.has_score.then_some(4 + usize::from(self.has_magnitude));
        let mut grads: Vec<Option<Tensor>> = vec![None; inputs.len()];
        let (rows, m, n, r) = (x.shape()[0], w0.shape()[0], w0.shape()[1], a.shape()[1]);
        let on = self.apply.gate_on;
        let flow = on || self.apply.mode.grad_when_off;
        let scale = self.apply.scale;
        let need_score = self.apply.mode.ste && score_idx.is_some_and(|i| needs[i]);

        // Frozen base weights never receive gradient.
        match self.apply.kind {
            AdapterKind::Lora => {
                let need_t = (flow && (needs[2] || needs[3])) || (on && needs[0]) || need_score;
                let t = need_t.then(|| {
                    // t = dY · bᵀ  [rows, r]
                    let mut t = vec![0.0; rows * r];
                    gemm(rows, n, r, gy.data(), false, b.data(), true, &mut t, false);
                    t
                });
                if needs[0] {
                    let mut dx = vec![0.0; rows * m];
                    gemm(rows, n, m, gy.data(), false, w0.data(), true, &mut dx, false);
                    if on {
                        let mut extra = vec![0.0; rows * m];
                        gemm(
                            rows,
                            r,
                            m,
                            t.as_ref().unwrap(),
                            false,
                            a.data(),
                            true,
                            &mut extra,
                            false,
                        );
                        for (d, e) in dx.iter_mut().zip(&extra) {
                            *d += scale * e;
                        }
                    }
                    grads[0] = Tensor::new(vec![rows, m], dx).ok();
                }
                if flow && needs[2] {
                    let mut da = vec![0.0; m * r];
                    gemm(m, rows, r, x.data(), true, t.as_ref().unwrap(), false, &mut da, false);
                    da.iter_mut().for_each(|v| *v *= scale);
                    grads[2] = Tensor::new(vec![m, r], da).ok();
                }
                if flow && needs[3] {
                    let xa = self.xa.as_ref().expect("adapter path cached");
                    let mut db = vec![0.0; r * n];
                    gemm(r, rows, n, xa.data(), true, gy.data(), false, &mut db, false);
                    db.iter_mut().for_each(|v| *v *= scale);
                    grads[3] = Tensor::new(vec![r, n], db).ok();
                }
                if need_score {
                    // ⟨dY, scale·(xa)·b⟩ = scale·⟨dY·bᵀ, xa⟩
                    let xa = self.xa.as_ref().expect("adapter path cached");
                    let dot: f64 = t.as_ref().unwrap().iter().zip(xa.data()).map(|(p, q)| p * q).sum();
                    grads[score_idx.unwrap()] = Some(Tensor::scalar(scale * dot));
                }
            }
            AdapterKind::Dora => {
                let mag = inputs[mag_idx.expect("DoRA carries magnitude")];
                let need_mag = mag_idx.is_some_and(|i| needs[i]);
                if needs[0] {
                    let w = if on {
                        self.dora.as_ref().expect("dora cache").w_prime.data()
                    } else {
                        w0.data()
                    };
                    let mut dx = vec![0.0; rows * m];
                    gemm(rows, n, m, gy.data(), false, w, true, &mut dx, false);
                    grads[0] = Tensor::new(vec![rows, m], dx).ok();
                }
                let need_weights = flow && (needs[2] || needs[3] || need_mag);
                if !(need_weights || need_score) {
                    return grads;
                }
                let cache = self.dora.as_ref().expect("dora cache");
                // dW = xᵀ·dY  [m, n]
                let mut dw = vec![0.0; m * n];
                gemm(m, rows, n, x.data(), true, gy.data(), false, &mut dw, false);
                if need_score {
                    let dot: f64 = dw
                        .iter()
                        .zip(cache.w_prime.data().iter().zip(w0.data()))
                        .map(|(g, (wp, w))| g * (wp - w))
                        .sum();
                    grads[score_idx.unwrap()] = Some(Tensor::scalar(dot));
                }
                if need_weights {
                    let v = cache.v.data();
                    // Per column: sum_i dW_ij·V_ij
                    let mut proj = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            proj[j] += dw[i * n + j] * v[i * n + j];
                        }
                    }
                    let c = &cache.norms;
                    if need_mag {
                        let dm: Vec<f64> = (0..n).map(|j| proj[j] / c[j]).collect();
                        grads[mag_idx.unwrap()] = Tensor::new(vec![n], dm).ok();
                    }
                    if needs[2] || needs[3] {
                        let mut dv = vec![0.0; m * n];
                        for i in 0..m {
                            for j in 0..n {
                                let mj = mag.data()[j];
                                dv[i * n + j] =
                                    mj / c[j] * dw[i * n + j] - mj * proj[j] * v[i * n + j] / (c[j] * c[j] * c[j]);
                            }
                        }
                        if needs[2] {
                            let mut da = vec![0.0; m * r];
                            gemm(m, n, r, &dv, false, b.data(), true, &mut da, false);
                            da.iter_mut().for_each(|q| *q *= scale);
                            grads[2] = Tensor::new(vec![m, r], da).ok();
                        }
                        if needs[3] {
                            let mut db = vec![0.0; r * n];
                            gemm(r, m, n, a.data(), true, &dv, false, &mut db, false);
                            db.iter_mut().for_each(|q| *q *= scale);
                            grads[3] = Tensor::new(vec![r, n], db).ok();
                        }
                    }
                }
            }
        }
        grads
    }
}

fn eval_block(x: &Tensor, w0: &Tensor, blk: &AdapterBlock, expect: AdapterKind) -> Result<Tensor> {
    if blk.kind != expect {
        return Err(Error::contract(format!(
            "expected a {expect:?} block, got {:?}",
            blk.kind
        )));
    }
    blk.validate()?;
    let mut g = Graph::no_grad();
    let xv = g.constant(x.clone());
    let wv = g.constant(w0.clone());
    let vars = AdapterVars {
        a: g.constant(blk.a.clone()),
        b: g.constant(blk.b.clone()),
        magnitude: blk.magnitude.clone().map(|m| g.constant(m)),
        score: None,
    };
    let apply = AdapterApply {
        kind: blk.kind,
        scale: blk.scale(),
        gate_on: blk.gate.is_active(),
        mode: GateMode::default(),
    };
    let y = record_gated(&mut g, xv, wv, vars, apply)?;
    Ok(g.value(y).clone())
}

/// `x·w0 + I(s)·(alpha/r)·(x·a)·b` for a LoRA block.
pub fn gated_lora_forward(x: &Tensor, w0: &Tensor, blk: &AdapterBlock) -> Result<Tensor> {
    eval_block(x, w0, blk, AdapterKind::Lora)
}

/// `x·W'` with `W' = magnitude ⊙_col V/‖V‖_col`, `V = w0 + (alpha/r)·a·b`, when the gate is on;
/// `x·w0` otherwise.
pub fn gated_dora_forward(x: &Tensor, w0: &Tensor, blk: &AdapterBlock) -> Result<Tensor> {
    eval_block(x, w0, blk, AdapterKind::Dora)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegKind {
    L1,
    L2,
    Hinge,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerSpec {
    pub kind: RegKind,
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

impl RegularizerSpec {
    pub fn l1(lambda: f64) -> Self {
        Self {
            kind: RegKind::L1,
            lambda,
            tau: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.kind == RegKind::Hinge && self.tau.is_none() {
            return Err(Error::config("hinge regularizer requires tau"));
        }
        Ok(())
    }

    fn term(&self, s: f64) -> f64 {
        match self.kind {
            RegKind::L1 => s.abs(),
            RegKind::L2 => s * s,
            RegKind::Hinge => (s - self.tau.unwrap_or(DEFAULT_TAU)).max(0.0),
        }
    }

    /// Derivative of the penalty with respect to one score. `sign(0) = 0` for l1.
    pub fn grad(&self, s: f64) -> f64 {
        let d = match self.kind {
            RegKind::L1 => {
                if s > 0.0 {
                    1.0
                } else if s < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            RegKind::L2 => 2.0 * s,
            RegKind::Hinge => {
                if s > self.tau.unwrap_or(DEFAULT_TAU) {
                    1.0
                } else {
                    0.0
                }
            }
        };
        self.lambda * d
    }
}

pub fn regularizer_value(scores: &[f64], spec: &RegularizerSpec) -> f64 {
    spec.lambda * scores.iter().map(|&s| spec.term(s)).sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub task: f64,
    pub reg: f64,
    pub total: f64,
}

pub fn total_loss(task_loss: f64, scores: &[f64], spec: &RegularizerSpec) -> LossParts {
    let reg = regularizer_value(scores, spec);
    LossParts {
        task: task_loss,
        reg,
        total: task_loss + reg,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActiveFraction {
    pub count: usize,
    pub total: usize,
    pub percent: f64,
}

impl ActiveFraction {
    /// Percentage rounded to two decimals, as shown in reports.
    pub fn percent_rounded(&self) -> f64 {
        (self.percent * 100.0).round() / 100.0
    }
}

pub fn active_fraction(gates: &[GateState]) -> Result<ActiveFraction> {
    if gates.is_empty() {
        return Err(Error::contract("active_fraction of an empty gate list"));
    }
    let count = gates.iter().filter(|g| g.is_active()).count();
    Ok(ActiveFraction {
        count,
        total: gates.len(),
        percent: 100.0 * count as f64 / gates.len() as f64,
    })
}
