//! Momentum SGD, AdamW and the warmup-cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    SgdMomentum,
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSpec {
    pub kind: OptimKind,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimSpec {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimKind::SgdMomentum,
            lr,
            momentum: default_momentum(),
            betas: default_betas(),
            weight_decay: 0.0,
            eps: default_eps(),
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimKind::Adamw,
            weight_decay,
            ..Self::sgd(lr)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.eps > 0.0) {
            return Err(Error::config("adamw betas must be in [0, 1) and eps > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default)]
    pub floor: f64,
}

fn default_warmup() -> usize {
    500
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            warmup_steps: default_warmup(),
            floor: 0.0,
        }
    }
}

/// Linear warmup from 0 to `base_lr`, then half-cosine decay to `floor` at `total_steps`.
pub fn cosine_warmup_lr(step: usize, base_lr: f64, spec: &ScheduleSpec, total_steps: usize) -> Result<f64> {
    if spec.warmup_steps >= total_steps {
        return Err(Error::config(format!(
            "warmup ({}) must be shorter than the run ({total_steps})",
            spec.warmup_steps
        )));
    }
    if step > total_steps {
        return Err(Error::contract(format!(
            "schedule step {step} beyond total {total_steps}"
        )));
    }
    let w = spec.warmup_steps;
    if step < w {
        return Ok(base_lr * step as f64 / w as f64);
    }
    let progress = (step - w) as f64 / (total_steps - w) as f64;
    Ok(spec.floor + (base_lr - spec.floor) * 0.5 * (1.0 + (PI * progress).cos()))
}

#[derive(Clone, Debug)]
enum Slot {
    Momentum(Vec<f64>),
    Adam { m: Vec<f64>, v: Vec<f64> },
}

/// Per-parameter optimizer state keyed by name.
#[derive(Clone, Debug, Default)]
pub struct OptimState {
    slots: BTreeMap<String, Slot>,
    /// AdamW bias-correction counter, advanced once per [`Optimizer::begin_step`].
    t: u64,
}

impl OptimState {
    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One update over a set of named parameters.
pub struct Optimizer<'a> {
    pub spec: &'a OptimSpec,
    pub state: &'a mut OptimState,
}

impl Optimizer<'_> {
    pub fn begin_step(&mut self) {
        self.state.t += 1;
    }

    /// Update `param` in place. `decay` selects whether decoupled weight decay applies.
    pub fn update(&mut self, name: &str, param: &mut [f64], grad: &[f64], lr: f64, decay: bool) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::contract(format!(
                "{name}: gradient length {} does not match parameter length {}",
                grad.len(),
                param.len()
            )));
        }
        let wd = if decay { self.spec.weight_decay } else { 0.0 };
        match self.spec.kind {
            OptimKind::SgdMomentum => {
                let slot = self
                    .state
                    .slots
                    .entry(name.to_string())
                    .or_insert_with(|| Slot::Momentum(vec![0.0; param.len()]));
                let Slot::Momentum(buf) = slot else {
                    return Err(Error::contract(format!("{name}: optimizer state kind changed")));
                };
                if buf.len() != param.len() {
                    return Err(Error::contract(format!("{name}: optimizer state shape changed")));
                }
                let mu = self.spec.momentum;
                for ((p, &g), b) in param.iter_mut().zip(grad).zip(buf.iter_mut()) {
                    let g = g + wd * *p;
                    *b = mu * *b + g;
                    *p -= lr * *b;
                }
            }
            OptimKind::Adamw => {
                let n = param.len();
                let slot = self.state.slots.entry(name.to_string()).or_insert_with(|| Slot::Adam {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                });
                let Slot::Adam { m, v } = slot else {
                    return Err(Error::contract(format!("{name}: optimizer state kind changed")));
                };
                if m.len() != n {
                    return Err(Error::contract(format!("{name}: optimizer state shape changed")));
                }
                let (b1, b2) = self.spec.betas;
                let t = self.state.t.max(1) as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for i in 0..n {
                    let g = grad[i];
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    param[i] -= lr * (mhat / (vhat.sqrt() + self.spec.eps) + wd * param[i]);
                }
            }
        }
        Ok(())
    }

    pub fn update_tensor(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64, decay: bool) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::contract(format!(
                "{name}: gradient shape {:?} does not match parameter shape {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        self.update(name, param.data_mut(), grad.data(), lr, decay)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = ScheduleSpec {
            warmup_steps: 500,
            floor: 0.0,
        };
        assert_eq!(cosine_warmup_lr(0, 0.005, &s, 5000).unwrap(), 0.0);
        assert_eq!(cosine_warmup_lr(500, 0.005, &s, 5000).unwrap(), 0.005);
        assert!(cosine_warmup_lr(5000, 0.005, &s, 5000).unwrap().abs() < 1e-18);
        assert!((cosine_warmup_lr(250, 0.005, &s, 5000).unwrap() - 0.0025).abs() < 1e-18);
        assert!((cosine_warmup_lr(2750, 0.005, &s, 5000).unwrap() - 0.0025).abs() < 1e-15);
        assert!(matches!(
            cosine_warmup_lr(5001, 0.005, &s, 5000),
            Err(Error::Contract(_))
        ));
        assert!(matches!(cosine_warmup_lr(0, 0.005, &s, 500), Err(Error::Config(_))));
        let floored = ScheduleSpec {
            warmup_steps: 10,
            floor: 0.001,
        };
        assert!((cosine_warmup_lr(100, 0.01, &floored, 100).unwrap() - 0.001).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let s = ScheduleSpec::default();
        let lrs: Vec<f64> = (500..=2000)
            .map(|t| cosine_warmup_lr(t, 1.0, &s, 2000).unwrap())
            .collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for spec in [OptimSpec::sgd(0.1), OptimSpec::adamw(0.1, 0.0)] {
            let mut st = OptimState::default();
            let mut p = vec![1.5, -2.0];
            let mut opt = Optimizer {
                spec: &spec,
                state: &mut st,
            };
            opt.begin_step();
            opt.update("w", &mut p, &[0.0, 0.0], 0.1, true).unwrap();
            assert_eq!(p, vec![1.5, -2.0]);
        }
    }

    #[test]
    fn plain_sgd_subtracts_gradient() {
        let mut spec = OptimSpec::sgd(1.0);
        spec.momentum = 0.0;
        let mut st = OptimState::default();
        let mut p = vec![1.0, 2.0];
        let mut opt = Optimizer {
            spec: &spec,
            state: &mut st,
        };
        opt.update("w", &mut p, &[0.25, -1.0], 1.0, true).unwrap();
        assert_eq!(p, vec![0.75, 3.0]);
        assert!(matches!(
            opt.update("w", &mut p, &[1.0], 1.0, true),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn momentum_accumulates() {
        let spec = OptimSpec::sgd(0.1);
        let mut st = OptimState::default();
        let mut p = vec![0.0];
        let mut opt = Optimizer {
            spec: &spec,
            state: &mut st,
        };
        opt.update("w", &mut p, &[1.0], 0.1, false).unwrap();
        opt.update("w", &mut p, &[1.0], 0.1, false).unwrap();
        // buffers 1.0 then 1.9
        assert!((p[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn adamw_scalar_trace() {
        let (lr, wd, b1, b2, eps) = (0.01, 0.1, 0.9f64, 0.999f64, 1e-8);
        let grads = [0.5, -0.2, 0.8];
        // Reference recurrence written out longhand.
        let mut want = Vec::new();
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (k, g) in grads.iter().enumerate() {
            let t = (k + 1) as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powf(t));
            let vh = v / (1.0 - b2.powf(t));
            x = x - lr * (mh / (vh.sqrt() + eps)) - lr * wd * x;
            want.push(x);
        }
        let spec = OptimSpec::adamw(lr, wd);
        let mut st = OptimState::default();
        let mut p = vec![1.0];
        for (g, w) in grads.iter().zip(want) {
            let mut opt = Optimizer {
                spec: &spec,
                state: &mut st,
            };
            opt.begin_step();
            opt.update("x", &mut p, &[*g], lr, true).unwrap();
            assert!((p[0] - w).abs() < 1e-12, "{} vs {w}", p[0]);
        }
        assert_eq!(st.steps(), 3);
    }

    #[test]
    fn decay_flag_exempts_parameter() {
        let spec = OptimSpec::adamw(0.1, 0.5);
        let mut st = OptimState::default();
        let mut p = vec![2.0];
        let mut opt = Optimizer {
            spec: &spec,
            state: &mut st,
        };
        opt.begin_step();
        opt.update("score", &mut p, &[0.0], 0.1, false).unwrap();
        assert_eq!(p, vec![2.0]);
    }

    #[test]
    fn config_validation() {
        assert!(OptimSpec::sgd(0.0).validate().is_err());
        assert!(OptimSpec::adamw(1e-5, -0.1).validate().is_err());
        assert!(OptimSpec::adamw(1e-5, 0.1).validate().is_ok());
        let json = r#"{"kind":"sgd_momentum","lr":0.005,"nesterov":true}"#;
        assert!(serde_json::from_str::<OptimSpec>(json).is_err());
    }
}
