//! Central-difference gradient checking.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// One element whose analytic and numeric derivatives disagree beyond tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Relative error with a denominator floor so that near-zero derivatives are
/// compared on an absolute scale of `floor`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    pub floor: f64,
    /// Check at most this many elements per input, evenly strided. `None` checks all.
    pub max_per_input: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_per_input: None,
        }
    }
}

/// Compare the engine's gradient of the scalar `f(inputs)` against central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = probe.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    check_against_differences(eval, inputs, &analytic, opts)
}

/// Central-difference comparison for gradients computed elsewhere.
///
/// `eval` maps a full set of (perturbed) inputs to the scalar objective.
pub fn check_against_differences<E>(
    eval: E,
    inputs: &[Tensor],
    analytic: &[Tensor],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    E: Fn(&[Tensor]) -> Result<f64>,
{
    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = match opts.max_per_input {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        for e in (0..n).step_by(stride) {
            let orig = input.data()[e];
            probe[i].data_mut()[e] = orig + opts.h;
            let fp = eval(&probe)?;
            probe[i].data_mut()[e] = orig - opts.h;
            let fm = eval(&probe)?;
            probe[i].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * opts.h);
            let a = analytic[i].data()[e];
            let err = rel_err(a, numeric, opts.floor);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(err);
            if !(err < opts.tol) {
                report.failures.push(GradMismatch {
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                    rel_err: err,
                });
            }
        }
    }
    Ok(report)
}
