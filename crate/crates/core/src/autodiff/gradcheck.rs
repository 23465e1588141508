//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Check at most this many evenly spaced elements per input (all when `None`).
    pub max_probes: Option<usize>,
    /// Denominator floor of the relative error, so near-zero gradients are
    /// compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-4, max_probes: None, floor: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    /// False when the function gave different values on identical inputs;
    /// the comparison is then meaningless.
    pub valid: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.valid && self.max_rel_err() < tol
    }
}

fn evaluate<Fun>(f: &Fun, inputs: &[Tensor<f64>]) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract(format!("grad_check needs a scalar function, got {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compares tape gradients of the scalar function `f` at `inputs` with
/// central finite differences.
pub fn grad_check<Fun>(f: Fun, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, opts, None)
}

#[doc(hidden)]
pub fn grad_check_with<Fun>(
    f: Fun,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
    fault: Option<crate::autodiff::OpKind>,
) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if opts.eps <= 0.0 {
        return Err(Error::Contract("grad_check eps must be positive".into()));
    }
    for (i, t) in inputs.iter().enumerate() {
        t.check_finite(&format!("grad_check input {i}"))?;
    }

    let mut g = Graph::new().with_fault(fault);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base = g.value(out).item();
    let grads = g.backward(out)?;

    let valid = evaluate(&f, inputs)?.to_bits() == base.to_bits()
        && evaluate(&f, inputs)?.to_bits() == base.to_bits();

    let mut reports = Vec::with_capacity(inputs.len());
    for (which, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.wrt(*var);
        let n = input.numel();
        let probes: Vec<usize> = match opts.max_probes {
            Some(m) if m < n => (0..m).map(|i| i * n / m + (n / m) / 2).collect(),
            _ => (0..n).collect(),
        };
        let mut rep = InputReport {
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            probes: probes.len(),
        };
        let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
        for &idx in &probes {
            let orig = input.data()[idx];
            perturbed[which].data_mut()[idx] = orig + opts.eps;
            let up = evaluate(&f, &perturbed)?;
            perturbed[which].data_mut()[idx] = orig - opts.eps;
            let down = evaluate(&f, &perturbed)?;
            perturbed[which].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic.data()[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if err > rep.max_rel_err || (rep.max_rel_err == 0.0 && idx == probes[0]) {
                rep = InputReport { max_rel_err: err, worst_index: idx, analytic: a, numeric, ..rep };
            }
        }
        reports.push(rep);
    }
    Ok(GradCheckReport { inputs: reports, valid })
}
