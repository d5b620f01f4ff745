//! Central finite-difference gradient checking.
//!
//! The numeric side never touches the backward rules: it only re-runs the
//! forward closure on perturbed copies of the inputs.

use super::{Result, Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients with norm below this are compared absolutely. Central differences
/// carry roughly `1e-16 * |f| / h` of rounding noise, so an identically zero
/// gradient (e.g. an attention key bias) would otherwise look infinitely wrong.
pub const NORM_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Per-input relative error `|analytic - numeric| / max(|analytic|, |numeric|, NORM_FLOOR)`
    /// computed on whole gradient vectors (L2 norms).
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Analytic gradient of the scalar `f(inputs)` with respect to every input.
pub fn analytic<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect())
}

/// Central differences of the scalar `f(inputs)`.
pub fn numeric<F>(inputs: &[Tensor], f: &F, h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work, f)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work, f)?;
            work[i].data_mut()[j] = orig;
            *gj = (plus - minus) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

pub fn check<F>(inputs: &[Tensor], f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let a = analytic(inputs, &f)?;
    let n = numeric(inputs, &f, DEFAULT_STEP)?;
    let rel_errors = a
        .iter()
        .zip(&n)
        .map(|(a, n)| {
            let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
            diff / na.max(nn).max(NORM_FLOOR)
        })
        .collect();
    Ok(GradCheck { rel_errors })
}
