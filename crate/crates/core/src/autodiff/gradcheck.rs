use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Gradients of a scalar function of several tensors, one flat vector per input.
pub type Gradients = Vec<Vec<f64>>;

/// Analytic gradients via a single reverse sweep.
pub fn analytic_gradient<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Gradients>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect())
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(f(&tape, &vars)?.item())
}

/// Sixth-order central differences, one coordinate at a time:
/// `(45 d1 - 9 d2 + d3) / 60e` with `dk = f(x+ke) - f(x-ke)`.
pub fn numeric_gradient<F>(f: &F, inputs: &[Tensor<f64>], eps: f64) -> Result<Gradients>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..work.len() {
        let mut g = vec![0.0; work[i].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            let mut at = |offset: f64| -> Result<f64> {
                work[i].data_mut()[j] = orig + offset * eps;
                evaluate(f, &work)
            };
            let d1 = at(1.0)? - at(-1.0)?;
            let d2 = at(2.0)? - at(-2.0)?;
            let d3 = at(3.0)? - at(-3.0)?;
            work[i].data_mut()[j] = orig;
            *gj = (45.0 * d1 - 9.0 * d2 + d3) / (60.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

/// Max over coordinates of `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn max_relative_error(analytic: &Gradients, numeric: &Gradients) -> f64 {
    analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Compares reverse-mode gradients of `f` against central finite differences
/// and returns the worst relative error.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic = analytic_gradient(&f, inputs)?;
    let numeric = numeric_gradient(&f, inputs, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}
