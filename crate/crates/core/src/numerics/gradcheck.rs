use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor of the relative error. Central differences at
/// `eps = 1e-5` carry round-off near `1e-11`, so coordinates whose true
/// gradient is far below this floor are judged by absolute error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the recorded-graph gradient of a scalar function against
/// central finite differences and returns the worst relative error
/// `|a − n| / max(|a|, |n|, REL_FLOOR)` over all coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), eps)
}

/// Multi-input form of [`grad_check`]: every tensor in `xs` is perturbed.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = xs
        .iter()
        .enumerate()
        .map(|(i, x)| g.param(&format!("x{i}"), x))
        .collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check function must return a scalar, got shape {:?}",
            g.value(out).shape()
        )));
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = xs.to_vec();
    for (k, x) in xs.iter().enumerate() {
        for i in 0..x.len() {
            let orig = x.data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[k].data()[i];
            let rel = relative_error(a, numeric);
            if !rel.is_finite() {
                return Err(Error::Numeric(format!("gradient check coordinate {i} of input {k}")));
            }
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
