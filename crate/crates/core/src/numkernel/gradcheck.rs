use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// Returns `max_i |analytic_i − numeric_i| / (|numeric_i| + 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let eval = |point: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point)?;
        let out = f(&mut g, v)?;
        let value = g.value(out);
        if !value.is_scalar() {
            return Err(Error::invalid("finite-difference target must be scalar"));
        }
        Ok(value.item())
    };

    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true)?;
    let root = f(&mut g, xv)?;
    let first = g.value(root).item();
    g.backward(root)?;
    let analytic = g.grad(xv).expect("leaf gradient after backward");

    let again = eval(x.clone())?;
    if first.to_bits() != again.to_bits() {
        return Err(Error::invalid(format!(
            "function is not deterministic: {first} vs {again}"
        )));
    }

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic.data()[i] - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
