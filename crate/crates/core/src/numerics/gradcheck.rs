//! Central finite-difference oracle for checking [`Graph::backward`].

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the analytic gradient of `f` at `params` against central
/// differences with step `step`.
///
/// `f` receives a fresh graph and the parameter node, and must return a
/// scalar node. The returned value is
/// `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, params: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Input(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut g = Graph::new();
    let p = g.param(params.clone());
    let out = f(&mut g, p)?;
    let analytic = g.backward(out)?.wrt(&g, p);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let p = g.param(t);
        let out = f(&mut g, p)?;
        let v = g.value(out).item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Domain {
                op: "grad_check",
                detail: "objective evaluated to a non-finite value".into(),
            })
        }
    };

    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let mut plus = params.clone();
        plus.data_mut()[i] += step;
        let mut minus = params.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
