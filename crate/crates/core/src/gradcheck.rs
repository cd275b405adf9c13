//! Central-difference gradient checking against [`Graph::backward`].

use crate::error::{AtdError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Step size used by the check suites.
pub const DEFAULT_STEP: f64 = 1e-5;

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&mut g, v)?;
    let value = g.value(out).item()?;
    if !value.is_finite() {
        return Err(AtdError::NumericDomain {
            op: "grad_check",
            detail: format!("objective evaluated to {value}"),
        });
    }
    Ok(value)
}

/// Compares the reverse-mode gradient of scalar `f` at `x0` with central
/// differences `(f(x + h e) - f(x - h e)) / 2h`, entry by entry.
///
/// Returns `max |analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x0: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(AtdError::contract("grad_check", format!("step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let x = g.param(x0.clone());
    let out = f(&mut g, x)?;
    if !g.value(out).item()?.is_finite() {
        return Err(AtdError::NumericDomain {
            op: "grad_check",
            detail: "objective is not finite at x0".into(),
        });
    }
    g.backward(out)?;
    let analytic = g.grad(x).map_or_else(|| vec![0.0; x0.len()], <[f64]>::to_vec);

    let mut probe = x0.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = x0.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Runs [`grad_check`] once per input of a multi-input objective, holding the
/// other inputs fixed. Returns one error per input.
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    (0..inputs.len())
        .map(|k| {
            let wrapped = |g: &mut Graph, x: Var| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == k { x } else { g.constant(t.clone()) })
                    .collect();
                f(g, &vars)
            };
            grad_check(wrapped, &inputs[k], h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parabola_is_nearly_exact() {
        let x = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn linear_sum_has_no_error() {
        let x = Tensor::from_vec(&[4], vec![0.1, -2.0, 7.5, 1e3]).unwrap();
        let err = grad_check(|g, x| Ok(g.sum(x)), &x, 1e-5).unwrap();
        // only roundoff remains: about eps * |f| / h
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn bad_step_is_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|g, x| Ok(g.sum(x)), &x, 0.0).is_err());
    }

    #[test]
    fn non_finite_probe_is_reported() {
        // normalize_rows of a constant row with eps = 0 divides by zero
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let n = g.normalize_rows(x, 0.0)?;
                Ok(g.sum(n))
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(AtdError::NumericDomain { .. })));
    }
}
