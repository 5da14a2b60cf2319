use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Below this magnitude the error is measured absolutely rather than
/// relative to the gradient.
const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

fn eval<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.variable(x.clone());
    let y = f(&mut tape, v)?;
    let out = tape.value(y);
    if out.len() != 1 {
        return Err(Error::GradCheck(format!("function output has shape {:?}, expected scalar", out.shape())));
    }
    Ok(out.item())
}

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε`.
///
/// The per-coordinate error is `|a − n| / max(|a|, |n|, 1e-3)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::InvalidArgument(format!("finite-difference step {eps} outside [1e-6, 1e-4]")));
    }
    let mut tape = Tape::new();
    let v = tape.variable(x.clone());
    let y = f(&mut tape, v)?;
    let y0 = tape.value(y).item();
    tape.backward(y)?;
    let analytic = match tape.grad(v) {
        Some(g) => g.to_f64_vec(),
        None => vec![0.0; x.len()],
    };

    let again = eval(&f, x)?;
    if again.to_bits() != y0.to_bits() {
        return Err(Error::GradCheck(format!("function is not deterministic: {y0} then {again}")));
    }

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * eps));
    }

    let (mut worst_index, mut max_rel_error) = (0, 0.0f64);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR);
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
        tol,
        passed: max_rel_error <= tol,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.7, 2.2, 0.05]);
        let r = grad_check(
            |t, x| {
                let s = t.square(x)?;
                t.sum(s)
            },
            &x,
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn wrong_backward_rule_fails() {
        let x = Tensor::vector(vec![0.5, 1.5]);
        let r = grad_check(
            |t, x| {
                // forward x², backward claims 3x
                let y = t.custom_unary(x, |v| v * v, Arc::new(|x, _, g| x.iter().zip(g).map(|(x, g)| 3.0 * x * g).collect()))?;
                t.sum(y)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let x = Tensor::vector(vec![1.0]);
        assert!(grad_check(|t, x| t.sum(x), &x, 1e-2, 1e-4).is_err());
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let calls = AtomicUsize::new(0);
        let x = Tensor::vector(vec![1.0]);
        let r = grad_check(
            |t, x| {
                let k = calls.fetch_add(1, Ordering::Relaxed) as f64;
                let y = t.scale(x, 1.0 + k)?;
                t.sum(y)
            },
            &x,
            1e-5,
            1e-4,
        );
        assert!(matches!(r, Err(Error::GradCheck(_))));
    }
}
