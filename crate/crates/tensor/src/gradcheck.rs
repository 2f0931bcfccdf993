//! Finite-difference verification of tape gradients.
//!
//! The checker evaluates a scalar-valued tape program twice per coordinate
//! (central differences) and compares against the gradient produced by
//! `backward`. It always runs in f64.

use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Floor for the relative-error denominator: below this scale finite
/// differences measure noise, so the comparison degrades to absolute.
const DENOM_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct FailedCoord {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<FailedCoord>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn eval_scalar<F>(f: &F, x: &Tensor<f64>) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let xv = tape.owned(x.clone(), false);
    let root = f(&mut tape, xv)?;
    let out = tape.value(root);
    if out.numel() != 1 {
        return Err(TensorError::NonScalarRoot {
            dims: out.dims().to_vec(),
        });
    }
    let v = out.item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Gradient of `f` at `x` via the tape.
pub fn analytic_gradient<F>(f: &F, x: &Tensor<f64>) -> Result<Vec<f64>, TensorError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let xv = tape.owned(x.clone(), true);
    let root = f(&mut tape, xv)?;
    let out = tape.value(root);
    if out.numel() != 1 {
        return Err(TensorError::NonScalarRoot {
            dims: out.dims().to_vec(),
        });
    }
    if !out.item().is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    tape.backward(root)?;
    Ok(match tape.grad(xv) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.numel()],
    })
}

/// Central finite differences of `f` at `x`, coordinate by coordinate.
pub fn numeric_gradient<F>(f: &F, x: &Tensor<f64>, eps: f64) -> Result<Vec<f64>, TensorError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval_scalar(f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval_scalar(f, &probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(grad)
}

/// Per-coordinate comparison; coordinates whose relative error exceeds
/// `tol` are listed in the report.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], tol: f64) -> GradCheckReport {
    let mut failures = Vec::new();
    let mut max_rel = 0.0f64;
    for (i, (&a, &n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let rel = (a - n).abs() / (a.abs() + n.abs()).max(DENOM_FLOOR);
        if rel > max_rel {
            max_rel = rel;
        }
        if rel > tol {
            failures.push(FailedCoord {
                index: i,
                analytic: a,
                numeric: n,
                rel_err: rel,
            });
        }
    }
    GradCheckReport {
        checked: analytic.len(),
        max_rel_err: max_rel,
        failures,
    }
}

/// Check the tape gradient of a scalar function against central finite
/// differences. `f` must build the same graph for every call.
pub fn grad_check<F>(
    f: &F,
    x: &Tensor<f64>,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    let analytic = analytic_gradient(f, x)?;
    let numeric = numeric_gradient(f, x, eps)?;
    Ok(compare_gradients(&analytic, &numeric, tol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_sum_in_linear_region() {
        let x = Tensor::new(vec![4], vec![0.5f64, 1.25, 2.0, 3.5]).unwrap();
        let f = |tape: &mut Tape<f64>, xv: Var| -> Result<Var, TensorError> {
            let r = tape.relu(xv);
            Ok(tape.sum(r))
        };
        let report = grad_check(&f, &x, DEFAULT_EPS, DEFAULT_TOL).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn conv_weight_gradient() {
        let x = Tensor::new(
            vec![2, 3, 3],
            (0..18).map(|i| 0.3 + 0.11 * i as f64).collect(),
        )
        .unwrap();
        let w = Tensor::new(
            vec![2, 2, 3, 3],
            (0..36).map(|i| ((i * 7 % 13) as f64 - 6.0) * 0.17).collect(),
        )
        .unwrap();
        let b = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
        // check w.r.t. the weight: the closure treats x, b as constants
        let f = move |tape: &mut Tape<f64>, wv: Var| -> Result<Var, TensorError> {
            let xv = tape.owned(x.clone(), false);
            let bv = tape.owned(b.clone(), false);
            let y = tape.conv2d(xv, wv, bv, 1)?;
            Ok(tape.sum(y))
        };
        let report = grad_check(&f, &w, DEFAULT_EPS, DEFAULT_TOL).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let x = Tensor::new(vec![4], vec![0.5f64, 1.0, 1.5, 2.0]).unwrap();
        let f = |tape: &mut Tape<f64>, xv: Var| -> Result<Var, TensorError> {
            let r = tape.mul(xv, xv)?;
            Ok(tape.sum(r))
        };
        let mut analytic = analytic_gradient(&f, &x).unwrap();
        let numeric = numeric_gradient(&f, &x, DEFAULT_EPS).unwrap();
        analytic[2] += 0.25;
        let report = compare_gradients(&analytic, &numeric, DEFAULT_TOL);
        assert!(!report.passed());
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].index, 2);
    }

    #[test]
    fn non_finite_objective_rejected() {
        let x = Tensor::new(vec![1], vec![0.0f64]).unwrap();
        let f = |tape: &mut Tape<f64>, xv: Var| -> Result<Var, TensorError> {
            // ln(0) = -inf through x * ln(x)... emulate with 1/x via affine? simplest:
            // build an owned non-finite constant times x.
            let c = tape.owned(Tensor::scalar(f64::INFINITY), false);
            tape.mul(xv, c)
        };
        // forward produces 0 * inf = NaN; debug builds assert inside the op,
        // release builds surface the NonFinite error.
        let result = std::panic::catch_unwind(|| grad_check(&f, &x, DEFAULT_EPS, DEFAULT_TOL));
        match result {
            Ok(r) => assert!(r.is_err()),
            Err(_) => (), // debug assertion tripped, which is also a rejection
        }
    }
}
