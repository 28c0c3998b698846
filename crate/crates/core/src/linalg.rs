//! Conjugate gradients for symmetric positive definite operators.

use crate::error::{Error, Result};
use crate::probes::{dot, norm_sq, LinearOperator};

/// Default relative residual tolerance.
pub const CG_TOL: f64 = 1e-8;

/// Solution of `Ax = b` with convergence diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `‖b − Ax‖ / ‖b‖` from the recurrence.
    pub residual: f64,
}

/// Solves `Ax = b` from `x = 0` until `‖r‖ ≤ tol·‖b‖`, with at most
/// `10·d` iterations.
pub fn conjugate_gradient<O: LinearOperator + ?Sized>(a: &O, b: &[f64], tol: f64) -> Result<CgSolution> {
    let d = a.dim();
    if b.len() != d {
        return Err(Error::Dimension(format!("right-hand side has length {}, expected {d}", b.len())));
    }
    let b_norm = norm_sq(b).sqrt();
    let mut x = vec![0.0; d];
    if b_norm == 0.0 {
        return Ok(CgSolution { x, iterations: 0, residual: 0.0 });
    }
    let max_iter = 10 * d;
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; d];
    let mut rr = norm_sq(&r);
    for it in 1..=max_iter {
        a.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "CG found pᵀAp = {pap:e} at iteration {it}"
            )));
        }
        let alpha = rr / pap;
        for i in 0..d {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = norm_sq(&r);
        let residual = rr_new.sqrt() / b_norm;
        if !residual.is_finite() {
            return Err(Error::NonFinite { iteration: it, what: "CG residual".into() });
        }
        if residual <= tol {
            return Ok(CgSolution { x, iterations: it, residual });
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..d {
            p[i] = r[i] + beta * p[i];
        }
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        residual: rr.sqrt() / b_norm,
    })
}
