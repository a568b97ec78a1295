use super::{axpy, dot, norm};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
    pub converged: bool,
}

/// Solves `A x = b` for symmetric positive (semi)definite `A` given only products `A v`.
///
/// Stops once `||A x - b|| <= tol * ||b||` or after `max_iters` iterations;
/// `converged` reports which.
pub fn conjugate_gradient(
    mut apply_a: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    max_iters: usize,
    tol: f64,
) -> Result<CgSolution> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok(CgSolution {
            x,
            iterations: 0,
            residual_norm: 0.0,
            converged: true,
        });
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let target = tol * b_norm;
    for it in 0..max_iters {
        if rr.sqrt() <= target {
            return Ok(CgSolution {
                x,
                iterations: it,
                residual_norm: rr.sqrt(),
                converged: true,
            });
        }
        let ap = apply_a(&p)?;
        let pap = dot(&p, &ap);
        if !pap.is_finite() || pap <= 0.0 {
            if pap.is_finite() && pap == 0.0 {
                break;
            }
            return Err(Error::numeric(
                format!("conjugate gradient iteration {it}"),
                format!("curvature p^T A p = {pap}"),
            ));
        }
        let alpha = rr / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        let rr_new = dot(&r, &r);
        if !rr_new.is_finite() {
            return Err(Error::numeric(
                format!("conjugate gradient iteration {it}"),
                "residual is not finite",
            ));
        }
        let beta = rr_new / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_new;
    }
    let residual_norm = rr.sqrt();
    Ok(CgSolution {
        x,
        iterations: max_iters,
        residual_norm,
        converged: residual_norm <= target,
    })
}
