//! Conjugate gradient and conjugate residual on flat vectors with a
//! caller-supplied inner product.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct KrylovOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Residual norms, starting with the initial one.
    pub residuals: Vec<f64>,
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

fn residual<A>(apply: &mut A, b: &[f64], x: &[f64]) -> Result<Vec<f64>>
where
    A: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let ax = apply(x)?;
    Ok(b.iter().zip(&ax).map(|(b, a)| b - a).collect())
}

/// CG for a self-adjoint positive operator. `done(|r|, x)` decides
/// convergence; a recurrence-converged iterate is confirmed against the
/// true residual and restarted if it fails.
pub(crate) fn conjugate_gradient<A, I, D>(
    mut apply: A,
    inner: I,
    b: &[f64],
    x0: Option<Vec<f64>>,
    max_iters: usize,
    done: D,
) -> Result<KrylovOutcome>
where
    A: FnMut(&[f64]) -> Result<Vec<f64>>,
    I: Fn(&[f64], &[f64]) -> f64,
    D: Fn(f64, &[f64]) -> bool,
{
    let mut x = x0.unwrap_or_else(|| vec![0.0; b.len()]);
    let mut r = residual(&mut apply, b, &x)?;
    let mut rr = inner(&r, &r);
    let mut residuals = vec![rr.max(0.0).sqrt()];
    let mut iterations = 0;
    let mut p = r.clone();
    while !done(rr.max(0.0).sqrt(), &x) {
        if iterations >= max_iters {
            return Err(Error::SolverFailure {
                solver: "conjugate gradient",
                iterations,
                residuals,
            });
        }
        let ap = apply(&p)?;
        let pap = inner(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::SolverFailure {
                solver: "conjugate gradient",
                iterations,
                residuals,
            });
        }
        let step = rr / pap;
        axpy(&mut x, step, &p);
        axpy(&mut r, -step, &ap);
        iterations += 1;
        let mut rr_new = inner(&r, &r);
        if done(rr_new.max(0.0).sqrt(), &x) {
            // confirm with the true residual, restart from x otherwise
            r = residual(&mut apply, b, &x)?;
            rr_new = inner(&r, &r);
            residuals.push(rr_new.max(0.0).sqrt());
            p.copy_from_slice(&r);
            rr = rr_new;
            continue;
        }
        residuals.push(rr_new.max(0.0).sqrt());
        let beta = rr_new / rr;
        p.iter_mut().zip(&r).for_each(|(p, r)| *p = r + beta * *p);
        rr = rr_new;
    }
    Ok(KrylovOutcome {
        x,
        iterations,
        residuals,
    })
}

/// Conjugate residual: needs self-adjointness but not definiteness.
pub(crate) fn conjugate_residual<A, I, D>(
    mut apply: A,
    inner: I,
    b: &[f64],
    x0: Option<Vec<f64>>,
    max_iters: usize,
    done: D,
) -> Result<KrylovOutcome>
where
    A: FnMut(&[f64]) -> Result<Vec<f64>>,
    I: Fn(&[f64], &[f64]) -> f64,
    D: Fn(f64, &[f64]) -> bool,
{
    let fail = |iterations, residuals| Error::SolverFailure {
        solver: "conjugate residual",
        iterations,
        residuals,
    };
    let mut x = x0.unwrap_or_else(|| vec![0.0; b.len()]);
    let mut r = residual(&mut apply, b, &x)?;
    let mut residuals = vec![inner(&r, &r).max(0.0).sqrt()];
    let mut iterations = 0;
    let mut ar = apply(&r)?;
    let mut rar = inner(&r, &ar);
    let mut p = r.clone();
    let mut ap = ar.clone();
    while !done(*residuals.last().unwrap(), &x) {
        if iterations >= max_iters {
            return Err(fail(iterations, residuals));
        }
        let apap = inner(&ap, &ap);
        if !(apap > 0.0) {
            return Err(fail(iterations, residuals));
        }
        let step = rar / apap;
        axpy(&mut x, step, &p);
        axpy(&mut r, -step, &ap);
        iterations += 1;
        residuals.push(inner(&r, &r).max(0.0).sqrt());
        ar = apply(&r)?;
        let rar_new = inner(&r, &ar);
        let beta = rar_new / rar;
        p.iter_mut().zip(&r).for_each(|(p, r)| *p = r + beta * *p);
        ap.iter_mut().zip(&ar).for_each(|(p, r)| *p = r + beta * *p);
        rar = rar_new;
    }
    Ok(KrylovOutcome {
        x,
        iterations,
        residuals,
    })
}
