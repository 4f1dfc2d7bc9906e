//! Scalar and small-system root finding used by the clearing solvers.

use crate::{MpeError, Result};

/// Safeguarded Newton on a bracket: Newton steps when they stay inside the
/// current bracket, bisection otherwise. Requires f(lo) and f(hi) to have
/// opposite signs.
pub fn newton_bisect<F, D>(
    mut f: F,
    mut df: D,
    lo: f64,
    hi: f64,
    tol: f64,
    max_iter: usize,
) -> Result<f64>
where
    F: FnMut(f64) -> f64,
    D: FnMut(f64) -> f64,
{
    let (mut a, mut b) = (lo, hi);
    let (fa, fb) = (f(a), f(b));
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa * fb > 0.0 {
        return Err(MpeError::InfeasibleCapacity(format!(
            "no sign change on [{a}, {b}] (f(lo)={fa:.3e}, f(hi)={fb:.3e})"
        )));
    }
    let mut sign_a = fa.signum();
    let mut x = 0.5 * (a + b);
    for _ in 0..max_iter {
        let fx = f(x);
        if fx.abs() <= tol {
            return Ok(x);
        }
        if fx.signum() == sign_a {
            a = x;
        } else {
            b = x;
        }
        let d = df(x);
        let newton = x - fx / d;
        x = if d != 0.0 && newton > a && newton < b {
            newton
        } else {
            0.5 * (a + b)
        };
        if (b - a).abs() < 1e-16 * (1.0 + x.abs()) {
            // Bracket collapsed; accept if the residual is small enough.
            let fx = f(x);
            if fx.abs() <= tol.max(1e-12) {
                return Ok(x);
            }
        }
        sign_a = f(a).signum();
    }
    let fx = f(x);
    if fx.abs() <= tol {
        Ok(x)
    } else {
        Err(MpeError::Convergence(format!(
            "newton_bisect: residual {fx:.3e} after {max_iter} iterations"
        )))
    }
}

/// Scan [lo, hi] on a uniform grid and return all sign-change brackets.
pub fn bracket_roots<F: FnMut(f64) -> f64>(
    mut f: F,
    lo: f64,
    hi: f64,
    n: usize,
) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut prev_x = lo;
    let mut prev_f = f(lo);
    for i in 1..=n {
        let x = lo + (hi - lo) * i as f64 / n as f64;
        let fx = f(x);
        if prev_f == 0.0 {
            out.push((prev_x, prev_x));
        } else if prev_f * fx < 0.0 {
            out.push((prev_x, x));
        }
        prev_x = x;
        prev_f = fx;
    }
    out
}

/// Damped Newton for small square systems. Halves the step up to
/// `max_halvings` times whenever the residual norm fails to decrease.
pub fn damped_newton<G, J>(
    mut g: G,
    mut jac: J,
    x0: &[f64],
    tol: f64,
    max_iter: usize,
    max_halvings: usize,
) -> Result<Vec<f64>>
where
    G: FnMut(&[f64]) -> Vec<f64>,
    J: FnMut(&[f64]) -> Vec<Vec<f64>>,
{
    let mut x = x0.to_vec();
    let mut r = g(&x);
    let mut rnorm = inf_norm(&r);
    for _ in 0..max_iter {
        if rnorm <= tol {
            return Ok(x);
        }
        let j = jac(&x);
        let step = crate::linalg::solve(&j, &r).map_err(|e| {
            MpeError::Convergence(format!("singular Jacobian in damped Newton: {e}"))
        })?;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=max_halvings {
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(xi, si)| xi - lambda * si).collect();
            let rc = g(&cand);
            let rc_norm = inf_norm(&rc);
            if rc_norm < rnorm || rc_norm <= tol {
                x = cand;
                r = rc;
                rnorm = rc_norm;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(MpeError::Convergence(format!(
                "damped Newton stalled at residual {rnorm:.3e}"
            )));
        }
    }
    if rnorm <= tol {
        Ok(x)
    } else {
        Err(MpeError::Convergence(format!(
            "damped Newton: residual {rnorm:.3e} after {max_iter} iterations"
        )))
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_root() {
        let r = newton_bisect(|x| x * x - 2.0, |x| 2.0 * x, 0.0, 2.0, 1e-14, 200).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn no_bracket_is_error() {
        let e = newton_bisect(|x| x * x + 1.0, |x| 2.0 * x, -1.0, 1.0, 1e-12, 100);
        assert!(e.is_err());
    }

    #[test]
    fn system_root() {
        // G(x, y) = (x + y - 3, x*y - 2) has root (1, 2) and (2, 1).
        let g = |v: &[f64]| vec![v[0] + v[1] - 3.0, v[0] * v[1] - 2.0];
        let j = |v: &[f64]| vec![vec![1.0, 1.0], vec![v[1], v[0]]];
        let x = damped_newton(g, j, &[0.5, 2.5], 1e-13, 200, 30).unwrap();
        assert!((x[0] + x[1] - 3.0).abs() < 1e-12);
        assert!((x[0] * x[1] - 2.0).abs() < 1e-12);
    }
}
