//! Composite Gauss–Legendre quadrature.
//!
//! All analytic expectations in the crate go through this module so that the
//! oracle's error budget is dominated by the finite-difference step, not by
//! integration. Integrands with kinks (eligibility cutoffs) pass their break
//! locations explicitly and each smooth piece is integrated with its own
//! Gauss rule, which is accurate to near machine precision.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

/// Default node budget for 1-D integrals.
pub const DEFAULT_NODES_1D: usize = 2048;
/// Default per-dimension node budget for the 2-D score space.
pub const DEFAULT_NODES_2D: usize = 512;

fn rule_cache() -> &'static Mutex<HashMap<usize, std::sync::Arc<(Vec<f64>, Vec<f64>)>>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, std::sync::Arc<(Vec<f64>, Vec<f64>)>>>> =
        OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Nodes and weights of the n-point Gauss–Legendre rule on [-1, 1].
///
/// Newton iteration on the Legendre polynomial, seeded with the Chebyshev
/// angle approximation; converges in a handful of steps for all n used here.
pub fn gauss_legendre(n: usize) -> std::sync::Arc<(Vec<f64>, Vec<f64>)> {
    assert!(n >= 1);
    if let Some(r) = rule_cache().lock().unwrap().get(&n) {
        return r.clone();
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Evaluate P_n(x) and P_n'(x) by the three-term recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 1 { x } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    let arc = std::sync::Arc::new((nodes, weights));
    rule_cache().lock().unwrap().insert(n, arc.clone());
    arc
}

/// Composite quadrature settings.
#[derive(Debug, Clone, Copy)]
pub struct Quad {
    /// Total node budget across all panels of a 1-D integral.
    pub nodes_1d: usize,
    /// Per-dimension node budget for tensor-product 2-D integrals.
    pub nodes_2d: usize,
}

impl Default for Quad {
    fn default() -> Self {
        Quad {
            nodes_1d: DEFAULT_NODES_1D,
            nodes_2d: DEFAULT_NODES_2D,
        }
    }
}

impl Quad {
    /// Integrate `f` over [lo, hi], splitting at the interior breakpoints.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, lo: f64, hi: f64, breaks: &[f64], mut f: F) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        let panels = panels(lo, hi, breaks);
        let per_panel = (self.nodes_1d / panels.len()).clamp(32, 512);
        let rule = gauss_legendre(per_panel);
        let (xs, ws) = (&rule.0, &rule.1);
        let mut total = 0.0;
        for &(a, b) in &panels {
            let c = 0.5 * (b - a);
            let d = 0.5 * (b + a);
            let mut s = 0.0;
            for (x, w) in xs.iter().zip(ws.iter()) {
                s += w * f(c * x + d);
            }
            total += c * s;
        }
        total
    }

    /// Tensor-product integral over a rectangle with per-axis breakpoints.
    pub fn integrate2<F: FnMut(f64, f64) -> f64>(
        &self,
        xr: (f64, f64),
        yr: (f64, f64),
        xbreaks: &[f64],
        ybreaks: &[f64],
        mut f: F,
    ) -> f64 {
        if xr.1 <= xr.0 || yr.1 <= yr.0 {
            return 0.0;
        }
        let xp = panels(xr.0, xr.1, xbreaks);
        let yp = panels(yr.0, yr.1, ybreaks);
        // Panels are smooth (all kinks sit on panel edges), so a 64-point
        // rule per panel is already exact to machine precision for the
        // polynomial and analytic integrands used here.
        let per_x = (self.nodes_2d / xp.len()).clamp(16, 64);
        let per_y = (self.nodes_2d / yp.len()).clamp(16, 64);
        let rx = gauss_legendre(per_x);
        let ry = gauss_legendre(per_y);
        let mut total = 0.0;
        for &(ax, bx) in &xp {
            let cx = 0.5 * (bx - ax);
            let dx = 0.5 * (bx + ax);
            for &(ay, by) in &yp {
                let cy = 0.5 * (by - ay);
                let dy = 0.5 * (by + ay);
                let mut s = 0.0;
                for (x, wx) in rx.0.iter().zip(rx.1.iter()) {
                    let xv = cx * x + dx;
                    let mut sy = 0.0;
                    for (y, wy) in ry.0.iter().zip(ry.1.iter()) {
                        sy += wy * f(xv, cy * y + dy);
                    }
                    s += wx * sy;
                }
                total += cx * cy * s;
            }
        }
        total
    }
}

fn panels(lo: f64, hi: f64, breaks: &[f64]) -> Vec<(f64, f64)> {
    let mut pts: Vec<f64> = breaks
        .iter()
        .copied()
        .filter(|b| *b > lo + 1e-14 && *b < hi - 1e-14)
        .collect();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup_by(|a, b| (*a - *b).abs() < 1e-13);
    let mut out = Vec::with_capacity(pts.len() + 1);
    let mut prev = lo;
    for p in pts {
        out.push((prev, p));
        prev = p;
    }
    out.push((prev, hi));
    out
}
