//! Market-conduct-rule solvers.
//!
//! Capacity rules are solved to machine-level residuals by safeguarded
//! Newton (1-D) or damped Newton with the analytic share Jacobian (the
//! two-school system). The Myerson reserve solves the revenue first-order
//! condition. The conduct rule's derivative is represented either by an L2
//! influence function (-J^{-1} times the conduct representer) or, for the
//! Myerson rule, by a Sobolev H1 representer solved from a Sturm-Liouville
//! boundary-value problem with natural (zero-flux) end conditions.

use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::mechanism::{Meas, Mechanism};
use crate::population::{ConductRule, Rep, ScoreR};
use crate::quad::Quad;
use crate::rootfind;
use crate::{MpeError, Result};

/// Solver tolerances, overridable from the scenario file's `solver` block.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverCfg {
    pub tol: f64,
    pub max_iter: usize,
    pub grid_nodes: usize,
    pub max_condition: f64,
}

impl Default for SolverCfg {
    fn default() -> Self {
        SolverCfg { tol: 1e-12, max_iter: 200, grid_nodes: 4096, max_condition: 1e8 }
    }
}

/// Which conduct rule produced an equilibrium state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConductKind {
    Capacity,
    Myerson,
    TtcParametric,
}

/// Solved clearing parameters with diagnostics.
#[derive(Debug, Clone)]
pub struct EquilibriumState {
    pub kind: ConductKind,
    pub c0: Vec<f64>,
    /// Max |capacity residual| (capacity) or |FOC value| (Myerson).
    pub residual: f64,
    /// d(aggregate shares)/dc for capacity rules (K x dim); the scalar
    /// dG/dc = -2f(c) - c f'(c) for Myerson.
    pub jacobian: Vec<Vec<f64>>,
    pub cond_number: f64,
    pub warnings: Vec<String>,
}

/// Residual bound certified by every solve.
pub const CLEARING_RESIDUAL_TOL: f64 = 1e-10;

/// Solve the configured conduct rule at the given report measure.
pub fn solve_conduct(
    mech: &Mechanism,
    conduct: &ConductRule,
    meas: &Meas,
    cfg: &SolverCfg,
) -> Result<EquilibriumState> {
    match conduct {
        ConductRule::Capacity { q } => solve_capacity_clearing(mech, meas, q, cfg),
        ConductRule::Myerson => solve_myerson_reserve(meas, cfg),
        ConductRule::TtcParametric { q } => {
            let Mechanism::TtcTwoSchool { pi1 } = mech else {
                return Err(MpeError::Config(
                    "ttc_parametric conduct rule requires the ttc mechanism".into(),
                ));
            };
            let cuts = ttc_parametric_cutoffs(*pi1, q[0], q[1])?;
            let c0 = cuts.clearing_vector();
            let jacobian = mech.share_jacobian(&c0, meas);
            let shares = mech.aggregate_shares(&c0, meas);
            let residual =
                shares.iter().zip(q.iter()).map(|(s, qk)| (s - qk).abs()).fold(0.0, f64::max);
            let mut warnings = Vec::new();
            if cuts.never_fills {
                warnings.push("a school never fills; cutoff set to 0".into());
            }
            Ok(EquilibriumState {
                kind: ConductKind::TtcParametric,
                c0,
                residual,
                jacobian,
                cond_number: f64::NAN,
                warnings,
            })
        }
    }
}

/// Capacity clearing: solve E_P[mu_k(., c)] = q_k for all goods.
pub fn solve_capacity_clearing(
    mech: &Mechanism,
    meas: &Meas,
    q: &[f64],
    cfg: &SolverCfg,
) -> Result<EquilibriumState> {
    let k = mech.k_goods();
    if q.len() != k {
        return Err(MpeError::Config(format!("capacity vector has {} entries, need {k}", q.len())));
    }
    if q.iter().any(|x| !(*x > 0.0 && *x < 1.0)) {
        return Err(MpeError::Config("capacities must lie in (0,1)".into()));
    }
    let c0 = match mech {
        Mechanism::RandomRationing => {
            // E[c R] = q has the closed form c = q / E[R]; run the same
            // Newton anyway so the residual certificate is uniform.
            let g = |c: f64| mech.aggregate_shares(&[c], meas)[0] - q[0];
            let dg = |c: f64| mech.share_jacobian(&[c], meas)[0][0];
            let root = rootfind::newton_bisect(g, dg, 0.0, 1.0, cfg.tol, cfg.max_iter)?;
            vec![root]
        }
        Mechanism::PriceCutoff | Mechanism::SecondPriceAuction { .. } => {
            let (lo, hi) = meas.support();
            let g = |c: f64| mech.aggregate_shares(&[c], meas)[0] - q[0];
            let dg = |c: f64| mech.share_jacobian(&[c], meas)[0][0];
            let root = rootfind::newton_bisect(g, dg, lo, hi, cfg.tol, cfg.max_iter)?;
            vec![root]
        }
        Mechanism::TwoSchoolDa => {
            let g = |c: &[f64]| {
                let s = mech.aggregate_shares(c, meas);
                vec![s[0] - q[0], s[1] - q[1]]
            };
            let jac = |c: &[f64]| mech.share_jacobian(c, meas);
            rootfind::damped_newton(g, jac, &[0.5, 0.5], cfg.tol, cfg.max_iter, 30)?
        }
        Mechanism::TtcTwoSchool { .. } => {
            return Err(MpeError::Config(
                "ttc mechanism clears through the ttc_parametric conduct rule".into(),
            ))
        }
    };
    let shares = mech.aggregate_shares(&c0, meas);
    let residual = shares.iter().zip(q.iter()).map(|(s, qk)| (s - qk).abs()).fold(0.0, f64::max);
    if residual > CLEARING_RESIDUAL_TOL {
        return Err(MpeError::Convergence(format!("capacity residual {residual:.3e}")));
    }
    let jacobian = mech.share_jacobian(&c0, meas);
    let cond_number = if jacobian.len() == jacobian[0].len() {
        linalg::cond_1(&jacobian)
    } else {
        f64::NAN
    };
    if cond_number.is_finite() && cond_number > cfg.max_condition {
        return Err(MpeError::Convergence(format!(
            "clearing Jacobian condition number {cond_number:.3e}"
        )));
    }
    Ok(EquilibriumState {
        kind: ConductKind::Capacity,
        c0,
        residual,
        jacobian,
        cond_number,
        warnings: Vec::new(),
    })
}

/// Myerson optimal reserve: solve (1 - F(c)) - c f(c) = 0.
pub fn solve_myerson_reserve(meas: &Meas, cfg: &SolverCfg) -> Result<EquilibriumState> {
    let (lo, hi) = meas.support();
    let g = |c: f64| (1.0 - meas.scalar_cdf(c)) - c * meas.scalar_pdf(c);
    let dg = |c: f64| -2.0 * meas.scalar_pdf(c) - c * meas.scalar_dpdf(c);
    let brackets = rootfind::bracket_roots(g, lo + 1e-9 * (hi - lo), hi - 1e-9 * (hi - lo), 512);
    if brackets.is_empty() {
        return Err(MpeError::Convergence(
            "Myerson first-order condition has no sign change on the support interior".into(),
        ));
    }
    let mut warnings = Vec::new();
    if brackets.len() > 1 {
        warnings.push(format!(
            "Myerson FOC has {} roots in the support; returning the leftmost",
            brackets.len()
        ));
    }
    let (a, b) = brackets[0];
    let c0 = rootfind::newton_bisect(g, dg, a, b, cfg.tol, cfg.max_iter)?;
    let residual = g(c0).abs();
    if residual > CLEARING_RESIDUAL_TOL {
        return Err(MpeError::Convergence(format!("Myerson FOC residual {residual:.3e}")));
    }
    let slope = dg(c0);
    Ok(EquilibriumState {
        kind: ConductKind::Myerson,
        c0: vec![c0],
        residual,
        jacobian: vec![vec![slope]],
        cond_number: 1.0,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Influence functions of the conduct rule
// ---------------------------------------------------------------------------

/// Space tag plus evaluator for the conduct-rule derivative representer.
pub enum InfluenceFunctionC {
    L2(InfluenceL2),
    SobolevH1(SobolevRepresenter),
}

impl InfluenceFunctionC {
    pub fn space(&self) -> &'static str {
        match self {
            InfluenceFunctionC::L2(_) => "L2",
            InfluenceFunctionC::SobolevH1(_) => "SobolevH1",
        }
    }

    pub fn as_l2(&self) -> Result<&InfluenceL2> {
        match self {
            InfluenceFunctionC::L2(p) => Ok(p),
            InfluenceFunctionC::SobolevH1(_) => Err(MpeError::SpaceMismatch(
                "H1 representer routed into an L2 covariance path".into(),
            )),
        }
    }

    pub fn as_h1(&self) -> Result<&SobolevRepresenter> {
        match self {
            InfluenceFunctionC::SobolevH1(p) => Ok(p),
            InfluenceFunctionC::L2(_) => {
                Err(MpeError::SpaceMismatch("expected an H1 representer".into()))
            }
        }
    }
}

/// psi_{c0}(r) = -J0^{-1} g(r), with g the conduct representer (mu itself
/// for mechanisms whose smooth part is free of P_R).
pub struct InfluenceL2 {
    pub mech: Mechanism,
    pub c0: Vec<f64>,
    neg_j_inv: Vec<Vec<f64>>,
}

impl InfluenceL2 {
    pub fn eval(&self, rep: &Rep, meas: &Meas) -> Vec<f64> {
        let k = self.mech.k_goods();
        let g: Vec<f64> =
            (0..k).map(|i| self.mech.conduct_representer(i, rep, &self.c0, meas)).collect();
        linalg::mat_vec(&self.neg_j_inv, &g)
    }
}

/// Build the L2 influence function from a solved capacity state.
pub fn influence_function_l2(state: &EquilibriumState, mech: &Mechanism) -> Result<InfluenceL2> {
    if state.kind != ConductKind::Capacity {
        return Err(MpeError::Config("L2 influence function requires a capacity rule".into()));
    }
    let inv = linalg::invert(&state.jacobian)
        .map_err(|_| MpeError::Convergence("singular clearing Jacobian".into()))?;
    let neg_j_inv = inv.iter().map(|row| row.iter().map(|v| -v).collect()).collect();
    Ok(InfluenceL2 { mech: mech.clone(), c0: state.c0.clone(), neg_j_inv })
}

/// H1 representer of the Myerson reserve derivative, solved on a grid.
///
/// Defining property: <psi, s>_H1 = c'[s] = -K (E0[s 1{R<=c0}] + c0 f(c0) s(c0))
/// with K = (2 f(c0) + c0 f'(c0))^{-1}. The representer solves
///   psi f - (psi' f)' = -K (1{r<=c0} f + c0 f(c0) delta(r - c0))
/// with natural conditions psi' = 0 at both support endpoints; the Dirac
/// source appears as the flux jump [psi' f] = +K c0 f(c0) across c0.
pub struct SobolevRepresenter {
    pub nodes: Vec<f64>,
    pub psi: Vec<f64>,
    pub f_nodes: Vec<f64>,
    pub c0: f64,
    pub k_const: f64,
    /// Index of the node placed exactly at c0.
    pub jump_index: usize,
}

/// Closed-form derivative functional of the Myerson reserve along the
/// report-law path f(1 + theta s).
pub fn myerson_cprime_closed(meas: &Meas, c0: f64, s: &dyn ScoreR, quad: &Quad) -> f64 {
    let (lo, hi) = meas.support();
    let f_c = meas.scalar_pdf(c0);
    let df_c = meas.scalar_dpdf(c0);
    let k = 1.0 / (2.0 * f_c + c0 * df_c);
    let e_below = quad.integrate(lo, c0, &[], |r| s.eval(&Rep::scalar(r)) * meas.scalar_pdf(r));
    let _ = hi;
    -k * (e_below + c0 * f_c * s.eval(&Rep::scalar(c0)))
}

pub fn sturm_liouville_representer(
    meas: &Meas,
    c0: f64,
    grid_nodes: usize,
) -> Result<SobolevRepresenter> {
    let (lo, hi) = meas.support();
    if !(c0 > lo && c0 < hi) {
        return Err(MpeError::Domain(format!("reserve {c0} not interior to [{lo}, {hi}]")));
    }
    let f_c = meas.scalar_pdf(c0);
    let df_c = meas.scalar_dpdf(c0);
    let denom = 2.0 * f_c + c0 * df_c;
    if denom.abs() < 1e-12 {
        return Err(MpeError::Domain("K = (2f + c f')^{-1} is not finite".into()));
    }
    let k_const = 1.0 / denom;

    // Two uniform segments with c0 as a shared node, so the flux jump is
    // imposed exactly at the reserve.
    let frac = ((c0 - lo) / (hi - lo)).clamp(0.05, 0.95);
    let n_left = ((grid_nodes as f64 * frac).round() as usize).clamp(8, grid_nodes - 8);
    let n_right = grid_nodes - n_left;
    let hl = (c0 - lo) / n_left as f64;
    let hr = (hi - c0) / n_right as f64;
    let n = grid_nodes + 1;
    let mut nodes = Vec::with_capacity(n);
    for i in 0..=n_left {
        nodes.push(lo + hl * i as f64);
    }
    for i in 1..=n_right {
        nodes.push(c0 + hr * i as f64);
    }
    nodes[n_left] = c0;
    let jump_index = n_left;

    let f_nodes: Vec<f64> = nodes.iter().map(|&r| meas.scalar_pdf(r)).collect();
    let f_half = |a: f64, b: f64| meas.scalar_pdf(0.5 * (a + b));

    // Tridiagonal system in conservative (flux) form.
    let mut sub = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut sup = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for i in 0..n {
        let h_left = if i == 0 { 0.0 } else { nodes[i] - nodes[i - 1] };
        let h_right = if i == n - 1 { 0.0 } else { nodes[i + 1] - nodes[i] };
        let vol = 0.5 * (h_left + h_right);
        let f_l = if i == 0 { 0.0 } else { f_half(nodes[i - 1], nodes[i]) };
        let f_r = if i == n - 1 { 0.0 } else { f_half(nodes[i], nodes[i + 1]) };
        // psi_i f_i - (flux_r - flux_l)/vol = rhs_i, zero flux at the ends.
        diag[i] = f_nodes[i];
        if i > 0 {
            sub[i] = -f_l / (h_left * vol);
            diag[i] += f_l / (h_left * vol);
        }
        if i < n - 1 {
            sup[i] = -f_r / (h_right * vol);
            diag[i] += f_r / (h_right * vol);
        }
        // Control-volume average of -K f 1{r <= c0}.
        let ind = if i < jump_index {
            1.0
        } else if i == jump_index {
            0.5 * h_left / vol
        } else {
            0.0
        };
        rhs[i] = -k_const * f_nodes[i] * ind;
        if i == jump_index {
            rhs[i] += -k_const * c0 * f_c / vol;
        }
    }
    let psi = thomas(&sub, &diag, &sup, &rhs)?;
    Ok(SobolevRepresenter { nodes, psi, f_nodes, c0, k_const, jump_index })
}

impl SobolevRepresenter {
    /// <psi, s>_H1 = E0[psi s] + E0[psi' s'] on the solver grid. The level
    /// term uses the trapezoid rule; the derivative term uses exact interval
    /// increments of psi against midpoint values of f and s', so the kink at
    /// c0 never gets differenced across.
    pub fn h1_inner(&self, s: &dyn ScoreR) -> Result<f64> {
        let n = self.nodes.len();
        let mut level = 0.0;
        for i in 0..n {
            let h_left = if i == 0 { 0.0 } else { self.nodes[i] - self.nodes[i - 1] };
            let h_right = if i == n - 1 { 0.0 } else { self.nodes[i + 1] - self.nodes[i] };
            let w = 0.5 * (h_left + h_right);
            level += w * self.psi[i] * s.eval(&Rep::scalar(self.nodes[i])) * self.f_nodes[i];
        }
        let mut deriv = 0.0;
        for i in 0..n - 1 {
            let mid = 0.5 * (self.nodes[i] + self.nodes[i + 1]);
            let ds = s.deriv(&Rep::scalar(mid)).ok_or_else(|| {
                MpeError::Config("H1 pairing requires the score derivative".into())
            })?;
            let fm = 0.5 * (self.f_nodes[i] + self.f_nodes[i + 1]);
            deriv += fm * ds * (self.psi[i + 1] - self.psi[i]);
        }
        Ok(level + deriv)
    }

    /// psi' on each side of a node (one-sided differences).
    pub fn dpsi(&self, i: usize) -> (f64, f64) {
        let n = self.nodes.len();
        let left = if i == 0 {
            0.0
        } else {
            (self.psi[i] - self.psi[i - 1]) / (self.nodes[i] - self.nodes[i - 1])
        };
        let right = if i == n - 1 {
            0.0
        } else {
            (self.psi[i + 1] - self.psi[i]) / (self.nodes[i + 1] - self.nodes[i])
        };
        (left, right)
    }
}

/// Verify the defining property against the closed-form functional on a set
/// of smooth polynomial test scores; errors suggest a finer grid.
pub fn verify_representer(
    rep: &SobolevRepresenter,
    meas: &Meas,
    quad: &Quad,
) -> Result<()> {
    let mix = match meas.dist {
        crate::population::ReportDist::Scalar(m) => m,
        _ => return Err(MpeError::Config("H1 representer requires a scalar report space".into())),
    };
    let tests: [&[f64]; 5] =
        [&[0.0, 1.0], &[0.0, 0.0, 1.0], &[0.0, 1.0, -1.0], &[0.0, 0.0, 0.0, 1.0], &[0.5, -2.0, 3.0]];
    for coefs in tests {
        let s = crate::population::PolyReportScore::new(mix, coefs, quad);
        let lhs = rep.h1_inner(&s)?;
        let rhs = myerson_cprime_closed(meas, rep.c0, &s, quad);
        let tol = 1e-4 * (1.0 + rhs.abs());
        if (lhs - rhs).abs() > tol {
            return Err(MpeError::Resolution(format!(
                "H1 defining property off by {:.3e} (tol {:.1e}); increase grid_nodes",
                (lhs - rhs).abs(),
                tol
            )));
        }
    }
    Ok(())
}

fn thomas(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    if denom.abs() < 1e-300 {
        return Err(MpeError::Convergence("singular tridiagonal system".into()));
    }
    c[0] = sup[0] / denom;
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - sub[i] * c[i - 1];
        if denom.abs() < 1e-300 {
            return Err(MpeError::Convergence("singular tridiagonal system".into()));
        }
        c[i] = sup[i] / denom;
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / denom;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Parametric TTC
// ---------------------------------------------------------------------------

/// Cutoffs of the two-school parametric TTC. Fields are named by content:
/// `v1_cut` is the V1-priority cutoff (identical in both rounds because the
/// filled school's frontier freezes), `v2_round1` grants school 1 through V2
/// priority, `v2_round2` grants school 2.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TtcCutoffs {
    pub v1_cut: f64,
    pub v2_round1: f64,
    pub v2_round2: f64,
    pub relabeled: bool,
    pub never_fills: bool,
    pub stop_time: f64,
}

impl TtcCutoffs {
    pub fn clearing_vector(&self) -> Vec<f64> {
        vec![self.v1_cut, self.v2_round1, self.v2_round2]
    }
}

/// Solve the parametric TTC dynamic system for uniform independent
/// priorities on [0,1]^2 and preference shares (pi1, pi2).
///
/// The TTC path is gamma(t) = (1 - t, 1 - (pi2/pi1) t); the first stopping
/// time solves the demand-at-path capacity equation pi1 (1 - g1 g2) = q1 by
/// 1-D root finding, and the second-round cutoff comes from the residual
/// economy's capacity equation in closed form.
pub fn ttc_parametric_cutoffs(pi1: f64, q1: f64, q2: f64) -> Result<TtcCutoffs> {
    if !(pi1 > 0.0 && pi1 < 1.0) {
        return Err(MpeError::Config("pi1 must lie in (0,1)".into()));
    }
    let pi2 = 1.0 - pi1;
    // Canonical ordering: school 1 fills first iff q1/pi1 <= q2/pi2.
    if q1 / pi1 > q2 / pi2 {
        let sw = ttc_parametric_cutoffs(pi2, q2, q1)?;
        return Ok(TtcCutoffs { relabeled: true, ..sw });
    }
    let slope = pi2 / pi1;
    let t_max = 1.0f64.min(1.0 / slope);
    let demand1 = |t: f64| pi1 * (1.0 - (1.0 - t) * (1.0 - slope * t));
    if demand1(t_max) < q1 {
        // School 1 never fills along the path.
        return Ok(TtcCutoffs {
            v1_cut: 0.0,
            v2_round1: 0.0,
            v2_round2: 0.0,
            relabeled: false,
            never_fills: true,
            stop_time: t_max,
        });
    }
    let ddemand1 = |t: f64| pi1 * ((1.0 - slope * t) + slope * (1.0 - t));
    let t1 = rootfind::newton_bisect(|t| demand1(t) - q1, ddemand1, 0.0, t_max, 1e-14, 200)?;
    let v1_cut = 1.0 - t1;
    let v2_round1 = 1.0 - slope * t1;
    // Residual economy: everyone left sits in [0, v1_cut) x [0, v2_round1);
    // school 2 already enrolled pi2 q1 / pi1 in round 1 and fills the rest
    // by descending V2 over the full residual rectangle.
    let filled_round1 = pi2 * q1 / pi1;
    let mut never_fills = false;
    let mut v2_round2 = v2_round1 - (q2 - filled_round1) / v1_cut.max(1e-12);
    if v2_round2 < 0.0 {
        v2_round2 = 0.0;
        never_fills = true;
    }
    Ok(TtcCutoffs { v1_cut, v2_round1, v2_round2, relabeled: false, never_fills, stop_time: t1 })
}

/// Central finite differences of the aggregate shares in c. Used only in
/// tests as a cross-check of the analytic Jacobian.
pub fn clearing_jacobian_fd(mech: &Mechanism, meas: &Meas, c0: &[f64]) -> Vec<Vec<f64>> {
    let k = mech.k_goods();
    let dim = mech.clearing_dim();
    let mut jac = vec![vec![0.0; dim]; k];
    for j in 0..dim {
        let h = 1e-5 * (1.0 + c0[j].abs());
        let mut cp = c0.to_vec();
        let mut cm = c0.to_vec();
        cp[j] += h;
        cm[j] -= h;
        let sp = mech.aggregate_shares(&cp, meas);
        let sm = mech.aggregate_shares(&cm, meas);
        for i in 0..k {
            jac[i][j] = (sp[i] - sm[i]) / (2.0 * h);
        }
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::{Density1, Mixture, ReportDist};

    fn scalar_dist(d: Density1) -> ReportDist {
        ReportDist::Scalar(Mixture::new(vec![(1.0, d)]).unwrap())
    }

    #[test]
    fn price_cutoff_uniform_quantile() {
        let dist = scalar_dist(Density1::Uniform { lo: 0.0, hi: 1.0 });
        let meas = Meas::new(&dist);
        let st = solve_capacity_clearing(
            &Mechanism::PriceCutoff,
            &meas,
            &[0.3],
            &SolverCfg::default(),
        )
        .unwrap();
        assert!((st.c0[0] - 0.7).abs() < 1e-12);
        assert!(st.residual <= CLEARING_RESIDUAL_TOL);
    }

    #[test]
    fn rationing_closed_form() {
        let dist = ReportDist::BinaryDemand { p1: 0.8 };
        let meas = Meas::new(&dist);
        let st = solve_capacity_clearing(
            &Mechanism::RandomRationing,
            &meas,
            &[0.4],
            &SolverCfg::default(),
        )
        .unwrap();
        assert!((st.c0[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn myerson_uniform_cases() {
        let dist = scalar_dist(Density1::Uniform { lo: 0.0, hi: 1.0 });
        let meas = Meas::new(&dist);
        let st = solve_myerson_reserve(&meas, &SolverCfg::default()).unwrap();
        assert!((st.c0[0] - 0.5).abs() < 1e-12);
        // Scale equivariance on [0, 2].
        let dist = scalar_dist(Density1::Uniform { lo: 0.0, hi: 2.0 });
        let meas = Meas::new(&dist);
        let st = solve_myerson_reserve(&meas, &SolverCfg::default()).unwrap();
        assert!((st.c0[0] - 1.0).abs() < 1e-12);
        // f(r) = 2r on [0,1]: FOC 1 - c^2 - 2c^2 = 0 => c = 1/sqrt(3).
        let dist = scalar_dist(Density1::Linear { a: 0.0, b: 2.0, lo: 0.0, hi: 1.0 });
        let meas = Meas::new(&dist);
        let st = solve_myerson_reserve(&meas, &SolverCfg::default()).unwrap();
        assert!((st.c0[0] - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        // Recorded slope dG/dc = -2f - c f' at the root.
        let c = st.c0[0];
        assert!((st.jacobian[0][0] - (-4.0 * c - 2.0 * c)).abs() < 1e-10);
    }

    #[test]
    fn l2_influence_price_cutoff_is_indicator_over_density() {
        let dist = scalar_dist(Density1::Uniform { lo: 0.0, hi: 1.0 });
        let meas = Meas::new(&dist);
        let mech = Mechanism::PriceCutoff;
        let st =
            solve_capacity_clearing(&mech, &meas, &[0.3], &SolverCfg::default()).unwrap();
        let psi = influence_function_l2(&st, &mech).unwrap();
        // f(c0) = 1: psi(r) = 1{r > 0.7}.
        assert!((psi.eval(&Rep::scalar(0.9), &meas)[0] - 1.0).abs() < 1e-10);
        assert!(psi.eval(&Rep::scalar(0.3), &meas)[0].abs() < 1e-12);
    }

    #[test]
    fn sl_representer_uniform_closed_form() {
        // R ~ U[0,1], c0 = 0.5, s(r) = r - 1/2:
        // c'[s] = -K (E[s 1{R<=1/2}] + 0) = -(1/2)(-1/8) = +1/16.
        let dist = scalar_dist(Density1::Uniform { lo: 0.0, hi: 1.0 });
        let meas = Meas::new(&dist);
        let quad = Quad::default();
        let rep = sturm_liouville_representer(&meas, 0.5, 4096).unwrap();
        verify_representer(&rep, &meas, &quad).unwrap();
        let mix = match &dist {
            ReportDist::Scalar(m) => m,
            _ => unreachable!(),
        };
        let s = crate::population::PolyReportScore::new(mix, &[0.0, 1.0], &quad);
        let inner = rep.h1_inner(&s).unwrap();
        assert!(
            (inner - 1.0 / 16.0).abs() < 1e-6,
            "H1 pairing {inner} should equal +1/16"
        );
        // Zero score pairs to zero.
        let z = crate::population::ZeroScore;
        assert!(rep.h1_inner(&z).unwrap().abs() < 1e-14);
    }

    #[test]
    fn sl_richardson_consistency() {
        let dist = scalar_dist(Density1::Linear { a: 0.7, b: 0.6, lo: 0.0, hi: 1.0 });
        let meas = Meas::new(&dist);
        let quad = Quad::default();
        let st = solve_myerson_reserve(&meas, &SolverCfg::default()).unwrap();
        let c0 = st.c0[0];
        let mix = match &dist {
            ReportDist::Scalar(m) => m,
            _ => unreachable!(),
        };
        let s = crate::population::PolyReportScore::new(mix, &[0.0, 1.0, 0.5], &quad);
        let r1 = sturm_liouville_representer(&meas, c0, 2048).unwrap();
        let r2 = sturm_liouville_representer(&meas, c0, 4096).unwrap();
        let v1 = r1.h1_inner(&s).unwrap();
        let v2 = r2.h1_inner(&s).unwrap();
        let truth = myerson_cprime_closed(&meas, c0, &s, &quad);
        assert!((v2 - truth).abs() <= (v1 - truth).abs() + 1e-12);
        assert!((v2 - truth).abs() < 1e-6);
    }

    #[test]
    fn ttc_cutoffs_symmetric_and_pinned() {
        // pi1 = pi2 = 0.5: path slope 1.
        let c = ttc_parametric_cutoffs(0.5, 0.2, 0.2).unwrap();
        assert!((c.v1_cut - c.v2_round1).abs() < 1e-12);
        // q1 -> 0+: t -> 0+, cutoff -> 1.
        let c = ttc_parametric_cutoffs(0.5, 1e-9, 0.2).unwrap();
        assert!(c.v1_cut > 0.9999);
        // Catalog values: pi1 = 0.6, q = (0.2, 0.2): t1 = (5 - sqrt(17))/4.
        let c = ttc_parametric_cutoffs(0.6, 0.2, 0.2).unwrap();
        let t1 = (5.0 - 17f64.sqrt()) / 4.0;
        assert!((c.stop_time - t1).abs() < 1e-12);
        assert!((c.v1_cut - (1.0 - t1)).abs() < 1e-12);
        assert!((c.v2_round1 - (1.0 - 2.0 / 3.0 * t1)).abs() < 1e-12);
        assert!(!c.never_fills && !c.relabeled);
    }
}
