//! Components of the equilibrium-adjusted outcome: the welfare gradient in
//! the clearing parameters (boundary + inframarginal terms), local treatment
//! effects at eligibility margins (exact or estimated by local-linear RDD),
//! the auction's competition externality (order-statistic form plus the
//! inverse-probability-weighted pair estimator), the market-conduct
//! externality, and the assembled per-agent decomposition.

use crate::clearing::{EquilibriumState, InfluenceFunctionC, InfluenceL2, SobolevRepresenter};
use crate::mechanism::{Meas, Mechanism};
use crate::population::{AgentTable, Rep, ScenarioSpec};
use crate::{MpeError, Result};

/// Conditional mean provider m_a(r). Oracle mode evaluates the scenario's
/// closed forms; the welfare-functional pipeline substitutes the conditional
/// mean of an influence function.
pub trait CondMean: Sync {
    fn m(&self, a: usize, rep: &Rep) -> f64;
}

/// m_a(r) from the scenario's specified outcome law.
pub struct OracleMean<'a> {
    pub spec: &'a ScenarioSpec,
}

impl CondMean for OracleMean<'_> {
    fn m(&self, a: usize, rep: &Rep) -> f64 {
        self.spec.m_a(a, rep)
    }
}

/// Closure-backed conditional mean.
pub struct FnMean<F: Fn(usize, &Rep) -> f64 + Sync>(pub F);

impl<F: Fn(usize, &Rep) -> f64 + Sync> CondMean for FnMean<F> {
    fn m(&self, a: usize, rep: &Rep) -> f64 {
        (self.0)(a, rep)
    }
}

// ---------------------------------------------------------------------------
// Welfare gradient
// ---------------------------------------------------------------------------

/// Per-margin record of the boundary (RDD) term.
#[derive(Debug, Clone)]
pub struct MarginRecord {
    pub c_index: usize,
    /// Cutoff location on the report axis.
    pub location: f64,
    /// Mass of reallocated agents on the boundary slice (eligible density).
    pub density: f64,
    /// Average outcome jump of reallocated agents across the boundary.
    pub mean_jump: f64,
    /// Signed contribution to the gradient component.
    pub boundary_term: f64,
}

/// Gradient of fixed-population welfare in the clearing parameters.
#[derive(Debug, Clone)]
pub struct WelfareGradient {
    pub grad: Vec<f64>,
    pub inframarginal: Vec<f64>,
    pub boundary: Vec<f64>,
    pub margins: Vec<MarginRecord>,
}

/// Oracle-mode welfare gradient from the arm decomposition:
/// sum_a E[m_a grad_c h_a 1{elig}] + boundary mean-jumps times densities.
pub fn welfare_gradient(
    mech: &Mechanism,
    c0: &[f64],
    meas: &Meas,
    m: &dyn CondMean,
) -> Result<WelfareGradient> {
    let dim = mech.clearing_dim();
    let mut infra = vec![0.0; dim];
    let mut boundary = vec![0.0; dim];
    let mut density = vec![0.0; dim];
    let mut has_margin = vec![false; dim];
    for d in 0..mech.disc_count() {
        for arm in mech.arms(d) {
            let f = |rep: &Rep| m.m(arm.alloc, rep);
            let gi = mech.arm_inframarginal_grad(d, &arm, c0, meas, &f);
            for (j, v) in gi.iter().enumerate() {
                infra[j] += v;
            }
            for (j, v) in mech.arm_boundary_contribs(d, &arm, c0, meas, &f) {
                boundary[j] += v;
                has_margin[j] = true;
            }
            // Losing-side slice mass (h included) at each margin.
            for (ci, cd) in arm.conds.iter().enumerate() {
                if cd.above {
                    density[cd.c_index] += mech.arm_cond_slice(d, &arm, ci, c0, meas, |_| 1.0);
                }
            }
        }
    }
    let mut margins = Vec::new();
    for j in 0..dim {
        if !has_margin[j] {
            continue;
        }
        if density[j] <= 1e-12 {
            return Err(MpeError::GradientUndefined(format!(
                "degenerate boundary density at clearing component {j}"
            )));
        }
        margins.push(MarginRecord {
            c_index: j,
            location: c0[j],
            density: density[j],
            mean_jump: -boundary[j] / density[j],
            boundary_term: boundary[j],
        });
    }
    let grad = infra.iter().zip(boundary.iter()).map(|(a, b)| a + b).collect();
    Ok(WelfareGradient { grad, inframarginal: infra, boundary, margins })
}

/// Estimated-mode welfare gradient: the inframarginal term is the sample
/// average of y * grad_c h / h at each agent's realized arm, and each
/// boundary term is a pooled local-linear RDD jump estimate multiplied by
/// the analytic slice density.
pub fn welfare_gradient_estimated(
    mech: &Mechanism,
    c0: &[f64],
    meas: &Meas,
    agents: &AgentTable,
    bw_scale: f64,
) -> Result<WelfareGradient> {
    let dim = mech.clearing_dim();
    let n = agents.len();
    let mut infra = vec![0.0; dim];
    for i in 0..n {
        let rep = &agents.rep[i];
        for arm in mech.arms(rep.d) {
            if arm.alloc == agents.a[i] && arm_holds(&arm, rep, c0) {
                let h = arm.smooth.h(rep, c0, meas);
                if h > 0.0 {
                    for (j, item) in infra.iter_mut().enumerate() {
                        *item += agents.y[i] * arm.smooth.grad_c(j) / h / n as f64;
                    }
                }
                break;
            }
        }
    }
    let mut boundary = vec![0.0; dim];
    let mut margins = Vec::new();
    for j in 0..dim {
        let coords = margin_coords(mech, j);
        if coords.is_empty() {
            continue;
        }
        let coord = coords[0];
        let running: Vec<f64> = agents.rep.iter().map(|r| r.v[coord] - c0[j]).collect();
        let jump = rdd_local_linear(&running, &agents.y, bw_scale)?;
        // Total slice density (all report types) at the cutoff.
        let f_tot = meas.dist.coord_pdf(coord, c0[j]) * tilt_factor_slice(meas, coord, c0[j]);
        boundary[j] = -jump.gap * f_tot;
        margins.push(MarginRecord {
            c_index: j,
            location: c0[j],
            density: f_tot,
            mean_jump: jump.gap,
            boundary_term: boundary[j],
        });
    }
    let grad = infra.iter().zip(boundary.iter()).map(|(a, b)| a + b).collect();
    Ok(WelfareGradient { grad, inframarginal: infra, boundary, margins })
}

fn tilt_factor_slice(_meas: &Meas, _coord: usize, _x: f64) -> f64 {
    // Estimated mode always runs at the baseline measure.
    1.0
}

fn arm_holds(arm: &crate::mechanism::Arm, rep: &Rep, c: &[f64]) -> bool {
    arm.conds.iter().all(|cd| {
        if cd.above {
            rep.v[cd.coord] >= c[cd.c_index]
        } else {
            rep.v[cd.coord] < c[cd.c_index]
        }
    })
}

/// Continuous coordinates gated by clearing component j.
fn margin_coords(mech: &Mechanism, j: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for d in 0..mech.disc_count() {
        for arm in mech.arms(d) {
            for cd in &arm.conds {
                if cd.c_index == j && !out.contains(&cd.coord) {
                    out.push(cd.coord);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Local treatment effects at margins
// ---------------------------------------------------------------------------

/// Identifies one eligibility margin: clearing component j, and optionally a
/// specific reallocation group (from, to) for school mechanisms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MarginId {
    pub c_index: usize,
    pub group: Option<(usize, usize)>,
}

/// Exact boundary treatment effect tau at a margin (oracle mode): the mean
/// outcome jump for reallocated agents, m_to - m_from at the cutoff.
pub fn local_tau_oracle(
    mech: &Mechanism,
    c0: &[f64],
    meas: &Meas,
    m: &dyn CondMean,
    margin: MarginId,
) -> Result<f64> {
    match margin.group {
        None => {
            let g = welfare_gradient(mech, c0, meas, m)?;
            let rec = g
                .margins
                .iter()
                .find(|r| r.c_index == margin.c_index)
                .ok_or_else(|| MpeError::Domain(format!("no margin at component {}", margin.c_index)))?;
            // The pooled RDD estimand: outcome jump from the ineligible to
            // the eligible side of the cutoff.
            Ok(rec.mean_jump)
        }
        Some((from, to)) => {
            let (rho, rt) = rho_tau_group(mech, c0, meas, m, margin.c_index, from, to)?;
            if rho <= 1e-12 {
                return Err(MpeError::Domain(format!(
                    "no agents reallocated {from}->{to} at component {}",
                    margin.c_index
                )));
            }
            Ok(rt / rho)
        }
    }
}

/// (rho_{from->to}, rho * tau) at margin j: slice mass of agents moving from
/// `from` to `to` as c_j rises, and the associated welfare term.
fn rho_tau_group(
    mech: &Mechanism,
    c0: &[f64],
    meas: &Meas,
    m: &dyn CondMean,
    j: usize,
    from: usize,
    to: usize,
) -> Result<(f64, f64)> {
    let mut rho = 0.0;
    let mut rho_tau = 0.0;
    for d in 0..mech.disc_count() {
        // Gaining arms for `to` with a below-condition on j; the agents on
        // that slice held `from` on the other side.
        for arm in mech.arms(d) {
            if arm.alloc != to {
                continue;
            }
            for (ci, cd) in arm.conds.iter().enumerate() {
                if cd.c_index == j && !cd.above {
                    // Verify the above-side allocation for this type is `from`:
                    // evaluate the allocation just above the cutoff.
                    if slice_from_alloc(mech, d, &arm, ci, c0) != Some(from) {
                        continue;
                    }
                    let mass = mech.arm_cond_slice(d, &arm, ci, c0, meas, |_| 1.0);
                    let jump = mech.arm_cond_slice(d, &arm, ci, c0, meas, |rep: &Rep| {
                        m.m(to, rep) - m.m(from, rep)
                    });
                    rho += mass;
                    rho_tau += jump;
                }
            }
        }
    }
    Ok((rho, rho_tau))
}

/// Allocation held by agents on the other (above) side of a gaining arm's
/// boundary condition, probed at a representative interior point. Only used
/// for deterministic school mechanisms, whose arms partition the space.
fn slice_from_alloc(
    mech: &Mechanism,
    d: usize,
    arm: &crate::mechanism::Arm,
    cond_idx: usize,
    c: &[f64],
) -> Option<usize> {
    let cd = arm.conds[cond_idx];
    let eps = 1e-7;
    // Build a probe respecting the other conditions (midpoints of bounds).
    let mut v = [0.0f64; 2];
    for coord in 0..2 {
        let (lo, hi) = arm.coord_bounds(coord, (0.0, 1.0), c);
        v[coord] = 0.5 * (lo + hi.min(1.0));
    }
    v[cd.coord] = c[cd.c_index] + eps;
    let rep = Rep { d, v };
    mech.arms(d).into_iter().find(|other| arm_holds(other, &rep, c)).map(|a| a.alloc)
}

/// The two-school reallocation table: (from, to, rho, tau) for the four
/// primary margins.
pub fn two_school_rho_tau(
    mech: &Mechanism,
    c0: &[f64],
    meas: &Meas,
    m: &dyn CondMean,
) -> Result<Vec<(usize, usize, f64, f64)>> {
    let mut out = Vec::new();
    for (j, from, to) in [(0, 1, 0), (0, 1, 2), (1, 2, 0), (1, 2, 1)] {
        let (rho, rho_tau) = rho_tau_group(mech, c0, meas, m, j, from, to)?;
        let tau = if rho > 1e-12 { rho_tau / rho } else { 0.0 };
        out.push((from, to, rho, tau));
    }
    Ok(out)
}

/// Social externality values v = (J^{-1})^T grad U for the school system;
/// the closed-form combination of rho/tau building blocks.
pub fn school_externality_values(state: &EquilibriumState, grad: &WelfareGradient) -> Result<Vec<f64>> {
    let jt: Vec<Vec<f64>> = (0..state.jacobian[0].len())
        .map(|j| (0..state.jacobian.len()).map(|i| state.jacobian[i][j]).collect())
        .collect();
    crate::linalg::solve(&jt, &grad.grad)
}

// ---------------------------------------------------------------------------
// Estimated-mode RDD
// ---------------------------------------------------------------------------

/// Local-linear RDD fit: intercept gap at zero with a plug-in standard error.
#[derive(Debug, Clone, Copy)]
pub struct RddFit {
    pub gap: f64,
    pub se: f64,
    pub bandwidth: f64,
    pub n_left: usize,
    pub n_right: usize,
}

/// Local-linear regression on each side of zero with a triangular kernel and
/// rule-of-thumb bandwidth 1.06 sigma n^{-1/5} (scaled).
pub fn rdd_local_linear(running: &[f64], y: &[f64], bw_scale: f64) -> Result<RddFit> {
    let n = running.len();
    if n < 100 {
        return Err(MpeError::Estimation("too few observations for RDD".into()));
    }
    let mean = running.iter().sum::<f64>() / n as f64;
    let var = running.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let bw = (1.06 * var.sqrt() * (n as f64).powf(-0.2) * bw_scale).max(1e-9);
    let side = |right: bool| -> Result<(f64, f64, usize)> {
        let mut s0 = 0.0;
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        let mut t0 = 0.0;
        let mut t1 = 0.0;
        let mut idx = Vec::new();
        for i in 0..n {
            let x = running[i];
            let inside = if right { (0.0..=bw).contains(&x) } else { (-bw..0.0).contains(&x) };
            if !inside {
                continue;
            }
            let w = 1.0 - x.abs() / bw;
            s0 += w;
            s1 += w * x;
            s2 += w * x * x;
            t0 += w * y[i];
            t1 += w * x * y[i];
            idx.push((i, w));
        }
        if idx.len() < 50 {
            return Err(MpeError::Estimation(format!(
                "only {} observations inside the bandwidth on one side",
                idx.len()
            )));
        }
        let det = s0 * s2 - s1 * s1;
        let alpha = (s2 * t0 - s1 * t1) / det;
        let beta = (s0 * t1 - s1 * t0) / det;
        // Heteroskedasticity-robust intercept variance.
        let mut v = 0.0;
        for &(i, w) in &idx {
            let e = y[i] - alpha - beta * running[i];
            let l = w * (s2 - s1 * running[i]) / det;
            v += l * l * e * e;
        }
        Ok((alpha, v, idx.len()))
    };
    let (al, vl, nl) = side(false)?;
    let (ar, vr, nr) = side(true)?;
    Ok(RddFit { gap: ar - al, se: (vl + vr).sqrt(), bandwidth: bw, n_left: nl, n_right: nr })
}

// ---------------------------------------------------------------------------
// Competition externality (auction)
// ---------------------------------------------------------------------------

/// Upper cumulative integral on a grid: G(x) = int_x^hi g(t) dt, evaluated
/// by panel-exact Gauss rules and linear interpolation between grid nodes.
pub struct CumulUpper {
    xs: Vec<f64>,
    vals: Vec<f64>,
}

impl CumulUpper {
    pub fn build<F: Fn(f64) -> f64>(lo: f64, hi: f64, anchors: &[f64], n: usize, g: F) -> Self {
        let mut xs: Vec<f64> = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
        for &a in anchors {
            if a > lo && a < hi {
                xs.push(a);
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        let rule = crate::quad::gauss_legendre(32);
        let m = xs.len();
        let mut vals = vec![0.0; m];
        for i in (0..m - 1).rev() {
            let (a, b) = (xs[i], xs[i + 1]);
            let c = 0.5 * (b - a);
            let d = 0.5 * (b + a);
            let mut s = 0.0;
            for (x, w) in rule.0.iter().zip(rule.1.iter()) {
                s += w * g(c * x + d);
            }
            vals[i] = vals[i + 1] + c * s;
        }
        CumulUpper { xs, vals }
    }

    pub fn eval(&self, x: f64) -> f64 {
        if x <= self.xs[0] {
            return self.vals[0];
        }
        if x >= *self.xs.last().unwrap() {
            return 0.0;
        }
        let mut lo = 0;
        let mut hi = self.xs.len() - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.xs[mid] <= x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t = (x - self.xs[lo]) / (self.xs[hi] - self.xs[lo]);
        self.vals[lo] * (1.0 - t) + self.vals[hi] * t
    }
}

/// gamma(r) in order-statistic form: the expected treatment effect of the
/// top competing bid above max(c0, r), times the probability such a
/// competitor exists. Computed as one upper cumulative of
/// tau(t) (n-1) F(t)^{n-2} f(t).
pub struct GammaOrderStat {
    cumul: CumulUpper,
    pub c0: f64,
}

impl GammaOrderStat {
    pub fn eval(&self, r: f64) -> f64 {
        self.cumul.eval(self.c0.max(r))
    }
}

/// Build the order-statistic gamma for an n-bidder auction with treatment
/// effect tau(r) = m_1(r) - m_0(r).
pub fn competition_gamma_auction(
    n: usize,
    c0: f64,
    meas: &Meas,
    m: &dyn CondMean,
) -> GammaOrderStat {
    let (lo, hi) = meas.support();
    let cumul = CumulUpper::build(lo, hi, &[c0], 2048, |t| {
        let rep = Rep::scalar(t);
        let tau = m.m(1, &rep) - m.m(0, &rep);
        tau * (n as f64 - 1.0) * meas.scalar_cdf(t).powi(n as i32 - 2) * meas.scalar_pdf(t)
    });
    GammaOrderStat { cumul, c0 }
}

/// Inverse-probability-weighted pair estimator of gamma at a probe report:
/// mean over sampled agents of y L_{A}(R, probe) / mu_{A}(R), weights
/// clipped at `cap` (clip rate reported).
pub fn gamma_pair_estimator(
    agents: &AgentTable,
    n_bidders: usize,
    c0: f64,
    meas: &Meas,
    probe: f64,
    cap: f64,
) -> (f64, f64, f64) {
    let n = agents.len();
    let nf = n_bidders as f64;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut clipped = 0usize;
    for i in 0..n {
        let r = agents.rep[i].v[0];
        let mut t = 0.0;
        if r >= c0 && probe <= r {
            let f_r = meas.scalar_cdf(r);
            if agents.a[i] == 1 {
                let mu = f_r.powi(n_bidders as i32 - 1);
                t = agents.y[i] * (nf - 1.0) * f_r.powi(n_bidders as i32 - 2) / mu;
            } else {
                let mu = 1.0 - f_r.powi(n_bidders as i32 - 1);
                if mu > 0.0 {
                    t = -agents.y[i] * (nf - 1.0) * f_r.powi(n_bidders as i32 - 2) / mu;
                }
            }
        }
        if t.abs() > cap {
            t = t.signum() * cap;
            clipped += 1;
        }
        sum += t;
        sumsq += t * t;
    }
    let mean = sum / n as f64;
    let var = (sumsq / n as f64 - mean * mean).max(0.0);
    (mean, (var / n as f64).sqrt(), clipped as f64 / n as f64)
}

// ---------------------------------------------------------------------------
// Market conduct externality and the Psi decomposition
// ---------------------------------------------------------------------------

/// Conduct externality: an L2 per-report scalar, or the (grad_c U, psi)
/// pair awaiting the Sobolev pairing.
pub enum ConductExternality {
    L2(ConductL2),
    H1 { grad_c_u: f64, representer: SobolevRepresenter },
}

pub struct ConductL2 {
    pub grad: Vec<f64>,
    pub psi: InfluenceL2,
}

impl ConductL2 {
    pub fn eval(&self, rep: &Rep, meas: &Meas) -> f64 {
        crate::linalg::dot(&self.grad, &self.psi.eval(rep, meas))
    }
}

/// Pair the welfare gradient with the conduct-rule influence function.
pub fn psi_conduct(
    infl: InfluenceFunctionC,
    grad: &WelfareGradient,
) -> Result<ConductExternality> {
    match infl {
        InfluenceFunctionC::L2(psi) => {
            Ok(ConductExternality::L2(ConductL2 { grad: grad.grad.clone(), psi }))
        }
        InfluenceFunctionC::SobolevH1(representer) => {
            if grad.grad.len() != 1 {
                return Err(MpeError::SpaceMismatch(
                    "H1 pairing defined for scalar clearing parameters".into(),
                ));
            }
            Ok(ConductExternality::H1 { grad_c_u: grad.grad[0], representer })
        }
    }
}

/// Component provenance of a built decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsiMode {
    Oracle,
    Estimated,
}

/// Per-agent equilibrium-adjusted outcome columns.
#[derive(Debug, Clone)]
pub struct PsiDecomposition {
    pub y: Vec<f64>,
    pub gamma: Vec<f64>,
    pub conduct: Vec<f64>,
    pub mode: PsiMode,
}

impl PsiDecomposition {
    pub fn len(&self) -> usize {
        self.y.len()
    }
    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
    pub fn psi_fixed(&self, i: usize) -> f64 {
        self.y[i] + self.gamma[i]
    }
    pub fn psi_total(&self, i: usize) -> f64 {
        self.y[i] + self.gamma[i] + self.conduct[i]
    }
    pub fn totals(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.psi_total(i)).collect()
    }

    /// CSV export with one header row naming each component column.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "y,gamma,psi_conduct,psi_fixed,psi_total")?;
        for i in 0..self.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                self.y[i],
                self.gamma[i],
                self.conduct[i],
                self.psi_fixed(i),
                self.psi_total(i)
            )?;
        }
        Ok(())
    }
}

/// Fill the per-agent decomposition. The conduct component must live in L2;
/// routing an H1 representer here is a type error per the space contract.
pub fn build_psi(
    agents: &AgentTable,
    meas: &Meas,
    gamma: Option<&GammaOrderStat>,
    conduct: &ConductExternality,
    mode: PsiMode,
) -> Result<PsiDecomposition> {
    let l2 = match conduct {
        ConductExternality::L2(c) => c,
        ConductExternality::H1 { .. } => {
            return Err(MpeError::SpaceMismatch(
                "H1 conduct externality cannot enter the covariance path".into(),
            ))
        }
    };
    let n = agents.len();
    let mut g = vec![0.0; n];
    let mut cd = vec![0.0; n];
    for i in 0..n {
        if let Some(gam) = gamma {
            g[i] = gam.eval(agents.rep[i].v[0]);
        }
        cd[i] = l2.eval(&agents.rep[i], meas);
    }
    Ok(PsiDecomposition { y: agents.y.clone(), gamma: g, conduct: cd, mode })
}
