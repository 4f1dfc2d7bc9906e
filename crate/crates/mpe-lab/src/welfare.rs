//! Marginal policy effects and the surrounding policy toolbox: covariance
//! MPEs, the general two-term form with Sobolev pairing, influence-function
//! welfare criteria (mean, quantile, Gini), CATE-based targeting, and the
//! IV / MTE estimands on the equilibrium-adjusted outcome.

use crate::clearing::EquilibriumState;
use crate::externality::{CondMean, ConductExternality, FnMean, GammaOrderStat, PsiDecomposition};
use crate::mechanism::Meas;
use crate::population::{AgentTable, PolicyScore, Rep, ReportDist, ScenarioSpec, ScoreR};
use crate::quad::Quad;
use crate::{MpeError, Result};

// ---------------------------------------------------------------------------
// Analytic (quadrature) expectations against the scenario laws
// ---------------------------------------------------------------------------

/// Expectation of g over a conditional report law, splitting integration
/// panels at the given break locations (clearing cutoffs, where downstream
/// integrands kink).
fn expect_cond_report<F: FnMut(&Rep) -> f64>(
    cond: &crate::population::CondReport,
    quad: &Quad,
    breaks: &[f64],
    mut g: F,
) -> f64 {
    use crate::population::CondReport;
    match cond {
        CondReport::Binary { p1 } => (1.0 - p1) * g(&Rep::binary(0)) + p1 * g(&Rep::binary(1)),
        CondReport::Scalar(d) => {
            let (lo, hi) = d.support();
            quad.integrate(lo, hi, breaks, |r| d.pdf(r) * g(&Rep::scalar(r)))
        }
        CondReport::TwoSchool { shares, v1, v2 } => {
            let mut s = 0.0;
            for (t, share) in shares.iter().enumerate() {
                if *share == 0.0 {
                    continue;
                }
                s += share
                    * quad.integrate2((0.0, 1.0), (0.0, 1.0), breaks, breaks, |a, b| {
                        v1.pdf(a) * v2.pdf(b) * g(&Rep::two_school(t, a, b))
                    });
            }
            s
        }
    }
}

/// Conditional mean given the policy value (the direct term needs the full
/// m(w, a, r), not its posterior average over w).
pub trait CondMeanW: Sync {
    fn m_w(&self, w: f64, a: usize, rep: &Rep) -> f64;
}

/// The scenario's specified outcome mean (with the IV xi-term averaged).
pub struct SpecMeanW<'a> {
    pub spec: &'a ScenarioSpec,
}

impl CondMeanW for SpecMeanW<'_> {
    fn m_w(&self, w: f64, a: usize, rep: &Rep) -> f64 {
        self.spec.mean_y_given_w(w, a, rep)
    }
}

fn cond_dist(cond: &crate::population::CondReport) -> Result<ReportDist> {
    use crate::population::{CondReport, Mixture};
    Ok(match cond {
        CondReport::Binary { p1 } => ReportDist::BinaryDemand { p1: *p1 },
        CondReport::Scalar(d) => ReportDist::Scalar(Mixture::new(vec![(1.0, d.clone())])?),
        CondReport::TwoSchool { shares, v1, v2 } => ReportDist::TwoSchool {
            shares: shares.clone(),
            comps: vec![(1.0, v1.clone(), v2.clone())],
        },
    })
}

/// E[m(W, A, R) s_W(W)]: the direct term, integrating the mechanism's
/// allocation probabilities against the conditional report laws while the
/// smooth parts keep reading the baseline marginal.
pub fn direct_term(
    spec: &ScenarioSpec,
    c0: &[f64],
    baseline: &ReportDist,
    score_w: &PolicyScore,
    m: &dyn CondMeanW,
) -> Result<f64> {
    let quad = Quad::default();
    let mech = &spec.mechanism;
    let mut total = 0.0;
    for (pw, w) in spec.marginal_policy_atoms() {
        if pw == 0.0 {
            continue;
        }
        let sw = score_w.eval(w);
        if sw == 0.0 {
            continue;
        }
        let cond_law = spec.report.cond(w);
        let dist_w = cond_dist(&cond_law)?;
        let meas_w = Meas::with_env(&dist_w, baseline).with_quad(quad);
        let mut inner = 0.0;
        for d in 0..mech.disc_count() {
            for arm in mech.arms(d) {
                inner +=
                    mech.arm_integral(d, &arm, c0, &meas_w, |rep: &Rep| m.m_w(w, arm.alloc, rep));
            }
        }
        total += pw * sw * inner;
    }
    Ok(total)
}

/// E[g(R) s_W(W)] = E[g(R) s_R(R)]: covariance of a report-space object
/// with the policy score through the report channel.
pub fn report_channel_term<G: Fn(&Rep) -> f64>(
    spec: &ScenarioSpec,
    score_w: &PolicyScore,
    breaks: &[f64],
    g: G,
) -> Result<f64> {
    let quad = Quad::default();
    let mut total = 0.0;
    for (pw, w) in spec.marginal_policy_atoms() {
        if pw == 0.0 {
            continue;
        }
        let sw = score_w.eval(w);
        if sw == 0.0 {
            continue;
        }
        let cond = spec.report.cond(w);
        total += pw * sw * expect_cond_report(&cond, &quad, breaks, &g);
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// MPE: covariance form and the general two-term form
// ---------------------------------------------------------------------------

/// Channel split of an analytic MPE; the total is their exact sum.
#[derive(Debug, Clone, Copy)]
pub struct MpeComponents {
    pub direct: f64,
    pub competition: f64,
    pub conduct: f64,
}

impl MpeComponents {
    pub fn total(&self) -> f64 {
        self.direct + self.competition + self.conduct
    }
}

/// Corollary covariance form, oracle mode: E[Psi_total s_W(W)] by quadrature
/// against the scenario laws, split into the three channels.
pub fn mpe_covariance_oracle(
    spec: &ScenarioSpec,
    state: &EquilibriumState,
    baseline: &ReportDist,
    gamma: Option<&GammaOrderStat>,
    conduct: &ConductExternality,
    score_w: &PolicyScore,
) -> Result<MpeComponents> {
    mpe_covariance_oracle_with_mean(
        spec,
        state,
        baseline,
        gamma,
        conduct,
        score_w,
        &SpecMeanW { spec },
    )
}

/// Covariance MPE with a custom conditional-mean provider (the functional
/// pipeline substitutes influence-function means).
pub fn mpe_covariance_oracle_with_mean(
    spec: &ScenarioSpec,
    state: &EquilibriumState,
    baseline: &ReportDist,
    gamma: Option<&GammaOrderStat>,
    conduct: &ConductExternality,
    score_w: &PolicyScore,
    m: &dyn CondMeanW,
) -> Result<MpeComponents> {
    let l2 = match conduct {
        ConductExternality::L2(c) => c,
        ConductExternality::H1 { .. } => {
            return Err(MpeError::SpaceMismatch(
                "H1 conduct externality: use mpe_general, not the covariance form".into(),
            ))
        }
    };
    let meas = Meas::new(baseline);
    let direct = direct_term(spec, &state.c0, baseline, score_w, m)?;
    let competition = match gamma {
        Some(g) => report_channel_term(spec, score_w, &state.c0, |rep: &Rep| g.eval(rep.v[0]))?,
        None => 0.0,
    };
    let conduct_v =
        report_channel_term(spec, score_w, &state.c0, |rep: &Rep| l2.eval(rep, &meas))?;
    Ok(MpeComponents { direct, competition, conduct: conduct_v })
}

/// Covariance form, estimated mode: sample means over a built decomposition.
pub fn mpe_covariance_estimated(
    psi: &PsiDecomposition,
    agents: &AgentTable,
    score_w: &PolicyScore,
) -> Result<MpeComponents> {
    if psi.len() != agents.len() {
        return Err(MpeError::Config("decomposition/agents length mismatch".into()));
    }
    let n = psi.len() as f64;
    let mut direct = 0.0;
    let mut competition = 0.0;
    let mut conduct = 0.0;
    for i in 0..psi.len() {
        let s = score_w.eval(agents.w[i]);
        direct += psi.y[i] * s;
        competition += psi.gamma[i] * s;
        conduct += psi.conduct[i] * s;
    }
    Ok(MpeComponents { direct: direct / n, competition: competition / n, conduct: conduct / n })
}

/// Theorem form: fixed term by covariance plus the conduct term through the
/// tagged inner product (L2 expectation or Sobolev H1 pairing).
pub fn mpe_general(
    spec: &ScenarioSpec,
    state: &EquilibriumState,
    baseline: &ReportDist,
    gamma: Option<&GammaOrderStat>,
    conduct: &ConductExternality,
    score_w: &PolicyScore,
    score_r: &dyn ScoreR,
    m: &dyn CondMeanW,
) -> Result<MpeComponents> {
    match conduct {
        ConductExternality::L2(_) => {
            mpe_covariance_oracle_with_mean(spec, state, baseline, gamma, conduct, score_w, m)
        }
        ConductExternality::H1 { grad_c_u, representer } => {
            let direct = direct_term(spec, &state.c0, baseline, score_w, m)?;
            let competition = match gamma {
                Some(g) => {
                    report_channel_term(spec, score_w, &state.c0, |rep: &Rep| g.eval(rep.v[0]))?
                }
                None => 0.0,
            };
            let pairing = representer.h1_inner(score_r)?;
            Ok(MpeComponents { direct, competition, conduct: grad_c_u * pairing })
        }
    }
}

// ---------------------------------------------------------------------------
// Welfare functionals beyond the mean
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FunctionalId {
    Mean,
    Quantile { tau: f64 },
    Gini,
}

impl std::fmt::Display for FunctionalId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FunctionalId::Mean => write!(f, "mean"),
            FunctionalId::Quantile { tau } => write!(f, "quantile({tau})"),
            FunctionalId::Gini => write!(f, "gini"),
        }
    }
}

/// Baseline outcome distribution on a grid: CDF, density, and upper partial
/// means, built by quadrature over the full market (oracle mode) or from a
/// sample (estimated mode).
pub struct OutcomeDist {
    pub ys: Vec<f64>,
    pub cdf: Vec<f64>,
    pub pdf: Vec<f64>,
    /// t_upper[i] = E[Y 1{Y >= ys[i]}].
    pub t_upper: Vec<f64>,
    pub mean: f64,
    /// E[Y F_Y(Y)]: the rank-covariance moment behind the Gini.
    pub rank_moment: f64,
    /// Exact mixture representation (oracle constructions only).
    pairs: Option<MassPoints>,
}

/// Sorted (probability, conditional mean) mass points plus the additive
/// noise law: the outcome distribution as an exact mixture. Noise constants
/// are precomputed because cdf_pdf sits in million-call loops.
struct MassPoints {
    pts: Vec<(f64, f64)>,
    /// Prefix sums of probability (cum[i] = sum of pts[..i].0).
    cum: Vec<f64>,
    noise: FastNoise,
}

enum FastNoise {
    None,
    Gaussian { sigma: f64, bound: f64 },
    TruncSym { sigma: f64, half: f64, z: f64, cdf_lo: f64 },
    Uniform { half: f64 },
}

impl FastNoise {
    fn of(noise: &crate::population::NoiseLaw) -> FastNoise {
        use crate::population::NoiseLaw;
        use crate::special::norm_cdf;
        match *noise {
            NoiseLaw::None => FastNoise::None,
            NoiseLaw::Gaussian { sigma } => FastNoise::Gaussian { sigma, bound: 5.0 * sigma },
            NoiseLaw::TruncNormalSym { sigma, half_width } => {
                let cdf_lo = norm_cdf(-half_width / sigma);
                FastNoise::TruncSym {
                    sigma,
                    half: half_width,
                    z: norm_cdf(half_width / sigma) - cdf_lo,
                    cdf_lo,
                }
            }
            NoiseLaw::Uniform { half_width } => FastNoise::Uniform { half: half_width },
        }
    }

    fn bounds(&self) -> (f64, f64) {
        match *self {
            FastNoise::None => (0.0, 0.0),
            FastNoise::Gaussian { bound, .. } => (-bound, bound),
            FastNoise::TruncSym { half, .. } => (-half, half),
            FastNoise::Uniform { half } => (-half, half),
        }
    }

    #[inline]
    fn cdf_pdf(&self, e: f64) -> (f64, f64) {
        use crate::special::{norm_cdf, norm_pdf};
        match *self {
            FastNoise::None => (if e >= 0.0 { 1.0 } else { 0.0 }, 0.0),
            FastNoise::Gaussian { sigma, bound } => {
                if e <= -bound {
                    (0.0, 0.0)
                } else if e >= bound {
                    (1.0, 0.0)
                } else {
                    let z = e / sigma;
                    (norm_cdf(z), norm_pdf(z) / sigma)
                }
            }
            FastNoise::TruncSym { sigma, half, z, cdf_lo } => {
                if e <= -half {
                    (0.0, 0.0)
                } else if e >= half {
                    (1.0, 0.0)
                } else {
                    let t = e / sigma;
                    ((norm_cdf(t) - cdf_lo) / z, norm_pdf(t) / (sigma * z))
                }
            }
            FastNoise::Uniform { half } => {
                if e <= -half {
                    (0.0, 0.0)
                } else if e >= half {
                    (1.0, 0.0)
                } else {
                    ((e + half) / (2.0 * half), 0.5 / half)
                }
            }
        }
    }
}

impl MassPoints {
    fn new(pts: Vec<(f64, f64)>, noise: &crate::population::NoiseLaw) -> Self {
        let mut cum = Vec::with_capacity(pts.len() + 1);
        let mut acc = 0.0;
        cum.push(0.0);
        for (p, _) in &pts {
            acc += p;
            cum.push(acc);
        }
        MassPoints { pts, cum, noise: FastNoise::of(noise) }
    }

    /// Exact CDF and density at y, visiting only points whose noise window
    /// covers y.
    fn cdf_pdf(&self, y: f64) -> (f64, f64) {
        let (nlo, nhi) = self.noise.bounds();
        if matches!(self.noise, FastNoise::None) {
            let hi = self.pts.partition_point(|(_, m)| *m <= y);
            return (self.cum[hi], 0.0);
        }
        // Points with mean <= y - nhi contribute probability one.
        let full = self.pts.partition_point(|(_, m)| *m <= y - nhi);
        // Points with mean >= y - nlo contribute zero.
        let upper = self.pts.partition_point(|(_, m)| *m < y - nlo);
        let mut c = self.cum[full];
        let mut p = 0.0;
        for i in full..upper {
            let (w, m) = self.pts[i];
            let (nc, np) = self.noise.cdf_pdf(y - m);
            c += w * nc;
            p += w * np;
        }
        (c, p)
    }
}

const OUTCOME_GRID: usize = 1024;

impl OutcomeDist {
    /// Oracle construction from the scenario at the solved equilibrium.
    pub fn from_scenario(
        spec: &ScenarioSpec,
        c0: &[f64],
        baseline: &ReportDist,
    ) -> Result<OutcomeDist> {
        Self::from_market(spec, &spec.marginal_policy_atoms(), c0, baseline)
    }

    /// Outcome distribution of an arbitrary policy weighting and market
    /// environment (the theta-path oracle re-solves c and passes both in).
    ///
    /// One pass over the report space collects (weight, conditional-mean)
    /// mass points; the grid CDF/density then come from prefix sums over
    /// the sorted points, visiting only the noise window around each grid
    /// point, and quantiles are root-found on the exact mixture CDF.
    pub fn from_market(
        spec: &ScenarioSpec,
        atoms: &[(f64, f64)],
        c0: &[f64],
        env: &ReportDist,
    ) -> Result<OutcomeDist> {
        let pairs = collect_mass_points(spec, atoms, c0, env)?;
        let (nlo, nhi) = spec.outcome.noise.bounds();
        let ylo = pairs.pts.first().unwrap().1 + nlo - 1e-9;
        let yhi = pairs.pts.last().unwrap().1 + nhi + 1e-9;
        let ys: Vec<f64> = (0..=OUTCOME_GRID)
            .map(|i| ylo + (yhi - ylo) * i as f64 / OUTCOME_GRID as f64)
            .collect();
        let mut cdf = vec![0.0; ys.len()];
        let mut pdf = vec![0.0; ys.len()];
        for (i, &y) in ys.iter().enumerate() {
            let (c, p) = pairs.cdf_pdf(y);
            cdf[i] = c;
            pdf[i] = p;
        }
        let mut out = Self::finish(ys, cdf, pdf);
        out.pairs = Some(pairs);
        Ok(out)
    }

    /// Empirical construction from a sample. CDF, mean, upper partial means
    /// and the rank moment come straight from the sorted sample (exact); a
    /// Gaussian KDE with Silverman bandwidth supplies the density, which is
    /// only ever needed at quantiles.
    pub fn from_sample(ys_raw: &[f64]) -> OutcomeDist {
        let n = ys_raw.len();
        let mut sorted = ys_raw.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let nf = n as f64;
        let mean = sorted.iter().sum::<f64>() / nf;
        let sd = (sorted.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / nf).sqrt();
        let bw = (1.06 * sd * nf.powf(-0.2)).max(1e-9);
        let (ylo, yhi) = (sorted[0] - 3.0 * bw, sorted[n - 1] + 3.0 * bw);
        let ys: Vec<f64> = (0..=OUTCOME_GRID)
            .map(|i| ylo + (yhi - ylo) * i as f64 / OUTCOME_GRID as f64)
            .collect();
        // Suffix sums of the sorted outcomes for exact upper partial means.
        let mut suffix = vec![0.0; n + 1];
        for i in (0..n).rev() {
            suffix[i] = suffix[i + 1] + sorted[i];
        }
        let mut cdf = vec![0.0; ys.len()];
        let mut pdf = vec![0.0; ys.len()];
        let mut t_upper = vec![0.0; ys.len()];
        for (i, &y) in ys.iter().enumerate() {
            let pos = sorted.partition_point(|v| *v <= y);
            cdf[i] = pos as f64 / nf;
            let lo_idx = sorted.partition_point(|v| *v < y);
            t_upper[i] = suffix[lo_idx] / nf;
            let mut dens = 0.0;
            for &v in sorted.iter() {
                let z = (y - v) / bw;
                if z.abs() < 8.0 {
                    dens += crate::special::norm_pdf(z);
                }
            }
            pdf[i] = dens / (nf * bw);
        }
        // Midrank estimate of E[Y F(Y)].
        let rank_moment =
            sorted.iter().enumerate().map(|(i, y)| y * (i as f64 + 0.5) / nf).sum::<f64>() / nf;
        OutcomeDist { ys, cdf, pdf, t_upper, mean, rank_moment, pairs: None }
    }

    fn finish(ys: Vec<f64>, cdf: Vec<f64>, pdf: Vec<f64>) -> OutcomeDist {
        let m = ys.len();
        let mut t_upper = vec![0.0; m];
        let mut mean = 0.0;
        let mut rank = 0.0;
        for i in (0..m - 1).rev() {
            let h = ys[i + 1] - ys[i];
            t_upper[i] = t_upper[i + 1] + 0.5 * h * (ys[i] * pdf[i] + ys[i + 1] * pdf[i + 1]);
        }
        for i in 0..m - 1 {
            let h = ys[i + 1] - ys[i];
            mean += 0.5 * h * (ys[i] * pdf[i] + ys[i + 1] * pdf[i + 1]);
            rank += 0.5 * h * (ys[i] * cdf[i] * pdf[i] + ys[i + 1] * cdf[i + 1] * pdf[i + 1]);
        }
        OutcomeDist { ys, cdf, pdf, t_upper, mean, rank_moment: rank, pairs: None }
    }

    pub(crate) fn interp(xs: &[f64], vs: &[f64], x: f64) -> f64 {
        if x <= xs[0] {
            return vs[0];
        }
        if x >= *xs.last().unwrap() {
            return *vs.last().unwrap();
        }
        let i = xs.partition_point(|v| *v <= x) - 1;
        let t = (x - xs[i]) / (xs[i + 1] - xs[i]);
        vs[i] * (1.0 - t) + vs[i + 1] * t
    }

    pub fn cdf_at(&self, y: f64) -> f64 {
        Self::interp(&self.ys, &self.cdf, y)
    }
    pub fn pdf_at(&self, y: f64) -> f64 {
        Self::interp(&self.ys, &self.pdf, y)
    }
    pub fn t_upper_at(&self, y: f64) -> f64 {
        Self::interp(&self.ys, &self.t_upper, y)
    }

    pub fn quantile(&self, tau: f64) -> Result<f64> {
        let tau = tau.clamp(0.0, 1.0);
        match &self.pairs {
            Some(pairs) => crate::rootfind::newton_bisect(
                |y| pairs.cdf_pdf(y).0 - tau,
                |y| pairs.cdf_pdf(y).1,
                self.ys[0],
                *self.ys.last().unwrap(),
                1e-13,
                200,
            ),
            None => crate::rootfind::newton_bisect(
                |y| self.cdf_at(y) - tau,
                |y| self.pdf_at(y),
                self.ys[0],
                *self.ys.last().unwrap(),
                1e-12,
                200,
            ),
        }
    }

    /// Gini coefficient: 2 E[Y F(Y)] / E[Y] - 1.
    pub fn gini(&self) -> f64 {
        2.0 * self.rank_moment / self.mean - 1.0
    }
}

/// Evaluate one statistic of the outcome distribution at an arbitrary
/// policy weighting / market environment, skipping grids the statistic
/// does not need (quantiles root-find on the exact mixture CDF).
pub fn market_statistic(
    spec: &ScenarioSpec,
    atoms: &[(f64, f64)],
    c0: &[f64],
    env: &ReportDist,
    fid: FunctionalId,
) -> Result<f64> {
    match fid {
        FunctionalId::Quantile { tau } => {
            let pairs = collect_mass_points(spec, atoms, c0, env)?;
            let (nlo, nhi) = pairs.noise.bounds();
            let lo = pairs.pts.first().unwrap().1 + nlo - 1e-9;
            let hi = pairs.pts.last().unwrap().1 + nhi + 1e-9;
            crate::rootfind::newton_bisect(
                |y| pairs.cdf_pdf(y).0 - tau,
                |y| pairs.cdf_pdf(y).1,
                lo,
                hi,
                1e-13,
                200,
            )
        }
        FunctionalId::Mean => {
            let pairs = collect_mass_points(spec, atoms, c0, env)?;
            Ok(pairs.pts.iter().map(|(w, m)| w * m).sum())
        }
        FunctionalId::Gini => {
            let pairs = collect_mass_points(spec, atoms, c0, env)?;
            let mean: f64 = pairs.pts.iter().map(|(w, m)| w * m).sum();
            let (nlo, nhi) = pairs.noise.bounds();
            let lo = pairs.pts.first().unwrap().1 + nlo - 1e-9;
            let hi = pairs.pts.last().unwrap().1 + nhi + 1e-9;
            // A = E[Y F(Y)] by Gauss quadrature against the exact mixture.
            let rule = crate::quad::gauss_legendre(384);
            let half = 0.5 * (hi - lo);
            let mid = 0.5 * (hi + lo);
            let mut a = 0.0;
            for (x, w) in rule.0.iter().zip(rule.1.iter()) {
                let y = half * x + mid;
                let (c, p) = pairs.cdf_pdf(y);
                a += w * y * c * p;
            }
            a *= half;
            Ok(2.0 * a / mean - 1.0)
        }
    }
}

fn collect_mass_points(
    spec: &ScenarioSpec,
    atoms: &[(f64, f64)],
    c0: &[f64],
    env: &ReportDist,
) -> Result<MassPoints> {
    let mech = &spec.mechanism;
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for &(pw, w) in atoms {
        if pw == 0.0 {
            continue;
        }
        let cond = spec.report.cond(w);
        let dist_w = crate::population::cond_to_dist(&cond)?;
        let meas_w = Meas::with_env(&dist_w, env);
        for d in 0..mech.disc_count() {
            for arm in mech.arms(d) {
                mech.arm_foreach(d, &arm, c0, &meas_w, |rep, weight| {
                    if weight != 0.0 {
                        pts.push((pw * weight, spec.mean_y_given_w(w, arm.alloc, rep)));
                    }
                });
            }
        }
    }
    if pts.is_empty() {
        return Err(MpeError::Config("empty outcome distribution".into()));
    }
    pts.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let total: f64 = pts.iter().map(|(p, _)| p).sum();
    for p in pts.iter_mut() {
        p.0 /= total;
    }
    Ok(MassPoints::new(pts, &spec.outcome.noise))
}

/// A welfare criterion with its influence function at the baseline outcome
/// distribution.
pub struct WelfareFunctional {
    pub id: FunctionalId,
    pub baseline_value: f64,
    if_fn: Box<dyn Fn(f64) -> f64 + Sync + Send>,
}

impl WelfareFunctional {
    pub fn influence(&self, y: f64) -> f64 {
        (self.if_fn)(y)
    }
}

/// Build the influence function for the requested criterion.
///
/// The Gini influence function is assembled from the moment pair (mean,
/// rank covariance E[Y F(Y)]) via the implicit-function recipe:
/// IF(y) = (2/mu)(y F(y) + T(y)) - (2A/mu^2) y - 2A/mu with T(y) = E[Y 1{Y >= y}].
pub fn influence_function(id: FunctionalId, dist: &OutcomeDist) -> Result<WelfareFunctional> {
    match id {
        FunctionalId::Mean => {
            let mu = dist.mean;
            Ok(WelfareFunctional { id, baseline_value: mu, if_fn: Box::new(move |y| y - mu) })
        }
        FunctionalId::Quantile { tau } => {
            let q = dist.quantile(tau)?;
            let fq = dist.pdf_at(q);
            if fq < 1e-6 {
                return Err(MpeError::IllPosed(format!(
                    "outcome density {fq:.2e} at the {tau}-quantile"
                )));
            }
            Ok(WelfareFunctional {
                id,
                baseline_value: q,
                if_fn: Box::new(move |y| (tau - if y <= q { 1.0 } else { 0.0 }) / fq),
            })
        }
        FunctionalId::Gini => {
            let mu = dist.mean;
            if mu <= 0.0 {
                return Err(MpeError::IllPosed("Gini requires a positive mean outcome".into()));
            }
            let a = dist.rank_moment;
            let ys = dist.ys.clone();
            let cdf = dist.cdf.clone();
            let tup = dist.t_upper.clone();
            Ok(WelfareFunctional {
                id,
                baseline_value: 2.0 * a / mu - 1.0,
                if_fn: Box::new(move |y| {
                    let f = OutcomeDist::interp(&ys, &cdf, y);
                    let t = OutcomeDist::interp(&ys, &tup, y);
                    (2.0 / mu) * (y * f + t) - (2.0 * a / (mu * mu)) * y - 2.0 * a / mu
                }),
            })
        }
    }
}

/// Conditional mean of IF(Y) given (w, a, r): integrates the influence
/// function over the outcome noise.
pub fn if_cond_mean(
    spec: &ScenarioSpec,
    functional: &WelfareFunctional,
    w: f64,
    a: usize,
    rep: &Rep,
) -> f64 {
    let m = spec.mean_y_given_w(w, a, rep);
    let quad = Quad { nodes_1d: 64, nodes_2d: 64 };
    match spec.outcome.noise {
        crate::population::NoiseLaw::None => functional.influence(m),
        _ => {
            let (lo, hi) = spec.outcome.noise.bounds();
            // The quantile IF has a kink at y = q; split the noise integral
            // there.
            let breaks: Vec<f64> = match functional.id {
                FunctionalId::Quantile { .. } => vec![functional.baseline_value - m],
                _ => vec![],
            };
            quad.integrate(lo, hi, &breaks, |e| {
                functional.influence(m + e) * spec.outcome.noise.pdf(e)
            })
        }
    }
}

/// Posterior-averaged conditional mean of IF(Y): the drop-in replacement for
/// m_a(r) when the welfare criterion is not the mean.
pub fn if_mean_adapter<'a>(
    spec: &'a ScenarioSpec,
    functional: &'a WelfareFunctional,
) -> impl CondMean + 'a {
    FnMean(move |a: usize, rep: &Rep| {
        let atoms = spec.marginal_policy_atoms();
        let mut num = 0.0;
        let mut den = 0.0;
        for (p, w) in &atoms {
            let d = spec.report_density_given_w(*w, rep);
            num += p * d * if_cond_mean(spec, functional, *w, a, rep);
            den += p * d;
        }
        if den <= 0.0 {
            0.0
        } else {
            num / den
        }
    })
}

/// CondMeanW adapter for the direct term of a functional MPE.
pub struct IfMeanW<'a> {
    pub spec: &'a ScenarioSpec,
    pub functional: &'a WelfareFunctional,
}

impl CondMeanW for IfMeanW<'_> {
    fn m_w(&self, w: f64, a: usize, rep: &Rep) -> f64 {
        if_cond_mean(self.spec, self.functional, w, a, rep)
    }
}

// ---------------------------------------------------------------------------
// Targeting (CATE on the equilibrium-adjusted outcome)
// ---------------------------------------------------------------------------

/// CATE-Psi evaluator on an x-grid over [0,1].
pub struct CatePsi {
    pub xs: Vec<f64>,
    pub vals: Vec<f64>,
}

impl CatePsi {
    pub fn eval(&self, x: f64) -> f64 {
        OutcomeDist::interp(&self.xs, &self.vals, x)
    }

    /// L2(X) inner product on the grid (X ~ U[0,1]).
    pub fn inner(&self, other: &dyn Fn(f64) -> f64) -> f64 {
        let n = self.xs.len();
        let mut s = 0.0;
        for i in 0..n - 1 {
            let h = self.xs[i + 1] - self.xs[i];
            s += 0.5
                * h
                * (self.vals[i] * other(self.xs[i]) + self.vals[i + 1] * other(self.xs[i + 1]));
        }
        s
    }

    pub fn norm_sq(&self) -> f64 {
        self.inner(&|x| self.eval(x))
    }
}

/// Oracle CATE-Psi. The covariate scenarios randomize W given X with reports
/// independent of (W, X), so the market terms drop out of the conditional
/// contrast and only the outcome means differ.
pub fn cate_psi_oracle(spec: &ScenarioSpec, c0: &[f64], baseline: &ReportDist) -> Result<CatePsi> {
    if spec.covariate.is_none() {
        return Err(MpeError::Config("cate_psi requires a covariate scenario".into()));
    }
    let mech = &spec.mechanism;
    let meas = Meas::new(baseline);
    let quad = Quad::default();
    let n_grid = 257;
    let xs: Vec<f64> = (0..n_grid).map(|i| i as f64 / (n_grid - 1) as f64).collect();
    let mut vals = vec![0.0; n_grid];
    for (i, &x) in xs.iter().enumerate() {
        let cond = spec.report.cond(0.0);
        vals[i] = expect_cond_report(&cond, &quad, c0, |rep| {
            let probs = mech.allocation_prob(rep, c0, &meas).unwrap();
            probs
                .iter()
                .enumerate()
                .map(|(a, pa)| {
                    pa * (spec.outcome_mean_x(1.0, a, rep, x) - spec.outcome_mean_x(0.0, a, rep, x))
                })
                .sum::<f64>()
        });
    }
    Ok(CatePsi { xs, vals })
}

/// Estimated CATE-Psi: equal-mass bins of x, difference of Psi-total means
/// between treated and control within each bin; bins missing an arm merge
/// into their neighbor.
pub fn cate_psi_estimated(
    psi: &PsiDecomposition,
    agents: &AgentTable,
    bins: usize,
) -> Result<CatePsi> {
    let xs_col = agents
        .x
        .as_ref()
        .ok_or_else(|| MpeError::Config("agents carry no covariate column".into()))?;
    let n = agents.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs_col[a].partial_cmp(&xs_col[b]).unwrap());
    let mut xs = Vec::new();
    let mut vals = Vec::new();
    let per = (n / bins).max(1);
    let mut start = 0usize;
    while start < n {
        let mut end = (start + per).min(n);
        loop {
            let slice = &order[start..end];
            let t = slice.iter().filter(|&&i| agents.w[i] > 0.5).count();
            if (t > 0 && t < slice.len()) || end == n {
                break;
            }
            end = (end + per).min(n);
        }
        let slice = &order[start..end];
        let (mut s1, mut n1, mut s0, mut n0, mut xbar) = (0.0, 0usize, 0.0, 0usize, 0.0);
        for &i in slice {
            xbar += xs_col[i];
            if agents.w[i] > 0.5 {
                s1 += psi.psi_total(i);
                n1 += 1;
            } else {
                s0 += psi.psi_total(i);
                n0 += 1;
            }
        }
        if n1 > 0 && n0 > 0 {
            xs.push(xbar / slice.len() as f64);
            vals.push(s1 / n1 as f64 - s0 / n0 as f64);
        }
        start = end;
    }
    if xs.len() < 2 {
        return Err(MpeError::Estimation("too few usable covariate bins".into()));
    }
    Ok(CatePsi { xs, vals })
}

/// Optimal direction h* proportional to the CATE, plus the EWM sign-rule
/// comparator normalized to the same L2(X) budget.
#[derive(Debug, Clone, Copy)]
pub struct TargetingResult {
    pub norm_cap: f64,
    pub mpe_optimal: f64,
    pub mpe_ewm: f64,
    /// h*(x) = scale * CATE(x).
    pub scale: f64,
}

pub fn optimal_targeting_direction(cate: &CatePsi, norm_cap: f64) -> Result<TargetingResult> {
    let nsq = cate.norm_sq();
    if nsq <= 1e-14 {
        return Err(MpeError::Domain("CATE is identically zero; direction undefined".into()));
    }
    let scale = (norm_cap / nsq).sqrt();
    // MPE(h) = E[CATE(X) h(X)]; at h = scale * CATE this is scale ||CATE||^2.
    let mpe_optimal = scale * nsq;
    let sign_mass = {
        let n = cate.xs.len();
        let mut s = 0.0;
        for i in 0..n - 1 {
            let h = cate.xs[i + 1] - cate.xs[i];
            let a = if cate.vals[i] >= 0.0 { 1.0 } else { 0.0 };
            let b = if cate.vals[i + 1] >= 0.0 { 1.0 } else { 0.0 };
            s += 0.5 * h * (a + b);
        }
        s
    };
    let mpe_ewm = if sign_mass > 1e-12 {
        let scale_ewm = (norm_cap / sign_mass).sqrt();
        cate.inner(&|x| if cate.eval(x) >= 0.0 { scale_ewm } else { 0.0 })
    } else {
        0.0
    };
    Ok(TargetingResult { norm_cap, mpe_optimal, mpe_ewm, scale })
}

/// MPE of an arbitrary direction h: E[CATE(X) h(X)].
pub fn targeting_mpe(cate: &CatePsi, h: &dyn Fn(f64) -> f64) -> f64 {
    cate.inner(h)
}

// ---------------------------------------------------------------------------
// IV / MTE
// ---------------------------------------------------------------------------

/// Wald ratio on the equilibrium-adjusted outcome plus oracle diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct WaldReport {
    pub wald: f64,
    pub cov_wz: f64,
    /// Direct complier average E[Psi(1) - Psi(0) | p(0) <= xi <= p(1)]
    /// (oracle scenarios with xi simulated).
    pub complier_average: Option<f64>,
    pub n_compliers: usize,
}

/// Cov(Psi_total, Z) / Cov(W, Z) with a weak-instrument guard.
pub fn wald_psi(
    spec: &ScenarioSpec,
    psi: &PsiDecomposition,
    agents: &AgentTable,
) -> Result<WaldReport> {
    let z = agents
        .z
        .as_ref()
        .ok_or_else(|| MpeError::Config("agents carry no instrument column".into()))?;
    let n = agents.len() as f64;
    let zbar = z.iter().sum::<f64>() / n;
    let wbar = agents.w.iter().sum::<f64>() / n;
    let totals = psi.totals();
    let pbar = totals.iter().sum::<f64>() / n;
    let mut cov_wz = 0.0;
    let mut cov_pz = 0.0;
    for i in 0..agents.len() {
        cov_wz += (agents.w[i] - wbar) * (z[i] - zbar);
        cov_pz += (totals[i] - pbar) * (z[i] - zbar);
    }
    cov_wz /= n;
    cov_pz /= n;
    if cov_wz.abs() <= 1e-3 {
        return Err(MpeError::WeakInstrument(cov_wz.abs()));
    }
    let (complier_average, n_compliers) = complier_mte_average(spec, agents)?;
    Ok(WaldReport { wald: cov_pz / cov_wz, cov_wz, complier_average, n_compliers })
}

/// Structural complier average of MTE on Psi-total from the simulated latent
/// resistance. The catalog IV design keeps reports independent of W, so the
/// market components cancel in the potential-outcome contrast.
fn complier_mte_average(
    spec: &ScenarioSpec,
    agents: &AgentTable,
) -> Result<(Option<f64>, usize)> {
    let (Some(xi), Some(iv), Some(mte)) = (agents.xi.as_ref(), spec.iv.as_ref(), spec.outcome.mte)
    else {
        return Ok((None, 0));
    };
    let (p_lo, p_hi) = (iv.p_z0.min(iv.p_z1), iv.p_z0.max(iv.p_z1));
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..agents.len() {
        if xi[i] >= p_lo && xi[i] <= p_hi {
            let rep = &agents.rep[i];
            let a = agents.a[i];
            let d = spec.outcome.mean(1.0, a, rep, 0.0) - spec.outcome.mean(0.0, a, rep, 0.0)
                + mte.alpha
                + mte.beta * xi[i];
            sum += d;
            count += 1;
        }
    }
    if count == 0 {
        return Ok((None, 0));
    }
    Ok((Some(sum / count as f64), count))
}

/// ITT on Psi: E[Psi_total s_Z(Z)] (sample mean; Z is randomly assigned).
pub fn itt_psi(psi: &PsiDecomposition, agents: &AgentTable, s_z: &PolicyScore) -> Result<f64> {
    let z = agents
        .z
        .as_ref()
        .ok_or_else(|| MpeError::Config("agents carry no instrument column".into()))?;
    let n = agents.len() as f64;
    let mut s = 0.0;
    for i in 0..agents.len() {
        s += psi.psi_total(i) * s_z.eval(z[i]);
    }
    Ok(s / n)
}

/// MPE of the complier-targeted score s_{W|xi} (oracle mode only: xi is
/// simulated). The score shifts treatment probability uniformly on the
/// complier window.
pub fn complier_score_mpe(
    spec: &ScenarioSpec,
    psi: &PsiDecomposition,
    agents: &AgentTable,
) -> Result<f64> {
    let xi = agents
        .xi
        .as_ref()
        .ok_or_else(|| MpeError::Config("agents carry no latent resistance column".into()))?;
    let iv =
        spec.iv.as_ref().ok_or_else(|| MpeError::Config("not an IV scenario".into()))?;
    let (p_lo, p_hi) = (iv.p_z0.min(iv.p_z1), iv.p_z0.max(iv.p_z1));
    let n = agents.len() as f64;
    let mut s = 0.0;
    for i in 0..agents.len() {
        if xi[i] < p_lo || xi[i] > p_hi {
            continue;
        }
        // On the complier window W = 1 exactly when Z takes its high-p arm.
        let p1 = if iv.p_z1 > iv.p_z0 { iv.z_prob } else { 1.0 - iv.z_prob };
        let sc = if agents.w[i] > 0.5 { 1.0 / p1 } else { -1.0 / (1.0 - p1) };
        s += psi.psi_total(i) * sc;
    }
    Ok(s / n)
}
