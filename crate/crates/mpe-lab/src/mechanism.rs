//! The mechanism catalog.
//!
//! Every allocation rule is stored in decomposed form: a list of arms, each
//! `h(r, c, P) * prod_j 1{phi_j(r, c) >= 0}` with affine eligibility indices
//! `phi = +-(r_coord - c_k)`. Several arms may feed the same allocation
//! (unions of half-spaces split into disjoint intersections), and the
//! outside option carries explicit arms so boundary terms see both sides of
//! every margin. All aggregate integrals, Jacobians, and welfare-gradient
//! boundary terms are computed from this one representation.

use serde::{Deserialize, Serialize};

use crate::population::{AgentTable, Rep, ReportDist, ReportLawSpec, ScenarioSpec, ScoreR};
use crate::quad::Quad;
use crate::{MpeError, Result};

/// Mechanism selection plus mechanism-specific parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case", deny_unknown_fields)]
pub enum Mechanism {
    /// Binary demand, allocation with probability c to demanders.
    RandomRationing,
    /// mu_1 = 1{r >= c}: allocation to reports above the clearing cutoff.
    PriceCutoff,
    /// Second-price auction with n i.i.d. participants: the interim win
    /// probability is 1{r >= c} F(r)^{n-1}, treating the agent's own report
    /// as excluded from the n-1 competitors.
    SecondPriceAuction { n: usize },
    /// Two schools, eligibility V_k >= c_k, most-preferred eligible school.
    TwoSchoolDa,
    /// Parametric two-school TTC: clearing parameters are the V1 cutoff
    /// (shared by both rounds) and the two V2 cutoffs (round 1 and round 2).
    TtcTwoSchool { pi1: f64 },
}

/// One eligibility condition: above => r[coord] >= c[c_index],
/// below => r[coord] < c[c_index]. Ties sit on the closed side.
#[derive(Debug, Clone, Copy)]
pub struct Cond {
    pub coord: usize,
    pub above: bool,
    pub c_index: usize,
}

/// Smooth lottery component of an arm.
#[derive(Debug, Clone, Copy)]
pub enum Smooth {
    One,
    /// h = c[0] (rationing probability for demanders).
    RationProb,
    /// h = 1 - c[0].
    RationRest,
    /// h = F(r)^{n-1}: probability all n-1 competitors bid below r.
    AuctionWin { n: usize },
    /// h = 1 - F(r)^{n-1}: eligible but outbid.
    AuctionLoseTail { n: usize },
}

impl Smooth {
    pub fn h(&self, rep: &Rep, c: &[f64], meas: &Meas) -> f64 {
        match *self {
            Smooth::One => 1.0,
            Smooth::RationProb => c[0],
            Smooth::RationRest => 1.0 - c[0],
            Smooth::AuctionWin { n } => meas.scalar_cdf(rep.v[0]).powi(n as i32 - 1),
            Smooth::AuctionLoseTail { n } => 1.0 - meas.scalar_cdf(rep.v[0]).powi(n as i32 - 1),
        }
    }

    pub fn grad_c(&self, j: usize) -> f64 {
        match *self {
            Smooth::RationProb if j == 0 => 1.0,
            Smooth::RationRest if j == 0 => -1.0,
            _ => 0.0,
        }
    }

    /// Functional-derivative kernel L(r, r') of h w.r.t. the report law.
    pub fn kernel(&self, rep: &Rep, r_other: f64, meas: &Meas) -> f64 {
        match *self {
            Smooth::AuctionWin { n } => {
                if r_other <= rep.v[0] {
                    (n as f64 - 1.0) * meas.scalar_cdf(rep.v[0]).powi(n as i32 - 2)
                } else {
                    0.0
                }
            }
            Smooth::AuctionLoseTail { n } => {
                if r_other <= rep.v[0] {
                    -(n as f64 - 1.0) * meas.scalar_cdf(rep.v[0]).powi(n as i32 - 2)
                } else {
                    0.0
                }
            }
            _ => 0.0,
        }
    }

    pub fn has_kernel(&self) -> bool {
        matches!(self, Smooth::AuctionWin { .. } | Smooth::AuctionLoseTail { .. })
    }
}

/// One component of the decomposition mu_a = sum of h * prod 1{phi >= 0}.
#[derive(Debug, Clone)]
pub struct Arm {
    pub alloc: usize,
    pub smooth: Smooth,
    pub conds: Vec<Cond>,
}

impl Arm {
    fn holds(&self, rep: &Rep, c: &[f64]) -> bool {
        self.conds.iter().all(|cd| {
            if cd.above {
                rep.v[cd.coord] >= c[cd.c_index]
            } else {
                rep.v[cd.coord] < c[cd.c_index]
            }
        })
    }

    /// Effective bounds for `coord` after intersecting this arm's conditions
    /// with the support interval.
    pub(crate) fn coord_bounds(&self, coord: usize, support: (f64, f64), c: &[f64]) -> (f64, f64) {
        let (mut lo, mut hi) = support;
        for cd in &self.conds {
            if cd.coord == coord {
                if cd.above {
                    lo = lo.max(c[cd.c_index]);
                } else {
                    hi = hi.min(c[cd.c_index]);
                }
            }
        }
        (lo, hi)
    }
}

/// Report measure: the weight measure agents are integrated against, plus
/// the environment distribution the mechanism's smooth parts read (the
/// auction's F_R). The two coincide except in channel-isolating oracles
/// (perturb P_R inside mu while integrating against the baseline) and in
/// conditional-on-policy integrals (integrate against R | W = w while the
/// market still sees the marginal).
pub struct Meas<'a> {
    pub dist: &'a ReportDist,
    pub tilt: Option<(f64, &'a dyn ScoreR)>,
    env: Option<(&'a ReportDist, Option<(f64, &'a dyn ScoreR)>)>,
    quad: Quad,
}

impl<'a> Meas<'a> {
    pub fn new(dist: &'a ReportDist) -> Self {
        Meas { dist, tilt: None, env: None, quad: Quad::default() }
    }

    pub fn tilted(dist: &'a ReportDist, theta: f64, score: &'a dyn ScoreR) -> Self {
        Meas { dist, tilt: Some((theta, score)), env: None, quad: Quad::default() }
    }

    /// Weight measure `dist`, environment (smooth-part summary) `env`.
    pub fn with_env(dist: &'a ReportDist, env: &'a ReportDist) -> Self {
        Meas { dist, tilt: None, env: Some((env, None)), quad: Quad::default() }
    }

    /// Baseline weight measure with a tilted environment: isolates the
    /// competition channel (P_R inside mu moves, the population does not).
    pub fn env_tilted(dist: &'a ReportDist, theta: f64, score: &'a dyn ScoreR) -> Self {
        Meas { dist, tilt: None, env: Some((dist, Some((theta, score)))), quad: Quad::default() }
    }

    pub fn with_quad(mut self, quad: Quad) -> Self {
        self.quad = quad;
        self
    }

    fn factor(&self, rep: &Rep) -> f64 {
        match &self.tilt {
            Some((theta, s)) => 1.0 + theta * s.eval(rep),
            None => 1.0,
        }
    }

    fn env_parts(&self) -> (&'a ReportDist, &Option<(f64, &'a dyn ScoreR)>) {
        match &self.env {
            Some((d, t)) => (d, t),
            None => (self.dist, &self.tilt),
        }
    }

    /// Density weight over the report space: discrete mass times continuous
    /// joint density, times the tilt factor.
    pub fn weight(&self, rep: &Rep) -> f64 {
        let base = match self.dist {
            ReportDist::BinaryDemand { p1 } => {
                if rep.d == 1 {
                    *p1
                } else {
                    1.0 - p1
                }
            }
            ReportDist::Scalar(m) => m.pdf(rep.v[0]),
            ReportDist::TwoSchool { shares, .. } => {
                shares[rep.d] * self.dist.joint_pdf(rep.v[0], rep.v[1])
            }
        };
        base * self.factor(rep)
    }

    /// CDF of the scalar report under the environment distribution.
    pub fn scalar_cdf(&self, r: f64) -> f64 {
        let (dist, tilt) = self.env_parts();
        match dist {
            ReportDist::Scalar(m) => {
                let base = m.cdf(r);
                match tilt {
                    None => base,
                    Some((theta, s)) => {
                        let (lo, _) = m.support();
                        base + theta
                            * self.quad.integrate(lo, r.max(lo), &[], |t| {
                                s.eval(&Rep::scalar(t)) * m.pdf(t)
                            })
                    }
                }
            }
            _ => 0.0,
        }
    }

    pub fn scalar_pdf(&self, r: f64) -> f64 {
        let (dist, tilt) = self.env_parts();
        match dist {
            ReportDist::Scalar(m) => {
                let base = m.pdf(r);
                match tilt {
                    None => base,
                    Some((theta, s)) => base * (1.0 + theta * s.eval(&Rep::scalar(r))),
                }
            }
            _ => 0.0,
        }
    }

    /// d/dr of the environment's scalar density; used by the Myerson solver.
    pub fn scalar_dpdf(&self, r: f64) -> f64 {
        let (dist, tilt) = self.env_parts();
        match dist {
            ReportDist::Scalar(m) => match tilt {
                None => m.dpdf(r),
                Some((theta, s)) => {
                    let rep = Rep::scalar(r);
                    let ds = s.deriv(&rep).unwrap_or_else(|| {
                        let h = 1e-6;
                        (s.eval(&Rep::scalar(r + h)) - s.eval(&Rep::scalar(r - h))) / (2.0 * h)
                    });
                    m.dpdf(r) * (1.0 + theta * s.eval(&rep)) + m.pdf(r) * theta * ds
                }
            },
            _ => 0.0,
        }
    }

    pub fn support(&self) -> (f64, f64) {
        self.dist.support()
    }

    pub fn quad(&self) -> &Quad {
        &self.quad
    }
}

impl Mechanism {
    /// Number of scarce goods K (allocations run 0..=K).
    pub fn k_goods(&self) -> usize {
        match self {
            Mechanism::RandomRationing
            | Mechanism::PriceCutoff
            | Mechanism::SecondPriceAuction { .. } => 1,
            Mechanism::TwoSchoolDa | Mechanism::TtcTwoSchool { .. } => 2,
        }
    }

    /// Dimension of the clearing parameter vector.
    pub fn clearing_dim(&self) -> usize {
        match self {
            Mechanism::TwoSchoolDa => 2,
            Mechanism::TtcTwoSchool { .. } => 3,
            _ => 1,
        }
    }

    /// Number of discrete report components.
    pub fn disc_count(&self) -> usize {
        match self {
            Mechanism::RandomRationing => 2,
            Mechanism::PriceCutoff | Mechanism::SecondPriceAuction { .. } => 1,
            Mechanism::TwoSchoolDa | Mechanism::TtcTwoSchool { .. } => 6,
        }
    }

    pub fn validate(&self, report: &ReportLawSpec) -> Result<()> {
        let ok = matches!(
            (self, report),
            (Mechanism::RandomRationing, ReportLawSpec::BinaryDemand { .. })
                | (Mechanism::PriceCutoff, ReportLawSpec::ScalarTilt { .. })
                | (Mechanism::PriceCutoff, ReportLawSpec::LocationShift { .. })
                | (Mechanism::PriceCutoff, ReportLawSpec::ScalarIid { .. })
                | (Mechanism::SecondPriceAuction { .. }, ReportLawSpec::ScalarTilt { .. })
                | (Mechanism::SecondPriceAuction { .. }, ReportLawSpec::LocationShift { .. })
                | (Mechanism::SecondPriceAuction { .. }, ReportLawSpec::ScalarIid { .. })
                | (Mechanism::TwoSchoolDa, ReportLawSpec::TwoSchool { .. })
                | (Mechanism::TtcTwoSchool { .. }, ReportLawSpec::TwoSchool { .. })
        );
        if !ok {
            return Err(MpeError::Config(format!(
                "mechanism {self:?} incompatible with report law shape"
            )));
        }
        if let Mechanism::SecondPriceAuction { n } = self {
            if *n < 2 {
                return Err(MpeError::Config("auction requires n >= 2".into()));
            }
        }
        if let Mechanism::TtcTwoSchool { pi1 } = self {
            if !(*pi1 > 0.0 && *pi1 < 1.0) {
                return Err(MpeError::Config("pi1 must lie in (0,1)".into()));
            }
        }
        Ok(())
    }

    /// The decomposed arm list for discrete report component `d`.
    ///
    /// Preference types for school mechanisms are indexed
    /// [1>2>0, 2>1>0, 1>0>2, 2>0>1, 0>1>2, 0>2>1].
    pub fn arms(&self, d: usize) -> Vec<Arm> {
        let c = |coord: usize, above: bool, c_index: usize| Cond { coord, above, c_index };
        match self {
            Mechanism::RandomRationing => {
                if d == 1 {
                    vec![
                        Arm { alloc: 1, smooth: Smooth::RationProb, conds: vec![] },
                        Arm { alloc: 0, smooth: Smooth::RationRest, conds: vec![] },
                    ]
                } else {
                    vec![Arm { alloc: 0, smooth: Smooth::One, conds: vec![] }]
                }
            }
            Mechanism::PriceCutoff => vec![
                Arm { alloc: 1, smooth: Smooth::One, conds: vec![c(0, true, 0)] },
                Arm { alloc: 0, smooth: Smooth::One, conds: vec![c(0, false, 0)] },
            ],
            Mechanism::SecondPriceAuction { n } => vec![
                Arm { alloc: 1, smooth: Smooth::AuctionWin { n: *n }, conds: vec![c(0, true, 0)] },
                Arm {
                    alloc: 0,
                    smooth: Smooth::AuctionLoseTail { n: *n },
                    conds: vec![c(0, true, 0)],
                },
                Arm { alloc: 0, smooth: Smooth::One, conds: vec![c(0, false, 0)] },
            ],
            Mechanism::TwoSchoolDa => {
                let one = Smooth::One;
                match d {
                    // 1 > 2 > 0
                    0 => vec![
                        Arm { alloc: 1, smooth: one, conds: vec![c(0, true, 0)] },
                        Arm { alloc: 2, smooth: one, conds: vec![c(0, false, 0), c(1, true, 1)] },
                        Arm { alloc: 0, smooth: one, conds: vec![c(0, false, 0), c(1, false, 1)] },
                    ],
                    // 2 > 1 > 0
                    1 => vec![
                        Arm { alloc: 2, smooth: one, conds: vec![c(1, true, 1)] },
                        Arm { alloc: 1, smooth: one, conds: vec![c(1, false, 1), c(0, true, 0)] },
                        Arm { alloc: 0, smooth: one, conds: vec![c(1, false, 1), c(0, false, 0)] },
                    ],
                    // 1 > 0 > 2
                    2 => vec![
                        Arm { alloc: 1, smooth: one, conds: vec![c(0, true, 0)] },
                        Arm { alloc: 0, smooth: one, conds: vec![c(0, false, 0)] },
                    ],
                    // 2 > 0 > 1
                    3 => vec![
                        Arm { alloc: 2, smooth: one, conds: vec![c(1, true, 1)] },
                        Arm { alloc: 0, smooth: one, conds: vec![c(1, false, 1)] },
                    ],
                    // outside option first
                    _ => vec![Arm { alloc: 0, smooth: one, conds: vec![] }],
                }
            }
            Mechanism::TtcTwoSchool { .. } => {
                // Clearing vector: c[0] = V1 cutoff (both rounds, frozen
                // frontier), c[1] = round-1 V2 cutoff (grants school 1),
                // c[2] = round-2 V2 cutoff (grants school 2), c[1] >= c[2].
                let one = Smooth::One;
                match d {
                    // 1 > 2 > 0: school 1 via V1 >= c0 or V2 >= c1.
                    0 => vec![
                        Arm { alloc: 1, smooth: one, conds: vec![c(0, true, 0)] },
                        Arm { alloc: 1, smooth: one, conds: vec![c(0, false, 0), c(1, true, 1)] },
                        Arm {
                            alloc: 2,
                            smooth: one,
                            conds: vec![c(0, false, 0), c(1, false, 1), c(1, true, 2)],
                        },
                        Arm { alloc: 0, smooth: one, conds: vec![c(0, false, 0), c(1, false, 2)] },
                    ],
                    // 2 > 1 > 0: school 2 via V1 >= c0 or V2 >= c2; with
                    // c1 >= c2 the leftover school-1 region is empty.
                    1 => vec![
                        Arm { alloc: 2, smooth: one, conds: vec![c(0, true, 0)] },
                        Arm { alloc: 2, smooth: one, conds: vec![c(0, false, 0), c(1, true, 2)] },
                        Arm { alloc: 0, smooth: one, conds: vec![c(0, false, 0), c(1, false, 2)] },
                    ],
                    // 1 > 0 > 2
                    2 => vec![
                        Arm { alloc: 1, smooth: one, conds: vec![c(0, true, 0)] },
                        Arm { alloc: 1, smooth: one, conds: vec![c(0, false, 0), c(1, true, 1)] },
                        Arm { alloc: 0, smooth: one, conds: vec![c(0, false, 0), c(1, false, 1)] },
                    ],
                    // 2 > 0 > 1
                    3 => vec![
                        Arm { alloc: 2, smooth: one, conds: vec![c(0, true, 0)] },
                        Arm { alloc: 2, smooth: one, conds: vec![c(0, false, 0), c(1, true, 2)] },
                        Arm { alloc: 0, smooth: one, conds: vec![c(0, false, 0), c(1, false, 2)] },
                    ],
                    _ => vec![Arm { alloc: 0, smooth: one, conds: vec![] }],
                }
            }
        }
    }

    /// Allocation probability vector over 0..=K. The outside option absorbs
    /// the residual mass exactly.
    pub fn allocation_prob(&self, rep: &Rep, c: &[f64], meas: &Meas) -> Result<Vec<f64>> {
        self.check_admissible(c)?;
        let k = self.k_goods();
        let mut p = vec![0.0; k + 1];
        for arm in self.arms(rep.d) {
            if arm.alloc >= 1 && arm.holds(rep, c) {
                p[arm.alloc] += arm.smooth.h(rep, c, meas);
            }
        }
        let taken: f64 = p[1..].iter().sum();
        p[0] = 1.0 - taken;
        Ok(p)
    }

    fn check_admissible(&self, c: &[f64]) -> Result<()> {
        if c.len() != self.clearing_dim() {
            return Err(MpeError::Domain(format!(
                "clearing vector has {} components, expected {}",
                c.len(),
                self.clearing_dim()
            )));
        }
        if matches!(self, Mechanism::RandomRationing) && !(0.0..=1.0).contains(&c[0]) {
            return Err(MpeError::Domain(format!("rationing probability {} outside [0,1]", c[0])));
        }
        Ok(())
    }

    /// Integral of f * h * dP over one arm's region.
    pub fn arm_integral<F: Fn(&Rep) -> f64>(
        &self,
        d: usize,
        arm: &Arm,
        c: &[f64],
        meas: &Meas,
        f: F,
    ) -> f64 {
        let q = *meas.quad();
        match meas.dist {
            ReportDist::BinaryDemand { .. } => {
                let rep = Rep::binary(d);
                if arm.holds(&rep, c) {
                    f(&rep) * arm.smooth.h(&rep, c, meas) * meas.weight(&rep)
                } else {
                    0.0
                }
            }
            ReportDist::Scalar(m) => {
                let (lo, hi) = arm.coord_bounds(0, m.support(), c);
                if hi <= lo {
                    return 0.0;
                }
                q.integrate(lo, hi, &[], |r| {
                    let rep = Rep::scalar(r);
                    f(&rep) * arm.smooth.h(&rep, c, meas) * meas.weight(&rep)
                })
            }
            ReportDist::TwoSchool { .. } => {
                let b0 = arm.coord_bounds(0, (0.0, 1.0), c);
                let b1 = arm.coord_bounds(1, (0.0, 1.0), c);
                if b0.1 <= b0.0 || b1.1 <= b1.0 {
                    return 0.0;
                }
                q.integrate2(b0, b1, &[], &[], |v1, v2| {
                    let rep = Rep::two_school(d, v1, v2);
                    f(&rep) * arm.smooth.h(&rep, c, meas) * meas.weight(&rep)
                })
            }
        }
    }

    /// Visit the quadrature nodes of one arm's region, passing each report
    /// with its combined weight h * density * quadrature-weight. Lets
    /// callers accumulate several statistics in one pass.
    pub fn arm_foreach<F: FnMut(&Rep, f64)>(
        &self,
        d: usize,
        arm: &Arm,
        c: &[f64],
        meas: &Meas,
        mut f: F,
    ) {
        match meas.dist {
            ReportDist::BinaryDemand { .. } => {
                let rep = Rep::binary(d);
                if arm.holds(&rep, c) {
                    f(&rep, arm.smooth.h(&rep, c, meas) * meas.weight(&rep));
                }
            }
            ReportDist::Scalar(m) => {
                let (lo, hi) = arm.coord_bounds(0, m.support(), c);
                if hi <= lo {
                    return;
                }
                let rule = crate::quad::gauss_legendre(128);
                let half = 0.5 * (hi - lo);
                let mid = 0.5 * (hi + lo);
                for (x, w) in rule.0.iter().zip(rule.1.iter()) {
                    let rep = Rep::scalar(half * x + mid);
                    f(&rep, half * w * arm.smooth.h(&rep, c, meas) * meas.weight(&rep));
                }
            }
            ReportDist::TwoSchool { .. } => {
                let b0 = arm.coord_bounds(0, (0.0, 1.0), c);
                let b1 = arm.coord_bounds(1, (0.0, 1.0), c);
                if b0.1 <= b0.0 || b1.1 <= b1.0 {
                    return;
                }
                let rule = crate::quad::gauss_legendre(48);
                let (hx, mx) = (0.5 * (b0.1 - b0.0), 0.5 * (b0.1 + b0.0));
                let (hy, my) = (0.5 * (b1.1 - b1.0), 0.5 * (b1.1 + b1.0));
                for (x, wx) in rule.0.iter().zip(rule.1.iter()) {
                    for (y, wy) in rule.0.iter().zip(rule.1.iter()) {
                        let rep = Rep::two_school(d, hx * x + mx, hy * y + my);
                        f(
                            &rep,
                            hx * hy * wx * wy * arm.smooth.h(&rep, c, meas) * meas.weight(&rep),
                        );
                    }
                }
            }
        }
    }

    /// Gradient in c of the arm integral: inframarginal term (through h)
    /// plus one signed boundary term per threshold condition.
    pub fn arm_integral_grad<F: Fn(&Rep) -> f64 + Copy>(
        &self,
        d: usize,
        arm: &Arm,
        c: &[f64],
        meas: &Meas,
        f: F,
    ) -> Vec<f64> {
        let mut g = self.arm_inframarginal_grad(d, arm, c, meas, f);
        for (c_index, v) in self.arm_boundary_contribs(d, arm, c, meas, f) {
            g[c_index] += v;
        }
        g
    }

    /// Inframarginal gradient: d h / d c_j integrated over the arm region.
    pub fn arm_inframarginal_grad<F: Fn(&Rep) -> f64 + Copy>(
        &self,
        d: usize,
        arm: &Arm,
        c: &[f64],
        meas: &Meas,
        f: F,
    ) -> Vec<f64> {
        let dim = self.clearing_dim();
        let mut g = vec![0.0; dim];
        for j in 0..dim {
            let gh = arm.smooth.grad_c(j);
            if gh != 0.0 {
                // h enters linearly for the rationing smooth parts, so the
                // gradient integral is the arm integral with h replaced by 1.
                let unit = Arm { alloc: arm.alloc, smooth: Smooth::One, conds: arm.conds.clone() };
                g[j] += gh * self.arm_integral(d, &unit, c, meas, f);
            }
        }
        g
    }

    /// Signed boundary terms, one per threshold condition: for phi = r - c_k
    /// (above), d phi / d c_k = -1; for phi = c_k - r (below), +1. The slice
    /// carries h and the arm's other conditions restrict the remaining
    /// coordinate.
    pub fn arm_boundary_contribs<F: Fn(&Rep) -> f64 + Copy>(
        &self,
        d: usize,
        arm: &Arm,
        c: &[f64],
        meas: &Meas,
        f: F,
    ) -> Vec<(usize, f64)> {
        arm.conds
            .iter()
            .enumerate()
            .map(|(ci, cd)| {
                let sign = if cd.above { -1.0 } else { 1.0 };
                let t = c[cd.c_index];
                (cd.c_index, sign * self.boundary_slice(d, arm, ci, t, c, meas, f))
            })
            .collect()
    }

    /// Slice mass (with the smooth part) on one condition's boundary; used
    /// to report boundary densities of reallocated agents.
    pub fn arm_cond_slice<F: Fn(&Rep) -> f64>(
        &self,
        d: usize,
        arm: &Arm,
        cond_idx: usize,
        c: &[f64],
        meas: &Meas,
        f: F,
    ) -> f64 {
        let t = c[arm.conds[cond_idx].c_index];
        self.boundary_slice(d, arm, cond_idx, t, c, meas, f)
    }

    /// Integral of f * h * dP over the slice {r[cond.coord] = t} respecting
    /// the arm's other conditions (the boundary density term).
    fn boundary_slice<F: Fn(&Rep) -> f64>(
        &self,
        d: usize,
        arm: &Arm,
        cond_idx: usize,
        t: f64,
        c: &[f64],
        meas: &Meas,
        f: F,
    ) -> f64 {
        let cd = arm.conds[cond_idx];
        match meas.dist {
            ReportDist::BinaryDemand { .. } => 0.0,
            ReportDist::Scalar(m) => {
                let (lo, hi) = m.support();
                if t < lo || t > hi {
                    return 0.0;
                }
                // Other conditions on the same coordinate must hold at t.
                for (i, other) in arm.conds.iter().enumerate() {
                    if i != cond_idx {
                        let ok =
                            if other.above { t >= c[other.c_index] } else { t < c[other.c_index] };
                        if !ok {
                            return 0.0;
                        }
                    }
                }
                let rep = Rep::scalar(t);
                f(&rep) * arm.smooth.h(&rep, c, meas) * meas.weight(&rep)
            }
            ReportDist::TwoSchool { .. } => {
                let mut bounds = (0.0f64, 1.0f64);
                for (i, other) in arm.conds.iter().enumerate() {
                    if i == cond_idx {
                        continue;
                    }
                    if other.coord == cd.coord {
                        let ok =
                            if other.above { t >= c[other.c_index] } else { t < c[other.c_index] };
                        if !ok {
                            return 0.0;
                        }
                    } else if other.above {
                        bounds.0 = bounds.0.max(c[other.c_index]);
                    } else {
                        bounds.1 = bounds.1.min(c[other.c_index]);
                    }
                }
                if bounds.1 <= bounds.0 || !(0.0..=1.0).contains(&t) {
                    return 0.0;
                }
                let q = *meas.quad();
                q.integrate(bounds.0, bounds.1, &[], |v_other| {
                    let (v1, v2) = if cd.coord == 0 { (t, v_other) } else { (v_other, t) };
                    let rep = Rep::two_school(d, v1, v2);
                    f(&rep) * arm.smooth.h(&rep, c, meas) * meas.weight(&rep)
                })
            }
        }
    }

    /// Aggregate shares E[mu_k] for k = 1..K under the measure.
    pub fn aggregate_shares(&self, c: &[f64], meas: &Meas) -> Vec<f64> {
        let k = self.k_goods();
        let mut shares = vec![0.0; k];
        for d in 0..self.disc_count() {
            for arm in self.arms(d) {
                if arm.alloc >= 1 {
                    shares[arm.alloc - 1] += self.arm_integral(d, &arm, c, meas, |_| 1.0);
                }
            }
        }
        shares
    }

    /// Analytic Jacobian of the aggregate shares in c (K x clearing_dim).
    pub fn share_jacobian(&self, c: &[f64], meas: &Meas) -> Vec<Vec<f64>> {
        let k = self.k_goods();
        let mut jac = vec![vec![0.0; self.clearing_dim()]; k];
        for d in 0..self.disc_count() {
            for arm in self.arms(d) {
                if arm.alloc >= 1 {
                    let g = self.arm_integral_grad(d, &arm, c, meas, |_| 1.0);
                    for (j, v) in g.iter().enumerate() {
                        jac[arm.alloc - 1][j] += v;
                    }
                }
            }
        }
        jac
    }

    /// Representer of the conduct map's distributional derivative for
    /// capacity rules: D_P G_k[s] = E_0[rep_k(R) s(R)].
    ///
    /// For mechanisms whose smooth part is free of P_R this is mu_k itself.
    /// The fixed-q auction's clearing equation reduces to a fixed quantile
    /// F(c) = (1 - n q)^{1/n}, whose representer is F(c)^{n-1} 1{r >= c};
    /// using raw mu here would drop the kernel channel of the derivative.
    pub fn conduct_representer(&self, k: usize, rep: &Rep, c: &[f64], meas: &Meas) -> f64 {
        match self {
            Mechanism::SecondPriceAuction { n } => {
                if rep.v[0] >= c[0] {
                    meas.scalar_cdf(c[0]).powi(*n as i32 - 1)
                } else {
                    0.0
                }
            }
            _ => {
                let p = self
                    .allocation_prob(rep, c, meas)
                    .unwrap_or_else(|_| vec![0.0; self.k_goods() + 1]);
                p[k + 1]
            }
        }
    }

    /// Draw allocations and outcomes for every agent. Deterministic given
    /// the seed; agents get independent substreams.
    pub fn assign(
        &self,
        spec: &ScenarioSpec,
        agents: &mut AgentTable,
        c: &[f64],
        meas: &Meas,
        seed: u64,
    ) -> Result<()> {
        use rand::Rng;
        for i in 0..agents.len() {
            let mut rng = crate::population::agent_rng(seed, i as u64, 1);
            let u_a: f64 = rng.gen();
            let u_y: f64 = rng.gen();
            let p = self.allocation_prob(&agents.rep[i], c, meas)?;
            let mut acc = 0.0;
            let mut alloc = 0usize;
            for (a, pa) in p.iter().enumerate() {
                acc += pa;
                if u_a <= acc {
                    alloc = a;
                    break;
                }
            }
            agents.a[i] = alloc;
            let x = agents.x.as_ref().map(|v| v[i]).unwrap_or(0.0);
            let xi = agents.xi.as_ref().map(|v| v[i]);
            agents.y[i] = spec.outcome.draw(agents.w[i], alloc, &agents.rep[i], x, xi, u_y);
        }
        Ok(())
    }
}

/// Spillover kernel of the auction win probability:
/// L_1(r, r') = 1{r >= c} (n-1) F(r)^{n-2} 1{r' <= r}.
pub fn kernel_l_auction(n: usize, r: f64, r_other: f64, c: f64, meas: &Meas) -> f64 {
    if r < c || r_other > r {
        return 0.0;
    }
    (n as f64 - 1.0) * meas.scalar_cdf(r).powi(n as i32 - 2)
}

/// Brute-force solver used as an oracle for the two-school capacity system:
/// bivariate grid search refined to the requested resolution.
pub fn two_school_grid_solve(
    mech: &Mechanism,
    meas: &Meas,
    q: &[f64],
    resolution: f64,
) -> Result<Vec<f64>> {
    let mut lo = [0.0f64, 0.0];
    let mut hi = [1.0f64, 1.0];
    let mut best = [0.5, 0.5];
    let mut step = 0.25;
    while step > resolution / 8.0 {
        let mut best_err = f64::INFINITY;
        let n = 9;
        for i in 0..=n {
            for j in 0..=n {
                let c1 = (lo[0] + (hi[0] - lo[0]) * i as f64 / n as f64).clamp(0.0, 1.0);
                let c2 = (lo[1] + (hi[1] - lo[1]) * j as f64 / n as f64).clamp(0.0, 1.0);
                let s = mech.aggregate_shares(&[c1, c2], meas);
                let err = (s[0] - q[0]).abs() + (s[1] - q[1]).abs();
                if err < best_err {
                    best_err = err;
                    best = [c1, c2];
                }
            }
        }
        lo = [best[0] - step, best[1] - step];
        hi = [best[0] + step, best[1] + step];
        step *= 0.5;
    }
    Ok(best.to_vec())
}

/// Discrete-agent TTC simulation for two schools with full preference lists
/// (everyone prefers any school over the outside option). Returns the
/// simulated cutoff triple (V1 cutoff, round-1 V2 cutoff, round-2 V2 cutoff).
pub fn simulate_ttc_two_school(
    pi1: f64,
    q1: f64,
    q2: f64,
    n: usize,
    seed: u64,
) -> (f64, f64, f64) {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut v1 = vec![0.0f64; n];
    let mut v2 = vec![0.0f64; n];
    let mut pref1 = vec![false; n];
    for i in 0..n {
        v1[i] = rng.gen();
        v2[i] = rng.gen();
        pref1[i] = rng.gen::<f64>() < pi1;
    }
    let mut by_v1: Vec<usize> = (0..n).collect();
    by_v1.sort_by(|&a, &b| v1[b].partial_cmp(&v1[a]).unwrap());
    let mut by_v2: Vec<usize> = (0..n).collect();
    by_v2.sort_by(|&a, &b| v2[b].partial_cmp(&v2[a]).unwrap());

    let mut cap1 = (q1 * n as f64).round() as i64;
    let mut cap2 = (q2 * n as f64).round() as i64;
    let mut assigned = vec![false; n];
    let (mut i1, mut i2) = (0usize, 0usize);
    let mut frontier1 = 1.0f64;
    let mut frontier2 = 1.0f64;

    // Phase 1: both schools point; cycles are (top1 wants 1), (top2 wants 2),
    // or the 2-cycle (top1 wants 2, top2 wants 1).
    while cap1 > 0 && cap2 > 0 {
        while i1 < n && assigned[by_v1[i1]] {
            i1 += 1;
        }
        while i2 < n && assigned[by_v2[i2]] {
            i2 += 1;
        }
        if i1 >= n || i2 >= n {
            break;
        }
        let s1 = by_v1[i1];
        let s2 = by_v2[i2];
        frontier1 = v1[s1];
        frontier2 = v2[s2];
        if pref1[s1] {
            assigned[s1] = true;
            cap1 -= 1;
        } else if !pref1[s2] {
            assigned[s2] = true;
            cap2 -= 1;
        } else {
            // s1 wants 2, s2 wants 1: trade.
            assigned[s1] = true;
            assigned[s2] = true;
            cap1 -= 1;
            cap2 -= 1;
        }
    }
    let mut cut_v1 = frontier1;
    let cut_v2_round1 = frontier2;

    // Phase 2: remaining school runs a serial dictatorship by its own score.
    let mut cut_v2_round2 = cut_v2_round1;
    if cap2 > 0 {
        while cap2 > 0 && i2 < n {
            while i2 < n && assigned[by_v2[i2]] {
                i2 += 1;
            }
            if i2 >= n {
                break;
            }
            let s = by_v2[i2];
            assigned[s] = true;
            cap2 -= 1;
            cut_v2_round2 = v2[s];
        }
    } else if cap1 > 0 {
        // Relabeled case: school 2 filled first; phase 2 runs on V1.
        while cap1 > 0 && i1 < n {
            while i1 < n && assigned[by_v1[i1]] {
                i1 += 1;
            }
            if i1 >= n {
                break;
            }
            let s = by_v1[i1];
            assigned[s] = true;
            cap1 -= 1;
            cut_v1 = v1[s];
        }
    }
    (cut_v1, cut_v2_round1, cut_v2_round2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::{Density1, Mixture};

    fn uniform_scalar() -> ReportDist {
        ReportDist::Scalar(
            Mixture::new(vec![(1.0, Density1::Uniform { lo: 0.0, hi: 1.0 })]).unwrap(),
        )
    }

    #[test]
    fn rationing_allocation_prob() {
        let mech = Mechanism::RandomRationing;
        let dist = ReportDist::BinaryDemand { p1: 0.8 };
        let meas = Meas::new(&dist);
        let p = mech.allocation_prob(&Rep::binary(1), &[0.4], &meas).unwrap();
        assert!((p[1] - 0.4).abs() < 1e-15);
        assert!((p[0] - 0.6).abs() < 1e-15);
        let p0 = mech.allocation_prob(&Rep::binary(0), &[0.4], &meas).unwrap();
        assert!((p0[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn price_cutoff_allocation_prob() {
        let mech = Mechanism::PriceCutoff;
        let dist = uniform_scalar();
        let meas = Meas::new(&dist);
        let p = mech.allocation_prob(&Rep::scalar(0.8), &[0.5], &meas).unwrap();
        assert!((p[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn auction_allocation_prob_uniform() {
        let mech = Mechanism::SecondPriceAuction { n: 2 };
        let dist = uniform_scalar();
        let meas = Meas::new(&dist);
        let p = mech.allocation_prob(&Rep::scalar(0.8), &[0.5], &meas).unwrap();
        assert!((p[1] - 0.8).abs() < 1e-12);
        assert!((p[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn kernel_zeroing() {
        let dist = uniform_scalar();
        let meas = Meas::new(&dist);
        // ineligible bidder: no spillover
        assert_eq!(kernel_l_auction(2, 0.3, 0.1, 0.5, &meas), 0.0);
        // r' above r: indicator kills it
        assert_eq!(kernel_l_auction(2, 0.9, 0.95, 0.5, &meas), 0.0);
        // n = 2: (n-1) F^0 = 1
        assert!((kernel_l_auction(2, 0.9, 0.3, 0.5, &meas) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn probability_simplex_on_grid() {
        let dist = uniform_scalar();
        let meas = Meas::new(&dist);
        for mech in [Mechanism::PriceCutoff, Mechanism::SecondPriceAuction { n: 3 }] {
            for i in 0..=100 {
                let r = i as f64 / 100.0;
                let p = mech.allocation_prob(&Rep::scalar(r), &[0.45], &meas).unwrap();
                let s: f64 = p.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(p.iter().all(|x| (-1e-12..=1.0 + 1e-12).contains(x)));
            }
        }
    }

    #[test]
    fn aggregate_share_auction_closed_form() {
        // E[mu_1] = (1 - F(c)^n)/n for the n-bidder auction.
        let mech = Mechanism::SecondPriceAuction { n: 3 };
        let dist = uniform_scalar();
        let meas = Meas::new(&dist);
        let c = 0.4;
        let s = mech.aggregate_shares(&[c], &meas);
        let expected = (1.0 - c.powi(3)) / 3.0;
        assert!((s[0] - expected).abs() < 1e-12, "{} vs {}", s[0], expected);
    }

    #[test]
    fn share_jacobian_matches_closed_forms() {
        let dist = uniform_scalar();
        let meas = Meas::new(&dist);
        // Price cutoff: d E[mu_1] / dc = -f(c) = -1.
        let j = Mechanism::PriceCutoff.share_jacobian(&[0.7], &meas);
        assert!((j[0][0] + 1.0).abs() < 1e-12);
        // Auction: -F(c)^{n-1} f(c).
        let j = Mechanism::SecondPriceAuction { n: 2 }.share_jacobian(&[0.5], &meas);
        assert!((j[0][0] + 0.5).abs() < 1e-12);
        // Rationing: d E[c R]/dc = E[R].
        let dist = ReportDist::BinaryDemand { p1: 0.8 };
        let meas = Meas::new(&dist);
        let j = Mechanism::RandomRationing.share_jacobian(&[0.4], &meas);
        assert!((j[0][0] - 0.8).abs() < 1e-14);
    }
}
