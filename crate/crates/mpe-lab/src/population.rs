//! Synthetic populations: policy laws, report laws, outcome laws, policy
//! scores, the induced report score, and perturbed (tilted) laws.
//!
//! Everything is specified in closed form. Continuous supports are bounded
//! intervals and densities are validated to integrate to one. Sampling is
//! deterministic given a seed, with one counter-based generator stream per
//! agent so that draws couple across perturbation strengths (common random
//! numbers) and parallel chunking cannot change results.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::quad::Quad;
use crate::special::{norm_cdf, norm_pdf};
use crate::{MpeError, Result};

/// Mass tolerance for density normalization checks.
pub const MASS_TOL: f64 = 1e-8;

// ---------------------------------------------------------------------------
// One-dimensional density families on bounded supports
// ---------------------------------------------------------------------------

/// Closed-form 1-D density on a bounded interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Density1 {
    Uniform { lo: f64, hi: f64 },
    /// f(r) = a + b r on [lo, hi]; must be nonnegative and integrate to 1.
    Linear { a: f64, b: f64, lo: f64, hi: f64 },
    TruncNormal { mu: f64, sigma: f64, lo: f64, hi: f64 },
}

impl Density1 {
    /// Uniform-base linear tilt: f(r) = (1 + delta*(2u - 1)) / (hi - lo)
    /// with u = (r - lo)/(hi - lo). Normalized by construction.
    pub fn linear_tilt(delta: f64, lo: f64, hi: f64) -> Self {
        let len = hi - lo;
        // 1 + delta*(2(r-lo)/len - 1) = (1 - delta - 2*delta*lo/len) + (2*delta/len) r, all / len
        let a = (1.0 - delta + 2.0 * delta * lo / len) / len;
        let b = 2.0 * delta / (len * len);
        Density1::Linear { a, b, lo, hi }
    }

    pub fn support(&self) -> (f64, f64) {
        match *self {
            Density1::Uniform { lo, hi }
            | Density1::Linear { lo, hi, .. }
            | Density1::TruncNormal { lo, hi, .. } => (lo, hi),
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let (lo, hi) = self.support();
        if x < lo || x > hi {
            return 0.0;
        }
        match *self {
            Density1::Uniform { lo, hi } => 1.0 / (hi - lo),
            Density1::Linear { a, b, .. } => a + b * x,
            Density1::TruncNormal { mu, sigma, lo, hi } => {
                let z = trunc_mass(mu, sigma, lo, hi);
                norm_pdf((x - mu) / sigma) / (sigma * z)
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let (lo, hi) = self.support();
        if x <= lo {
            return 0.0;
        }
        if x >= hi {
            return 1.0;
        }
        match *self {
            Density1::Uniform { lo, hi } => (x - lo) / (hi - lo),
            Density1::Linear { a, b, lo, .. } => a * (x - lo) + 0.5 * b * (x * x - lo * lo),
            Density1::TruncNormal { mu, sigma, lo, hi } => {
                let z = trunc_mass(mu, sigma, lo, hi);
                (norm_cdf((x - mu) / sigma) - norm_cdf((lo - mu) / sigma)) / z
            }
        }
    }

    /// Derivative of the density (used by the Myerson first-order condition).
    pub fn dpdf(&self, x: f64) -> f64 {
        let (lo, hi) = self.support();
        if x < lo || x > hi {
            return 0.0;
        }
        match *self {
            Density1::Uniform { .. } => 0.0,
            Density1::Linear { b, .. } => b,
            Density1::TruncNormal { mu, sigma, .. } => {
                -((x - mu) / (sigma * sigma)) * self.pdf(x)
            }
        }
    }

    pub fn quantile(&self, u: f64) -> f64 {
        let (lo, hi) = self.support();
        let u = u.clamp(0.0, 1.0);
        match *self {
            Density1::Uniform { lo, hi } => lo + u * (hi - lo),
            Density1::Linear { a, b, lo, hi } => {
                if b.abs() < 1e-14 {
                    lo + u / a.max(1e-300) * 1.0
                } else {
                    // Solve (b/2)x^2 + a x - (a lo + (b/2) lo^2 + u) = 0.
                    let c = -(a * lo + 0.5 * b * lo * lo + u);
                    let disc = (a * a - 2.0 * b * c).max(0.0);
                    let x = (-a + disc.sqrt()) / b;
                    x.clamp(lo, hi)
                }
            }
            Density1::TruncNormal { .. } => {
                crate::rootfind::newton_bisect(|x| self.cdf(x) - u, |x| self.pdf(x), lo, hi, 1e-14, 200)
                    .unwrap_or_else(|_| lo + u * (hi - lo))
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Density1::Uniform { lo, hi } => 0.5 * (lo + hi),
            Density1::Linear { a, b, lo, hi } => {
                0.5 * a * (hi * hi - lo * lo) + b * (hi.powi(3) - lo.powi(3)) / 3.0
            }
            Density1::TruncNormal { mu, sigma, lo, hi } => {
                let al = (lo - mu) / sigma;
                let be = (hi - mu) / sigma;
                let z = norm_cdf(be) - norm_cdf(al);
                mu + sigma * (norm_pdf(al) - norm_pdf(be)) / z
            }
        }
    }

    /// Shift the support (and location) by `delta`.
    pub fn shifted(&self, delta: f64) -> Self {
        match *self {
            Density1::Uniform { lo, hi } => Density1::Uniform { lo: lo + delta, hi: hi + delta },
            Density1::Linear { a, b, lo, hi } => Density1::Linear {
                a: a - b * delta,
                b,
                lo: lo + delta,
                hi: hi + delta,
            },
            Density1::TruncNormal { mu, sigma, lo, hi } => Density1::TruncNormal {
                mu: mu + delta,
                sigma,
                lo: lo + delta,
                hi: hi + delta,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.support();
        if !(hi > lo) {
            return Err(MpeError::Config(format!("empty support [{lo}, {hi}]")));
        }
        if let Density1::TruncNormal { sigma, .. } = self {
            if *sigma <= 0.0 {
                return Err(MpeError::Config("sigma must be positive".into()));
            }
        }
        let q = Quad::default();
        let mass = q.integrate(lo, hi, &[], |x| self.pdf(x));
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(MpeError::Config(format!(
                "density does not integrate to 1 (mass = {mass:.12})"
            )));
        }
        for i in 0..=64 {
            let x = lo + (hi - lo) * i as f64 / 64.0;
            if self.pdf(x) < -1e-12 {
                return Err(MpeError::Config(format!("density negative at {x}")));
            }
        }
        Ok(())
    }
}

fn trunc_mass(mu: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    norm_cdf((hi - mu) / sigma) - norm_cdf((lo - mu) / sigma)
}

// ---------------------------------------------------------------------------
// Mixtures (report marginals under a given policy weighting)
// ---------------------------------------------------------------------------

/// Finite mixture of 1-D densities with a common support.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub comps: Vec<(f64, Density1)>,
}

impl Mixture {
    pub fn new(comps: Vec<(f64, Density1)>) -> Result<Self> {
        if comps.is_empty() {
            return Err(MpeError::Config("empty mixture".into()));
        }
        let s0 = comps[0].1.support();
        for (_, d) in &comps {
            let s = d.support();
            if (s.0 - s0.0).abs() > 1e-12 || (s.1 - s0.1).abs() > 1e-12 {
                return Err(MpeError::Config(
                    "mixture components must share a common support".into(),
                ));
            }
        }
        let w: f64 = comps.iter().map(|(p, _)| p).sum();
        if (w - 1.0).abs() > 1e-10 {
            return Err(MpeError::Config(format!("mixture weights sum to {w}")));
        }
        Ok(Mixture { comps })
    }

    pub fn support(&self) -> (f64, f64) {
        self.comps[0].1.support()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.comps.iter().map(|(p, d)| p * d.pdf(x)).sum()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.comps.iter().map(|(p, d)| p * d.cdf(x)).sum()
    }

    pub fn dpdf(&self, x: f64) -> f64 {
        self.comps.iter().map(|(p, d)| p * d.dpdf(x)).sum()
    }

    pub fn quantile(&self, u: f64) -> f64 {
        let (lo, hi) = self.support();
        crate::rootfind::newton_bisect(|x| self.cdf(x) - u, |x| self.pdf(x), lo, hi, 1e-13, 200)
            .unwrap_or_else(|_| lo + u.clamp(0.0, 1.0) * (hi - lo))
    }

    pub fn mean(&self) -> f64 {
        self.comps.iter().map(|(p, d)| p * d.mean()).sum()
    }
}

// ---------------------------------------------------------------------------
// Policy laws
// ---------------------------------------------------------------------------

/// Marginal law of the policy instrument W.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyLaw {
    /// Finite support; covers Bernoulli as a two-point law.
    Discrete { values: Vec<f64>, probs: Vec<f64> },
    TruncNormal { mu: f64, sigma: f64, lo: f64, hi: f64 },
}

/// Number of quadrature atoms used to discretize a continuous policy law.
const POLICY_QUAD_NODES: usize = 128;

impl PolicyLaw {
    pub fn bernoulli(p: f64) -> Self {
        PolicyLaw::Discrete { values: vec![0.0, 1.0], probs: vec![1.0 - p, p] }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PolicyLaw::Discrete { values, probs } => {
                if values.len() != probs.len() || values.is_empty() {
                    return Err(MpeError::Config("policy support/probs mismatch".into()));
                }
                if probs.iter().any(|p| *p < 0.0) {
                    return Err(MpeError::Config("negative policy probability".into()));
                }
                let s: f64 = probs.iter().sum();
                if (s - 1.0).abs() > 1e-10 {
                    return Err(MpeError::Config(format!("policy probs sum to {s}")));
                }
                Ok(())
            }
            PolicyLaw::TruncNormal { mu, sigma, lo, hi } => Density1::TruncNormal {
                mu: *mu,
                sigma: *sigma,
                lo: *lo,
                hi: *hi,
            }
            .validate(),
        }
    }

    /// Atoms (weight, value) representing the law exactly (discrete) or via a
    /// Gauss rule (continuous). All downstream mixture integrals are built on
    /// these atoms, so the continuous case is exact to quadrature accuracy.
    pub fn atoms(&self) -> Vec<(f64, f64)> {
        match self {
            PolicyLaw::Discrete { values, probs } => {
                values.iter().copied().zip(probs.iter().copied()).map(|(v, p)| (p, v)).collect()
            }
            PolicyLaw::TruncNormal { mu, sigma, lo, hi } => {
                let d = Density1::TruncNormal { mu: *mu, sigma: *sigma, lo: *lo, hi: *hi };
                let rule = crate::quad::gauss_legendre(POLICY_QUAD_NODES);
                let c = 0.5 * (hi - lo);
                let m = 0.5 * (hi + lo);
                rule.0
                    .iter()
                    .zip(rule.1.iter())
                    .map(|(x, w)| {
                        let v = c * x + m;
                        (c * w * d.pdf(v), v)
                    })
                    .collect()
            }
        }
    }

    /// Atoms of the tilted law f_W(w)(1 + theta s(w)).
    pub fn atoms_tilted(&self, theta: f64, score: &PolicyScore) -> Vec<(f64, f64)> {
        self.atoms()
            .into_iter()
            .map(|(p, v)| (p * (1.0 + theta * score.eval(v)), v))
            .collect()
    }

    pub fn mean(&self) -> f64 {
        self.atoms().iter().map(|(p, v)| p * v).sum()
    }

    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.atoms().iter().map(|(p, v)| p * f(*v)).sum()
    }
}

// ---------------------------------------------------------------------------
// Policy scores and perturbed policy laws
// ---------------------------------------------------------------------------

/// Kind marker carried for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    BinaryShift,
    TabulatedDiscrete,
    SmoothClosedForm,
}

/// Mean-zero direction of reform of the policy law.
#[derive(Debug, Clone)]
pub struct PolicyScore {
    pub name: String,
    pub kind: ScoreKind,
    vals: ScoreVals,
}

#[derive(Debug, Clone)]
enum ScoreVals {
    /// Values aligned with the discrete policy support.
    Tabulated { support: Vec<f64>, values: Vec<f64> },
    /// Polynomial in w, centered against the baseline law.
    Poly { coefs: Vec<f64>, center: f64 },
}

impl PolicyScore {
    /// Tabulated score over a discrete law's support; values are centered to
    /// exact mean zero under the law.
    pub fn tabulated(law: &PolicyLaw, raw: &[f64], name: &str) -> Result<Self> {
        let PolicyLaw::Discrete { values, probs } = law else {
            return Err(MpeError::Config("tabulated score requires a discrete policy law".into()));
        };
        if raw.len() != values.len() {
            return Err(MpeError::Config("score table length mismatch".into()));
        }
        let mean: f64 = probs.iter().zip(raw.iter()).map(|(p, s)| p * s).sum();
        let values_c: Vec<f64> = raw.iter().map(|s| s - mean).collect();
        let kind = if values.len() == 2 { ScoreKind::BinaryShift } else { ScoreKind::TabulatedDiscrete };
        let s = PolicyScore {
            name: name.to_string(),
            kind,
            vals: ScoreVals::Tabulated { support: values.clone(), values: values_c },
        };
        s.validate(law)?;
        Ok(s)
    }

    /// Canonical two-point shift: s(hi) = 1/pi, s(lo) = -1/(1-pi).
    pub fn binary_shift(law: &PolicyLaw, name: &str) -> Result<Self> {
        let PolicyLaw::Discrete { values, probs } = law else {
            return Err(MpeError::Config("binary shift requires a two-point law".into()));
        };
        if values.len() != 2 {
            return Err(MpeError::Config("binary shift requires a two-point law".into()));
        }
        let pi = probs[1];
        PolicyScore::tabulated(law, &[-1.0 / (1.0 - pi), 1.0 / pi], name)
    }

    /// Polynomial score, centered analytically against the law.
    pub fn poly(law: &PolicyLaw, coefs: &[f64], name: &str) -> Result<Self> {
        let raw = |w: f64| coefs.iter().enumerate().map(|(k, c)| c * w.powi(k as i32)).sum::<f64>();
        let center = law.expect(raw);
        let s = PolicyScore {
            name: name.to_string(),
            kind: ScoreKind::SmoothClosedForm,
            vals: ScoreVals::Poly { coefs: coefs.to_vec(), center },
        };
        s.validate(law)?;
        Ok(s)
    }

    pub fn eval(&self, w: f64) -> f64 {
        match &self.vals {
            ScoreVals::Tabulated { support, values } => {
                let mut best = 0usize;
                let mut dist = f64::INFINITY;
                for (i, v) in support.iter().enumerate() {
                    let d = (w - v).abs();
                    if d < dist {
                        dist = d;
                        best = i;
                    }
                }
                values[best]
            }
            ScoreVals::Poly { coefs, center } => {
                coefs.iter().enumerate().map(|(k, c)| c * w.powi(k as i32)).sum::<f64>() - center
            }
        }
    }

    /// d s_W / d w for smooth scores (None for tabulated kinds).
    pub fn h1_derivative(&self, w: f64) -> Option<f64> {
        match &self.vals {
            ScoreVals::Tabulated { .. } => None,
            ScoreVals::Poly { coefs, .. } => Some(
                coefs
                    .iter()
                    .enumerate()
                    .skip(1)
                    .map(|(k, c)| k as f64 * c * w.powi(k as i32 - 1))
                    .sum(),
            ),
        }
    }

    /// sup |s_W(w)| over the law's support atoms.
    pub fn sup_abs(&self, law: &PolicyLaw) -> f64 {
        law.atoms().iter().map(|(_, v)| self.eval(*v).abs()).fold(0.0, f64::max)
    }

    pub fn validate(&self, law: &PolicyLaw) -> Result<()> {
        let mean = law.expect(|w| self.eval(w));
        if mean.abs() > MASS_TOL {
            return Err(MpeError::Config(format!("score mean {mean:.3e} exceeds tolerance")));
        }
        let second = law.expect(|w| self.eval(w).powi(2));
        if !second.is_finite() {
            return Err(MpeError::Config("score not square-integrable".into()));
        }
        Ok(())
    }

    /// Scale the score by a constant (keeps mean-zero exactly).
    pub fn scaled(&self, c: f64, name: &str) -> Self {
        let vals = match &self.vals {
            ScoreVals::Tabulated { support, values } => ScoreVals::Tabulated {
                support: support.clone(),
                values: values.iter().map(|v| c * v).collect(),
            },
            ScoreVals::Poly { coefs, center } => ScoreVals::Poly {
                coefs: coefs.iter().map(|v| c * v).collect(),
                center: c * center,
            },
        };
        PolicyScore { name: name.to_string(), kind: self.kind, vals }
    }
}

/// Tilted policy law f_W(w)(1 + theta s(w)); linear path in theta.
#[derive(Debug, Clone)]
pub struct PerturbedPolicy {
    pub atoms: Vec<(f64, f64)>,
    pub theta: f64,
}

/// Build the perturbed law, rejecting paths that violate positivity.
pub fn perturbed_policy_density(
    law: &PolicyLaw,
    score: &PolicyScore,
    theta: f64,
) -> Result<PerturbedPolicy> {
    let sup = score.sup_abs(law);
    if theta.abs() * sup >= 1.0 {
        return Err(MpeError::Path { max_theta: if sup > 0.0 { 1.0 / sup } else { f64::INFINITY } });
    }
    let atoms = law.atoms_tilted(theta, score);
    let mass: f64 = atoms.iter().map(|(p, _)| p).sum();
    debug_assert!((mass - 1.0).abs() < 1e-10, "tilted mass {mass}");
    Ok(PerturbedPolicy { atoms, theta })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// A single agent's report: a discrete component (demand indicator or
/// preference type) and up to two continuous coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rep {
    pub d: usize,
    pub v: [f64; 2],
}

impl Rep {
    pub fn scalar(r: f64) -> Self {
        Rep { d: 0, v: [r, 0.0] }
    }
    pub fn binary(d: usize) -> Self {
        Rep { d, v: [0.0, 0.0] }
    }
    pub fn two_school(t: usize, v1: f64, v2: f64) -> Self {
        Rep { d: t, v: [v1, v2] }
    }
}

/// Conditional report law R | W = w, in one of three shapes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReportLawSpec {
    /// Binary demand indicator with P(R=1|W=w) quadratic in w.
    BinaryDemand {
        p0: f64,
        p_w: f64,
        #[serde(default)]
        p_w2: f64,
    },
    /// Scalar report with a per-w density: uniform base with a linear tilt
    /// whose magnitude is quadratic in w, on [lo, hi].
    ScalarTilt {
        delta0: f64,
        delta_w: f64,
        #[serde(default)]
        delta_w2: f64,
        #[serde(default)]
        tilt_base: f64,
        lo: f64,
        hi: f64,
    },
    /// Scalar report R = b0 + b_w w + eps.
    LocationShift { b0: f64, b_w: f64, noise: Density1 },
    /// Scalar report independent of the policy.
    ScalarIid { density: Density1 },
    /// Two school scores, conditionally independent given w, each a linear
    /// tilt of the uniform on [0,1], plus a preference-type label with fixed
    /// shares over the six strict rankings of {0,1,2}:
    /// [1>2>0, 2>1>0, 1>0>2, 2>0>1, 0>1>2, 0>2>1].
    TwoSchool {
        shares: Vec<f64>,
        v1_delta0: f64,
        v1_delta_w: f64,
        #[serde(default)]
        v1_delta_w2: f64,
        v2_delta0: f64,
        v2_delta_w: f64,
        #[serde(default)]
        v2_delta_w2: f64,
    },
}

impl ReportLawSpec {
    pub fn validate(&self, law: &PolicyLaw) -> Result<()> {
        match self {
            ReportLawSpec::BinaryDemand { p0, p_w, p_w2 } => {
                for (_, w) in law.atoms() {
                    let p = p0 + p_w * w + p_w2 * w * w;
                    if !(0.0..=1.0).contains(&p) {
                        return Err(MpeError::Config(format!("P(R=1|w={w}) = {p} outside [0,1]")));
                    }
                }
                Ok(())
            }
            ReportLawSpec::ScalarTilt { delta0, delta_w, delta_w2, tilt_base, lo, hi } => {
                for (_, w) in law.atoms() {
                    let d = tilt_base + delta0 + delta_w * w + delta_w2 * w * w;
                    if d.abs() > 1.0 {
                        return Err(MpeError::Config(format!("tilt {d} at w={w} breaks positivity")));
                    }
                    Density1::linear_tilt(d, *lo, *hi).validate()?;
                }
                Ok(())
            }
            ReportLawSpec::LocationShift { noise, .. } => noise.validate(),
            ReportLawSpec::ScalarIid { density } => density.validate(),
            ReportLawSpec::TwoSchool {
                shares,
                v1_delta0,
                v1_delta_w,
                v1_delta_w2,
                v2_delta0,
                v2_delta_w,
                v2_delta_w2,
            } => {
                if shares.len() != 6 {
                    return Err(MpeError::Config("two-school shares must list 6 types".into()));
                }
                let s: f64 = shares.iter().sum();
                if (s - 1.0).abs() > 1e-10 || shares.iter().any(|x| *x < 0.0) {
                    return Err(MpeError::Config("two-school shares must be a distribution".into()));
                }
                for (_, w) in law.atoms() {
                    for d in [
                        v1_delta0 + v1_delta_w * w + v1_delta_w2 * w * w,
                        v2_delta0 + v2_delta_w * w + v2_delta_w2 * w * w,
                    ] {
                        if d.abs() > 1.0 {
                            return Err(MpeError::Config(format!("score tilt {d} breaks positivity")));
                        }
                    }
                }
                Ok(())
            }
        }
    }

    /// Conditional density pieces given w.
    pub fn cond(&self, w: f64) -> CondReport {
        match self {
            ReportLawSpec::BinaryDemand { p0, p_w, p_w2 } => {
                CondReport::Binary { p1: p0 + p_w * w + p_w2 * w * w }
            }
            ReportLawSpec::ScalarTilt { delta0, delta_w, delta_w2, tilt_base, lo, hi } => {
                CondReport::Scalar(Density1::linear_tilt(
                    tilt_base + delta0 + delta_w * w + delta_w2 * w * w,
                    *lo,
                    *hi,
                ))
            }
            ReportLawSpec::LocationShift { b0, b_w, noise } => {
                CondReport::Scalar(noise.shifted(b0 + b_w * w))
            }
            ReportLawSpec::ScalarIid { density } => CondReport::Scalar(density.clone()),
            ReportLawSpec::TwoSchool {
                shares,
                v1_delta0,
                v1_delta_w,
                v1_delta_w2,
                v2_delta0,
                v2_delta_w,
                v2_delta_w2,
            } => CondReport::TwoSchool {
                shares: shares.clone(),
                v1: Density1::linear_tilt(v1_delta0 + v1_delta_w * w + v1_delta_w2 * w * w, 0.0, 1.0),
                v2: Density1::linear_tilt(v2_delta0 + v2_delta_w * w + v2_delta_w2 * w * w, 0.0, 1.0),
            },
        }
    }

    /// Marginal report distribution under the given policy atoms.
    pub fn marginal(&self, atoms: &[(f64, f64)]) -> Result<ReportDist> {
        match self {
            ReportLawSpec::BinaryDemand { .. } => {
                let mut p1 = 0.0;
                let mut mass = 0.0;
                for (p, w) in atoms {
                    let CondReport::Binary { p1: c } = self.cond(*w) else { unreachable!() };
                    p1 += p * c;
                    mass += p;
                }
                Ok(ReportDist::BinaryDemand { p1: p1 / mass })
            }
            ReportLawSpec::TwoSchool { shares, .. } => {
                let mass: f64 = atoms.iter().map(|(p, _)| p).sum();
                let comps = atoms
                    .iter()
                    .map(|(p, w)| {
                        let CondReport::TwoSchool { v1, v2, .. } = self.cond(*w) else { unreachable!() };
                        (*p / mass, v1, v2)
                    })
                    .collect();
                Ok(ReportDist::TwoSchool { shares: shares.clone(), comps })
            }
            _ => {
                let mass: f64 = atoms.iter().map(|(p, _)| p).sum();
                let comps = atoms
                    .iter()
                    .map(|(p, w)| {
                        let CondReport::Scalar(d) = self.cond(*w) else { unreachable!() };
                        (*p / mass, d)
                    })
                    .collect();
                Ok(ReportDist::Scalar(Mixture::new(comps)?))
            }
        }
    }
}

/// Conditional report law at a fixed w.
#[derive(Debug, Clone)]
pub enum CondReport {
    Binary { p1: f64 },
    Scalar(Density1),
    TwoSchool { shares: Vec<f64>, v1: Density1, v2: Density1 },
}

impl CondReport {
    /// Density (or mass) of a report under this conditional law, excluding
    /// the type-share factor for two-school reports (types are independent
    /// of the policy).
    pub fn density(&self, rep: &Rep) -> f64 {
        match self {
            CondReport::Binary { p1 } => {
                if rep.d == 1 {
                    *p1
                } else {
                    1.0 - p1
                }
            }
            CondReport::Scalar(d) => d.pdf(rep.v[0]),
            CondReport::TwoSchool { v1, v2, .. } => v1.pdf(rep.v[0]) * v2.pdf(rep.v[1]),
        }
    }
}

/// Single-conditional report distribution wrapper.
pub fn cond_to_dist(cond: &CondReport) -> crate::Result<ReportDist> {
    Ok(match cond {
        CondReport::Binary { p1 } => ReportDist::BinaryDemand { p1: *p1 },
        CondReport::Scalar(d) => ReportDist::Scalar(Mixture::new(vec![(1.0, d.clone())])?),
        CondReport::TwoSchool { shares, v1, v2 } => ReportDist::TwoSchool {
            shares: shares.clone(),
            comps: vec![(1.0, v1.clone(), v2.clone())],
        },
    })
}

/// Marginal report distribution (the mechanism's "report distribution
/// summary"): discrete masses plus continuous density/CDF evaluators.
#[derive(Debug, Clone)]
pub enum ReportDist {
    BinaryDemand { p1: f64 },
    Scalar(Mixture),
    TwoSchool { shares: Vec<f64>, comps: Vec<(f64, Density1, Density1)> },
}

impl ReportDist {
    pub fn disc_probs(&self) -> Vec<f64> {
        match self {
            ReportDist::BinaryDemand { p1 } => vec![1.0 - p1, *p1],
            ReportDist::Scalar(_) => vec![1.0],
            ReportDist::TwoSchool { shares, .. } => shares.clone(),
        }
    }

    pub fn scalar(&self) -> Option<&Mixture> {
        match self {
            ReportDist::Scalar(m) => Some(m),
            _ => None,
        }
    }

    /// Marginal density of continuous coordinate `coord` (two-school case).
    pub fn coord_pdf(&self, coord: usize, x: f64) -> f64 {
        match self {
            ReportDist::Scalar(m) => m.pdf(x),
            ReportDist::TwoSchool { comps, .. } => comps
                .iter()
                .map(|(p, d1, d2)| p * if coord == 0 { d1.pdf(x) } else { d2.pdf(x) })
                .sum(),
            ReportDist::BinaryDemand { .. } => 0.0,
        }
    }

    pub fn coord_cdf(&self, coord: usize, x: f64) -> f64 {
        match self {
            ReportDist::Scalar(m) => m.cdf(x),
            ReportDist::TwoSchool { comps, .. } => comps
                .iter()
                .map(|(p, d1, d2)| p * if coord == 0 { d1.cdf(x) } else { d2.cdf(x) })
                .sum(),
            ReportDist::BinaryDemand { .. } => 0.0,
        }
    }

    /// Joint density of the continuous part given the discrete component.
    /// Types are independent of scores, so this does not vary with `d`.
    pub fn joint_pdf(&self, v1: f64, v2: f64) -> f64 {
        match self {
            ReportDist::TwoSchool { comps, .. } => {
                comps.iter().map(|(p, d1, d2)| p * d1.pdf(v1) * d2.pdf(v2)).sum()
            }
            _ => 0.0,
        }
    }

    /// Conditional density of the other coordinate on a boundary slice
    /// {coord = x}: f(other | coord = x) weighted mixture.
    pub fn slice_pdf(&self, coord: usize, x: f64, other: f64) -> f64 {
        match self {
            ReportDist::TwoSchool { .. } => {
                let fx = self.coord_pdf(coord, x);
                if fx <= 0.0 {
                    return 0.0;
                }
                let (v1, v2) = if coord == 0 { (x, other) } else { (other, x) };
                self.joint_pdf(v1, v2) / fx
            }
            _ => 0.0,
        }
    }

    pub fn support(&self) -> (f64, f64) {
        match self {
            ReportDist::Scalar(m) => m.support(),
            ReportDist::TwoSchool { .. } => (0.0, 1.0),
            ReportDist::BinaryDemand { .. } => (0.0, 1.0),
        }
    }

    /// Mean of the binary demand indicator (rationing clearing).
    pub fn mean_binary(&self) -> f64 {
        match self {
            ReportDist::BinaryDemand { p1 } => *p1,
            _ => 0.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Report-space scores
// ---------------------------------------------------------------------------

/// A score on the report space (a direction of change of P_R).
pub trait ScoreR: Sync {
    fn eval(&self, rep: &Rep) -> f64;
    /// d s_R / d r for scalar reports; required by the Sobolev pairing.
    fn deriv(&self, rep: &Rep) -> Option<f64> {
        let _ = rep;
        None
    }
}

/// Zero score.
pub struct ZeroScore;
impl ScoreR for ZeroScore {
    fn eval(&self, _rep: &Rep) -> f64 {
        0.0
    }
    fn deriv(&self, _rep: &Rep) -> Option<f64> {
        Some(0.0)
    }
}

/// The induced report score s_R(r) = E_0[s_W(W) | R = r].
pub struct InducedScore {
    /// (pi_w * s_W(w), conditional report law at w)
    comps: Vec<(f64, CondReport)>,
    /// (pi_w, conditional report law at w) for the marginal density
    base: Vec<(f64, CondReport)>,
}

impl InducedScore {
    pub fn new(law: &PolicyLaw, report: &ReportLawSpec, score: &PolicyScore) -> Self {
        let comps = law
            .atoms()
            .into_iter()
            .map(|(p, w)| (p * score.eval(w), report.cond(w)))
            .collect();
        let base = law.atoms().into_iter().map(|(p, w)| (p, report.cond(w))).collect();
        InducedScore { comps, base }
    }

    fn dens(rep: &Rep, cond: &CondReport) -> f64 {
        match cond {
            CondReport::Binary { p1 } => {
                if rep.d == 1 {
                    *p1
                } else {
                    1.0 - p1
                }
            }
            CondReport::Scalar(d) => d.pdf(rep.v[0]),
            CondReport::TwoSchool { v1, v2, .. } => v1.pdf(rep.v[0]) * v2.pdf(rep.v[1]),
        }
    }

    fn ddens(rep: &Rep, cond: &CondReport) -> f64 {
        match cond {
            CondReport::Scalar(d) => d.dpdf(rep.v[0]),
            _ => 0.0,
        }
    }
}

impl ScoreR for InducedScore {
    fn eval(&self, rep: &Rep) -> f64 {
        let num: f64 = self.comps.iter().map(|(c, d)| c * Self::dens(rep, d)).sum();
        let den: f64 = self.base.iter().map(|(p, d)| p * Self::dens(rep, d)).sum();
        if den <= 0.0 {
            f64::NAN
        } else {
            num / den
        }
    }

    fn deriv(&self, rep: &Rep) -> Option<f64> {
        match self.base.first().map(|(_, c)| c) {
            Some(CondReport::Scalar(_)) => {
                let num: f64 = self.comps.iter().map(|(c, d)| c * Self::dens(rep, d)).sum();
                let dnum: f64 = self.comps.iter().map(|(c, d)| c * Self::ddens(rep, d)).sum();
                let den: f64 = self.base.iter().map(|(p, d)| p * Self::dens(rep, d)).sum();
                let dden: f64 = self.base.iter().map(|(p, d)| p * Self::ddens(rep, d)).sum();
                if den <= 0.0 {
                    None
                } else {
                    Some((dnum * den - num * dden) / (den * den))
                }
            }
            _ => None,
        }
    }
}

/// Fallible induced-score evaluation (domain error off the support).
pub fn induced_report_score_at(score: &InducedScore, rep: &Rep) -> Result<f64> {
    let v = score.eval(rep);
    if v.is_nan() {
        Err(MpeError::Domain(format!(
            "report density vanishes at r = {:?}; induced score undefined",
            rep.v
        )))
    } else {
        Ok(v)
    }
}

/// Polynomial score directly on a scalar report space, centered against a
/// given marginal. Used as a test direction for conduct-rule derivatives.
pub struct PolyReportScore {
    pub coefs: Vec<f64>,
    pub center: f64,
}

impl PolyReportScore {
    pub fn new(mix: &Mixture, coefs: &[f64], quad: &Quad) -> Self {
        let (lo, hi) = mix.support();
        let raw = |r: f64| coefs.iter().enumerate().map(|(k, c)| c * r.powi(k as i32)).sum::<f64>();
        let center = quad.integrate(lo, hi, &[], |r| raw(r) * mix.pdf(r));
        PolyReportScore { coefs: coefs.to_vec(), center }
    }
}

impl ScoreR for PolyReportScore {
    fn eval(&self, rep: &Rep) -> f64 {
        let r = rep.v[0];
        self.coefs.iter().enumerate().map(|(k, c)| c * r.powi(k as i32)).sum::<f64>() - self.center
    }
    fn deriv(&self, rep: &Rep) -> Option<f64> {
        let r = rep.v[0];
        Some(
            self.coefs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(k, c)| k as f64 * c * r.powi(k as i32 - 1))
                .sum(),
        )
    }
}

/// Tabulated score on the binary demand space.
pub struct BinaryReportScore {
    pub s0: f64,
    pub s1: f64,
}

impl ScoreR for BinaryReportScore {
    fn eval(&self, rep: &Rep) -> f64 {
        if rep.d == 1 {
            self.s1
        } else {
            self.s0
        }
    }
}

// ---------------------------------------------------------------------------
// Outcomes
// ---------------------------------------------------------------------------

/// Affine-plus-interactions closed form in (w, r, x).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinForm {
    pub c0: f64,
    pub c_w: f64,
    pub c_ww: f64,
    pub c_r: f64,
    pub c_r2: f64,
    pub c_wr: f64,
    pub c_x: f64,
    pub c_x2: f64,
    pub c_wx: f64,
    pub c_wx2: f64,
}

impl LinForm {
    pub fn eval(&self, w: f64, r: f64, x: f64) -> f64 {
        self.c0
            + self.c_w * w
            + self.c_ww * w * w
            + self.c_r * r
            + self.c_r2 * r * r
            + self.c_wr * w * r
            + self.c_x * x
            + self.c_x2 * x * x
            + self.c_wx * w * x
            + self.c_wx2 * w * x * x
    }

    pub fn constant(c0: f64) -> Self {
        LinForm { c0, ..Default::default() }
    }
}

/// Mean-zero additive outcome noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseLaw {
    None,
    Gaussian { sigma: f64 },
    /// Truncated normal, symmetric about zero: exactly mean-zero and bounded.
    TruncNormalSym { sigma: f64, half_width: f64 },
    Uniform { half_width: f64 },
}

impl NoiseLaw {
    pub fn sample(&self, u: f64) -> f64 {
        match *self {
            NoiseLaw::None => 0.0,
            NoiseLaw::Gaussian { sigma } => sigma * gaussian_quantile(u),
            NoiseLaw::TruncNormalSym { sigma, half_width } => {
                Density1::TruncNormal { mu: 0.0, sigma, lo: -half_width, hi: half_width }.quantile(u)
            }
            NoiseLaw::Uniform { half_width } => half_width * (2.0 * u - 1.0),
        }
    }

    pub fn cdf(&self, e: f64) -> f64 {
        match *self {
            NoiseLaw::None => {
                if e >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            NoiseLaw::Gaussian { sigma } => norm_cdf(e / sigma),
            NoiseLaw::TruncNormalSym { sigma, half_width } => {
                Density1::TruncNormal { mu: 0.0, sigma, lo: -half_width, hi: half_width }.cdf(e)
            }
            NoiseLaw::Uniform { half_width } => ((e + half_width) / (2.0 * half_width)).clamp(0.0, 1.0),
        }
    }

    pub fn pdf(&self, e: f64) -> f64 {
        match *self {
            NoiseLaw::None => 0.0,
            NoiseLaw::Gaussian { sigma } => norm_pdf(e / sigma) / sigma,
            NoiseLaw::TruncNormalSym { sigma, half_width } => {
                Density1::TruncNormal { mu: 0.0, sigma, lo: -half_width, hi: half_width }.pdf(e)
            }
            NoiseLaw::Uniform { half_width } => {
                if e.abs() <= half_width {
                    0.5 / half_width
                } else {
                    0.0
                }
            }
        }
    }

    /// Integration bounds covering effectively all noise mass.
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            NoiseLaw::None => (0.0, 0.0),
            NoiseLaw::Gaussian { sigma } => (-8.0 * sigma, 8.0 * sigma),
            NoiseLaw::TruncNormalSym { half_width, .. } => (-half_width, half_width),
            NoiseLaw::Uniform { half_width } => (-half_width, half_width),
        }
    }
}

/// Rational approximation of the standard normal quantile (Acklam), refined
/// by one Newton step on the CDF; accurate to ~1e-13.
fn gaussian_quantile(u: f64) -> f64 {
    let u = u.clamp(1e-300, 1.0 - 1e-16);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let plow = 0.02425;
    let mut x = if u < plow {
        let q = (-2.0 * u.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if u <= 1.0 - plow {
        let q = u - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - u).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // One Newton refinement.
    let e = norm_cdf(x) - u;
    x -= e / norm_pdf(x).max(1e-300);
    x
}

/// MTE effect: Y gains w * (alpha + beta * xi).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MteEffect {
    pub alpha: f64,
    pub beta: f64,
}

/// Conditional-mean specification m~(w, a, r, x) plus additive noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeLaw {
    /// Mean for the outside option (a = 0).
    pub base: LinForm,
    /// Additional mean effect of allocation a = 1..K; `coord` selects which
    /// continuous report coordinate the r-terms refer to.
    pub effects: Vec<EffectForm>,
    #[serde(default)]
    pub mte: Option<MteEffect>,
    pub noise: NoiseLaw,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectForm {
    #[serde(default)]
    pub coord: usize,
    pub form: LinForm,
}

impl OutcomeLaw {
    /// m~(w, a, r, x): conditional mean of Y(w, a) given the report and
    /// covariate (excluding the latent-xi MTE term).
    pub fn mean(&self, w: f64, a: usize, rep: &Rep, x: f64) -> f64 {
        let mut m = self.base.eval(w, rep.v[0], x);
        if a >= 1 {
            let e = &self.effects[a - 1];
            m += e.form.eval(w, rep.v[e.coord], x);
        }
        m
    }

    /// Realized outcome draw.
    pub fn draw(&self, w: f64, a: usize, rep: &Rep, x: f64, xi: Option<f64>, u: f64) -> f64 {
        let mut y = self.mean(w, a, rep, x);
        if let (Some(mte), Some(xi)) = (self.mte, xi) {
            y += w * (mte.alpha + mte.beta * xi);
        }
        y + self.noise.sample(u)
    }
}

// ---------------------------------------------------------------------------
// Scenario specification and sampling
// ---------------------------------------------------------------------------

/// Conduct-rule selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConductRule {
    Capacity { q: Vec<f64> },
    Myerson,
    /// Parametric TTC dynamic system (two schools, uniform priorities).
    TtcParametric { q: Vec<f64> },
}

/// Covariate block: X ~ U[0,1], W | X ~ Bernoulli(p0 + p_x x).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateCfg {
    pub p0: f64,
    pub p_x: f64,
}

impl CovariateCfg {
    pub fn propensity(&self, x: f64) -> f64 {
        self.p0 + self.p_x * x
    }
    pub fn validate(&self) -> Result<()> {
        for t in 0..=32 {
            let x = t as f64 / 32.0;
            let p = self.propensity(x);
            if !(p > 0.0 && p < 1.0) {
                return Err(MpeError::Config(format!("propensity {p} at x={x} outside (0,1)")));
            }
        }
        Ok(())
    }
}

/// Instrumental-variable block: Z ~ Bernoulli(z_prob), selection
/// W = 1{p(Z) > xi} with xi ~ U[0,1].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IvCfg {
    pub z_prob: f64,
    pub p_z0: f64,
    pub p_z1: f64,
}

/// The full synthetic data-generating process plus mechanism / conduct-rule
/// selection.
#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub name: String,
    pub policy: PolicyLaw,
    pub report: ReportLawSpec,
    pub outcome: OutcomeLaw,
    pub mechanism: crate::mechanism::Mechanism,
    pub conduct: ConductRule,
    pub covariate: Option<CovariateCfg>,
    pub iv: Option<IvCfg>,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        self.report.validate(&self.policy)?;
        if let Some(cov) = &self.covariate {
            cov.validate()?;
        }
        if let Some(iv) = &self.iv {
            for p in [iv.z_prob, iv.p_z0, iv.p_z1] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(MpeError::Config(format!("IV probability {p} outside [0,1]")));
                }
            }
        }
        self.mechanism.validate(&self.report)?;
        Ok(())
    }

    /// Baseline marginal report distribution.
    pub fn report_dist(&self) -> Result<ReportDist> {
        self.report.marginal(&self.policy.atoms())
    }

    /// Marginal report distribution under the tilted policy law.
    pub fn report_dist_tilted(&self, theta: f64, score: &PolicyScore) -> Result<ReportDist> {
        let atoms = perturbed_policy_density(&self.policy, score, theta)?.atoms;
        self.report.marginal(&atoms)
    }

    /// Conditional mean m_a(r) = E_0[Y(W, a) | R = r], marginalizing W over
    /// its posterior given the report.
    pub fn m_a(&self, a: usize, rep: &Rep) -> f64 {
        let atoms = self.marginal_policy_atoms();
        let mut num = 0.0;
        let mut den = 0.0;
        for (p, w) in &atoms {
            let d = self.report.cond(*w).density(rep);
            num += p * d * self.mean_y_given_w(*w, a, rep);
            den += p * d;
        }
        if den <= 0.0 {
            f64::NAN
        } else {
            num / den
        }
    }

    /// Conditional density of a report given the policy value.
    pub fn report_density_given_w(&self, w: f64, rep: &Rep) -> f64 {
        self.report.cond(w).density(rep)
    }

    /// E[Y | W = w, A = a, R = rep]: the specified mean plus, in IV
    /// scenarios, the latent-resistance term averaged over xi | W = w, and
    /// in covariate scenarios the x-terms averaged over X | W = w.
    pub fn mean_y_given_w(&self, w: f64, a: usize, rep: &Rep) -> f64 {
        if let Some(cov) = &self.covariate {
            // X ~ U[0,1]; f(x | W=1) ∝ p(x), f(x | W=0) ∝ 1 - p(x).
            let (m0, m1, m2) = (1.0, 0.5, 1.0 / 3.0);
            let pbar = cov.p0 * m0 + cov.p_x * m1;
            let (e_x, e_x2) = if w > 0.5 {
                ((cov.p0 * m1 + cov.p_x * m2) / pbar, (cov.p0 * m2 + cov.p_x * 0.25) / pbar)
            } else {
                (
                    (m1 - (cov.p0 * m1 + cov.p_x * m2)) / (1.0 - pbar),
                    (m2 - (cov.p0 * m2 + cov.p_x * 0.25)) / (1.0 - pbar),
                )
            };
            return self.outcome_mean_moments(w, a, rep, e_x, e_x2);
        }
        let mut m = self.outcome.mean(w, a, rep, 0.0);
        if let (Some(mte), Some(iv)) = (self.outcome.mte, &self.iv) {
            m += w * (mte.alpha + mte.beta * self.mean_xi_given_w(w, iv));
        }
        m
    }

    /// Outcome mean at an explicit covariate value (no latent terms).
    pub fn outcome_mean_x(&self, w: f64, a: usize, rep: &Rep, x: f64) -> f64 {
        self.outcome.mean(w, a, rep, x)
    }

    /// E[Y | W = w, Z = z, A = a, R = rep] in an IV scenario: the latent
    /// resistance averages over xi | (W = w, Z = z), which is uniform on
    /// [0, p(z)] for compliers-in and [p(z), 1] for the untreated.
    pub fn mean_y_given_wz(&self, w: f64, z: f64, a: usize, rep: &Rep) -> f64 {
        let mut m = self.outcome.mean(w, a, rep, 0.0);
        if let (Some(mte), Some(iv)) = (self.outcome.mte, &self.iv) {
            let p = if z > 0.5 { iv.p_z1 } else { iv.p_z0 };
            let e_xi = if w > 0.5 { 0.5 * p } else { 0.5 * (1.0 + p) };
            m += w * (mte.alpha + mte.beta * e_xi);
        }
        m
    }

    /// Outcome mean with the x and x^2 terms replaced by given moments.
    fn outcome_mean_moments(&self, w: f64, a: usize, rep: &Rep, e_x: f64, e_x2: f64) -> f64 {
        let lin = |f: &LinForm, r: f64| {
            f.c0 + f.c_w * w
                + f.c_ww * w * w
                + f.c_r * r
                + f.c_r2 * r * r
                + f.c_wr * w * r
                + f.c_x * e_x
                + f.c_x2 * e_x2
                + f.c_wx * w * e_x
                + f.c_wx2 * w * e_x2
        };
        let mut m = lin(&self.outcome.base, rep.v[0]);
        if a >= 1 {
            let e = &self.outcome.effects[a - 1];
            m += lin(&e.form, rep.v[e.coord]);
        }
        m
    }

    fn mean_xi_given_w(&self, w: f64, iv: &IvCfg) -> f64 {
        // P(W=1 | Z=z) = p_z; xi | (W=1, Z=z) ~ U[0, p_z], xi | (W=0, Z=z) ~ U[p_z, 1].
        let pz = [(1.0 - iv.z_prob, iv.p_z0), (iv.z_prob, iv.p_z1)];
        let mut num = 0.0;
        let mut den = 0.0;
        for (pw, p) in pz {
            if w > 0.5 {
                num += pw * p * (0.5 * p);
                den += pw * p;
            } else {
                num += pw * (1.0 - p) * (0.5 * (1.0 + p));
                den += pw * (1.0 - p);
            }
        }
        num / den.max(1e-300)
    }

    /// In covariate scenarios, the marginal treated share E[p(X)].
    pub fn marginal_policy_atoms(&self) -> Vec<(f64, f64)> {
        if let Some(cov) = &self.covariate {
            // X ~ U[0,1]: E[p(X)] = p0 + p_x/2.
            let p1 = cov.p0 + 0.5 * cov.p_x;
            vec![(1.0 - p1, 0.0), (p1, 1.0)]
        } else if let Some(iv) = &self.iv {
            let p1 = (1.0 - iv.z_prob) * iv.p_z0 + iv.z_prob * iv.p_z1;
            vec![(1.0 - p1, 0.0), (p1, 1.0)]
        } else {
            self.policy.atoms()
        }
    }
}

// ---------------------------------------------------------------------------
// Agent tables and sampling
// ---------------------------------------------------------------------------

/// Sentinel for unassigned allocations.
pub const UNASSIGNED: usize = usize::MAX;

/// Column-oriented table of sampled agents.
#[derive(Debug, Clone)]
pub struct AgentTable {
    pub w: Vec<f64>,
    pub rep: Vec<Rep>,
    pub a: Vec<usize>,
    pub y: Vec<f64>,
    pub x: Option<Vec<f64>>,
    pub z: Option<Vec<f64>>,
    pub xi: Option<Vec<f64>>,
}

impl AgentTable {
    pub fn len(&self) -> usize {
        self.w.len()
    }
    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// Per-agent deterministic substream: one ChaCha stream per (seed, agent).
pub fn agent_rng(seed: u64, agent: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(agent.wrapping_mul(4).wrapping_add(stage));
    rng
}

/// Draw n agents i.i.d. from the baseline laws; allocation and outcome
/// columns are left unfilled.
pub fn sample_population(spec: &ScenarioSpec, n: usize, seed: u64) -> Result<AgentTable> {
    if n == 0 {
        return Err(MpeError::Config("n must be at least 1".into()));
    }
    spec.validate()?;
    sample_population_tilted(spec, n, seed, None)
}

/// Sampling under an optional policy tilt (common random numbers across
/// theta: the same uniforms are used for every tilt).
pub fn sample_population_tilted(
    spec: &ScenarioSpec,
    n: usize,
    seed: u64,
    tilt: Option<(f64, &PolicyScore)>,
) -> Result<AgentTable> {
    let mut w = vec![0.0; n];
    let mut rep = vec![Rep::scalar(0.0); n];
    let a = vec![UNASSIGNED; n];
    let y = vec![0.0; n];
    let mut x = spec.covariate.as_ref().map(|_| vec![0.0; n]);
    let mut z = spec.iv.as_ref().map(|_| vec![0.0; n]);
    let mut xi = spec.iv.as_ref().map(|_| vec![0.0; n]);

    // Inverse-CDF table for the (possibly tilted) discrete policy law.
    let atoms = match tilt {
        Some((theta, s)) => perturbed_policy_density(&spec.policy, s, theta)?.atoms,
        None => spec.policy.atoms(),
    };

    for i in 0..n {
        let mut rng = agent_rng(seed, i as u64, 0);
        let u_w: f64 = rng.gen();
        let u_r1: f64 = rng.gen();
        let u_r2: f64 = rng.gen();
        let u_aux: f64 = rng.gen();
        let u_aux2: f64 = rng.gen();

        let wi = if let Some(cov) = &spec.covariate {
            let xv = u_aux;
            if let Some(xs) = x.as_mut() {
                xs[i] = xv;
            }
            if u_w < cov.propensity(xv) {
                1.0
            } else {
                0.0
            }
        } else if let Some(iv) = &spec.iv {
            let zv = if u_aux < iv.z_prob { 1.0 } else { 0.0 };
            let xiv = u_aux2;
            if let Some(zs) = z.as_mut() {
                zs[i] = zv;
            }
            if let Some(xis) = xi.as_mut() {
                xis[i] = xiv;
            }
            let p = if zv > 0.5 { iv.p_z1 } else { iv.p_z0 };
            if p > xiv {
                1.0
            } else {
                0.0
            }
        } else {
            discrete_quantile(&atoms, u_w)
        };
        w[i] = wi;

        rep[i] = match spec.report.cond(wi) {
            CondReport::Binary { p1 } => Rep::binary(if u_r1 < p1 { 1 } else { 0 }),
            CondReport::Scalar(d) => Rep::scalar(d.quantile(u_r1)),
            CondReport::TwoSchool { shares, v1, v2 } => {
                let t = discrete_index(&shares, u_aux);
                Rep::two_school(t, v1.quantile(u_r1), v2.quantile(u_r2))
            }
        };
    }
    Ok(AgentTable { w, rep, a, y, x, z, xi })
}

fn discrete_quantile(atoms: &[(f64, f64)], u: f64) -> f64 {
    let total: f64 = atoms.iter().map(|(p, _)| p).sum();
    let mut acc = 0.0;
    for (p, v) in atoms {
        acc += p / total;
        if u <= acc {
            return *v;
        }
    }
    atoms.last().map(|(_, v)| *v).unwrap_or(0.0)
}

fn discrete_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u <= acc {
            return i;
        }
    }
    probs.len() - 1
}
