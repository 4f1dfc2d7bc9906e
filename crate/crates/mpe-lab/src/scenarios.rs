//! Built-in scenario, score, and functional catalogs, plus the scenario
//! file format (JSON). Every scenario is a fully specified synthetic
//! data-generating process; file-loaded scenarios go through the same
//! validation as the built-ins and unknown keys are rejected.

use std::path::Path;

use serde::Deserialize;

use crate::clearing::SolverCfg;
use crate::mechanism::Mechanism;
use crate::population::{
    ConductRule, CovariateCfg, Density1, EffectForm, IvCfg, LinForm, MteEffect, NoiseLaw,
    OutcomeLaw, PolicyLaw, PolicyScore, ReportLawSpec, ScenarioSpec,
};
use crate::{MpeError, Result};

/// The default four-point policy law shared by the market scenarios: enough
/// support points for three linearly independent reform directions.
fn policy_4pt() -> PolicyLaw {
    PolicyLaw::Discrete {
        values: vec![0.0, 1.0, 2.0, 3.0],
        probs: vec![0.2, 0.3, 0.3, 0.2],
    }
}

fn gaussian_noise(sigma: f64) -> NoiseLaw {
    NoiseLaw::Gaussian { sigma }
}

/// Random rationing of one good among demanders; demand share rises in w.
pub fn rationing() -> ScenarioSpec {
    ScenarioSpec {
        name: "rationing".into(),
        policy: policy_4pt(),
        report: ReportLawSpec::BinaryDemand { p0: 0.5, p_w: 0.1, p_w2: 0.015 },
        outcome: OutcomeLaw {
            base: LinForm::default(),
            effects: vec![EffectForm {
                coord: 0,
                form: LinForm { c0: 2.0, c_w: 0.25, c_ww: 0.1, ..Default::default() },
            }],
            mte: None,
            noise: gaussian_noise(0.1),
        },
        mechanism: Mechanism::RandomRationing,
        conduct: ConductRule::Capacity { q: vec![0.35] },
        covariate: None,
        iv: None,
    }
}

/// Price-based allocation with a uniform marginal report distribution
/// (treated tilts up, control tilts down) and treatment effect 1 + r.
pub fn price_cutoff() -> ScenarioSpec {
    ScenarioSpec {
        name: "price_cutoff".into(),
        policy: policy_4pt(),
        report: ReportLawSpec::ScalarTilt {
            delta0: -0.18,
            delta_w: -0.1,
            delta_w2: 0.1,
            tilt_base: 0.0,
            lo: 0.0,
            hi: 1.0,
        },
        outcome: OutcomeLaw {
            base: LinForm { c_r: 0.5, c_w: 0.3, c_ww: 0.15, ..Default::default() },
            effects: vec![EffectForm {
                coord: 0,
                form: LinForm { c0: 1.0, c_r: 1.0, ..Default::default() },
            }],
            mte: None,
            noise: gaussian_noise(0.2),
        },
        mechanism: Mechanism::PriceCutoff,
        conduct: ConductRule::Capacity { q: vec![0.3] },
        covariate: None,
        iv: None,
    }
}

/// Companion to `price_cutoff` sharing the cutoff location and boundary
/// treatment effect but with twice the boundary density: the report law is
/// a truncated normal centered at the cutoff with sigma solved so that
/// f(0.7) = 2, and the capacity is set to keep c0 = 0.7 exactly.
pub fn price_cutoff_densb() -> ScenarioSpec {
    let target_c0 = 0.7;
    let target_f = 2.0;
    let density_at = |sigma: f64| {
        Density1::TruncNormal { mu: target_c0, sigma, lo: 0.0, hi: 1.0 }.pdf(target_c0)
    };
    let sigma = crate::rootfind::newton_bisect(
        |s| density_at(s) - target_f,
        |s| (density_at(s + 1e-6) - density_at(s - 1e-6)) / 2e-6,
        0.05,
        1.0,
        1e-13,
        200,
    )
    .expect("sigma solve for the dense-boundary report law");
    let density = Density1::TruncNormal { mu: target_c0, sigma, lo: 0.0, hi: 1.0 };
    let q = 1.0 - density.cdf(target_c0);
    ScenarioSpec {
        name: "price_cutoff_densb".into(),
        policy: policy_4pt(),
        report: ReportLawSpec::ScalarIid { density },
        outcome: OutcomeLaw {
            base: LinForm { c_r: 0.5, c_w: 0.3, ..Default::default() },
            effects: vec![EffectForm {
                coord: 0,
                form: LinForm { c0: 1.0, c_r: 1.0, ..Default::default() },
            }],
            mte: None,
            noise: gaussian_noise(0.2),
        },
        mechanism: Mechanism::PriceCutoff,
        conduct: ConductRule::Capacity { q: vec![q] },
        covariate: None,
        iv: None,
    }
}

/// Two-bidder second-price auction with a win-rate target.
pub fn auction_fixed_q() -> ScenarioSpec {
    ScenarioSpec {
        name: "auction_fixed_q".into(),
        policy: policy_4pt(),
        report: ReportLawSpec::ScalarTilt {
            delta0: -0.18,
            delta_w: -0.1,
            delta_w2: 0.1,
            tilt_base: 0.0,
            lo: 0.0,
            hi: 1.0,
        },
        outcome: OutcomeLaw {
            base: LinForm { c_r: 0.2, c_w: 0.3, c_ww: 0.15, ..Default::default() },
            effects: vec![EffectForm {
                coord: 0,
                form: LinForm { c0: 1.0, c_r: 0.5, ..Default::default() },
            }],
            mte: None,
            noise: gaussian_noise(0.2),
        },
        mechanism: Mechanism::SecondPriceAuction { n: 2 },
        // (1 - F(0.5)^2)/2 with F uniform: reserve clears at 0.5.
        conduct: ConductRule::Capacity { q: vec![0.375] },
        covariate: None,
        iv: None,
    }
}

/// Two-bidder auction under the revenue-maximizing (Myerson) reserve; the
/// marginal report density is linear (C1) so the Sobolev machinery applies.
pub fn auction_myerson() -> ScenarioSpec {
    ScenarioSpec {
        name: "auction_myerson".into(),
        policy: policy_4pt(),
        report: ReportLawSpec::ScalarTilt {
            delta0: -0.18,
            delta_w: -0.1,
            delta_w2: 0.1,
            tilt_base: 0.3,
            lo: 0.0,
            hi: 1.0,
        },
        outcome: OutcomeLaw {
            base: LinForm { c_r: 0.2, c_w: 0.3, c_ww: 0.15, ..Default::default() },
            effects: vec![EffectForm {
                coord: 0,
                form: LinForm { c0: 1.0, c_r: 0.5, ..Default::default() },
            }],
            mte: None,
            noise: gaussian_noise(0.2),
        },
        mechanism: Mechanism::SecondPriceAuction { n: 2 },
        conduct: ConductRule::Myerson,
        covariate: None,
        iv: None,
    }
}

/// Two schools with symmetric capacities and preference shares; school
/// scores tilt with the policy in opposite directions.
pub fn two_school() -> ScenarioSpec {
    ScenarioSpec {
        name: "two_school".into(),
        policy: policy_4pt(),
        report: ReportLawSpec::TwoSchool {
            shares: vec![0.25, 0.25, 0.15, 0.15, 0.1, 0.1],
            v1_delta0: -0.18,
            v1_delta_w: -0.1,
            v1_delta_w2: 0.1,
            v2_delta0: 0.09,
            v2_delta_w: 0.05,
            v2_delta_w2: -0.05,
        },
        outcome: OutcomeLaw {
            base: LinForm { c0: 0.2, c_w: 0.1, c_ww: 0.1, ..Default::default() },
            effects: vec![
                EffectForm { coord: 0, form: LinForm { c0: 0.8, c_r: 0.4, ..Default::default() } },
                EffectForm { coord: 1, form: LinForm { c0: 0.5, c_r: 0.3, ..Default::default() } },
            ],
            mte: None,
            noise: gaussian_noise(0.2),
        },
        mechanism: Mechanism::TwoSchoolDa,
        conduct: ConductRule::Capacity { q: vec![0.2, 0.2] },
        covariate: None,
        iv: None,
    }
}

/// Parametric two-school TTC with uniform independent priorities.
pub fn ttc_parametric() -> ScenarioSpec {
    ScenarioSpec {
        name: "ttc_parametric".into(),
        policy: policy_4pt(),
        report: ReportLawSpec::TwoSchool {
            shares: vec![0.6, 0.4, 0.0, 0.0, 0.0, 0.0],
            v1_delta0: 0.0,
            v1_delta_w: 0.0,
            v1_delta_w2: 0.0,
            v2_delta0: 0.0,
            v2_delta_w: 0.0,
            v2_delta_w2: 0.0,
        },
        outcome: OutcomeLaw {
            base: LinForm { c0: 0.2, c_w: 0.1, ..Default::default() },
            effects: vec![
                EffectForm { coord: 0, form: LinForm { c0: 0.9, c_r: 0.2, ..Default::default() } },
                EffectForm { coord: 1, form: LinForm { c0: 0.6, c_r: 0.2, ..Default::default() } },
            ],
            mte: None,
            noise: gaussian_noise(0.2),
        },
        mechanism: Mechanism::TtcTwoSchool { pi1: 0.6 },
        conduct: ConductRule::TtcParametric { q: vec![0.2, 0.2] },
        covariate: None,
        iv: None,
    }
}

/// Null market: reports and outcomes ignore the policy, so every admissible
/// reform has zero effect and U(theta) is flat.
pub fn null_scenario() -> ScenarioSpec {
    ScenarioSpec {
        name: "null".into(),
        policy: policy_4pt(),
        report: ReportLawSpec::ScalarIid { density: Density1::Uniform { lo: 0.0, hi: 1.0 } },
        outcome: OutcomeLaw {
            base: LinForm { c_r: 0.5, ..Default::default() },
            effects: vec![EffectForm {
                coord: 0,
                form: LinForm { c0: 1.0, ..Default::default() },
            }],
            mte: None,
            noise: gaussian_noise(0.2),
        },
        mechanism: Mechanism::PriceCutoff,
        conduct: ConductRule::Capacity { q: vec![0.3] },
        covariate: None,
        iv: None,
    }
}

/// Price-cutoff market with strictly positive bounded outcomes, for the
/// quantile and Gini criteria.
pub fn gini_market() -> ScenarioSpec {
    ScenarioSpec {
        name: "gini_market".into(),
        policy: policy_4pt(),
        report: ReportLawSpec::ScalarTilt {
            delta0: -0.18,
            delta_w: -0.1,
            delta_w2: 0.1,
            tilt_base: 0.0,
            lo: 0.0,
            hi: 1.0,
        },
        outcome: OutcomeLaw {
            base: LinForm { c0: 2.0, c_r: 0.5, c_w: 0.3, c_ww: 0.15, ..Default::default() },
            effects: vec![EffectForm {
                coord: 0,
                form: LinForm { c0: 1.0, c_r: 1.0, ..Default::default() },
            }],
            mte: None,
            noise: NoiseLaw::TruncNormalSym { sigma: 0.15, half_width: 0.6 },
        },
        mechanism: Mechanism::PriceCutoff,
        conduct: ConductRule::Capacity { q: vec![0.3] },
        covariate: None,
        iv: None,
    }
}

fn covariate_base(name: &str, base: LinForm) -> ScenarioSpec {
    ScenarioSpec {
        name: name.into(),
        policy: PolicyLaw::bernoulli(0.5),
        report: ReportLawSpec::ScalarIid { density: Density1::Uniform { lo: 0.0, hi: 1.0 } },
        outcome: OutcomeLaw {
            base,
            effects: vec![EffectForm {
                coord: 0,
                form: LinForm { c0: 1.0, c_r: 1.0, ..Default::default() },
            }],
            mte: None,
            noise: gaussian_noise(0.2),
        },
        mechanism: Mechanism::PriceCutoff,
        conduct: ConductRule::Capacity { q: vec![0.3] },
        covariate: Some(CovariateCfg { p0: 0.3, p_x: 0.4 }),
        iv: None,
    }
}

/// Covariate scenarios with designed CATE-Psi shapes over X ~ U[0,1].
pub fn cate_linear() -> ScenarioSpec {
    covariate_base("cate_linear", LinForm { c_r: 0.5, c_wx: 1.0, ..Default::default() })
}
pub fn cate_sign() -> ScenarioSpec {
    covariate_base("cate_sign", LinForm { c_r: 0.5, c_w: -0.5, c_wx: 1.0, ..Default::default() })
}
pub fn cate_quad() -> ScenarioSpec {
    covariate_base("cate_quad", LinForm { c_r: 0.5, c_w: 0.2, c_wx2: 0.8, ..Default::default() })
}
pub fn cate_const() -> ScenarioSpec {
    covariate_base("cate_const", LinForm { c_r: 0.5, c_w: 0.7, ..Default::default() })
}
pub fn cate_negslope() -> ScenarioSpec {
    covariate_base("cate_negslope", LinForm { c_r: 0.5, c_w: 1.0, c_wx: -2.0, ..Default::default() })
}

/// IV scenario with designed marginal treatment effect 1 + xi and complier
/// window [0.2, 0.6] (complier average 1.4).
pub fn mte_iv() -> ScenarioSpec {
    ScenarioSpec {
        name: "mte_iv".into(),
        policy: PolicyLaw::bernoulli(0.4),
        report: ReportLawSpec::ScalarIid { density: Density1::Uniform { lo: 0.0, hi: 1.0 } },
        outcome: OutcomeLaw {
            base: LinForm { c_r: 0.5, ..Default::default() },
            effects: vec![EffectForm {
                coord: 0,
                form: LinForm { c0: 0.8, c_r: 0.2, ..Default::default() },
            }],
            mte: Some(MteEffect { alpha: 1.0, beta: 1.0 }),
            noise: gaussian_noise(0.2),
        },
        mechanism: Mechanism::PriceCutoff,
        conduct: ConductRule::Capacity { q: vec![0.3] },
        covariate: None,
        iv: Some(IvCfg { z_prob: 0.5, p_z0: 0.2, p_z1: 0.6 }),
    }
}

/// One catalog entry.
pub struct CatalogEntry {
    pub id: &'static str,
    pub build: fn() -> ScenarioSpec,
    pub blurb: &'static str,
}

/// The built-in scenario catalog.
pub fn catalog() -> Vec<CatalogEntry> {
    vec![
        CatalogEntry {
            id: "rationing",
            build: rationing,
            blurb: "single good rationed by lottery among demanders; conduct externality only",
        },
        CatalogEntry {
            id: "price_cutoff",
            build: price_cutoff,
            blurb: "market-clearing price cutoff, uniform reports, treatment effect 1 + r",
        },
        CatalogEntry {
            id: "price_cutoff_densb",
            build: price_cutoff_densb,
            blurb: "price cutoff companion with doubled boundary density (cancellation check)",
        },
        CatalogEntry {
            id: "auction_fixed_q",
            build: auction_fixed_q,
            blurb: "two-bidder second-price auction, win-rate-targeted reserve; competition + conduct",
        },
        CatalogEntry {
            id: "auction_myerson",
            build: auction_myerson,
            blurb: "two-bidder auction, revenue-optimal reserve; Sobolev conduct pairing",
        },
        CatalogEntry {
            id: "two_school",
            build: two_school,
            blurb: "two-school deferred acceptance with cutoff vector and substitution Jacobian",
        },
        CatalogEntry {
            id: "ttc_parametric",
            build: ttc_parametric,
            blurb: "parametric two-school top trading cycles on uniform priorities",
        },
        CatalogEntry {
            id: "null",
            build: null_scenario,
            blurb: "policy-inert market: every reform has zero effect",
        },
        CatalogEntry {
            id: "gini_market",
            build: gini_market,
            blurb: "positive bounded outcomes for quantile and Gini criteria",
        },
        CatalogEntry { id: "cate_linear", build: cate_linear, blurb: "covariate targeting, CATE(x) = x" },
        CatalogEntry { id: "cate_sign", build: cate_sign, blurb: "covariate targeting, CATE(x) = x - 1/2" },
        CatalogEntry { id: "cate_quad", build: cate_quad, blurb: "covariate targeting, CATE(x) = 0.2 + 0.8 x^2" },
        CatalogEntry { id: "cate_const", build: cate_const, blurb: "covariate targeting, constant CATE" },
        CatalogEntry {
            id: "cate_negslope",
            build: cate_negslope,
            blurb: "covariate targeting, CATE(x) = 1 - 2x (sign change)",
        },
        CatalogEntry {
            id: "mte_iv",
            build: mte_iv,
            blurb: "binary instrument, latent selection, designed MTE(xi) = 1 + xi",
        },
    ]
}

pub fn by_id(id: &str) -> Result<ScenarioSpec> {
    catalog()
        .into_iter()
        .find(|e| e.id == id)
        .map(|e| (e.build)())
        .ok_or_else(|| MpeError::Config(format!("unknown scenario id '{id}'")))
}

/// Built-in policy scores for a scenario (bound to its policy law).
pub fn scores_for(spec: &ScenarioSpec) -> Result<Vec<PolicyScore>> {
    match &spec.policy {
        PolicyLaw::Discrete { values, .. } if values.len() == 4 => Ok(vec![
            PolicyScore::tabulated(&spec.policy, &[-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0], "shift_up")?,
            PolicyScore::tabulated(
                &spec.policy,
                &[1.0, -2.0 / 3.0, -2.0 / 3.0, 1.0],
                "tilt_extremes",
            )?,
            PolicyScore::tabulated(&spec.policy, &[0.0, 1.0, -1.0, 0.0], "swap_adjacent")?,
        ]),
        PolicyLaw::Discrete { values, .. } if values.len() == 2 => {
            Ok(vec![PolicyScore::binary_shift(&spec.policy, "binary_shift")?])
        }
        _ => Ok(vec![
            PolicyScore::poly(&spec.policy, &[0.0, 1.0], "shift_up")?,
            PolicyScore::poly(&spec.policy, &[0.0, 0.0, 1.0], "tilt_extremes")?,
        ]),
    }
}

pub fn score_by_id(spec: &ScenarioSpec, id: &str) -> Result<PolicyScore> {
    scores_for(spec)?
        .into_iter()
        .find(|s| s.name == id)
        .ok_or_else(|| MpeError::Config(format!("unknown score id '{id}'")))
}

/// Functional catalog ids.
pub const FUNCTIONAL_IDS: [&str; 3] = ["mean", "median", "gini"];

pub fn functional_by_id(id: &str) -> Result<crate::welfare::FunctionalId> {
    match id {
        "mean" => Ok(crate::welfare::FunctionalId::Mean),
        "median" => Ok(crate::welfare::FunctionalId::Quantile { tau: 0.5 }),
        "gini" => Ok(crate::welfare::FunctionalId::Gini),
        other => Err(MpeError::Config(format!("unknown functional id '{other}'"))),
    }
}

// ---------------------------------------------------------------------------
// Scenario files
// ---------------------------------------------------------------------------

/// On-disk report-law shapes. Continuous supports come from the top-level
/// `bounds` key; densities specified inline must sit inside those bounds.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReportLawFile {
    BinaryDemand { p0: f64, p_w: f64 },
    ScalarTilt {
        delta0: f64,
        delta_w: f64,
        #[serde(default)]
        delta_w2: f64,
        #[serde(default)]
        tilt_base: f64,
    },
    LocationShift { b0: f64, b_w: f64, noise: Density1 },
    ScalarIid { density: Density1 },
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

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub master: u64,
}

/// Scenario file schema (see docs/scenario-schema.md). Unknown keys are
/// rejected everywhere.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub policy_law: PolicyLaw,
    pub report_law: ReportLawFile,
    pub outcome_law: OutcomeLaw,
    pub mechanism: Mechanism,
    pub conduct_rule: ConductRule,
    #[serde(default)]
    pub bounds: Option<Bounds>,
    #[serde(default)]
    pub seeds: Option<Seeds>,
    #[serde(default)]
    pub covariate: Option<CovariateCfg>,
    #[serde(default)]
    pub iv: Option<IvCfg>,
    #[serde(default)]
    pub solver: Option<SolverCfg>,
}

impl ScenarioFile {
    pub fn lower(self) -> Result<(ScenarioSpec, Option<SolverCfg>, Option<u64>)> {
        let bounds = self.bounds;
        let need_bounds = || -> Result<Bounds> {
            bounds.ok_or_else(|| {
                MpeError::Config("this report law requires the top-level `bounds` key".into())
            })
        };
        let report = match self.report_law {
            ReportLawFile::BinaryDemand { p0, p_w } => {
                ReportLawSpec::BinaryDemand { p0, p_w, p_w2: 0.0 }
            }
            ReportLawFile::ScalarTilt { delta0, delta_w, delta_w2, tilt_base } => {
                let b = need_bounds()?;
                ReportLawSpec::ScalarTilt { delta0, delta_w, delta_w2, tilt_base, lo: b.lo, hi: b.hi }
            }
            ReportLawFile::LocationShift { b0, b_w, noise } => {
                ReportLawSpec::LocationShift { b0, b_w, noise }
            }
            ReportLawFile::ScalarIid { density } => {
                if let Some(b) = bounds {
                    let s = density.support();
                    if s.0 < b.lo - 1e-12 || s.1 > b.hi + 1e-12 {
                        return Err(MpeError::Config(
                            "report density support exceeds the stated bounds".into(),
                        ));
                    }
                }
                ReportLawSpec::ScalarIid { density }
            }
            ReportLawFile::TwoSchool {
                shares,
                v1_delta0,
                v1_delta_w,
                v1_delta_w2,
                v2_delta0,
                v2_delta_w,
                v2_delta_w2,
            } => ReportLawSpec::TwoSchool {
                shares,
                v1_delta0,
                v1_delta_w,
                v1_delta_w2,
                v2_delta0,
                v2_delta_w,
                v2_delta_w2,
            },
        };
        let spec = ScenarioSpec {
            name: self.name,
            policy: self.policy_law,
            report,
            outcome: self.outcome_law,
            mechanism: self.mechanism,
            conduct: self.conduct_rule,
            covariate: self.covariate,
            iv: self.iv,
        };
        spec.validate()?;
        Ok((spec, self.solver, self.seeds.map(|s| s.master)))
    }
}

/// Load and validate a scenario file.
pub fn load_scenario_file(path: &Path) -> Result<(ScenarioSpec, Option<SolverCfg>, Option<u64>)> {
    let text = std::fs::read_to_string(path)?;
    let file: ScenarioFile = serde_json::from_str(&text)
        .map_err(|e| MpeError::Config(format!("{}: {e}", path.display())))?;
    file.lower()
}
