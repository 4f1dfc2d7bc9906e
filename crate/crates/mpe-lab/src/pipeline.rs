//! One-call assembly of the analytic objects for a scenario: solved
//! equilibrium, welfare gradient, conduct-rule influence function (L2 or
//! Sobolev), competition externality, and the resulting MPE evaluators.

use crate::clearing::{
    influence_function_l2, solve_conduct, sturm_liouville_representer, verify_representer,
    ConductKind, EquilibriumState, InfluenceFunctionC, SolverCfg,
};
use crate::externality::{
    competition_gamma_auction, psi_conduct, welfare_gradient, CondMean, ConductExternality,
    GammaOrderStat, OracleMean, WelfareGradient,
};
use crate::mechanism::{Meas, Mechanism};
use crate::population::{InducedScore, PolicyScore, ReportDist, ScenarioSpec};
use crate::quad::Quad;
use crate::welfare::{
    mpe_covariance_oracle_with_mean, mpe_general, CondMeanW, MpeComponents, SpecMeanW,
};
use crate::Result;

/// Everything the analytic MPE needs, built once per scenario.
pub struct MarketAnalysis {
    pub baseline: ReportDist,
    pub state: EquilibriumState,
    pub grad: WelfareGradient,
    pub conduct: ConductExternality,
    pub gamma: Option<GammaOrderStat>,
}

/// Build the analysis with the scenario's own conditional means.
pub fn analyze(spec: &ScenarioSpec, solver: &SolverCfg) -> Result<MarketAnalysis> {
    let m = OracleMean { spec };
    analyze_with_mean(spec, solver, &m, None)
}

/// Build the analysis with a custom conditional-mean provider (the
/// welfare-functional pipeline passes influence-function means), optionally
/// injecting an additive error into the first welfare-gradient component
/// (the CI-gating corruption hook).
pub fn analyze_with_mean(
    spec: &ScenarioSpec,
    solver: &SolverCfg,
    m: &dyn CondMean,
    corrupt_grad: Option<f64>,
) -> Result<MarketAnalysis> {
    spec.validate()?;
    let baseline = spec.report_dist()?;
    let meas = Meas::new(&baseline);
    let state = solve_conduct(&spec.mechanism, &spec.conduct, &meas, solver)?;
    let mut grad = welfare_gradient(&spec.mechanism, &state.c0, &meas, m)?;
    if let Some(delta) = corrupt_grad {
        grad.grad[0] += delta;
    }
    let infl = match state.kind {
        ConductKind::Capacity => {
            InfluenceFunctionC::L2(influence_function_l2(&state, &spec.mechanism)?)
        }
        ConductKind::Myerson => {
            let rep = sturm_liouville_representer(&meas, state.c0[0], solver.grid_nodes)?;
            verify_representer(&rep, &meas, &Quad::default())?;
            InfluenceFunctionC::SobolevH1(rep)
        }
        ConductKind::TtcParametric => {
            // The parametric TTC carries no influence function (out of the
            // catalog's conduct-derivative scope); expose a zero gradient
            // pairing by treating it as L2 with the rectangular Jacobian
            // rejected downstream.
            return Err(crate::MpeError::Config(
                "the parametric TTC scenario supports cutoff and gradient checks, not the MPE pipeline"
                    .into(),
            ));
        }
    };
    let conduct = psi_conduct(infl, &grad)?;
    let gamma = match &spec.mechanism {
        Mechanism::SecondPriceAuction { n } => {
            Some(competition_gamma_auction(*n, state.c0[0], &meas, m))
        }
        _ => None,
    };
    Ok(MarketAnalysis { baseline, state, grad, conduct, gamma })
}

impl MarketAnalysis {
    /// Analytic MPE of a policy score: the Corollary covariance form in L2,
    /// the two-term Theorem form with H1 pairing for the Myerson rule.
    pub fn mpe(&self, spec: &ScenarioSpec, score: &PolicyScore) -> Result<MpeComponents> {
        self.mpe_with_mean(spec, score, &SpecMeanW { spec })
    }

    pub fn mpe_with_mean(
        &self,
        spec: &ScenarioSpec,
        score: &PolicyScore,
        m: &dyn CondMeanW,
    ) -> Result<MpeComponents> {
        match &self.conduct {
            ConductExternality::L2(_) => mpe_covariance_oracle_with_mean(
                spec,
                &self.state,
                &self.baseline,
                self.gamma.as_ref(),
                &self.conduct,
                score,
                m,
            ),
            ConductExternality::H1 { .. } => {
                let s_r = InducedScore::new(&spec.policy, &spec.report, score);
                mpe_general(
                    spec,
                    &self.state,
                    &self.baseline,
                    self.gamma.as_ref(),
                    &self.conduct,
                    score,
                    &s_r,
                    m,
                )
            }
        }
    }
}
