//! End-to-end smoke of the analytic pipeline against the fd oracle.

use mpe_lab::clearing::{influence_function_l2, solve_conduct, InfluenceFunctionC, SolverCfg};
use mpe_lab::externality::{
    competition_gamma_auction, psi_conduct, welfare_gradient, OracleMean,
};
use mpe_lab::mechanism::{Meas, Mechanism};
use mpe_lab::oracle::{fd_mpe, OracleConfig};
use mpe_lab::scenarios;
use mpe_lab::welfare::{mpe_covariance_oracle, MpeComponents};

fn analytic_mpe(
    spec: &mpe_lab::population::ScenarioSpec,
    score: &mpe_lab::population::PolicyScore,
) -> MpeComponents {
    let baseline = spec.report_dist().unwrap();
    let meas = Meas::new(&baseline);
    let state = solve_conduct(&spec.mechanism, &spec.conduct, &meas, &SolverCfg::default()).unwrap();
    let m = OracleMean { spec };
    let grad = welfare_gradient(&spec.mechanism, &state.c0, &meas, &m).unwrap();
    let infl = influence_function_l2(&state, &spec.mechanism).unwrap();
    let conduct = psi_conduct(InfluenceFunctionC::L2(infl), &grad).unwrap();
    let gamma = match &spec.mechanism {
        Mechanism::SecondPriceAuction { n } => {
            Some(competition_gamma_auction(*n, state.c0[0], &meas, &m))
        }
        _ => None,
    };
    mpe_covariance_oracle(spec, &state, &baseline, gamma.as_ref(), &conduct, score).unwrap()
}

#[test]
fn price_cutoff_analytic_matches_fd() {
    let spec = scenarios::price_cutoff();
    let cfg = OracleConfig::default();
    for score in scenarios::scores_for(&spec).unwrap() {
        let a = analytic_mpe(&spec, &score);
        let fd = fd_mpe(&spec, &score, &cfg).unwrap();
        let rel = (a.total() - fd.value).abs() / fd.value.abs().max(1e-3);
        eprintln!(
            "score {}: analytic {} (direct {} competition {} conduct {}), fd {} (order {:.2}), rel {rel:.2e}",
            score.name, a.total(), a.direct, a.competition, a.conduct, fd.value, fd.order
        );
        assert!(rel < 1e-3, "score {}: analytic {} fd {}", score.name, a.total(), fd.value);
    }
}

#[test]
fn rationing_analytic_matches_fd() {
    let spec = scenarios::rationing();
    let cfg = OracleConfig::default();
    for score in scenarios::scores_for(&spec).unwrap() {
        let a = analytic_mpe(&spec, &score);
        let fd = fd_mpe(&spec, &score, &cfg).unwrap();
        let rel = (a.total() - fd.value).abs() / fd.value.abs().max(1e-3);
        eprintln!("score {}: analytic {} fd {} rel {rel:.2e}", score.name, a.total(), fd.value);
        assert!(rel < 1e-3, "score {}: analytic {} fd {}", score.name, a.total(), fd.value);
    }
}

#[test]
fn auction_analytic_matches_fd() {
    let spec = scenarios::auction_fixed_q();
    let cfg = OracleConfig::default();
    for score in scenarios::scores_for(&spec).unwrap() {
        let a = analytic_mpe(&spec, &score);
        let fd = fd_mpe(&spec, &score, &cfg).unwrap();
        let rel = (a.total() - fd.value).abs() / fd.value.abs().max(1e-3);
        eprintln!(
            "score {}: analytic {} (d {} g {} c {}), fd {} rel {rel:.2e}",
            score.name, a.total(), a.direct, a.competition, a.conduct, fd.value
        );
        assert!(rel < 1e-3, "score {}: analytic {} fd {}", score.name, a.total(), fd.value);
    }
}

#[test]
fn two_school_analytic_matches_fd() {
    let spec = scenarios::two_school();
    let cfg = OracleConfig::default();
    for score in scenarios::scores_for(&spec).unwrap() {
        let a = analytic_mpe(&spec, &score);
        let fd = fd_mpe(&spec, &score, &cfg).unwrap();
        let rel = (a.total() - fd.value).abs() / fd.value.abs().max(1e-3);
        eprintln!("score {}: analytic {} fd {} rel {rel:.2e}", score.name, a.total(), fd.value);
        assert!(rel < 1e-3, "score {}: analytic {} fd {}", score.name, a.total(), fd.value);
    }
}
