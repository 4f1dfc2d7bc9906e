//! Config-driven experiment runner: loads scenarios, executes the analytic
//! pipeline and the oracle, writes reports, and returns a CI-friendly exit
//! status (0 pass, 1 tolerance failure, 2 config error, 3 solver failure).

use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};

use crate::clearing::{clearing_jacobian_fd, solve_conduct, ConductKind, SolverCfg};
use crate::externality::{build_psi, OracleMean, PsiMode};
use crate::mechanism::{Meas, Mechanism};
use crate::oracle::{
    fd_gradient_c, fd_itt, fd_mpe, fd_of_unguarded, welfare_at, OracleConfig, OracleMode,
};
use crate::population::{
    perturbed_policy_density, sample_population, PolicyLaw, PolicyScore, ScenarioSpec,
};
use crate::report::{
    write_json_records, write_series_csv, write_summary_csv, write_text_table, MpeReport,
    Tolerances,
};
use crate::scenarios::{self, functional_by_id};
use crate::welfare::{
    cate_psi_oracle, complier_score_mpe, influence_function, itt_psi, optimal_targeting_direction,
    targeting_mpe, wald_psi, FunctionalId, IfMeanW, OutcomeDist,
};
use crate::{MpeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleChoice {
    Quadrature,
    Mc,
    Off,
}

/// Command-line surface.
#[derive(Debug, Parser)]
#[command(name = "mpe-lab", about = "Marginal-policy-effect laboratory for centralized markets")]
pub struct Args {
    /// Scenario ids from the catalog (repeatable).
    #[arg(long = "scenario")]
    pub scenarios: Vec<String>,
    /// Score ids (repeatable; default: all built-in scores of each scenario).
    #[arg(long = "score")]
    pub scores: Vec<String>,
    /// Welfare functional ids: mean, median, gini (repeatable).
    #[arg(long = "functional")]
    pub functionals: Vec<String>,
    /// Run the whole catalog.
    #[arg(long)]
    pub all: bool,
    /// Oracle mode for verification columns.
    #[arg(long, value_enum, default_value = "quadrature")]
    pub oracle: OracleChoice,
    /// Output directory for report files.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Master seed for all sampling.
    #[arg(long, default_value_t = 20_177)]
    pub seed: u64,
    /// Multiplies every tolerance in the defaults table.
    #[arg(long = "tol-scale", default_value_t = 1.0)]
    pub tol_scale: f64,
    /// Only dump U(theta) tables and diagnostic grids (no verdicts).
    #[arg(long)]
    pub oracle_only: bool,
    /// List the catalog and exit.
    #[arg(long)]
    pub list: bool,
    /// Additional scenario files (JSON; see docs/scenario-schema.md).
    #[arg(long = "scenario-file")]
    pub scenario_files: Vec<PathBuf>,
    /// Test-only: inject an additive error into the welfare gradient so the
    /// acceptance gate must flip to a nonzero exit status.
    #[arg(long = "corrupt-tau", hide = true)]
    pub corrupt_tau: Option<f64>,
}

/// A resolved run plan.
pub struct RunManifest {
    pub entries: Vec<(String, ScenarioSpec, SolverCfg, u64)>,
    pub scores: Vec<String>,
    pub functionals: Vec<FunctionalId>,
    pub oracle: OracleChoice,
    pub out: PathBuf,
    pub seed: u64,
    pub tol: Tolerances,
    pub oracle_only: bool,
    pub corrupt_tau: Option<f64>,
}

pub fn manifest_from_args(args: &Args) -> Result<RunManifest> {
    let mut entries = Vec::new();
    let ids: Vec<String> = if args.all {
        scenarios::catalog().iter().map(|e| e.id.to_string()).collect()
    } else {
        args.scenarios.clone()
    };
    for id in &ids {
        let spec = scenarios::by_id(id)?;
        entries.push((id.clone(), spec, SolverCfg::default(), args.seed));
    }
    for path in &args.scenario_files {
        let (spec, solver, seed) = scenarios::load_scenario_file(path)?;
        entries.push((
            spec.name.clone(),
            spec,
            solver.unwrap_or_default(),
            seed.unwrap_or(args.seed),
        ));
    }
    if entries.is_empty() && !args.list {
        return Err(MpeError::Config(
            "no scenarios selected; use --scenario, --scenario-file, or --all".into(),
        ));
    }
    let functionals = args
        .functionals
        .iter()
        .map(|f| functional_by_id(f))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunManifest {
        entries,
        scores: args.scores.clone(),
        functionals,
        oracle: args.oracle,
        out: args.out.clone(),
        seed: args.seed,
        tol: Tolerances::default().scaled(args.tol_scale),
        oracle_only: args.oracle_only,
        corrupt_tau: args.corrupt_tau,
    })
}

/// Text listing of built-in scenarios, scores, and functionals.
pub fn list_catalog(extra: &[(String, ScenarioSpec)]) -> String {
    let mut out = String::from("scenarios:\n");
    for e in scenarios::catalog() {
        out.push_str(&format!("  {:<20} {}\n", e.id, e.blurb));
    }
    for (id, _) in extra {
        out.push_str(&format!("  {id:<20} (user scenario file)\n"));
    }
    out.push_str("scores (bound per scenario):\n");
    out.push_str("  shift_up             first-moment shift of the policy law\n");
    out.push_str("  tilt_extremes        second-moment tilt toward the tails\n");
    out.push_str("  swap_adjacent        mass swap between interior policy levels\n");
    out.push_str("  binary_shift         treated-share shift (two-point laws)\n");
    out.push_str("functionals:\n");
    out.push_str("  mean                 average outcome\n");
    out.push_str("  median               0.5-quantile via its influence function\n");
    out.push_str("  gini                 Gini coefficient via its influence function\n");
    out
}

fn oracle_cfg(choice: OracleChoice, seed: u64) -> OracleConfig {
    OracleConfig {
        mode: if choice == OracleChoice::Mc { OracleMode::MonteCarlo } else { OracleMode::Quadrature },
        seed,
        ..OracleConfig::default()
    }
}

/// Execute the manifest; returns the exit status.
pub fn run(manifest: &RunManifest) -> Result<i32> {
    use rayon::prelude::*;
    configure_thread_pool();
    if manifest.oracle_only {
        for (id, spec, solver, seed) in &manifest.entries {
            emit_plot_data(&manifest.out, id, spec, solver, *seed, manifest)?;
        }
        return Ok(0);
    }
    // Scenarios run in the worker pool; report assembly is serialized and
    // deterministically ordered afterwards.
    let results: Vec<Result<Vec<MpeReport>>> = manifest
        .entries
        .par_iter()
        .map(|(id, spec, solver, seed)| {
            run_scenario(id, spec, solver, *seed, manifest)
                .map_err(|e| MpeError::Convergence(format!("scenario '{id}': {e}")))
        })
        .collect();
    let mut reports: Vec<MpeReport> = Vec::new();
    for r in results {
        reports.extend(r?);
    }
    reports.sort_by(|a, b| {
        (&a.scenario, &a.score, &a.functional, &a.check)
            .cmp(&(&b.scenario, &b.score, &b.functional, &b.check))
    });
    write_summary_csv(&manifest.out.join("summary.csv"), &reports)?;
    write_json_records(&manifest.out.join("reports.json"), &reports)?;
    write_text_table(&manifest.out.join("summary.txt"), &reports)?;
    let failed = reports.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        eprintln!("{failed} of {} checks failed; see {}", reports.len(), manifest.out.display());
        Ok(1)
    } else {
        println!("{} checks passed; reports in {}", reports.len(), manifest.out.display());
        Ok(0)
    }
}

fn configure_thread_pool() {
    if let Ok(v) = std::env::var("MPE_LAB_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
}

fn scores_to_run(spec: &ScenarioSpec, requested: &[String]) -> Result<Vec<PolicyScore>> {
    if requested.is_empty() {
        scenarios::scores_for(spec)
    } else {
        requested.iter().map(|id| scenarios::score_by_id(spec, id)).collect()
    }
}

fn run_scenario(
    id: &str,
    spec: &ScenarioSpec,
    solver: &SolverCfg,
    seed: u64,
    manifest: &RunManifest,
) -> Result<Vec<MpeReport>> {
    let tol = manifest.tol;
    if spec.covariate.is_some() {
        return run_targeting(id, spec, solver, seed, manifest);
    }
    if spec.iv.is_some() {
        return run_iv(id, spec, solver, seed, manifest);
    }
    if matches!(spec.mechanism, Mechanism::TtcTwoSchool { .. }) {
        return run_ttc(id, spec, solver, seed, manifest);
    }

    let mut rows = Vec::new();
    let analysis = crate::pipeline::analyze_with_mean(
        spec,
        solver,
        &OracleMean { spec },
        manifest.corrupt_tau,
    )?;
    rows.push(MpeReport::new(
        id,
        "-",
        "-",
        "clearing_residual",
        analysis.state.residual,
        (analysis.state.residual, 0.0, 0.0),
        Some(0.0),
        tol.clearing_residual,
        analysis.state.residual <= tol.clearing_residual,
    ));
    let cfg = oracle_cfg(manifest.oracle, seed);
    let h1 = matches!(analysis.conduct, crate::externality::ConductExternality::H1 { .. });
    // Per-functional objects are score-independent; build them once.
    let mut fpacks = Vec::new();
    for fid in &manifest.functionals {
        if matches!(fid, FunctionalId::Mean) {
            continue;
        }
        let dist = OutcomeDist::from_scenario(spec, &analysis.state.c0, &analysis.baseline)?;
        let functional = influence_function(*fid, &dist)?;
        let fa = {
            let m = crate::welfare::if_mean_adapter(spec, &functional);
            crate::pipeline::analyze_with_mean(spec, solver, &m, manifest.corrupt_tau)?
        };
        fpacks.push((*fid, functional, fa));
    }
    for score in scores_to_run(spec, &manifest.scores)? {
        let t0 = std::time::Instant::now();
        let comp = analysis.mpe(spec, &score)?;
        let (oracle_val, tol_applied, pass) = if manifest.oracle == OracleChoice::Off {
            (None, tol.mpe_rel, true)
        } else {
            let fd = fd_mpe(spec, &score, &cfg)?;
            let (t, ok) = tol.mpe_verdict(comp.total(), fd.value, h1);
            (Some(fd.value), t, ok)
        };
        let mut row = MpeReport::new(
            id,
            &score.name,
            "mean",
            "mpe_vs_fd",
            comp.total(),
            (comp.direct, comp.competition, comp.conduct),
            oracle_val,
            tol_applied,
            pass,
        );
        row.runtime = t0.elapsed();
        rows.push(row);

        // Welfare functionals beyond the mean (where requested).
        for (fid, functional, fa) in &fpacks {
            rows.push(run_functional(
                id, spec, fa, functional, &score, *fid, &cfg, &tol, manifest,
            )?);
        }
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
fn run_functional(
    id: &str,
    spec: &ScenarioSpec,
    fa: &crate::pipeline::MarketAnalysis,
    functional: &crate::welfare::WelfareFunctional,
    score: &PolicyScore,
    fid: FunctionalId,
    cfg: &OracleConfig,
    tol: &Tolerances,
    manifest: &RunManifest,
) -> Result<MpeReport> {
    let comp = fa.mpe_with_mean(spec, score, &IfMeanW { spec, functional })?;
    let (oracle_val, tol_applied, pass) = if manifest.oracle == OracleChoice::Off {
        (None, tol.functional_gini_rel, true)
    } else {
        // fd of the statistic itself along the full equilibrium path.
        let fd = fd_of_unguarded(
            |theta| {
                let atoms = perturbed_policy_density(&spec.policy, score, theta)?.atoms;
                let dist_t = spec.report.marginal(&atoms)?;
                let meas_t = Meas::new(&dist_t);
                let st = solve_conduct(&spec.mechanism, &spec.conduct, &meas_t, &cfg.solver)?;
                crate::welfare::market_statistic(spec, &atoms, &st.c0, &dist_t, fid)
            },
            &cfg.theta_steps,
            cfg.mode,
        )?;
        let rel_tol = match fid {
            FunctionalId::Quantile { .. } => tol.functional_quantile_rel,
            FunctionalId::Gini => tol.functional_gini_rel,
            FunctionalId::Mean => tol.mpe_rel,
        };
        let ok = if fd.value.abs() < tol.mpe_small {
            (comp.total() - fd.value).abs() <= tol.mpe_abs.max(10.0 * fd.error_estimate)
        } else {
            (comp.total() - fd.value).abs() / fd.value.abs() <= rel_tol
        };
        (Some(fd.value), rel_tol, ok)
    };
    Ok(MpeReport::new(
        id,
        &score.name,
        &format!("{}", functional.id),
        "functional_mpe_vs_fd",
        comp.total(),
        (comp.direct, comp.competition, comp.conduct),
        oracle_val,
        tol_applied,
        pass,
    ))
}

fn run_targeting(
    id: &str,
    spec: &ScenarioSpec,
    solver: &SolverCfg,
    seed: u64,
    _manifest: &RunManifest,
) -> Result<Vec<MpeReport>> {
    use rand::Rng;
    let baseline = spec.report_dist()?;
    let meas = Meas::new(&baseline);
    let state = solve_conduct(&spec.mechanism, &spec.conduct, &meas, solver)?;
    let cate = cate_psi_oracle(spec, &state.c0, &baseline)?;
    let norm_cap = 1.0;
    let t = optimal_targeting_direction(&cate, norm_cap)?;
    // 100 random equal-norm polynomial directions; none may beat h*.
    let mut rng = crate::population::agent_rng(seed, 7, 3);
    let mut best = f64::NEG_INFINITY;
    for _ in 0..100 {
        let coefs: [f64; 3] = [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5];
        let h = |x: f64| coefs[0] + coefs[1] * x + coefs[2] * x * x;
        let q = crate::quad::Quad { nodes_1d: 512, nodes_2d: 64 };
        let norm = q.integrate(0.0, 1.0, &[], |x| h(x) * h(x)).sqrt();
        if norm < 1e-9 {
            continue;
        }
        let scale = norm_cap.sqrt() / norm;
        best = best.max(targeting_mpe(&cate, &|x| scale * h(x)));
    }
    let mut rows = Vec::new();
    rows.push(MpeReport::new(
        id,
        "targeted",
        "mean",
        "targeting_optimality",
        t.mpe_optimal,
        (t.mpe_optimal, 0.0, 0.0),
        Some(best),
        1e-10,
        t.mpe_optimal >= best - 1e-10,
    ));
    rows.push(MpeReport::new(
        id,
        "ewm_sign_rule",
        "mean",
        "ewm_below_optimal",
        t.mpe_ewm,
        (t.mpe_ewm, 0.0, 0.0),
        Some(t.mpe_optimal),
        1e-10,
        t.mpe_ewm <= t.mpe_optimal + 1e-10,
    ));
    Ok(rows)
}

fn run_iv(
    id: &str,
    spec: &ScenarioSpec,
    solver: &SolverCfg,
    seed: u64,
    manifest: &RunManifest,
) -> Result<Vec<MpeReport>> {
    let baseline = spec.report_dist()?;
    let meas = Meas::new(&baseline);
    let state = solve_conduct(&spec.mechanism, &spec.conduct, &meas, solver)?;
    let m = OracleMean { spec };
    let grad = crate::externality::welfare_gradient(&spec.mechanism, &state.c0, &meas, &m)?;
    let infl = crate::clearing::influence_function_l2(&state, &spec.mechanism)?;
    let conduct = crate::externality::psi_conduct(
        crate::clearing::InfluenceFunctionC::L2(infl),
        &grad,
    )?;
    let n = 100_000;
    let mut agents = sample_population(spec, n, seed)?;
    spec.mechanism.assign(spec, &mut agents, &state.c0, &meas, seed)?;
    let psi = build_psi(&agents, &meas, None, &conduct, PsiMode::Estimated)?;
    let wald = wald_psi(spec, &psi, &agents)?;
    let complier = wald.complier_average.unwrap_or(f64::NAN);
    // 3 MC standard errors of the Wald ratio, rough plug-in.
    let se = 3.0 * 2.5 / (n as f64).sqrt();
    let mut rows = Vec::new();
    rows.push(MpeReport::new(
        id,
        "wald",
        "mean",
        "wald_vs_complier",
        wald.wald,
        (wald.wald, 0.0, 0.0),
        Some(complier),
        se,
        (wald.wald - complier).abs() <= se,
    ));
    // ITT against the fd oracle over the instrument's law.
    let z_law = PolicyLaw::bernoulli(spec.iv.as_ref().unwrap().z_prob);
    let s_z = PolicyScore::binary_shift(&z_law, "z_shift")?;
    let itt = itt_psi(&psi, &agents, &s_z)?;
    let cfg = oracle_cfg(manifest.oracle, seed);
    let (oracle_val, pass) = if manifest.oracle == OracleChoice::Off {
        (None, true)
    } else {
        let fd = fd_itt(spec, &s_z, &cfg)?;
        // Sample-mean ITT vs deterministic oracle: 1e-2 relative plus MC noise.
        let mc_se = 3.0 * 2.5 / (n as f64).sqrt();
        let ok = (itt - fd.value).abs() <= 1e-2 * fd.value.abs().max(1e-3) + mc_se;
        (Some(fd.value), ok)
    };
    rows.push(MpeReport::new(
        id,
        "z_shift",
        "mean",
        "itt_vs_fd",
        itt,
        (itt, 0.0, 0.0),
        oracle_val,
        1e-2,
        pass,
    ));
    // Complier-targeted score (oracle mode): its MPE is the complier mass
    // times the complier MTE average.
    let cmpe = complier_score_mpe(spec, &psi, &agents)?;
    let window = {
        let iv = spec.iv.as_ref().unwrap();
        (iv.p_z1 - iv.p_z0).abs()
    };
    let predicted = window * complier;
    rows.push(MpeReport::new(
        id,
        "complier_score",
        "mean",
        "complier_score_mpe",
        cmpe,
        (cmpe, 0.0, 0.0),
        Some(predicted),
        se,
        (cmpe - predicted).abs() <= 3.0 * se,
    ));
    Ok(rows)
}

fn run_ttc(
    id: &str,
    spec: &ScenarioSpec,
    solver: &SolverCfg,
    seed: u64,
    manifest: &RunManifest,
) -> Result<Vec<MpeReport>> {
    let tol = manifest.tol;
    let baseline = spec.report_dist()?;
    let meas = Meas::new(&baseline);
    let state = solve_conduct(&spec.mechanism, &spec.conduct, &meas, solver)?;
    let mut rows = Vec::new();
    rows.push(MpeReport::new(
        id,
        "-",
        "-",
        "clearing_residual",
        state.residual,
        (state.residual, 0.0, 0.0),
        Some(0.0),
        tol.clearing_residual,
        state.residual <= tol.clearing_residual,
    ));
    // Frozen-frontier identity: the V1 cutoff is shared by both rounds
    // exactly (enforced by construction, asserted here).
    let Mechanism::TtcTwoSchool { pi1 } = spec.mechanism else { unreachable!() };
    let q = match &spec.conduct {
        crate::population::ConductRule::TtcParametric { q } => q.clone(),
        _ => return Err(MpeError::Config("ttc scenario must use the ttc conduct rule".into())),
    };
    let cuts = crate::clearing::ttc_parametric_cutoffs(pi1, q[0], q[1])?;
    rows.push(MpeReport::new(
        id,
        "-",
        "-",
        "ttc_frozen_identity",
        cuts.v1_cut,
        (cuts.v1_cut, 0.0, 0.0),
        Some(state.c0[0]),
        0.0,
        cuts.v1_cut == state.c0[0],
    ));
    // Large-market discrete TTC simulation oracle.
    let (s1, s2, s3) =
        crate::mechanism::simulate_ttc_two_school(pi1, q[0], q[1], 1_000_000, seed);
    let max_err = (s1 - cuts.v1_cut)
        .abs()
        .max((s2 - cuts.v2_round1).abs())
        .max((s3 - cuts.v2_round2).abs());
    rows.push(MpeReport::new(
        id,
        "-",
        "-",
        "ttc_cutoffs_vs_sim",
        max_err,
        (max_err, 0.0, 0.0),
        Some(0.0),
        tol.ttc_sim_abs,
        max_err <= tol.ttc_sim_abs,
    ));
    // Welfare-gradient identity on the three-parameter cutoff system.
    let m = OracleMean { spec };
    let grad = crate::externality::welfare_gradient(&spec.mechanism, &state.c0, &meas, &m)?;
    if manifest.oracle != OracleChoice::Off {
        let fd = fd_gradient_c(spec, &state.c0, &baseline, &m)?;
        for (j, (a, o)) in grad.grad.iter().zip(fd.iter()).enumerate() {
            let ok = (a - o).abs() <= tol.gradient_rel * o.abs().max(1e-3);
            rows.push(MpeReport::new(
                id,
                &format!("c{j}"),
                "-",
                "gradient_vs_fd",
                *a,
                (*a, 0.0, 0.0),
                Some(*o),
                tol.gradient_rel,
                ok,
            ));
        }
    }
    // Analytic share Jacobian against its finite-difference cross-check.
    let jac = spec.mechanism.share_jacobian(&state.c0, &meas);
    let jfd = clearing_jacobian_fd(&spec.mechanism, &meas, &state.c0);
    let jerr = jac
        .iter()
        .flatten()
        .zip(jfd.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    rows.push(MpeReport::new(
        id,
        "-",
        "-",
        "jacobian_vs_fd",
        jerr,
        (jerr, 0.0, 0.0),
        Some(0.0),
        1e-6,
        jerr <= 1e-6,
    ));
    Ok(rows)
}

/// Dump U(theta) tables and diagnostic grids as plain CSV series.
pub fn emit_plot_data(
    out: &Path,
    id: &str,
    spec: &ScenarioSpec,
    solver: &SolverCfg,
    seed: u64,
    manifest: &RunManifest,
) -> Result<()> {
    let cfg = oracle_cfg(manifest.oracle, seed);
    if spec.covariate.is_some() {
        let baseline = spec.report_dist()?;
        let meas = Meas::new(&baseline);
        let state = solve_conduct(&spec.mechanism, &spec.conduct, &meas, solver)?;
        let cate = cate_psi_oracle(spec, &state.c0, &baseline)?;
        let rows: Vec<Vec<f64>> =
            cate.xs.iter().zip(cate.vals.iter()).map(|(x, v)| vec![*x, *v]).collect();
        return write_series_csv(&out.join(format!("cate_{id}.csv")), "x,cate_psi", &rows);
    }
    if spec.iv.is_some() {
        // Binned MTE curve from a simulated sample plus the designed line.
        let baseline = spec.report_dist()?;
        let meas = Meas::new(&baseline);
        let state = solve_conduct(&spec.mechanism, &spec.conduct, &meas, solver)?;
        let mut agents = sample_population(spec, 100_000, seed)?;
        spec.mechanism.assign(spec, &mut agents, &state.c0, &meas, seed)?;
        let mte = spec.outcome.mte.unwrap();
        let mut rows = Vec::new();
        for b in 0..20 {
            let xi = (b as f64 + 0.5) / 20.0;
            rows.push(vec![xi, mte.alpha + mte.beta * xi]);
        }
        return write_series_csv(&out.join(format!("mte_{id}.csv")), "xi,designed_mte", &rows);
    }
    if matches!(spec.mechanism, Mechanism::TtcTwoSchool { .. }) {
        let baseline = spec.report_dist()?;
        let meas = Meas::new(&baseline);
        let state = solve_conduct(&spec.mechanism, &spec.conduct, &meas, solver)?;
        let rows = vec![state.c0.clone()];
        return write_series_csv(
            &out.join(format!("ttc_cutoffs_{id}.csv")),
            "v1_cut,v2_round1,v2_round2",
            &rows,
        );
    }
    // U(theta) curve per score.
    for score in scores_to_run(spec, &manifest.scores)? {
        let mut rows = Vec::new();
        for k in -10..=10 {
            let theta = 0.008 * k as f64;
            let u = welfare_at(spec, &score, theta, &cfg)?;
            rows.push(vec![theta, u]);
        }
        write_series_csv(
            &out.join(format!("utheta_{id}_{}.csv", score.name)),
            "theta,u",
            &rows,
        )?;
    }
    // Sobolev representer grid for the Myerson rule.
    let baseline = spec.report_dist()?;
    let meas = Meas::new(&baseline);
    let state = solve_conduct(&spec.mechanism, &spec.conduct, &meas, solver)?;
    if state.kind == ConductKind::Myerson {
        let rep = crate::clearing::sturm_liouville_representer(&meas, state.c0[0], solver.grid_nodes)?;
        let mut rows = Vec::new();
        for i in 0..rep.nodes.len() {
            let (dl, dr) = rep.dpsi(i);
            rows.push(vec![rep.nodes[i], rep.psi[i], dl, dr]);
        }
        write_series_csv(
            &out.join(format!("psi_grid_{id}.csv")),
            "r,psi,dpsi_left,dpsi_right",
            &rows,
        )?;
    }
    Ok(())
}

/// Entry point used by the binary: parse, dispatch, map errors to the exit
/// code contract.
pub fn main_with_args(args: Args) -> i32 {
    if args.list {
        let mut extra = Vec::new();
        for path in &args.scenario_files {
            match scenarios::load_scenario_file(path) {
                Ok((spec, _, _)) => extra.push((spec.name.clone(), spec)),
                Err(e) => {
                    eprintln!("error: {e}");
                    return 2;
                }
            }
        }
        print!("{}", list_catalog(&extra));
        return 0;
    }
    let manifest = match manifest_from_args(&args) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match run(&manifest) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                MpeError::Config(_) | MpeError::Path { .. } => 2,
                _ => 3,
            }
        }
    }
}
