//! Ground truth by brute force: recompute aggregate welfare under the
//! theta-perturbed policy law with a fully re-solved equilibrium and
//! differentiate numerically (central differences plus Richardson
//! extrapolation), plus fixed-c and fixed-P partial oracles that isolate
//! each decomposition channel.

use rand::Rng;

use crate::clearing::{solve_conduct, SolverCfg};
use crate::externality::CondMean;
use crate::mechanism::Meas;
use crate::population::{
    perturbed_policy_density, CondReport, Mixture, PolicyScore, Rep, ReportDist, ScenarioSpec,
};
use crate::{MpeError, Result};

/// Oracle evaluation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    Quadrature,
    MonteCarlo,
}

/// Finite-difference oracle configuration.
#[derive(Debug, Clone)]
pub struct OracleConfig {
    pub mode: OracleMode,
    /// Central-difference steps, largest first; each must be admissible for
    /// the score's positivity bound and above the step floor.
    pub theta_steps: Vec<f64>,
    pub mc_n: usize,
    pub seed: u64,
    /// Common-random-numbers coupling across theta values (MC mode).
    pub coupling: bool,
    pub solver: SolverCfg,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            mode: OracleMode::Quadrature,
            theta_steps: vec![1e-2, 5e-3, 2.5e-3],
            mc_n: 100_000,
            seed: 20_177,
            coupling: true,
            solver: SolverCfg::default(),
        }
    }
}

/// Keep clearing-solver noise (tol 1e-12) well below differencing error.
pub const THETA_STEP_FLOOR: f64 = 1e-4;

/// Finite-difference result with convergence diagnostics.
#[derive(Debug, Clone)]
pub struct FdResult {
    pub value: f64,
    pub error_estimate: f64,
    /// Observed convergence order of the central differences.
    pub order: f64,
    /// (step, central slope) pairs.
    pub slopes: Vec<(f64, f64)>,
}

/// Richardson-extrapolate a sequence of central-difference slopes (largest
/// step first) and diagnose the observed convergence order.
pub fn fd_from_slopes(slopes: Vec<(f64, f64)>, mode: OracleMode) -> Result<FdResult> {
    fd_from_slopes_gated(slopes, mode, true)
}

/// Slope extrapolation without the second-order gate: statistic paths
/// (quantiles, Gini) carry grid-interpolation noise far below the matching
/// tolerances but large enough to confuse the order estimate.
pub fn fd_from_slopes_unguarded(slopes: Vec<(f64, f64)>, mode: OracleMode) -> Result<FdResult> {
    fd_from_slopes_gated(slopes, mode, false)
}

fn fd_from_slopes_gated(slopes: Vec<(f64, f64)>, mode: OracleMode, strict: bool) -> Result<FdResult> {
    let n = slopes.len();
    if n < 2 {
        return Err(MpeError::Config("need at least two differencing steps".into()));
    }
    let scale = slopes.iter().map(|(_, d)| d.abs()).fold(1e-12, f64::max);
    // Differences below this are solver/quadrature noise, not a signal
    // about the convergence order.
    let noise_floor = 1e-9 * scale.max(1e-2);
    let order = if n >= 3 {
        let d1 = slopes[n - 3].1 - slopes[n - 2].1;
        let d2 = slopes[n - 2].1 - slopes[n - 1].1;
        let ratio = slopes[n - 3].0 / slopes[n - 2].0;
        if d1.abs() < noise_floor && d2.abs() < noise_floor {
            // Linear (or flat) to solver precision: already converged.
            2.0
        } else if d2.abs() > 0.0 {
            (d1 / d2).abs().ln() / ratio.ln()
        } else {
            2.0
        }
    } else {
        f64::NAN
    };
    if strict && mode == OracleMode::Quadrature && n >= 3 && !(1.5..=2.6).contains(&order) {
        let d1 = (slopes[n - 3].1 - slopes[n - 2].1).abs();
        let d2 = (slopes[n - 2].1 - slopes[n - 1].1).abs();
        if d1 > noise_floor.max(1e-7 * scale) || d2 > noise_floor.max(1e-7 * scale) {
            return Err(MpeError::OracleUnstable(format!(
                "central differences not second order (observed {order:.2}); slopes {slopes:?}"
            )));
        }
    }
    let rich = |a: (f64, f64), b: (f64, f64)| {
        let rho = (a.0 / b.0).powi(2);
        (rho * b.1 - a.1) / (rho - 1.0)
    };
    let (value, error_estimate) = if n >= 3 {
        let r1 = rich(slopes[n - 3], slopes[n - 2]);
        let r2 = rich(slopes[n - 2], slopes[n - 1]);
        ((16.0 * r2 - r1) / 15.0, (r2 - r1).abs())
    } else {
        (rich(slopes[0], slopes[1]), (slopes[1].1 - slopes[0].1).abs())
    };
    Ok(FdResult { value, error_estimate, order, slopes })
}

/// Central differences of a scalar path at the given steps.
pub fn fd_of<F: FnMut(f64) -> Result<f64>>(
    mut f: F,
    steps: &[f64],
    mode: OracleMode,
) -> Result<FdResult> {
    fd_from_slopes(fd_slopes(&mut f, steps)?, mode)
}

/// Like `fd_of` but without the order gate (statistic paths).
pub fn fd_of_unguarded<F: FnMut(f64) -> Result<f64>>(
    mut f: F,
    steps: &[f64],
    mode: OracleMode,
) -> Result<FdResult> {
    fd_from_slopes_unguarded(fd_slopes(&mut f, steps)?, mode)
}

fn fd_slopes<F: FnMut(f64) -> Result<f64>>(f: &mut F, steps: &[f64]) -> Result<Vec<(f64, f64)>> {
    let mut hs = steps.to_vec();
    hs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    for h in &hs {
        if *h < THETA_STEP_FLOOR {
            return Err(MpeError::Config(format!("theta step {h} below the floor")));
        }
    }
    let mut slopes = Vec::with_capacity(hs.len());
    for &h in &hs {
        let up = f(h)?;
        let dn = f(-h)?;
        slopes.push((h, (up - dn) / (2.0 * h)));
    }
    Ok(slopes)
}

/// Aggregate welfare U(theta) under the tilted policy law with the conduct
/// rule re-solved at the induced report distribution.
pub fn welfare_at(
    spec: &ScenarioSpec,
    score: &PolicyScore,
    theta: f64,
    cfg: &OracleConfig,
) -> Result<f64> {
    if spec.covariate.is_some() || spec.iv.is_some() {
        return Err(MpeError::Config(
            "welfare_at perturbs the marginal policy law; use the z-path oracle for IV scenarios"
                .into(),
        ));
    }
    match cfg.mode {
        OracleMode::Quadrature => welfare_at_quadrature(spec, score, theta, cfg),
        OracleMode::MonteCarlo => welfare_at_mc(spec, score, theta, cfg),
    }
}

fn welfare_at_quadrature(
    spec: &ScenarioSpec,
    score: &PolicyScore,
    theta: f64,
    cfg: &OracleConfig,
) -> Result<f64> {
    let atoms = perturbed_policy_density(&spec.policy, score, theta)?.atoms;
    let dist_t = spec.report.marginal(&atoms)?;
    let meas_t = Meas::new(&dist_t);
    let state = solve_conduct(&spec.mechanism, &spec.conduct, &meas_t, &cfg.solver)?;
    let mech = &spec.mechanism;
    let mut total = 0.0;
    for (pw, w) in &atoms {
        if *pw == 0.0 {
            continue;
        }
        let dist_w = cond_to_dist(&spec.report.cond(*w))?;
        let meas_w = Meas::with_env(&dist_w, &dist_t);
        for d in 0..mech.disc_count() {
            for arm in mech.arms(d) {
                total += pw
                    * mech.arm_integral(d, &arm, &state.c0, &meas_w, |rep: &Rep| {
                        spec.mean_y_given_w(*w, arm.alloc, rep)
                    });
            }
        }
    }
    Ok(total)
}

fn cond_to_dist(cond: &CondReport) -> Result<ReportDist> {
    Ok(match cond {
        CondReport::Binary { p1 } => ReportDist::BinaryDemand { p1: *p1 },
        CondReport::Scalar(d) => ReportDist::Scalar(Mixture::new(vec![(1.0, d.clone())])?),
        CondReport::TwoSchool { shares, v1, v2 } => ReportDist::TwoSchool {
            shares: shares.clone(),
            comps: vec![(1.0, v1.clone(), v2.clone())],
        },
    })
}

/// Monte-Carlo welfare with antithetic pairs and common random numbers:
/// every uniform is a deterministic function of (seed, pair, slot), so the
/// same draws couple across theta values. The equilibrium itself is solved
/// from the analytic tilted law (deterministic).
fn welfare_at_mc(
    spec: &ScenarioSpec,
    score: &PolicyScore,
    theta: f64,
    cfg: &OracleConfig,
) -> Result<f64> {
    let atoms = perturbed_policy_density(&spec.policy, score, theta)?.atoms;
    let dist_t = spec.report.marginal(&atoms)?;
    let meas_t = Meas::new(&dist_t);
    let state = solve_conduct(&spec.mechanism, &spec.conduct, &meas_t, &cfg.solver)?;
    let mech = &spec.mechanism;
    let n_pairs = (cfg.mc_n / 2).max(1);
    // With coupling on, the same uniforms serve every theta (common random
    // numbers); with it off, each theta gets an independent stream.
    let seed_eff =
        if cfg.coupling { cfg.seed } else { cfg.seed ^ theta.to_bits().rotate_left(17) };
    let mut sum = 0.0;
    for i in 0..n_pairs {
        let mut rng = crate::population::agent_rng(seed_eff, i as u64, 2);
        let u: [f64; 5] = [rng.gen(), rng.gen(), rng.gen(), rng.gen(), rng.gen()];
        for anti in [false, true] {
            let pick = |v: f64| if anti { 1.0 - v } else { v };
            let w = discrete_quantile_atoms(&atoms, pick(u[0]));
            let rep = match spec.report.cond(w) {
                CondReport::Binary { p1 } => Rep::binary(if pick(u[1]) < p1 { 1 } else { 0 }),
                CondReport::Scalar(d) => Rep::scalar(d.quantile(pick(u[1]))),
                CondReport::TwoSchool { shares, v1, v2 } => {
                    let t = discrete_index(&shares, pick(u[4]));
                    Rep::two_school(t, v1.quantile(pick(u[1])), v2.quantile(pick(u[2])))
                }
            };
            let probs = mech.allocation_prob(&rep, &state.c0, &meas_t)?;
            let mut acc = 0.0;
            let mut alloc = 0usize;
            let ua = pick(u[3]);
            for (a, pa) in probs.iter().enumerate() {
                acc += pa;
                if ua <= acc {
                    alloc = a;
                    break;
                }
            }
            // Outcome noise is mean-zero and independent of everything
            // else, so it integrates out of U(theta) exactly.
            sum += spec.mean_y_given_w(w, alloc, &rep);
        }
    }
    Ok(sum / (2.0 * n_pairs as f64))
}

fn discrete_quantile_atoms(atoms: &[(f64, f64)], u: f64) -> f64 {
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

/// The finite-difference MPE: Richardson-extrapolated central differences
/// of U(theta) at the configured steps.
pub fn fd_mpe(spec: &ScenarioSpec, score: &PolicyScore, cfg: &OracleConfig) -> Result<FdResult> {
    fd_of(|theta| welfare_at(spec, score, theta, cfg), &cfg.theta_steps, cfg.mode)
}

/// Fixed-population welfare U(c, P_{R|0}) = sum_a E[m_a mu_a(., c)].
pub fn fixed_population_welfare(
    spec: &ScenarioSpec,
    c: &[f64],
    baseline: &ReportDist,
    m: &dyn CondMean,
) -> f64 {
    let mech = &spec.mechanism;
    let meas = Meas::new(baseline);
    let mut total = 0.0;
    for d in 0..mech.disc_count() {
        for arm in mech.arms(d) {
            total += mech.arm_integral(d, &arm, c, &meas, |rep: &Rep| m.m(arm.alloc, rep));
        }
    }
    total
}

/// Central differences of the fixed-population welfare in each clearing
/// component, with a half-step confirmation pass.
pub fn fd_gradient_c(
    spec: &ScenarioSpec,
    c0: &[f64],
    baseline: &ReportDist,
    m: &dyn CondMean,
) -> Result<Vec<f64>> {
    let dim = c0.len();
    let mut grad = vec![0.0; dim];
    for j in 0..dim {
        let h = 1e-4 * (1.0 + c0[j].abs());
        let diff = |step: f64| {
            let mut cp = c0.to_vec();
            let mut cm = c0.to_vec();
            cp[j] += step;
            cm[j] -= step;
            (fixed_population_welfare(spec, &cp, baseline, m)
                - fixed_population_welfare(spec, &cm, baseline, m))
                / (2.0 * step)
        };
        let d1 = diff(h);
        let d2 = diff(0.5 * h);
        let val = (4.0 * d2 - d1) / 3.0;
        if (d1 - d2).abs() > 1e-3 * (1.0 + val.abs()) {
            return Err(MpeError::OracleUnstable(format!(
                "fd gradient component {j} unstable: {d1} vs {d2}"
            )));
        }
        grad[j] = val;
    }
    Ok(grad)
}

/// Central difference of the conduct rule along the report-law path
/// f_R (1 + theta s_R): the honest c'[s_R], one FdResult per component.
pub fn fd_conduct_derivative(
    spec: &ScenarioSpec,
    baseline: &ReportDist,
    s_r: &dyn crate::population::ScoreR,
    cfg: &OracleConfig,
) -> Result<Vec<FdResult>> {
    let dim = spec.mechanism.clearing_dim();
    let mut hs = cfg.theta_steps.clone();
    hs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    for h in &hs {
        if *h < THETA_STEP_FLOOR {
            return Err(MpeError::Config(format!("theta step {h} below the floor")));
        }
    }
    let mut per_component: Vec<Vec<(f64, f64)>> = vec![Vec::new(); dim];
    for &h in &hs {
        let solve_at = |theta: f64| -> Result<Vec<f64>> {
            let meas = Meas::tilted(baseline, theta, s_r);
            Ok(solve_conduct(&spec.mechanism, &spec.conduct, &meas, &cfg.solver)?.c0)
        };
        let up = solve_at(h)?;
        let dn = solve_at(-h)?;
        for j in 0..dim {
            per_component[j].push((h, (up[j] - dn[j]) / (2.0 * h)));
        }
    }
    per_component.into_iter().map(|slopes| fd_from_slopes(slopes, cfg.mode)).collect()
}

/// Partial oracle isolating the competition channel: P_R moves inside the
/// smooth parts only; the clearing parameters and the integrating
/// population stay at baseline.
pub fn fd_partial_competition(
    spec: &ScenarioSpec,
    c0: &[f64],
    baseline: &ReportDist,
    s_w: &PolicyScore,
    m: &dyn CondMean,
    cfg: &OracleConfig,
) -> Result<FdResult> {
    fd_of(
        |theta| {
            let atoms = perturbed_policy_density(&spec.policy, s_w, theta)?.atoms;
            let dist_t = spec.report.marginal(&atoms)?;
            let mech = &spec.mechanism;
            let meas = Meas::with_env(baseline, &dist_t);
            let mut total = 0.0;
            for d in 0..mech.disc_count() {
                for arm in mech.arms(d) {
                    total += mech.arm_integral(d, &arm, c0, &meas, |rep: &Rep| m.m(arm.alloc, rep));
                }
            }
            Ok(total)
        },
        &cfg.theta_steps,
        cfg.mode,
    )
}

/// Direct-channel oracle: the policy law moves, the market stays frozen at
/// the baseline equilibrium.
pub fn fd_direct_frozen(
    spec: &ScenarioSpec,
    c0: &[f64],
    baseline: &ReportDist,
    s_w: &PolicyScore,
    cfg: &OracleConfig,
) -> Result<FdResult> {
    fd_of(
        |theta| {
            let atoms = perturbed_policy_density(&spec.policy, s_w, theta)?.atoms;
            let mech = &spec.mechanism;
            let mut total = 0.0;
            for (pw, w) in &atoms {
                if *pw == 0.0 {
                    continue;
                }
                let dist_w = cond_to_dist(&spec.report.cond(*w))?;
                let meas_w = Meas::with_env(&dist_w, baseline);
                for d in 0..mech.disc_count() {
                    for arm in mech.arms(d) {
                        total += pw
                            * mech.arm_integral(d, &arm, c0, &meas_w, |rep: &Rep| {
                                spec.mean_y_given_w(*w, arm.alloc, rep)
                            });
                    }
                }
            }
            Ok(total)
        },
        &cfg.theta_steps,
        cfg.mode,
    )
}

/// U(theta) along a perturbation of the instrument's law (ITT oracle): the
/// Z tilt shifts the W mixture through p(z), reports respond through W,
/// and the equilibrium re-solves.
pub fn welfare_at_zpath(
    spec: &ScenarioSpec,
    s_z: &PolicyScore,
    theta: f64,
    cfg: &OracleConfig,
) -> Result<f64> {
    let iv = spec
        .iv
        .as_ref()
        .ok_or_else(|| MpeError::Config("z-path oracle requires an IV scenario".into()))?;
    let z_atoms = [(1.0 - iv.z_prob, 0.0), (iv.z_prob, 1.0)];
    let tilted: Vec<(f64, f64)> =
        z_atoms.iter().map(|(p, z)| (p * (1.0 + theta * s_z.eval(*z)), *z)).collect();
    if tilted.iter().any(|(p, _)| *p <= 0.0) {
        return Err(MpeError::Path { max_theta: theta.abs() });
    }
    let mut w_atoms = vec![(0.0, 0.0), (0.0, 1.0)];
    for (pz, z) in &tilted {
        let p1 = if *z > 0.5 { iv.p_z1 } else { iv.p_z0 };
        w_atoms[0].0 += pz * (1.0 - p1);
        w_atoms[1].0 += pz * p1;
    }
    let dist_t = spec.report.marginal(&w_atoms)?;
    let meas_t = Meas::new(&dist_t);
    let state = solve_conduct(&spec.mechanism, &spec.conduct, &meas_t, &cfg.solver)?;
    let mech = &spec.mechanism;
    let mut total = 0.0;
    for (pz, z) in &tilted {
        for wv in [0.0, 1.0] {
            let p1 = if *z > 0.5 { iv.p_z1 } else { iv.p_z0 };
            let pw = if wv > 0.5 { p1 } else { 1.0 - p1 };
            if pw == 0.0 {
                continue;
            }
            let dist_w = cond_to_dist(&spec.report.cond(wv))?;
            let meas_w = Meas::with_env(&dist_w, &dist_t);
            for d in 0..mech.disc_count() {
                for arm in mech.arms(d) {
                    total += pz
                        * pw
                        * mech.arm_integral(d, &arm, &state.c0, &meas_w, |rep: &Rep| {
                            spec.mean_y_given_wz(wv, *z, arm.alloc, rep)
                        });
                }
            }
        }
    }
    Ok(total)
}

/// fd of the z-path welfare: the ITT oracle.
pub fn fd_itt(spec: &ScenarioSpec, s_z: &PolicyScore, cfg: &OracleConfig) -> Result<FdResult> {
    fd_of(|theta| welfare_at_zpath(spec, s_z, theta, cfg), &cfg.theta_steps, cfg.mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_cubic_path() {
        // Slope at 0 is 3; cubic term makes differencing exactly 2nd order.
        let r = fd_of(
            |t| Ok(3.0 * t + 5.0 * t * t + 0.7 * t * t * t),
            &[1e-2, 5e-3, 2.5e-3],
            OracleMode::Quadrature,
        )
        .unwrap();
        assert!((r.value - 3.0).abs() < 1e-12, "value {}", r.value);
        assert!((r.order - 2.0).abs() < 0.1, "order {}", r.order);
    }

    #[test]
    fn fd_of_linear_path_converged() {
        let r =
            fd_of(|t| Ok(2.5 * t + 1.0), &[1e-2, 5e-3, 2.5e-3], OracleMode::Quadrature).unwrap();
        assert!((r.value - 2.5).abs() < 1e-12);
    }

    #[test]
    fn step_floor_enforced() {
        assert!(fd_of(|t| Ok(t), &[1e-2, 1e-5], OracleMode::Quadrature).is_err());
    }
}
