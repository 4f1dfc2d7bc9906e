//! Welfare-layer properties: decomposition closure, functional linearity,
//! influence-function path derivatives, CATE targeting, and the IV block.

use mpe_lab::clearing::{solve_conduct, SolverCfg};
use mpe_lab::externality::{build_psi, OracleMean, PsiMode};
use mpe_lab::mechanism::Meas;
use mpe_lab::oracle::{fd_itt, fd_mpe, OracleConfig};
use mpe_lab::pipeline::analyze;
use mpe_lab::population::{sample_population, PolicyLaw, PolicyScore};
use mpe_lab::scenarios;
use mpe_lab::welfare::{
    cate_psi_estimated, cate_psi_oracle, complier_score_mpe, influence_function, itt_psi,
    optimal_targeting_direction, targeting_mpe, wald_psi, FunctionalId, OutcomeDist,
};

#[test]
fn decomposition_closure_and_zero_reform() {
    for id in ["rationing", "price_cutoff", "auction_fixed_q", "two_school"] {
        let spec = scenarios::by_id(id).unwrap();
        let analysis = analyze(&spec, &SolverCfg::default()).unwrap();
        for score in scenarios::scores_for(&spec).unwrap() {
            let c = analysis.mpe(&spec, &score).unwrap();
            assert!(
                (c.direct + c.competition + c.conduct - c.total()).abs() <= 1e-12,
                "{id} closure"
            );
            // Zero direction: scale the score to nothing.
            let z = score.scaled(0.0, "zero");
            let cz = analysis.mpe(&spec, &z).unwrap();
            assert_eq!(cz.total(), 0.0, "{id} zero-reform");
        }
    }
}

#[test]
fn functional_linearity_of_the_mean() {
    // MPE of alpha Y + beta equals alpha times the MPE of Y for the mean
    // criterion (beta drops since E[s_W] = 0).
    let spec = scenarios::price_cutoff();
    let analysis = analyze(&spec, &SolverCfg::default()).unwrap();
    let score = &scenarios::scores_for(&spec).unwrap()[0];
    let base = analysis.mpe(&spec, score).unwrap().total();
    let mut scaled = spec.clone();
    let alpha = -2.5;
    let beta = 7.0;
    scaled.outcome.base.c0 = alpha * 0.0 + beta;
    scaled.outcome.base.c_r *= alpha;
    scaled.outcome.base.c_w *= alpha;
    scaled.outcome.base.c_ww *= alpha;
    scaled.outcome.effects[0].form.c0 *= alpha;
    scaled.outcome.effects[0].form.c_r *= alpha;
    let analysis2 = analyze(&scaled, &SolverCfg::default()).unwrap();
    let v = analysis2.mpe(&scaled, score).unwrap().total();
    assert!((v - alpha * base).abs() <= 1e-10, "{v} vs {}", alpha * base);
}

#[test]
fn influence_function_examples_and_path_derivative() {
    // Median of U(0,1): IF(y) = (0.5 - 1{y <= 0.5}) / 1.
    let ys: Vec<f64> = (0..200_000).map(|i| (i as f64 + 0.5) / 200_000.0).collect();
    let dist = OutcomeDist::from_sample(&ys);
    let f = influence_function(FunctionalId::Quantile { tau: 0.5 }, &dist).unwrap();
    assert!((f.influence(0.2) + 0.5).abs() < 0.05, "below the median: {}", f.influence(0.2));
    assert!((f.influence(0.8) - 0.5).abs() < 0.05, "above the median: {}", f.influence(0.8));

    // Path-derivative property on the oracle outcome distribution of the
    // gini market: d/dtheta U(F_{Y|theta}) along a pure outcome
    // reweighting f_Y (1 + theta s_Y) equals E0[IF s_Y] within 1e-4.
    let spec = scenarios::gini_market();
    let analysis = analyze(&spec, &SolverCfg::default()).unwrap();
    let od = OutcomeDist::from_scenario(&spec, &analysis.state.c0, &analysis.baseline).unwrap();
    let mu = od.mean;
    let s_y = |y: f64| (y - mu) / 2.0; // bounded on the support, mean zero
    for fid in [FunctionalId::Mean, FunctionalId::Quantile { tau: 0.5 }, FunctionalId::Gini] {
        let func = influence_function(fid, &od).unwrap();
        // E0[IF s_Y] on the grid.
        let mut lhs = 0.0;
        for i in 0..od.ys.len() - 1 {
            let h = od.ys[i + 1] - od.ys[i];
            lhs += 0.5
                * h
                * (func.influence(od.ys[i]) * s_y(od.ys[i]) * od.pdf[i]
                    + func.influence(od.ys[i + 1]) * s_y(od.ys[i + 1]) * od.pdf[i + 1]);
        }
        // Statistic under the tilted outcome density, differenced.
        let stat_at = |theta: f64| -> f64 {
            let pdf_t: Vec<f64> =
                od.ys.iter().zip(od.pdf.iter()).map(|(y, p)| p * (1.0 + theta * s_y(*y))).collect();
            let mut cdf_t = vec![0.0; od.ys.len()];
            for i in 1..od.ys.len() {
                let h = od.ys[i] - od.ys[i - 1];
                cdf_t[i] = cdf_t[i - 1] + 0.5 * h * (pdf_t[i] + pdf_t[i - 1]);
            }
            match fid {
                FunctionalId::Mean => {
                    let mut m = 0.0;
                    for i in 0..od.ys.len() - 1 {
                        let h = od.ys[i + 1] - od.ys[i];
                        m += 0.5 * h * (od.ys[i] * pdf_t[i] + od.ys[i + 1] * pdf_t[i + 1]);
                    }
                    m
                }
                FunctionalId::Quantile { tau } => {
                    // The tilted pdf is piecewise linear on the grid, so the
                    // cdf is piecewise quadratic; solve the cell's quadratic
                    // exactly to keep interpolation noise out of the slope.
                    let target = tau * cdf_t.last().unwrap();
                    let i = cdf_t.partition_point(|v| *v < target).max(1);
                    let h = od.ys[i] - od.ys[i - 1];
                    let p0 = pdf_t[i - 1];
                    let slope = (pdf_t[i] - pdf_t[i - 1]) / h;
                    let rhs = target - cdf_t[i - 1];
                    // Solve p0 t + slope t^2 / 2 = rhs for t in [0, h].
                    let t = if slope.abs() < 1e-14 {
                        rhs / p0
                    } else {
                        let disc = (p0 * p0 + 2.0 * slope * rhs).max(0.0);
                        (-p0 + disc.sqrt()) / slope
                    };
                    od.ys[i - 1] + t.clamp(0.0, h)
                }
                FunctionalId::Gini => {
                    let total = *cdf_t.last().unwrap();
                    let mut m = 0.0;
                    let mut a = 0.0;
                    for i in 0..od.ys.len() - 1 {
                        let h = od.ys[i + 1] - od.ys[i];
                        m += 0.5 * h * (od.ys[i] * pdf_t[i] + od.ys[i + 1] * pdf_t[i + 1]);
                        a += 0.5
                            * h
                            * (od.ys[i] * cdf_t[i] / total * pdf_t[i]
                                + od.ys[i + 1] * cdf_t[i + 1] / total * pdf_t[i + 1]);
                    }
                    2.0 * (a / total) / (m / total) - 1.0
                }
            }
        };
        let h = 5e-3;
        let rhs = (stat_at(h) - stat_at(-h)) / (2.0 * h);
        assert!(
            (lhs - rhs).abs() <= 1e-4 * (1.0 + rhs.abs()),
            "{fid:?}: E[IF s] = {lhs} vs path slope {rhs}"
        );
    }
}

#[test]
fn cate_recovery_and_targeting_properties() {
    // Designed CATE(x) = x recovered within 3 SE per bin at n = 1e5.
    let spec = scenarios::cate_linear();
    let baseline = spec.report_dist().unwrap();
    let meas = Meas::new(&baseline);
    let st = solve_conduct(&spec.mechanism, &spec.conduct, &meas, &SolverCfg::default()).unwrap();
    let cate = cate_psi_oracle(&spec, &st.c0, &baseline).unwrap();
    for &x in &[0.1, 0.5, 0.9] {
        assert!((cate.eval(x) - x).abs() < 1e-9, "oracle CATE({x}) = {}", cate.eval(x));
    }
    let analysis = analyze(&spec, &SolverCfg::default()).unwrap();
    let n = 100_000;
    let mut agents = sample_population(&spec, n, 77).unwrap();
    spec.mechanism.assign(&spec, &mut agents, &st.c0, &meas, 77).unwrap();
    let psi = build_psi(&agents, &meas, None, &analysis.conduct, PsiMode::Estimated).unwrap();
    let est = cate_psi_estimated(&psi, &agents, 20).unwrap();
    for (x, v) in est.xs.iter().zip(est.vals.iter()) {
        // Plug-in SE for a bin of ~n/20 observations with outcome sd ~0.45.
        let se = 0.45 / ((n / 20) as f64 / 4.0).sqrt();
        assert!((v - x).abs() < 3.0 * se + 0.02, "bin at {x}: {v}");
    }

    // Optimality: no random equal-norm direction beats h* (five scenarios),
    // and the EWM sign rule never exceeds it.
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    for id in ["cate_linear", "cate_sign", "cate_quad", "cate_const", "cate_negslope"] {
        let spec = scenarios::by_id(id).unwrap();
        let baseline = spec.report_dist().unwrap();
        let meas = Meas::new(&baseline);
        let st =
            solve_conduct(&spec.mechanism, &spec.conduct, &meas, &SolverCfg::default()).unwrap();
        let cate = cate_psi_oracle(&spec, &st.c0, &baseline).unwrap();
        let t = optimal_targeting_direction(&cate, 1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let quad = mpe_lab::quad::Quad { nodes_1d: 512, nodes_2d: 64 };
        for _ in 0..100 {
            let c: [f64; 3] = [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5];
            let h = |x: f64| c[0] + c[1] * x + c[2] * x * x;
            let norm = quad.integrate(0.0, 1.0, &[], |x| h(x) * h(x)).sqrt();
            if norm < 1e-9 {
                continue;
            }
            let mpe_h = targeting_mpe(&cate, &|x| h(x) / norm);
            assert!(mpe_h <= t.mpe_optimal + 1e-10, "{id}: direction beat h*");
        }
        assert!(t.mpe_ewm <= t.mpe_optimal + 1e-10, "{id}: EWM above h*");
    }

    // Sign flip of the CATE flips h* exactly.
    let spec_pos = scenarios::cate_linear();
    let baseline = spec_pos.report_dist().unwrap();
    let meas = Meas::new(&baseline);
    let st =
        solve_conduct(&spec_pos.mechanism, &spec_pos.conduct, &meas, &SolverCfg::default()).unwrap();
    let cate = cate_psi_oracle(&spec_pos, &st.c0, &baseline).unwrap();
    let flipped = mpe_lab::welfare::CatePsi {
        xs: cate.xs.clone(),
        vals: cate.vals.iter().map(|v| -v).collect(),
    };
    let t1 = optimal_targeting_direction(&cate, 1.0).unwrap();
    let t2 = optimal_targeting_direction(&flipped, 1.0).unwrap();
    assert!((t1.scale - t2.scale).abs() < 1e-12);
    assert!((t1.mpe_optimal - t2.mpe_optimal).abs() < 1e-12);
    // Constant CATE: h* is the constant direction at full budget.
    let spec_c = scenarios::cate_const();
    let st_c = {
        let baseline = spec_c.report_dist().unwrap();
        let meas = Meas::new(&baseline);
        solve_conduct(&spec_c.mechanism, &spec_c.conduct, &meas, &SolverCfg::default()).unwrap()
    };
    let cate_c = cate_psi_oracle(&spec_c, &st_c.c0, &spec_c.report_dist().unwrap()).unwrap();
    let tc = optimal_targeting_direction(&cate_c, 1.0).unwrap();
    // h*(x) = scale * 0.7 must have unit L2 norm.
    assert!((tc.scale * 0.7 - 1.0).abs() < 1e-9);
}

#[test]
fn iv_wald_itt_and_complier_score() {
    let spec = scenarios::mte_iv();
    let analysis = analyze(&spec, &SolverCfg::default()).unwrap();
    let baseline = &analysis.baseline;
    let meas = Meas::new(baseline);
    let n = 100_000;
    let mut estimates = Vec::new();
    for seed in [1u64, 2, 3, 4, 5] {
        let mut agents = sample_population(&spec, n, seed).unwrap();
        spec.mechanism.assign(&spec, &mut agents, &analysis.state.c0, &meas, seed).unwrap();
        let psi = build_psi(&agents, &meas, None, &analysis.conduct, PsiMode::Estimated).unwrap();
        let w = wald_psi(&spec, &psi, &agents).unwrap();
        let complier = w.complier_average.unwrap();
        // Designed MTE(xi) = 1 + xi on the window [0.2, 0.6]: average 1.4.
        assert!((complier - 1.4).abs() < 3.0 * 0.3 / (w.n_compliers as f64).sqrt() + 0.01);
        let se = 3.0 * 2.5 / (n as f64).sqrt();
        assert!((w.wald - complier).abs() <= se, "seed {seed}: wald {} vs {}", w.wald, complier);
        estimates.push(w.wald);
    }
    // ITT vs the z-path fd oracle.
    let seed = 1;
    let mut agents = sample_population(&spec, n, seed).unwrap();
    spec.mechanism.assign(&spec, &mut agents, &analysis.state.c0, &meas, seed).unwrap();
    let psi = build_psi(&agents, &meas, None, &analysis.conduct, PsiMode::Estimated).unwrap();
    let z_law = PolicyLaw::bernoulli(0.5);
    let s_z = PolicyScore::binary_shift(&z_law, "z_shift").unwrap();
    let itt = itt_psi(&psi, &agents, &s_z).unwrap();
    let fd = fd_itt(&spec, &s_z, &OracleConfig::default()).unwrap();
    let mc_se = 3.0 * 2.5 / (n as f64).sqrt();
    assert!(
        (itt - fd.value).abs() <= 1e-2 * fd.value.abs() + mc_se,
        "itt {itt} vs fd {}",
        fd.value
    );
    // ITT equals the Wald numerator under the canonical binary-shift score.
    let z = agents.z.as_ref().unwrap();
    let nf = n as f64;
    let zbar: f64 = z.iter().sum::<f64>() / nf;
    let totals = psi.totals();
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        if z[i] > 0.5 {
            s1 += totals[i];
            n1 += 1.0;
        } else {
            s0 += totals[i];
            n0 += 1.0;
        }
    }
    let numerator = s1 / n1 - s0 / n0;
    // The law-centered score differs from the sample-centered one by the
    // sample-share gap, which bounds the identity error.
    let share_gap = (zbar - 0.5).abs();
    let bound = 2.0 * share_gap * (s1 / n1 + s0 / n0).abs() + 1e-6;
    assert!((itt - numerator).abs() <= bound, "{itt} vs numerator {numerator} (bound {bound})");
    // Complier-targeted score: MPE = window mass times complier average.
    let cmpe = complier_score_mpe(&spec, &psi, &agents).unwrap();
    assert!((cmpe - 0.4 * 1.4).abs() < 0.03, "complier-score MPE {cmpe}");
    // Weak instrument: Z independent of W errors out.
    let mut broken = spec.clone();
    broken.iv = Some(mpe_lab::population::IvCfg { z_prob: 0.5, p_z0: 0.4, p_z1: 0.4 });
    let mut agents_b = sample_population(&broken, 10_000, 3).unwrap();
    broken.mechanism.assign(&broken, &mut agents_b, &analysis.state.c0, &meas, 3).unwrap();
    let psi_b = build_psi(&agents_b, &meas, None, &analysis.conduct, PsiMode::Estimated).unwrap();
    assert!(wald_psi(&broken, &psi_b, &agents_b).is_err());
}

#[test]
fn myerson_general_form_matches_fd() {
    // Criterion-2 shape: the Sobolev-paired MPE against the full oracle.
    let spec = scenarios::auction_myerson();
    let analysis = analyze(&spec, &SolverCfg::default()).unwrap();
    let cfg = OracleConfig::default();
    for score in scenarios::scores_for(&spec).unwrap() {
        let comp = analysis.mpe(&spec, &score).unwrap();
        let fd = fd_mpe(&spec, &score, &cfg).unwrap();
        let rel = (comp.total() - fd.value).abs() / fd.value.abs().max(1e-3);
        assert!(rel <= 1e-2, "{}: {} vs {} (rel {rel:.2e})", score.name, comp.total(), fd.value);
        // The conduct channel must be materially present.
        assert!(comp.conduct.abs() > 1e-3, "{}: conduct {}", score.name, comp.conduct);
    }
}
