//! Run reports: tolerance defaults, per-check records, and the CSV / JSON /
//! text emitters. Serialized outputs carry no wall-clock data so identical
//! seeds produce byte-identical files.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::Result;

/// All acceptance tolerances in one place, scalable per run. Every report
/// row records the tolerance actually applied.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Tolerances {
    /// Relative tolerance for L2 covariance MPEs against the fd oracle.
    pub mpe_rel: f64,
    /// Absolute fallback when |MPE| is below `mpe_small`.
    pub mpe_abs: f64,
    pub mpe_small: f64,
    /// Relative tolerance for the Sobolev-paired Myerson MPE.
    pub mpe_rel_h1: f64,
    /// Welfare-gradient identity vs central differences.
    pub gradient_rel: f64,
    /// Conduct-rule derivative identity E[psi s] vs fd.
    pub conduct_rel: f64,
    /// Quantile-functional MPE vs fd of the statistic.
    pub functional_quantile_rel: f64,
    /// Gini-functional MPE vs fd of the statistic.
    pub functional_gini_rel: f64,
    /// Competition-channel isolation.
    pub competition_rel: f64,
    /// TTC parametric cutoffs vs the discrete-agent simulation.
    pub ttc_sim_abs: f64,
    /// Clearing residual certificate.
    pub clearing_residual: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            mpe_rel: 1e-3,
            mpe_abs: 1e-6,
            mpe_small: 1e-3,
            mpe_rel_h1: 1e-2,
            gradient_rel: 1e-3,
            conduct_rel: 1e-3,
            functional_quantile_rel: 2e-3,
            functional_gini_rel: 1e-2,
            competition_rel: 1e-3,
            ttc_sim_abs: 5e-3,
            clearing_residual: 1e-10,
        }
    }
}

impl Tolerances {
    pub fn scaled(self, scale: f64) -> Self {
        Tolerances {
            mpe_rel: self.mpe_rel * scale,
            mpe_abs: self.mpe_abs * scale,
            mpe_small: self.mpe_small,
            mpe_rel_h1: self.mpe_rel_h1 * scale,
            gradient_rel: self.gradient_rel * scale,
            conduct_rel: self.conduct_rel * scale,
            functional_quantile_rel: self.functional_quantile_rel * scale,
            functional_gini_rel: self.functional_gini_rel * scale,
            competition_rel: self.competition_rel * scale,
            ttc_sim_abs: self.ttc_sim_abs * scale,
            clearing_residual: self.clearing_residual * scale,
        }
    }

    /// Pass/fail for an MPE comparison: relative above the small-value
    /// threshold, absolute below it.
    pub fn mpe_verdict(&self, analytic: f64, oracle: f64, h1: bool) -> (f64, bool) {
        let rel_tol = if h1 { self.mpe_rel_h1 } else { self.mpe_rel };
        if oracle.abs() < self.mpe_small {
            (self.mpe_abs, (analytic - oracle).abs() <= self.mpe_abs)
        } else {
            (rel_tol, (analytic - oracle).abs() / oracle.abs() <= rel_tol)
        }
    }
}

/// One verification row: an analytic value, the oracle it was checked
/// against, and the verdict at the recorded tolerance.
#[derive(Debug, Clone, Serialize)]
pub struct MpeReport {
    pub scenario: String,
    pub score: String,
    pub functional: String,
    /// What was compared (mpe_vs_fd, gradient_vs_fd, wald_vs_complier, ...).
    pub check: String,
    pub analytic: f64,
    pub direct: f64,
    pub competition: f64,
    pub conduct: f64,
    pub oracle: Option<f64>,
    pub abs_error: Option<f64>,
    pub rel_error: Option<f64>,
    pub tolerance: f64,
    pub pass: bool,
    /// Wall-clock, kept out of serialized outputs for byte determinism.
    #[serde(skip)]
    pub runtime: std::time::Duration,
}

impl MpeReport {
    pub fn new(
        scenario: &str,
        score: &str,
        functional: &str,
        check: &str,
        analytic: f64,
        components: (f64, f64, f64),
        oracle: Option<f64>,
        tolerance: f64,
        pass: bool,
    ) -> Self {
        let (direct, competition, conduct) = components;
        debug_assert!(
            (direct + competition + conduct - analytic).abs() <= 1e-12 * (1.0 + analytic.abs()),
            "component split must sum to the analytic value"
        );
        MpeReport {
            scenario: scenario.into(),
            score: score.into(),
            functional: functional.into(),
            check: check.into(),
            analytic,
            direct,
            competition,
            conduct,
            oracle,
            abs_error: oracle.map(|o| (analytic - o).abs()),
            rel_error: oracle.map(|o| (analytic - o).abs() / o.abs().max(1e-300)),
            tolerance,
            pass,
            runtime: std::time::Duration::ZERO,
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Flat CSV summary, one row per check.
pub fn write_summary_csv(path: &Path, reports: &[MpeReport]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(
        buf,
        "scenario,score,functional,check,analytic,direct,competition,conduct,oracle,abs_error,rel_error,tolerance,pass"
    )?;
    for r in reports {
        writeln!(
            buf,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.scenario,
            r.score,
            r.functional,
            r.check,
            r.analytic,
            r.direct,
            r.competition,
            r.conduct,
            fmt_opt(r.oracle),
            fmt_opt(r.abs_error),
            fmt_opt(r.rel_error),
            r.tolerance,
            r.pass
        )?;
    }
    write_atomic(path, &buf)
}

/// JSON records (an array of report objects).
pub fn write_json_records(path: &Path, reports: &[MpeReport]) -> Result<()> {
    let buf = serde_json::to_vec_pretty(reports)
        .map_err(|e| crate::MpeError::Config(format!("serialize reports: {e}")))?;
    write_atomic(path, &buf)
}

/// Human-readable fixed-width table.
pub fn write_text_table(path: &Path, reports: &[MpeReport]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(
        buf,
        "{:<20} {:<14} {:<10} {:<22} {:>14} {:>14} {:>10} {:>9} {:>5}",
        "scenario", "score", "functional", "check", "analytic", "oracle", "rel_err", "tol", "pass"
    )?;
    for r in reports {
        writeln!(
            buf,
            "{:<20} {:<14} {:<10} {:<22} {:>14.6e} {:>14} {:>10} {:>9.1e} {:>5}",
            r.scenario,
            r.score,
            r.functional,
            r.check,
            r.analytic,
            r.oracle.map(|o| format!("{o:.6e}")).unwrap_or_else(|| "-".into()),
            r.rel_error.map(|e| format!("{e:.2e}")).unwrap_or_else(|| "-".into()),
            r.tolerance,
            if r.pass { "ok" } else { "FAIL" }
        )?;
    }
    write_atomic(path, &buf)
}

/// Plain CSV series (one series per file) for external plotting.
pub fn write_series_csv(path: &Path, header: &str, rows: &[Vec<f64>]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{header}")?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(buf, "{}", line.join(","))?;
    }
    write_atomic(path, &buf)
}

/// Write via a temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy().to_string()).unwrap_or_default()
    ));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_switches_to_absolute_for_small_values() {
        let tol = Tolerances::default();
        // |oracle| below the small threshold: absolute gate.
        let (t, ok) = tol.mpe_verdict(5e-7, 0.0, false);
        assert!(ok && t == tol.mpe_abs);
        let (_, ok) = tol.mpe_verdict(5e-3, 5.0e-3 * (1.0 + 5e-4), false);
        assert!(ok);
        let (_, ok) = tol.mpe_verdict(5e-3, 5.0e-3 * 1.1, false);
        assert!(!ok);
    }

    #[test]
    fn csv_roundtrip_shape() {
        let dir = std::env::temp_dir().join("mpe_report_test");
        let r = MpeReport::new(
            "s", "sc", "mean", "mpe_vs_fd", 1.0, (0.6, 0.1, 0.3), Some(1.0005), 1e-3, true,
        );
        let p = dir.join("summary.csv");
        write_summary_csv(&p, &[r]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().count() == 2);
        assert!(text.contains("mpe_vs_fd"));
    }
}
