//! The `--check` assertions: scenario-level bounds evaluated against a
//! finished run. Each check prints one line; the process exits nonzero
//! iff any line fails.

use debinet_core::bench::{ConvergenceReport, ExperimentOutput, MethodSummary, Scenario};

pub struct CheckLine {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckLine {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self {
            name,
            passed,
            detail,
        }
    }

    fn missing(name: &'static str, method: &str) -> Self {
        Self {
            name,
            passed: false,
            detail: format!("method {method} missing from run"),
        }
    }
}

fn summary_for<'a>(out: &'a ExperimentOutput, method: &str) -> Option<&'a MethodSummary> {
    out.summary
        .iter()
        .find(|s| s.method == method && s.replicates_ok > 0)
}

/// Bounds for the selection-pipeline and PLM-comparison scenarios.
pub fn experiment_checks(out: &ExperimentOutput) -> Vec<CheckLine> {
    match out.scenario {
        Scenario::Table2HighLow => high_low_checks(out),
        Scenario::Table2HighHigh => high_high_checks(out),
        Scenario::Table2LowHigh => Vec::new(),
        Scenario::Table1 => table1_checks(out),
        Scenario::Table4 => table4_checks(out),
        Scenario::NtkFigure => Vec::new(),
    }
}

fn high_low_checks(out: &ExperimentOutput) -> Vec<CheckLine> {
    let mut lines = Vec::new();
    match summary_for(out, "debinet") {
        Some(dn) => {
            lines.push(CheckLine::new(
                "debinet_estimation_mse <= 0.01",
                dn.mean_estimation_mse <= 0.01,
                format!("measured {:.6}", dn.mean_estimation_mse),
            ));
            match dn.coverage {
                Some(cov) => lines.push(CheckLine::new(
                    "debinet_coverage in [0.88, 1.0]",
                    (0.88..=1.0).contains(&cov),
                    format!("measured {cov:.4}"),
                )),
                None => lines.push(CheckLine::new(
                    "debinet_coverage in [0.88, 1.0]",
                    false,
                    "coverage not reported".into(),
                )),
            }
            match summary_for(out, "ols_post") {
                Some(ols) => {
                    let ratio = dn.mean_test_mse / ols.mean_test_mse;
                    lines.push(CheckLine::new(
                        "debinet_test_mse <= 1.2 x ols_post",
                        ratio.is_finite() && ratio <= 1.2,
                        format!("ratio {ratio:.4}"),
                    ));
                }
                None => lines.push(CheckLine::missing(
                    "debinet_test_mse <= 1.2 x ols_post",
                    "ols_post",
                )),
            }
        }
        None => lines.push(CheckLine::missing(
            "debinet_estimation_mse <= 0.01",
            "debinet",
        )),
    }
    lines
}

fn high_high_checks(out: &ExperimentOutput) -> Vec<CheckLine> {
    // Per-replicate wins: debinet's estimation MSE no worse than OLS
    // post-Lasso's, counted over replicates where both methods ran.
    let mut wins = 0usize;
    let mut total = 0usize;
    for rep in 0..out.replicates {
        let find = |method: &str| {
            out.rows
                .iter()
                .find(|r| r.replicate == rep && r.method == method && r.error.is_none())
        };
        if let (Some(dn), Some(ols)) = (find("debinet"), find("ols_post")) {
            total += 1;
            if dn.estimation_mse <= ols.estimation_mse {
                wins += 1;
            }
        }
    }
    if total == 0 {
        return vec![CheckLine::new(
            "debinet_beats_ols_post in >= 70% of replicates",
            false,
            "no replicate ran both debinet and ols_post".into(),
        )];
    }
    let fraction = wins as f64 / total as f64;
    vec![CheckLine::new(
        "debinet_beats_ols_post in >= 70% of replicates",
        fraction >= 0.70,
        format!("won {wins}/{total} ({fraction:.2})"),
    )]
}

fn table1_checks(out: &ExperimentOutput) -> Vec<CheckLine> {
    let mut lines = Vec::new();
    match summary_for(out, "plm_nn") {
        Some(nn) => {
            lines.push(CheckLine::new(
                "plm_nn_estimation_mse <= 1e-3",
                nn.mean_estimation_mse <= 1e-3,
                format!("measured {:.3e}", nn.mean_estimation_mse),
            ));
            match summary_for(out, "plm_nw") {
                Some(nw) => {
                    let ratio = nn.mean_test_mse / nw.mean_test_mse;
                    lines.push(CheckLine::new(
                        "plm_nn_test_mse <= 1.3 x plm_nw",
                        ratio.is_finite() && ratio <= 1.3,
                        format!("ratio {ratio:.4}"),
                    ));
                }
                None => lines.push(CheckLine::missing(
                    "plm_nn_test_mse <= 1.3 x plm_nw",
                    "plm_nw",
                )),
            }
        }
        None => lines.push(CheckLine::missing(
            "plm_nn_estimation_mse <= 1e-3",
            "plm_nn",
        )),
    }
    lines
}

fn table4_checks(out: &ExperimentOutput) -> Vec<CheckLine> {
    out.summary
        .iter()
        .map(|s| {
            if s.replicates_ok == 0 {
                return CheckLine::new(
                    "estimation_mse <= 1e-2",
                    false,
                    format!("{}: every replicate failed", s.method),
                );
            }
            CheckLine::new(
                "estimation_mse <= 1e-2",
                s.mean_estimation_mse <= 1e-2,
                format!("{}: measured {:.3e}", s.method, s.mean_estimation_mse),
            )
        })
        .collect()
}

/// Bounds for the kernel-regime convergence trace.
pub fn convergence_checks(report: &ConvergenceReport) -> Vec<CheckLine> {
    vec![
        CheckLine::new(
            "fitted_slope < 0",
            report.rate.fitted_slope < 0.0,
            format!("measured {:.4e}", report.rate.fitted_slope),
        ),
        CheckLine::new(
            "slope_ratio in [0.5, 2.0]",
            (0.5..=2.0).contains(&report.rate.slope_ratio),
            format!("measured {:.4}", report.rate.slope_ratio),
        ),
    ]
}

/// Print one line per check; returns whether everything passed.
pub fn print_checks(lines: &[CheckLine]) -> bool {
    if lines.is_empty() {
        println!("check: no scenario checks defined for this run");
        return true;
    }
    let mut all_ok = true;
    for line in lines {
        let verdict = if line.passed { "pass" } else { "FAIL" };
        println!("check {} ... {verdict} ({})", line.name, line.detail);
        all_ok &= line.passed;
    }
    all_ok
}
