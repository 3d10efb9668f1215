//! JSON documents written by the commands and their plain-text tables.

use std::fmt::Write as _;

use cmp_irls::data::EncodingReport;
use cmp_irls::gam::ScoreTest;
use cmp_irls::regression::{CoefficientRow, Dispersion};
use cmp_irls::simulation::{OutlierRecord, RegressionScenario};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowCounts {
    pub file_rows: usize,
    pub dropped_missing: usize,
    pub dropped_filtered: usize,
    pub used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummaryDoc {
    pub command: String,
    pub input: String,
    pub formula: String,
    pub month: Option<String>,
    pub rows: RowCounts,
    pub beta: Vec<CoefficientRow>,
    pub gamma: Vec<CoefficientRow>,
    pub aic: f64,
    pub deviance: f64,
    pub initial_deviance: f64,
    pub deviance_trace: Vec<f64>,
    /// Mean fitted `ln ν`.
    pub log_nu: f64,
    pub dispersion: Dispersion,
    pub dispersion_note: String,
    pub converged: bool,
    pub iterations: usize,
    pub encoding: EncodingReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothSummary {
    pub variable: String,
    pub df_target: f64,
    pub edf: f64,
    /// File name of the partial-plot CSV, relative to the output directory.
    pub partial_csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GamSummaryDoc {
    pub command: String,
    pub input: String,
    pub formula: String,
    pub month: Option<String>,
    pub rows: RowCounts,
    pub poisson: bool,
    pub parametric: Vec<CoefficientRow>,
    pub gamma: Vec<CoefficientRow>,
    pub smooths: Vec<SmoothSummary>,
    pub npar_chisq: Vec<ScoreTest>,
    pub aic: f64,
    pub deviance: f64,
    pub initial_deviance: f64,
    pub deviance_trace: Vec<f64>,
    pub penalized_steps: Vec<(f64, f64)>,
    pub log_nu: f64,
    pub dispersion: Dispersion,
    pub dispersion_note: String,
    pub converged: bool,
    pub iterations: usize,
    pub backfit_failures: usize,
    pub encoding: EncodingReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessDoc {
    pub base: RegressionScenario,
    pub records: Vec<OutlierRecord>,
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.filter(|x| x.is_finite()).map_or("-".to_string(), |x| format!("{x:.prec$}"))
}

fn p_text(p: Option<f64>) -> String {
    match p.filter(|x| x.is_finite()) {
        None => "-".to_string(),
        Some(p) if p < 1e-4 => format!("{p:.1e}"),
        Some(p) => format!("{p:.4}"),
    }
}

pub fn coefficient_table(title: &str, rows: &[CoefficientRow]) -> String {
    let mut out = String::new();
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(12) + 2;
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{:<width$}{:>12}{:>12}{:>10}{:>10}", "", "estimate", "std.err", "z", "p");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}{:>12.4}{:>12}{:>10}{:>10}",
            r.name,
            r.estimate,
            opt(r.std_error, 4),
            opt(r.z, 2),
            p_text(r.p_value)
        );
    }
    out
}

pub fn npar_table(tests: &[ScoreTest]) -> String {
    let mut out = String::new();
    let width = tests.iter().map(|t| t.variable.len() + 3).max().unwrap_or(0).max(12) + 2;
    let _ = writeln!(out, "Nonparametric effects");
    let _ = writeln!(out, "{:<width$}{:>8}{:>14}{:>12}", "", "Npar Df", "Npar Chisq", "P(Chi)");
    for t in tests {
        let _ = writeln!(
            out,
            "{:<width$}{:>8.2}{:>14}{:>12}",
            format!("s({})", t.variable),
            t.df,
            opt(Some(t.chisq), 3),
            p_text(Some(t.p_value))
        );
    }
    out
}

pub fn fit_table(doc: &FitSummaryDoc) -> String {
    let mut out = coefficient_table("ln lambda", &doc.beta);
    out.push('\n');
    out.push_str(&coefficient_table("ln nu", &doc.gamma));
    let _ = writeln!(
        out,
        "\nAIC {:.2}  deviance {:.2}  iterations {}{}",
        doc.aic,
        doc.deviance,
        doc.iterations,
        if doc.converged { "" } else { "  (NOT CONVERGED)" }
    );
    let _ = writeln!(out, "{}", doc.dispersion_note);
    out
}

pub fn gam_table(doc: &GamSummaryDoc) -> String {
    let mut out = coefficient_table("ln lambda, parametric part", &doc.parametric);
    out.push('\n');
    out.push_str(&coefficient_table("ln nu", &doc.gamma));
    if !doc.npar_chisq.is_empty() {
        out.push('\n');
        out.push_str(&npar_table(&doc.npar_chisq));
    }
    let _ = writeln!(
        out,
        "\nAIC {:.2}  deviance {:.2}  iterations {}{}",
        doc.aic,
        doc.deviance,
        doc.iterations,
        if doc.converged { "" } else { "  (NOT CONVERGED)" }
    );
    let _ = writeln!(out, "{}", doc.dispersion_note);
    out
}

pub fn robustness_table(doc: &RobustnessDoc) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>10}{:>14}{:>11}{:>11}{:>10}", "outlier", "baseline max", "completed", "converged", "ln nu");
    for r in &doc.records {
        let _ = writeln!(
            out,
            "{:>10}{:>14}{:>11}{:>11}{:>10}",
            r.magnitude,
            r.baseline_max,
            if r.completed { "yes" } else { "no" },
            if r.converged { "yes" } else { "no" },
            opt(r.log_nu, 3)
        );
    }
    out
}
