//! Scenario generators and replicated fitting studies.
//!
//! Every generator is a pure function of its scenario: replication `r` of a
//! study draws from a ChaCha8 stream `r` keyed by the scenario seed, so stream
//! 0 is exactly what [`gen_regression_data`] and [`gen_gam_data`] return.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::{CmpParams, Sampler};
use crate::error::{CmpError, Result};
use crate::gam::{fit_gam, BackfitOptions, GamData, GamFit, GamOptions, GamSpec, SmoothSpec};
use crate::regression::{fit, summarize, FitOptions, FitResult, ModelData};
use crate::spline::DEFAULT_DF;
use crate::wls::DesignMatrix;

pub const MIN_SCENARIO_N: usize = 50;

/// Upper edges of the significance bins; the last bin is "n.s.".
pub const SIGNIFICANCE_LEVELS: [f64; 4] = [0.001, 0.01, 0.05, 0.1];
pub const SIGNIFICANCE_LABELS: [&str; 5] = ["<=0.001", "<=0.01", "<=0.05", "<=0.1", "n.s."];

const COVARIATES: [&str; 4] = ["x1", "x2", "x3", "x4"];
const RESAMPLE_KEY: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn f1(x: f64) -> f64 {
    (PI * x).sin()
}

pub fn f2(x: f64) -> f64 {
    x.exp()
}

pub fn f3(x: f64) -> f64 {
    0.02 * x * x * (1.0 - x) + (0.5 * x).powi(2) * (1.0 - x).powi(3)
}

pub fn f4(x: f64) -> f64 {
    x
}

/// `ln λ = β0 + β1 x1 + … + β4 x4` with
/// x1 ~ U(0,1), x2 ~ N(0, 0.5), x3 ~ N(0, 0.1), x4 = 0.2 x3 + N(0, 0.5)
/// (second arguments are standard deviations).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionScenario {
    pub n: usize,
    pub beta: Vec<f64>,
    pub nu: f64,
    pub seed: u64,
}

impl RegressionScenario {
    /// The preset coefficient vectors for ν ∈ {0.5, 1, 2.5, 4}.
    pub fn preset(nu: f64, seed: u64) -> Option<Self> {
        let beta = match nu {
            v if v == 0.5 => vec![0.05, 0.5, -0.5, 0.25, -0.25],
            v if v == 1.0 => vec![0.5, 1.0, -1.0, 0.5, -0.5],
            v if v == 2.5 => vec![1.0, 3.0, -3.0, 2.0, -2.0],
            v if v == 4.0 => vec![2.0, 3.0, -3.0, 4.0, -4.0],
            _ => return None,
        };
        Some(Self { n: 500, beta, nu, seed })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < MIN_SCENARIO_N {
            return Err(CmpError::InvalidParams(format!("n = {} is below {MIN_SCENARIO_N}", self.n)));
        }
        if self.beta.len() != 5 {
            return Err(CmpError::InvalidParams(format!(
                "beta needs 5 entries (intercept and x1..x4), got {}",
                self.beta.len()
            )));
        }
        if !self.beta.iter().all(|b| b.is_finite()) {
            return Err(CmpError::InvalidParams("beta must be finite".into()));
        }
        check_nu(self.nu)
    }
}

/// `ln λ = a f1(x1) + b f2(x2) + c f3(x3)`, all x ~ U(0,1); x4 has no effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GamScenario {
    pub n: usize,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub nu: f64,
    pub seed: u64,
}

impl GamScenario {
    /// Presets for ν = 0.5 and ν = 2.5.
    pub fn preset(nu: f64, seed: u64) -> Option<Self> {
        let (a, b, c) = match nu {
            v if v == 0.5 => (0.2, 0.5, -0.5),
            v if v == 2.5 => (1.0, 1.0, 1.0),
            _ => return None,
        };
        Some(Self { n: 500, a, b, c, nu, seed })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < MIN_SCENARIO_N {
            return Err(CmpError::InvalidParams(format!("n = {} is below {MIN_SCENARIO_N}", self.n)));
        }
        if ![self.a, self.b, self.c].iter().all(|v| v.is_finite()) {
            return Err(CmpError::InvalidParams("a, b, c must be finite".into()));
        }
        check_nu(self.nu)
    }
}

fn check_nu(nu: f64) -> Result<()> {
    if nu.is_finite() && nu > 0.0 {
        Ok(())
    } else {
        Err(CmpError::InvalidParams(format!("nu must be positive and finite, got {nu}")))
    }
}

/// Simulated covariates, counts and the true rates behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDataset {
    pub y: Vec<u64>,
    pub covariates: Vec<(String, Vec<f64>)>,
    pub lambda: Vec<f64>,
    pub nu: f64,
}

impl SimDataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.covariates.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_slice())
    }

    /// `y ~ x1 + … + x4` with an intercept-only `ν` model.
    pub fn model_data(&self) -> Result<ModelData> {
        let n = self.n();
        ModelData::new(
            self.y.clone(),
            DesignMatrix::from_columns(n, true, &self.covariates)?,
            DesignMatrix::intercept_only(n),
        )
    }

    /// Inputs for `y ~ s(x1) + … + s(x4)`.
    pub fn gam_data(&self) -> Result<GamData> {
        let n = self.n();
        GamData::new(
            self.y.clone(),
            DesignMatrix::intercept_only(n),
            self.covariates.clone(),
            DesignMatrix::intercept_only(n),
        )
    }

    fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            y: rows.iter().map(|&i| self.y[i]).collect(),
            covariates: self
                .covariates
                .iter()
                .map(|(n, c)| (n.clone(), rows.iter().map(|&i| c[i]).collect()))
                .collect(),
            lambda: rows.iter().map(|&i| self.lambda[i]).collect(),
            nu: self.nu,
        }
    }
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn draw_counts(lambda: &[f64], nu: f64, rng: &mut ChaCha8Rng) -> Result<Vec<u64>> {
    lambda
        .iter()
        .map(|&l| Ok(Sampler::new(&CmpParams::new(l, nu)?)?.draw(rng)))
        .collect()
}

fn regression_dataset(s: &RegressionScenario, rng: &mut ChaCha8Rng) -> Result<SimDataset> {
    s.validate()?;
    let n = s.n;
    let u = Uniform::new(0.0, 1.0).expect("valid range");
    let n2 = Normal::new(0.0, 0.5).expect("valid sd");
    let n3 = Normal::new(0.0, 0.1).expect("valid sd");
    let x1: Vec<f64> = (0..n).map(|_| u.sample(rng)).collect();
    let x2: Vec<f64> = (0..n).map(|_| n2.sample(rng)).collect();
    let x3: Vec<f64> = (0..n).map(|_| n3.sample(rng)).collect();
    let x4: Vec<f64> = x3.iter().map(|v| 0.2 * v + n2.sample(rng)).collect();
    let b = &s.beta;
    let lambda: Vec<f64> = (0..n)
        .map(|i| (b[0] + b[1] * x1[i] + b[2] * x2[i] + b[3] * x3[i] + b[4] * x4[i]).exp())
        .collect();
    let y = draw_counts(&lambda, s.nu, rng)?;
    let covariates = COVARIATES.iter().map(|c| c.to_string()).zip([x1, x2, x3, x4]).collect();
    Ok(SimDataset { y, covariates, lambda, nu: s.nu })
}

fn gam_dataset(s: &GamScenario, rng: &mut ChaCha8Rng) -> Result<SimDataset> {
    s.validate()?;
    let n = s.n;
    let u = Uniform::new(0.0, 1.0).expect("valid range");
    let cols: Vec<Vec<f64>> = (0..4).map(|_| (0..n).map(|_| u.sample(rng)).collect()).collect();
    let lambda: Vec<f64> = (0..n)
        .map(|i| (s.a * f1(cols[0][i]) + s.b * f2(cols[1][i]) + s.c * f3(cols[2][i])).exp())
        .collect();
    let y = draw_counts(&lambda, s.nu, rng)?;
    let covariates = COVARIATES.iter().map(|c| c.to_string()).zip(cols).collect();
    Ok(SimDataset { y, covariates, lambda, nu: s.nu })
}

pub fn gen_regression_dataset(s: &RegressionScenario) -> Result<SimDataset> {
    regression_dataset(s, &mut stream(s.seed, 0))
}

pub fn gen_regression_data(s: &RegressionScenario) -> Result<ModelData> {
    gen_regression_dataset(s)?.model_data()
}

pub fn gen_gam_data(s: &GamScenario) -> Result<SimDataset> {
    gam_dataset(s, &mut stream(s.seed, 0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    Regression(RegressionScenario),
    Gam(GamScenario),
}

impl Scenario {
    pub fn seed(&self) -> u64 {
        match self {
            Self::Regression(s) => s.seed,
            Self::Gam(s) => s.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Regression(s) => s.validate(),
            Self::Gam(s) => s.validate(),
        }
    }

    /// Draw number `index` of this scenario; index 0 is the plain generator output.
    pub fn generate(&self, index: u64) -> Result<SimDataset> {
        let mut rng = stream(self.seed(), index);
        match self {
            Self::Regression(s) => regression_dataset(s, &mut rng),
            Self::Gam(s) => gam_dataset(s, &mut rng),
        }
    }

    /// True values by coefficient name, where the model has them.
    fn truth(&self, model: StudyModel) -> Vec<(String, f64)> {
        match (self, model) {
            (Self::Regression(s), StudyModel::CmpReg) => std::iter::once("(Intercept)".to_string())
                .chain(COVARIATES.iter().map(|c| c.to_string()))
                .zip(s.beta.iter().copied())
                .chain(std::iter::once(("log_nu".to_string(), s.nu.ln())))
                .collect(),
            (_, StudyModel::PoissonGamMode) => vec![],
            (Self::Regression(s), _) => vec![("log_nu".to_string(), s.nu.ln())],
            (Self::Gam(s), _) => vec![("log_nu".to_string(), s.nu.ln())],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyModel {
    /// `y ~ x1 + x2 + x3 + x4`.
    CmpReg,
    /// `y ~ s(x1) + s(x2) + s(x3) + s(x4)`.
    CmpGam,
    /// The additive model with `γ` pinned at 0, i.e. a Poisson GAM.
    PoissonGamMode,
}

impl StudyModel {
    pub fn label(self) -> &'static str {
        match self {
            Self::CmpReg => "cmp-regression",
            Self::CmpGam => "cmp-gam",
            Self::PoissonGamMode => "poisson-gam",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    /// Redraw covariates and counts for every replication.
    #[default]
    Regenerate,
    /// Draw rows with replacement from the scenario's stream-0 dataset.
    Resample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    pub fit: FitOptions,
    pub backfit: BackfitOptions,
    /// Target df of every smooth term.
    pub df: f64,
    pub resampling: Resampling,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            fit: FitOptions::default(),
            backfit: BackfitOptions::default(),
            df: DEFAULT_DF,
            resampling: Resampling::Regenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
}

fn named(name: impl Into<String>, value: f64) -> NamedValue {
    NamedValue { name: name.into(), value }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub converged: bool,
    pub iterations: usize,
    /// Set when the fit failed; the other fields are then empty.
    pub error: Option<String>,
    pub coefficients: Vec<NamedValue>,
    pub log_nu: Option<f64>,
    pub aic: Option<f64>,
    /// Per-term p-values: Wald tests for the regression, score tests for smooths.
    pub p_values: Vec<NamedValue>,
    /// Largest relative rise of the monitored objective over an accepted
    /// step; 0 when it never rose.
    pub max_relative_increase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStat {
    pub name: String,
    pub truth: Option<f64>,
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two values.
    pub sd: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub term: String,
    /// Counts per bin, in the order of [`SIGNIFICANCE_LABELS`].
    pub counts: [usize; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub coefficients: Vec<SummaryStat>,
    pub log_nu: Option<SummaryStat>,
    pub aic: Option<SummaryStat>,
    pub significance: Vec<SignificanceRow>,
    pub failures: usize,
    pub non_converged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub scenario: Scenario,
    pub model: StudyModel,
    pub replications: usize,
    pub options: StudyOptions,
    pub significance_bins: Vec<String>,
    pub records: Vec<ReplicationRecord>,
    pub summary: StudySummary,
}

impl StudyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }
}

/// Index of the significance bin for a p-value (NaN counts as n.s.).
pub fn significance_bin(p: f64) -> usize {
    SIGNIFICANCE_LEVELS.iter().position(|&l| p <= l).unwrap_or(4)
}

fn max_relative_increase(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    pairs
        .map(|(before, after)| (after - before) / before.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

fn regression_record(index: usize, fit: &FitResult) -> ReplicationRecord {
    let summary = summarize(fit);
    let lambda_rows = summary.coefficients.iter().filter(|r| r.component == "lambda");
    ReplicationRecord {
        replication: index,
        converged: fit.converged,
        iterations: fit.iterations,
        error: None,
        coefficients: lambda_rows.clone().map(|r| named(&r.name, r.estimate)).collect(),
        log_nu: Some(summary.mean_log_nu),
        aic: Some(fit.aic),
        p_values: lambda_rows
            .filter(|r| r.name != "(Intercept)")
            .map(|r| named(&r.name, r.p_value.unwrap_or(f64::NAN)))
            .collect(),
        max_relative_increase: max_relative_increase(fit.deviance_trace.windows(2).map(|w| (w[0], w[1]))),
    }
}

fn gam_record(index: usize, fit: &GamFit) -> ReplicationRecord {
    let mut coefficients = vec![named("(Intercept)", fit.intercept)];
    coefficients.extend(fit.parametric_names.iter().zip(&fit.parametric_beta).map(|(n, b)| named(n, *b)));
    ReplicationRecord {
        replication: index,
        converged: fit.converged,
        iterations: fit.iterations,
        error: None,
        coefficients,
        log_nu: Some(fit.mean_log_nu()),
        aic: Some(fit.aic),
        p_values: fit
            .npar_chisq
            .iter()
            .flatten()
            .map(|t| named(format!("s({})", t.variable), t.p_value))
            .collect(),
        max_relative_increase: max_relative_increase(fit.penalized_steps.iter().copied()),
    }
}

fn gam_spec(df: f64) -> GamSpec {
    GamSpec {
        parametric: vec![],
        smooths: COVARIATES.iter().map(|c| SmoothSpec::new(*c, df)).collect(),
        nu_terms: vec![],
    }
}

/// Fits one model to one dataset and records the outcome.
pub fn fit_replication(index: usize, data: &SimDataset, model: StudyModel, opts: &StudyOptions) -> ReplicationRecord {
    let outcome = match model {
        StudyModel::CmpReg => data
            .model_data()
            .and_then(|d| fit(&d, &opts.fit))
            .map(|f| regression_record(index, &f)),
        StudyModel::CmpGam | StudyModel::PoissonGamMode => {
            let mut gam = GamOptions {
                fit: opts.fit.clone(),
                backfit: opts.backfit,
                score_tests: true,
            };
            if model == StudyModel::PoissonGamMode {
                gam.fit.fixed_gamma = Some(vec![0.0]);
            }
            data.gam_data()
                .and_then(|d| fit_gam(&d, &gam_spec(opts.df), &gam))
                .map(|f| gam_record(index, &f))
        }
    };
    outcome.unwrap_or_else(|e| ReplicationRecord {
        replication: index,
        converged: false,
        iterations: 0,
        error: Some(e.to_string()),
        coefficients: vec![],
        log_nu: None,
        aic: None,
        p_values: vec![],
        max_relative_increase: 0.0,
    })
}

fn stat(name: &str, truth: Option<f64>, values: &[f64]) -> Option<SummaryStat> {
    if values.is_empty() {
        return None;
    }
    let count = values.len();
    let mean = values.iter().sum::<f64>() / count as f64;
    let sd = (count > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt());
    Some(SummaryStat {
        name: name.to_string(),
        truth,
        mean,
        sd,
        count,
    })
}

fn summarize_records(records: &[ReplicationRecord], truth: &[(String, f64)]) -> StudySummary {
    let ok: Vec<&ReplicationRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let lookup = |name: &str| truth.iter().find(|(n, _)| n == name).map(|(_, v)| *v);
    let mut names: Vec<String> = Vec::new();
    for r in &ok {
        for c in &r.coefficients {
            if !names.contains(&c.name) {
                names.push(c.name.clone());
            }
        }
    }
    let coefficients = names
        .iter()
        .filter_map(|name| {
            let values: Vec<f64> = ok
                .iter()
                .filter_map(|r| r.coefficients.iter().find(|c| &c.name == name).map(|c| c.value))
                .collect();
            stat(name, lookup(name), &values)
        })
        .collect();
    let log_nu: Vec<f64> = ok.iter().filter_map(|r| r.log_nu).collect();
    let aic: Vec<f64> = ok.iter().filter_map(|r| r.aic).collect();
    let mut significance: Vec<SignificanceRow> = Vec::new();
    for r in &ok {
        for p in &r.p_values {
            let row = match significance.iter_mut().position(|s| s.term == p.name) {
                Some(i) => &mut significance[i],
                None => {
                    significance.push(SignificanceRow {
                        term: p.name.clone(),
                        counts: [0; 5],
                    });
                    significance.last_mut().expect("just pushed")
                }
            };
            row.counts[significance_bin(p.value)] += 1;
        }
    }
    StudySummary {
        coefficients,
        log_nu: stat("log_nu", lookup("log_nu"), &log_nu),
        aic: stat("aic", None, &aic),
        significance,
        failures: records.len() - ok.len(),
        non_converged: ok.iter().filter(|r| !r.converged).count(),
    }
}

/// Replicated study: replications run in parallel, and the report is
/// assembled in replication order so it is identical across runs.
pub fn run_bootstrap_study(
    scenario: &Scenario,
    replications: usize,
    model: StudyModel,
    opts: &StudyOptions,
) -> Result<StudyReport> {
    if replications == 0 {
        return Err(CmpError::InvalidParams("replications must be at least 1".into()));
    }
    scenario.validate()?;
    opts.fit.validate()?;
    if !(opts.df > 0.0) {
        return Err(CmpError::InvalidParams(format!("df must be positive, got {}", opts.df)));
    }
    let base = match opts.resampling {
        Resampling::Regenerate => None,
        Resampling::Resample => Some(scenario.generate(0)?),
    };
    let records: Vec<ReplicationRecord> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let data = match &base {
                None => scenario.generate(r as u64),
                Some(d) => {
                    let mut rng = stream(scenario.seed() ^ RESAMPLE_KEY, r as u64);
                    let idx: Vec<usize> = (0..d.n()).collect();
                    let rows: Vec<usize> = (0..d.n()).map(|_| *idx.choose(&mut rng).expect("non-empty")).collect();
                    Ok(d.select_rows(&rows))
                }
            };
            match data {
                Ok(d) => fit_replication(r, &d, model, opts),
                Err(e) => ReplicationRecord {
                    replication: r,
                    converged: false,
                    iterations: 0,
                    error: Some(e.to_string()),
                    coefficients: vec![],
                    log_nu: None,
                    aic: None,
                    p_values: vec![],
                    max_relative_increase: 0.0,
                },
            }
        })
        .collect();
    for r in records.iter().filter(|r| r.error.is_some()) {
        log::warn!("replication {} failed: {}", r.replication, r.error.as_deref().unwrap_or(""));
    }
    let summary = summarize_records(&records, &scenario.truth(model));
    Ok(StudyReport {
        scenario: scenario.clone(),
        model,
        replications,
        options: opts.clone(),
        significance_bins: SIGNIFICANCE_LABELS.iter().map(|s| s.to_string()).collect(),
        records,
        summary,
    })
}

fn fmt_sd(sd: Option<f64>) -> String {
    sd.map_or("-".to_string(), |s| format!("{s:.2}"))
}

/// Plain-text layout: estimates with (sd) beside the truth, then
/// significance counts per term, then log ν and AIC.
pub fn format_report(report: &StudyReport) -> String {
    let s = &report.summary;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} on {} scenario, {} replications ({} failed, {} not converged)",
        report.model.label(),
        match report.scenario {
            Scenario::Regression(_) => "regression",
            Scenario::Gam(_) => "additive",
        },
        report.replications,
        s.failures,
        s.non_converged
    );
    let _ = writeln!(out, "{:<14}{:>10}{:>12}{:>10}", "term", "truth", "estimate", "(sd)");
    for c in s.coefficients.iter().chain(&s.log_nu) {
        let truth = c.truth.map_or("-".to_string(), |t| format!("{t:.2}"));
        let _ = writeln!(out, "{:<14}{:>10}{:>12.2}{:>10}", c.name, truth, c.mean, format!("({})", fmt_sd(c.sd)));
    }
    if !s.significance.is_empty() {
        let _ = writeln!(out, "\nsignificance counts ({})", SIGNIFICANCE_LABELS.join(", "));
        for row in &s.significance {
            let counts: Vec<String> = row.counts.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(out, "{:<14}({})", row.term, counts.join(","));
        }
    }
    if let Some(a) = &s.aic {
        let _ = writeln!(out, "\nAIC {:.2} ({})", a.mean, fmt_sd(a.sd));
    }
    out
}

/// Outcome of fitting a dataset carrying one injected large count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierRecord {
    pub magnitude: u64,
    /// Largest count before injection.
    pub baseline_max: u64,
    pub completed: bool,
    pub converged: bool,
    pub error: Option<String>,
    pub log_nu: Option<f64>,
    pub passed: bool,
}

/// Base data for the outlier check: the ν = 1 regression preset at n = 500.
pub fn outlier_base_scenario() -> RegressionScenario {
    RegressionScenario::preset(1.0, 2024).expect("preset exists")
}

pub fn outlier_robustness_check(magnitude: u64) -> Result<OutlierRecord> {
    outlier_robustness_check_with(magnitude, &outlier_base_scenario(), &FitOptions::default())
}

/// Replaces the first count by `magnitude` and fits `y ~ x1 + … + x4`.
pub fn outlier_robustness_check_with(magnitude: u64, base: &RegressionScenario, opts: &FitOptions) -> Result<OutlierRecord> {
    if magnitude == 0 {
        return Err(CmpError::InvalidParams("outlier magnitude must be at least 1".into()));
    }
    let mut data = gen_regression_dataset(base)?;
    let baseline_max = data.y.iter().copied().max().unwrap_or(0);
    data.y[0] = magnitude;
    let record = match data.model_data().and_then(|d| fit(&d, opts)) {
        Ok(f) => OutlierRecord {
            magnitude,
            baseline_max,
            completed: true,
            converged: f.converged,
            error: None,
            log_nu: Some(summarize(&f).mean_log_nu),
            passed: f.converged,
        },
        Err(e) => OutlierRecord {
            magnitude,
            baseline_max,
            completed: false,
            converged: false,
            error: Some(e.to_string()),
            log_nu: None,
            passed: false,
        },
    };
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_reg(nu: f64, seed: u64) -> RegressionScenario {
        RegressionScenario {
            n: 200,
            ..RegressionScenario::preset(nu, seed).unwrap()
        }
    }

    #[test]
    fn presets() {
        assert_eq!(RegressionScenario::preset(4.0, 1).unwrap().beta, vec![2.0, 3.0, -3.0, 4.0, -4.0]);
        assert!(RegressionScenario::preset(3.0, 1).is_none());
        let g = GamScenario::preset(0.5, 1).unwrap();
        assert_eq!((g.a, g.b, g.c, g.n), (0.2, 0.5, -0.5, 500));
        assert!(GamScenario::preset(1.0, 1).is_none());
    }

    #[test]
    fn generators_are_deterministic() {
        let s = small_reg(1.0, 5);
        assert_eq!(gen_regression_dataset(&s).unwrap(), gen_regression_dataset(&s).unwrap());
        let other = RegressionScenario { seed: 6, ..s.clone() };
        assert_ne!(gen_regression_dataset(&s).unwrap().y, gen_regression_dataset(&other).unwrap().y);
        let g = GamScenario::preset(2.5, 3).unwrap();
        assert_eq!(gen_gam_data(&g).unwrap(), gen_gam_data(&g).unwrap());
        assert_eq!(Scenario::Gam(g.clone()).generate(0).unwrap(), gen_gam_data(&g).unwrap());
        assert_ne!(Scenario::Gam(g.clone()).generate(1).unwrap().y, gen_gam_data(&g).unwrap().y);
    }

    #[test]
    fn invalid_scenarios_rejected() {
        let mut s = small_reg(1.0, 1);
        s.n = 10;
        assert!(s.validate().is_err());
        let mut s = small_reg(1.0, 1);
        s.beta.pop();
        assert!(gen_regression_data(&s).is_err());
        let mut g = GamScenario::preset(0.5, 1).unwrap();
        g.nu = 0.0;
        assert!(gen_gam_data(&g).is_err());
    }

    #[test]
    fn covariate_moments_match_generator() {
        let s = RegressionScenario {
            n: 10_000,
            ..RegressionScenario::preset(0.5, 77).unwrap()
        };
        let d = gen_regression_dataset(&s).unwrap();
        let n = d.n() as f64;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
        let var = |v: &[f64]| {
            let m = mean(v);
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
        };
        // (name, true mean, true variance, true fourth central moment)
        let x4_var = 0.04 * 0.01 + 0.25;
        let cases = [
            ("x1", 0.5, 1.0 / 12.0, 1.0 / 80.0),
            ("x2", 0.0, 0.25, 3.0 * 0.25f64.powi(2)),
            ("x3", 0.0, 0.01, 3.0 * 0.01f64.powi(2)),
            ("x4", 0.0, x4_var, 3.0 * x4_var * x4_var),
        ];
        for (name, mu, v, m4) in cases {
            let col = d.column(name).unwrap();
            let se_mean = (v / n).sqrt();
            assert!((mean(col) - mu).abs() < 4.0 * se_mean, "{name} mean");
            let se_var = ((m4 - v * v) / n).sqrt();
            assert!((var(col) - v).abs() < 4.0 * se_var, "{name} var {} vs {v}", var(col));
        }
        // corr(x3, x4) = 0.2·sd3 / sd4
        let (x3, x4) = (d.column("x3").unwrap(), d.column("x4").unwrap());
        let (m3, m4) = (mean(x3), mean(x4));
        let cov = x3.iter().zip(x4).map(|(a, b)| (a - m3) * (b - m4)).sum::<f64>() / (n - 1.0);
        let corr = cov / (var(x3) * var(x4)).sqrt();
        let expected = 0.2 * 0.1 / x4_var.sqrt();
        assert!((corr - expected).abs() < 0.05, "corr {corr} vs {expected}");
    }

    #[test]
    fn equidispersed_counts_have_unit_index() {
        let s = RegressionScenario {
            n: 10_000,
            ..RegressionScenario::preset(1.0, 8).unwrap()
        };
        let d = gen_regression_dataset(&s).unwrap();
        // Pearson dispersion: Σ (y − λ)² / λ over n should be ≈ 1 with sd ≈ √(2/n) plus kurtosis.
        let n = d.n() as f64;
        let pearson: Vec<f64> = d.y.iter().zip(&d.lambda).map(|(&y, &l)| (y as f64 - l).powi(2) / l).collect();
        let m = pearson.iter().sum::<f64>() / n;
        let sd = (pearson.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        assert!((m - 1.0).abs() < 4.0 * sd, "index {m} ± {sd}");
    }

    #[test]
    fn additive_generator_shapes() {
        assert_eq!(f3(0.0), 0.0);
        assert_eq!(f3(1.0), 0.0);
        assert_eq!(f4(0.3), 0.3);
        let g = GamScenario {
            a: 0.0,
            b: 0.0,
            c: 0.0,
            ..GamScenario::preset(0.5, 2).unwrap()
        };
        assert!(gen_gam_data(&g).unwrap().lambda.iter().all(|&l| l == 1.0));
        let d = gen_gam_data(&GamScenario::preset(2.5, 2).unwrap()).unwrap();
        for (_, c) in &d.covariates {
            assert!(c.iter().all(|v| (0.0..1.0).contains(v)));
        }
    }

    #[test]
    fn additive_counts_match_monte_carlo_mean() {
        let g = GamScenario {
            n: 10_000,
            a: 1.0,
            b: 1.0,
            c: 1.0,
            nu: 1.0,
            seed: 31,
        };
        let d = gen_gam_data(&g).unwrap();
        let n = d.n() as f64;
        let ybar = d.y.iter().sum::<u64>() as f64 / n;
        // ν = 1: E[y] = E[λ] and Var[y] = E[λ] + Var[λ].
        let lbar = d.lambda.iter().sum::<f64>() / n;
        let vl = d.lambda.iter().map(|l| (l - lbar).powi(2)).sum::<f64>() / n;
        let se = ((lbar + vl) / n).sqrt();
        // E[exp(f)] by independent quadrature over the uniform covariates.
        let grid = 2000;
        let avg = |f: &dyn Fn(f64) -> f64| (0..grid).map(|i| f((i as f64 + 0.5) / grid as f64)).sum::<f64>() / grid as f64;
        let expected = avg(&|x| f1(x).exp()) * avg(&|x| f2(x).exp()) * avg(&|x| f3(x).exp());
        assert!((ybar - expected).abs() < 4.0 * se, "{ybar} vs {expected} ± {se}");
    }

    #[test]
    fn significance_bins_edges() {
        assert_eq!(significance_bin(0.0005), 0);
        assert_eq!(significance_bin(0.001), 0);
        assert_eq!(significance_bin(0.002), 1);
        assert_eq!(significance_bin(0.05), 2);
        assert_eq!(significance_bin(0.07), 3);
        assert_eq!(significance_bin(0.5), 4);
        assert_eq!(significance_bin(f64::NAN), 4);
    }

    #[test]
    fn single_replication_matches_direct_fit() {
        let s = small_reg(0.5, 12);
        let opts = StudyOptions::default();
        let report = run_bootstrap_study(&Scenario::Regression(s.clone()), 1, StudyModel::CmpReg, &opts).unwrap();
        let direct = fit(&gen_regression_data(&s).unwrap(), &opts.fit).unwrap();
        let rec = &report.records[0];
        assert_eq!(rec.coefficients.len(), 5);
        for (c, b) in rec.coefficients.iter().zip(direct.beta.iter()) {
            assert_eq!(c.value, *b);
        }
        assert_eq!(rec.aic, Some(direct.aic));
        let s0 = &report.summary;
        assert_eq!(s0.coefficients[1].mean, direct.beta[1]);
        assert_eq!(s0.coefficients[1].sd, None);
        assert_eq!(s0.coefficients[1].truth, Some(0.5));
        assert_eq!(s0.log_nu.as_ref().unwrap().truth, Some(0.5f64.ln()));
        assert_eq!(s0.significance.len(), 4);
        assert_eq!(s0.significance.iter().map(|r| r.counts.iter().sum::<usize>()).sum::<usize>(), 4);
    }

    #[test]
    fn study_is_deterministic_and_ordered() {
        let s = Scenario::Regression(small_reg(2.5, 40));
        let opts = StudyOptions::default();
        let a = run_bootstrap_study(&s, 4, StudyModel::CmpReg, &opts).unwrap();
        let b = run_bootstrap_study(&s, 4, StudyModel::CmpReg, &opts).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.records.iter().map(|r| r.replication).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        let back: StudyReport = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(back.records.len(), 4);
        assert!(format_report(&a).contains("log_nu"));
    }

    #[test]
    fn resampling_mode_draws_from_one_dataset() {
        let s = small_reg(1.0, 9);
        let opts = StudyOptions {
            resampling: Resampling::Resample,
            ..StudyOptions::default()
        };
        let report = run_bootstrap_study(&Scenario::Regression(s), 3, StudyModel::CmpReg, &opts).unwrap();
        assert_eq!(report.summary.failures, 0);
        let b: Vec<f64> = report.records.iter().map(|r| r.coefficients[1].value).collect();
        assert!(b[0] != b[1] && b[1] != b[2]);
    }

    #[test]
    fn zero_replications_rejected() {
        let s = Scenario::Regression(small_reg(1.0, 1));
        assert!(run_bootstrap_study(&s, 0, StudyModel::CmpReg, &StudyOptions::default()).is_err());
        let bad = StudyOptions {
            df: 0.0,
            ..StudyOptions::default()
        };
        assert!(run_bootstrap_study(&s, 1, StudyModel::CmpGam, &bad).is_err());
    }

    #[test]
    fn gam_study_records_score_tests() {
        let g = GamScenario {
            n: 150,
            ..GamScenario::preset(2.5, 4).unwrap()
        };
        let s = Scenario::Gam(g);
        let opts = StudyOptions::default();
        let gam = run_bootstrap_study(&s, 1, StudyModel::CmpGam, &opts).unwrap();
        let rec = &gam.records[0];
        assert!(rec.error.is_none(), "{:?}", rec.error);
        assert_eq!(
            rec.p_values.iter().map(|p| p.name.as_str()).collect::<Vec<_>>(),
            ["s(x1)", "s(x2)", "s(x3)", "s(x4)"]
        );
        assert!(rec.max_relative_increase <= opts.fit.tol);
        let pois = run_bootstrap_study(&s, 1, StudyModel::PoissonGamMode, &opts).unwrap();
        assert_eq!(pois.records[0].log_nu, Some(0.0));
        assert!(pois.summary.log_nu.as_ref().unwrap().truth.is_none());
    }

    #[test]
    fn outlier_counts_are_handled() {
        for m in [50, 150, 300] {
            let r = outlier_robustness_check(m).unwrap();
            assert!(r.baseline_max < 50, "base data must be moderate, max {}", r.baseline_max);
            assert!(r.passed, "{r:?}");
        }
        assert!(outlier_robustness_check(0).is_err());
    }
}
