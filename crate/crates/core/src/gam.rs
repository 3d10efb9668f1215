//! Additive CMP models fitted by local scoring.
//!
//! The `λ` half-step of the two-step IRLS is replaced by Gauss–Seidel
//! backfitting of the adjusted response `t1` over one parametric block and a
//! set of smoothing-spline terms. The `ν` half-step is unchanged.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::dist::{CumulantMethod, CumulantPolicy};
use crate::error::{CmpError, Result};
use crate::regression::{
    adjusted_response_lambda, conditional_covariances, evaluate, extrapolate_cycle, gamma_step, information_from_cumulants,
    initial_predictors, relative_change, step_halving, FitMethod, FitOptions, State, MAX_DOUBLINGS,
};
use crate::spline::{natural_spline_eval, roughness, smooth_term, Penalty, RawFit, SmoothTerm, SplineSmoother, DEFAULT_DF};
use crate::wls::{wls_solve, DesignMatrix, WlsOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothSpec {
    pub variable: String,
    pub df: f64,
}

impl SmoothSpec {
    pub fn new(variable: impl Into<String>, df: f64) -> Self {
        Self {
            variable: variable.into(),
            df,
        }
    }

    pub fn with_default_df(variable: impl Into<String>) -> Self {
        Self::new(variable, DEFAULT_DF)
    }
}

/// Term lists of an additive model. Parametric labels name source variables
/// (a categorical variable may expand to several design columns).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GamSpec {
    pub parametric: Vec<String>,
    pub smooths: Vec<SmoothSpec>,
    pub nu_terms: Vec<String>,
}

impl GamSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.smooths.iter().enumerate() {
            if !(s.df.is_finite() && s.df > 0.0) {
                return Err(CmpError::InvalidSpec(format!("s({}) has df {}", s.variable, s.df)));
            }
            if self.parametric.contains(&s.variable) {
                return Err(CmpError::InvalidSpec(format!(
                    "`{}` appears as both a parametric and a smooth term",
                    s.variable
                )));
            }
            if self.smooths[..i].iter().any(|o| o.variable == s.variable) {
                return Err(CmpError::InvalidSpec(format!("s({}) listed twice", s.variable)));
            }
        }
        Ok(())
    }
}

/// Response, parametric design (with intercept), raw smooth covariates and `Z`.
#[derive(Debug, Clone)]
pub struct GamData {
    y: Vec<u64>,
    x: DesignMatrix,
    smooth_columns: Vec<(String, Vec<f64>)>,
    z: DesignMatrix,
}

impl GamData {
    pub fn new(y: Vec<u64>, x: DesignMatrix, smooth_columns: Vec<(String, Vec<f64>)>, z: DesignMatrix) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n || z.nrows() != n {
            return Err(CmpError::LengthMismatch(format!(
                "y has {n} rows, X {} and Z {}",
                x.nrows(),
                z.nrows()
            )));
        }
        for (name, col) in &smooth_columns {
            if col.len() != n {
                return Err(CmpError::LengthMismatch(format!("smooth column `{name}` has {} rows, y {n}", col.len())));
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(CmpError::InvalidParams(format!("smooth column `{name}` has non-finite values")));
            }
        }
        Ok(Self {
            y,
            x,
            smooth_columns,
            z,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &[u64] {
        &self.y
    }

    pub fn x(&self) -> &DesignMatrix {
        &self.x
    }

    pub fn z(&self) -> &DesignMatrix {
        &self.z
    }

    pub fn smooth_column(&self, name: &str) -> Option<&[f64]> {
        self.smooth_columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.as_slice())
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            y: rows.iter().map(|&i| self.y[i]).collect(),
            x: self.x.select_rows(rows),
            smooth_columns: self
                .smooth_columns
                .iter()
                .map(|(n, c)| (n.clone(), rows.iter().map(|&i| c[i]).collect()))
                .collect(),
            z: self.z.select_rows(rows),
        }
    }

    /// Moves smooth variable `name` into the parametric design as a linear column.
    fn linearize(&self, name: &str) -> Result<Self> {
        let col = self.smooth_column(name).ok_or_else(|| CmpError::UnknownTerm(name.to_string()))?;
        let n = self.n();
        let mut values = DMatrix::zeros(n, self.x.ncols() + 1);
        values.columns_mut(0, self.x.ncols()).copy_from(self.x.matrix());
        values.column_mut(self.x.ncols()).copy_from_slice(col);
        let mut names = self.x.column_names().to_vec();
        names.push(name.to_string());
        Ok(Self {
            y: self.y.clone(),
            x: DesignMatrix::new(values, names)?,
            smooth_columns: self.smooth_columns.clone(),
            z: self.z.clone(),
        })
    }
}

/// A round ends the fit once every smoother's trace at the current weights
/// is this close to its requested df.
pub const DF_ROUND_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackfitOptions {
    /// Stop once no term moves by more than `tol · (1 + rms(t1))`.
    pub tol: f64,
    pub max_cycles: usize,
}

impl Default for BackfitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_cycles: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GamOptions {
    pub fit: FitOptions,
    pub backfit: BackfitOptions,
    /// Run the per-term nonparametric score tests after fitting.
    pub score_tests: bool,
}

impl Default for GamOptions {
    fn default() -> Self {
        Self {
            fit: FitOptions::default(),
            backfit: BackfitOptions::default(),
            score_tests: true,
        }
    }
}

/// Additive predictor split into its parametric block and centered smooths.
#[derive(Debug, Clone, PartialEq)]
pub struct BackfitState {
    pub beta: DVector<f64>,
    pub smooths: Vec<RawFit>,
}

impl BackfitState {
    pub fn eta(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let mut eta: Vec<f64> = (x * &self.beta).iter().copied().collect();
        for f in &self.smooths {
            eta.iter_mut().zip(&f.fitted).for_each(|(e, v)| *e += v);
        }
        eta
    }

    pub fn lerp(&self, other: &Self, s: f64) -> Self {
        Self {
            beta: &self.beta + (&other.beta - &self.beta) * s,
            smooths: self.smooths.iter().zip(&other.smooths).map(|(a, b)| a.lerp(b, s)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackfitOutcome {
    pub state: BackfitState,
    pub smoothers: Vec<SplineSmoother>,
    pub cycles: usize,
    pub converged: bool,
}

/// Weighted Gauss–Seidel backfitting of `t1` on `X` plus one smoother per
/// `(x_j, df_j)`. Smoothing parameters are fixed for the call from `w1`.
pub fn backfit(
    t1: &[f64],
    w1: &[f64],
    x: &DMatrix<f64>,
    smooths: &[(&[f64], f64)],
    start: Option<&BackfitState>,
    opts: &BackfitOptions,
) -> Result<BackfitOutcome> {
    check_weights(t1, w1, x)?;
    let smoothers: Vec<SplineSmoother> = smooths
        .iter()
        .map(|(xs, df)| SplineSmoother::with_df(xs, w1, *df))
        .collect::<Result<_>>()?;
    let xs: Vec<&[f64]> = smooths.iter().map(|(c, _)| *c).collect();
    backfit_with(t1, w1, x, &xs, smoothers, start, opts)
}

fn check_weights(t1: &[f64], w1: &[f64], x: &DMatrix<f64>) -> Result<()> {
    let n = t1.len();
    if w1.len() != n || x.nrows() != n {
        return Err(CmpError::LengthMismatch(format!(
            "t1 has {n} entries, w1 {}, X {} rows",
            w1.len(),
            x.nrows()
        )));
    }
    if let Some(i) = w1.iter().position(|w| !(*w > 0.0)) {
        return Err(CmpError::InvalidParams(format!("backfitting weight {i} is {}", w1[i])));
    }
    Ok(())
}

fn backfit_with(
    t1: &[f64],
    w1: &[f64],
    x: &DMatrix<f64>,
    xs: &[&[f64]],
    smoothers: Vec<SplineSmoother>,
    start: Option<&BackfitState>,
    opts: &BackfitOptions,
) -> Result<BackfitOutcome> {
    let n = t1.len();
    let mut state = match start {
        Some(s) => s.clone(),
        None => BackfitState {
            beta: DVector::zeros(x.ncols()),
            smooths: smoothers.iter().map(|s| RawFit::zeros(s.knots().len(), n)).collect(),
        },
    };
    let scale = 1.0 + (t1.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let strict = WlsOptions::strict();
    let intercept = (0..x.ncols()).find(|&j| x.column(j).iter().all(|v| *v == 1.0));
    let mut pfit: Vec<f64> = (x * &state.beta).iter().copied().collect();
    let mut fsum = vec![0.0; n];
    for f in &state.smooths {
        fsum.iter_mut().zip(&f.fitted).for_each(|(a, b)| *a += b);
    }
    let mut converged = false;
    let mut cycles = 0;
    for cycle in 1..=opts.max_cycles {
        cycles = cycle;
        let mut change: f64 = 0.0;
        let partial: Vec<f64> = (0..n).map(|i| t1[i] - fsum[i]).collect();
        state.beta = wls_solve(x, w1, &partial, &strict)?.coefficients;
        let new_pfit: Vec<f64> = (x * &state.beta).iter().copied().collect();
        change = change.max(max_abs_diff(&pfit, &new_pfit));
        pfit = new_pfit;
        for (j, sm) in smoothers.iter().enumerate() {
            let old = &state.smooths[j].fitted;
            let partial: Vec<f64> = (0..n).map(|i| t1[i] - pfit[i] - fsum[i] + old[i]).collect();
            let raw = sm.smooth_at(xs[j], &partial)?;
            let new = raw.clone().centered();
            // Hand the removed level to the intercept so the sweep stays a descent step.
            if let Some(k) = intercept {
                let c = raw.fitted[0] - new.fitted[0];
                state.beta[k] += c;
                pfit.iter_mut().for_each(|v| *v += c);
            }
            change = change.max(max_abs_diff(old, &new.fitted));
            for i in 0..n {
                fsum[i] += new.fitted[i] - old[i];
            }
            state.smooths[j] = new;
        }
        if change < opts.tol * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("backfitting did not converge in {} cycles", opts.max_cycles);
    }
    Ok(BackfitOutcome {
        state,
        smoothers,
        cycles,
        converged,
    })
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
}

/// Pointwise standard errors of one smooth term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeCurve {
    pub variable: String,
    /// At each observation.
    pub se: Vec<f64>,
    /// At each knot, for interpolation.
    pub knot_se: Vec<f64>,
}

/// Nonparametric score test for one smooth term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTest {
    pub variable: String,
    pub chisq: f64,
    pub df: f64,
    pub p_value: f64,
    /// The reduced (linear) refit converged.
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GamFit {
    pub intercept: f64,
    pub intercept_se: f64,
    pub parametric_names: Vec<String>,
    pub parametric_beta: Vec<f64>,
    pub parametric_se: Vec<f64>,
    pub gamma_names: Vec<String>,
    pub gamma: Vec<f64>,
    pub gamma_se: Vec<f64>,
    pub gamma_fixed: bool,
    pub smooths: Vec<SmoothTerm>,
    pub se_curves: Vec<SeCurve>,
    pub npar_chisq: Option<Vec<ScoreTest>>,
    pub deviance: f64,
    pub initial_deviance: f64,
    /// Unpenalized deviance after each iteration. Not monotone in general:
    /// steps are accepted on the penalized criterion.
    pub deviance_trace: Vec<f64>,
    /// Penalized deviance before and after each iteration, both at that
    /// iteration's smoothing parameters.
    pub penalized_steps: Vec<(f64, f64)>,
    pub aic: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Outer iterations whose backfitting loop hit its cycle limit.
    pub backfit_failures: usize,
    pub eta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub nu: Vec<f64>,
}

impl GamFit {
    pub fn smooth(&self, variable: &str) -> Option<&SmoothTerm> {
        self.smooths.iter().find(|s| s.variable == variable)
    }

    pub fn mean_log_nu(&self) -> f64 {
        self.nu.iter().map(|v| v.ln()).sum::<f64>() / self.nu.len().max(1) as f64
    }
}

fn intercept_column(x: &DesignMatrix) -> Option<usize> {
    let m = x.matrix();
    (0..m.ncols()).find(|&j| {
        let c = m.column(j);
        c[0] != 0.0 && c.iter().all(|v| *v == c[0])
    })
}

fn resolve_smooths<'a>(data: &'a GamData, spec: &GamSpec) -> Result<Vec<(&'a [f64], f64)>> {
    spec.smooths
        .iter()
        .map(|s| {
            data.smooth_column(&s.variable)
                .map(|c| (c, s.df))
                .ok_or_else(|| CmpError::UnknownTerm(s.variable.clone()))
        })
        .collect()
}

/// Fits the additive model by local scoring.
pub fn fit_gam(data: &GamData, spec: &GamSpec, opts: &GamOptions) -> Result<GamFit> {
    let fo = &opts.fit;
    fo.validate()?;
    spec.validate()?;
    if fo.method != FitMethod::TwoStep {
        return Err(CmpError::InvalidSpec("additive models are fitted by the two-step scheme only".into()));
    }
    let smooths = resolve_smooths(data, spec)?;
    let icol = intercept_column(&data.x);
    if !smooths.is_empty() && icol.is_none() {
        return Err(CmpError::InvalidSpec("smooth terms need an intercept in the parametric design".into()));
    }
    let x = data.x.matrix();
    let z = data.z.matrix();
    let y = &data.y;
    let n = y.len();
    let strict = WlsOptions::strict();
    wls_solve(x, &vec![1.0; n], &vec![0.0; n], &strict)?;
    if fo.fixed_gamma.is_none() {
        wls_solve(z, &vec![1.0; n], &vec![0.0; n], &strict)?;
    }

    let (eta1, mut gamma, eta2) = initial_predictors(y, z, fo)?;
    let mut state = evaluate(y, &eta1, &eta2, fo.nu_bounds, &fo.policy)?;
    let initial_deviance = state.deviance;
    let xs: Vec<&[f64]> = smooths.iter().map(|(c, _)| *c).collect();
    let dfs: Vec<f64> = smooths.iter().map(|(_, d)| *d).collect();
    let mut comps: Option<BackfitState> = None;
    // Smoothing parameters stay fixed within a round, so each round solves
    // one penalized likelihood; between rounds they are re-targeted to the
    // requested df at the current weights.
    let mut penalties: Option<Vec<Penalty>> = None;
    let mut round_iter = 0;
    let mut rounds = 1;
    let mut trace = Vec::new();
    let mut penalized_steps = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut backfit_failures = 0;
    let slack = fo.tol * 1e-3;

    for iter in 1..=fo.max_iter {
        iterations = iter;
        round_iter += 1;
        let cycle_start = comps.clone().map(|c| (c, gamma.clone()));
        let (t1, w1) = adjusted_response_lambda(y, &state.eta1, &state.cum)?;
        let smoothers: Vec<SplineSmoother> = match &penalties {
            None => xs.iter().zip(&dfs).map(|(c, d)| SplineSmoother::with_df(c, &w1, *d)).collect::<Result<_>>()?,
            Some(p) => xs.iter().zip(p).map(|(c, p)| SplineSmoother::with_mode(c, &w1, *p)).collect::<Result<_>>()?,
        };
        if penalties.is_none() {
            penalties = Some(smoothers.iter().map(|s| s.penalty()).collect());
        }
        let mus: Vec<f64> = smoothers.iter().map(|s| s.penalty_weight()).collect();
        let knots: Vec<Vec<f64>> = smoothers.iter().map(|s| s.knots().to_vec()).collect();
        let penalty = |c: &BackfitState| -> f64 {
            c.smooths
                .iter()
                .zip(&knots)
                .zip(&mus)
                .map(|((f, k), mu)| if *mu > 0.0 { mu * roughness(k, &f.second_derivs) } else { 0.0 })
                .sum()
        };
        let scored = |c: &BackfitState, eta2: &[f64]| -> Result<State> {
            let mut st = evaluate(y, &c.eta(x), eta2, fo.nu_bounds, &fo.policy)?;
            st.penalty = penalty(c);
            Ok(st)
        };
        let outcome = backfit_with(&t1, &w1, x, &xs, smoothers, comps.as_ref(), &opts.backfit)?;
        if !outcome.converged {
            backfit_failures += 1;
        }
        let target = outcome.state;
        if let Some(c) = &comps {
            state.penalty = penalty(c);
        }
        let before = state.objective();
        let first = comps.is_none();
        match comps.take() {
            None => {
                state = scored(&target, &state.eta2)?;
                comps = Some(target);
            }
            Some(old) => {
                let trial = |s: f64| scored(&old.lerp(&target, s), &state.eta2);
                match step_halving(before, slack, fo.max_halvings, false, trial) {
                    Some((s, accepted)) => {
                        comps = Some(old.lerp(&target, s));
                        state = accepted;
                    }
                    None => {
                        log::debug!("λ step rejected after {} halvings", fo.max_halvings);
                        comps = Some(old);
                    }
                }
            }
        }
        if fo.fixed_gamma.is_none() {
            let (g, s) = gamma_step(y, z, &gamma, &state, fo, true)?;
            gamma = g;
            state = s;
        }
        if let (true, Some((c0, g0))) = (fo.extrapolate, cycle_start) {
            let cur = comps.as_ref().expect("components exist after the first cycle");
            let dg = &gamma - &g0;
            let trial = |k: f64| {
                let e2 = z * (&gamma + &dg * k);
                scored(&c0.lerp(cur, 1.0 + k), e2.as_slice())
            };
            let ex = extrapolate_cycle(&state, MAX_DOUBLINGS, trial);
            if let Some((k, better)) = ex {
                comps = Some(c0.lerp(cur, 1.0 + k));
                gamma += dg * k;
                state = better;
            }
        }
        trace.push(state.deviance);
        if !first {
            penalized_steps.push((before, state.objective()));
        }
        log::debug!(
            "local scoring iteration {iter} (round {rounds}): deviance {:.6}, penalized {:.6}",
            state.deviance,
            state.objective()
        );
        if round_iter > 1 && relative_change(before, state.objective()) < fo.tol {
            let w: Vec<f64> = state.cum.iter().map(|c| c.var_y).collect();
            let p = penalties.as_ref().expect("set in the first iteration");
            let mut on_target = true;
            let mut next = Vec::with_capacity(p.len());
            for ((c, d), pen) in xs.iter().zip(&dfs).zip(p) {
                let current = SplineSmoother::with_mode(c, &w, *pen)?;
                if matches!(pen, Penalty::Finite(_)) && (current.trace() - d).abs() > DF_ROUND_TOLERANCE {
                    on_target = false;
                }
                next.push(SplineSmoother::with_df(c, &w, *d)?.penalty());
            }
            if on_target {
                converged = true;
                break;
            }
            log::debug!("round {rounds} done; re-targeting smoothing parameters");
            penalties = Some(next);
            rounds += 1;
            round_iter = 0;
        }
    }
    if !converged {
        log::warn!("local scoring did not converge in {} iterations", fo.max_iter);
    }
    let comps = comps.expect("at least one iteration runs");

    // Operators and information at the final state, with exact cumulants.
    let pmf = CumulantPolicy {
        method: CumulantMethod::Pmf,
        truncation: fo.policy.truncation,
    };
    let final_state = evaluate(y, &state.eta1, &state.eta2, fo.nu_bounds, &pmf)?;
    let w_final: Vec<f64> = final_state.cum.iter().map(|c| c.var_y).collect();
    let mut terms = Vec::with_capacity(smooths.len());
    let mut se_curves = Vec::with_capacity(smooths.len());
    let penalties = penalties.expect("at least one iteration runs");
    for (j, (xs, _)) in smooths.iter().enumerate() {
        let sm = SplineSmoother::with_mode(xs, &w_final, penalties[j])?;
        let name = &spec.smooths[j].variable;
        se_curves.push(se_curve(name, &sm, &w_final));
        terms.push(smooth_term(name, &sm, comps.smooths[j].clone()));
    }
    let (parametric_se, gamma_se) = parametric_standard_errors(x, z, &comps, &final_state, fo.fixed_gamma.is_some());

    let names = data.x.column_names();
    let icol = icol.unwrap_or(usize::MAX);
    let keep: Vec<usize> = (0..x.ncols()).filter(|&j| j != icol).collect();
    let edf: f64 = terms.iter().map(|t| t.df).sum();
    let n_params = edf + x.ncols() as f64 + if fo.fixed_gamma.is_some() { 0.0 } else { z.ncols() as f64 };
    let mut fit = GamFit {
        intercept: if icol < x.ncols() { comps.beta[icol] } else { 0.0 },
        intercept_se: if icol < x.ncols() { parametric_se[icol] } else { f64::NAN },
        parametric_names: keep.iter().map(|&j| names[j].clone()).collect(),
        parametric_beta: keep.iter().map(|&j| comps.beta[j]).collect(),
        parametric_se: keep.iter().map(|&j| parametric_se[j]).collect(),
        gamma_names: data.z.column_names().to_vec(),
        gamma: gamma.iter().copied().collect(),
        gamma_se,
        gamma_fixed: fo.fixed_gamma.is_some(),
        smooths: terms,
        se_curves,
        npar_chisq: None,
        deviance: state.deviance,
        initial_deviance,
        deviance_trace: trace,
        penalized_steps,
        aic: state.deviance + 2.0 * n_params,
        converged,
        iterations,
        backfit_failures,
        eta: state.eta1.clone(),
        lambda: state.lambda(),
        nu: state.nu.clone(),
    };
    if opts.score_tests && !spec.smooths.is_empty() {
        fit.npar_chisq = Some(score_test_smooths(&fit, data, spec, opts)?);
    }
    Ok(fit)
}

/// `se_i = sqrt(S_ii / w_i)`: the diagonal of `S W⁻¹`, which bounds the
/// diagonal of `S W⁻¹ Sᵀ`.
fn se_curve(variable: &str, sm: &SplineSmoother, w: &[f64]) -> SeCurve {
    let diag = sm.operator_diag();
    let se = diag
        .iter()
        .zip(w)
        .map(|(d, wi)| (d.max(0.0) / wi).sqrt())
        .collect();
    let knot_se = sm
        .knot_diag()
        .iter()
        .zip(sm.knot_weights())
        .map(|(d, wk)| (d.max(0.0) / wk).sqrt())
        .collect();
    SeCurve {
        variable: variable.to_string(),
        se,
        knot_se,
    }
}

/// Standard errors of the parametric coefficients and `γ` from the
/// information matrix, with each fitted smooth entering as one fixed-shape
/// column of the `λ` design. NaN when the information is singular.
fn parametric_standard_errors(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    comps: &BackfitState,
    state: &State,
    gamma_fixed: bool,
) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows();
    let shapes: Vec<&RawFit> = comps
        .smooths
        .iter()
        .filter(|f| f.fitted.iter().map(|v| v * v).sum::<f64>() > 1e-12 * n as f64)
        .collect();
    let mut xa = DMatrix::zeros(n, x.ncols() + shapes.len());
    xa.columns_mut(0, x.ncols()).copy_from(x);
    for (j, f) in shapes.iter().enumerate() {
        xa.column_mut(x.ncols() + j).copy_from_slice(&f.fitted);
    }
    let nan = |k: usize| vec![f64::NAN; k];
    let blocks = match information_from_cumulants(&xa, z, &state.nu, &state.cum) {
        Ok(b) => b,
        Err(e) => {
            log::warn!("no standard errors: {e}");
            return (nan(x.ncols()), nan(z.ncols()));
        }
    };
    let covs = if gamma_fixed {
        blocks
            .i11
            .clone()
            .cholesky()
            .map(|c| (c.inverse(), DMatrix::zeros(z.ncols(), z.ncols())))
            .ok_or_else(|| CmpError::SingularInformation("I11".into()))
    } else {
        conditional_covariances(&blocks.i11, &blocks.i12, &blocks.i22)
    };
    match covs {
        Ok((cb, cg)) => (
            (0..x.ncols()).map(|j| cb[(j, j)].max(0.0).sqrt()).collect(),
            (0..z.ncols()).map(|j| cg[(j, j)].max(0.0).sqrt()).collect(),
        ),
        Err(e) => {
            log::warn!("no standard errors: {e}");
            (nan(x.ncols()), nan(z.ncols()))
        }
    }
}

/// For each smooth, refits with that term replaced by a linear column and
/// compares deviances on `edf − 1` degrees of freedom.
pub fn score_test_smooths(fit: &GamFit, data: &GamData, spec: &GamSpec, opts: &GamOptions) -> Result<Vec<ScoreTest>> {
    let mut sub = opts.clone();
    sub.score_tests = false;
    spec.smooths
        .par_iter()
        .map(|s| {
            let reduced_data = data.linearize(&s.variable)?;
            let mut reduced_spec = spec.clone();
            reduced_spec.smooths.retain(|o| o.variable != s.variable);
            reduced_spec.parametric.push(s.variable.clone());
            let edf = fit
                .smooth(&s.variable)
                .ok_or_else(|| CmpError::UnknownTerm(s.variable.clone()))?
                .df;
            let df = edf - 1.0;
            match fit_gam(&reduced_data, &reduced_spec, &sub) {
                Ok(reduced) => {
                    let chisq = reduced.deviance - fit.deviance;
                    Ok(ScoreTest {
                        variable: s.variable.clone(),
                        chisq,
                        df,
                        p_value: chi_square_sf(chisq.max(0.0), df),
                        converged: reduced.converged,
                    })
                }
                Err(e) => {
                    log::warn!("linear refit for s({}) failed: {e}", s.variable);
                    Ok(ScoreTest {
                        variable: s.variable.clone(),
                        chisq: f64::NAN,
                        df,
                        p_value: f64::NAN,
                        converged: false,
                    })
                }
            }
        })
        .collect()
}

pub fn chi_square_sf(stat: f64, df: f64) -> f64 {
    match ChiSquared::new(df) {
        Ok(d) => d.sf(stat),
        Err(_) => f64::NAN,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartialPoint {
    pub x: f64,
    pub fit: f64,
    pub lower: f64,
    pub upper: f64,
}

/// `f̂ ± 2 se` for one smooth on an even grid over the observed range.
pub fn partial_plot_data(fit: &GamFit, term: &str, grid: usize) -> Result<Vec<PartialPoint>> {
    let idx = fit
        .smooths
        .iter()
        .position(|s| s.variable == term)
        .ok_or_else(|| CmpError::UnknownTerm(term.to_string()))?;
    let st = &fit.smooths[idx];
    let se = &fit.se_curves[idx];
    let (lo, hi) = (st.knots[0], st.knots[st.knots.len() - 1]);
    let grid = grid.max(2);
    Ok((0..grid)
        .map(|g| {
            let x = if g == grid - 1 {
                hi
            } else {
                lo + (hi - lo) * g as f64 / (grid - 1) as f64
            };
            let f = natural_spline_eval(&st.knots, &st.knot_values, &st.second_derivs, x);
            let s = interpolate(&st.knots, &se.knot_se, x);
            PartialPoint {
                x,
                fit: f,
                lower: f - 2.0 * s,
                upper: f + 2.0 * s,
            }
        })
        .collect())
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let i = xs.partition_point(|&k| k <= x);
    if i == 0 {
        return ys[0];
    }
    if i >= xs.len() {
        return ys[ys.len() - 1];
    }
    let t = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
    ys[i - 1] + t * (ys[i] - ys[i - 1])
}

/// Bootstrap pointwise standard errors of every smooth at the original
/// observations: rows are resampled with replacement and each refitted
/// curve is recentered over the original `x`.
pub fn bootstrap_se_curves(
    data: &GamData,
    spec: &GamSpec,
    opts: &GamOptions,
    resamples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let n = data.n();
    let mut sub = opts.clone();
    sub.score_tests = false;
    let curves: Vec<Vec<Vec<f64>>> = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let fit = fit_gam(&data.select_rows(&rows), spec, &sub)?;
            Ok(spec
                .smooths
                .iter()
                .map(|s| {
                    let xs = data.smooth_column(&s.variable).expect("spec resolved against data");
                    let mut p = fit.smooth(&s.variable).expect("fitted").predict(xs);
                    let m = p.iter().sum::<f64>() / n as f64;
                    p.iter_mut().for_each(|v| *v -= m);
                    p
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok((0..spec.smooths.len())
        .map(|j| {
            (0..n)
                .map(|i| {
                    let vals: Vec<f64> = curves.iter().map(|c| c[j][i]).collect();
                    let m = vals.iter().sum::<f64>() / vals.len() as f64;
                    (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len().max(2) - 1) as f64).sqrt()
                })
                .collect()
        })
        .collect())
}
