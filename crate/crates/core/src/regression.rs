//! CMP regression `ln λ = Xβ`, `ln ν = Zγ` fit by two-step IRLS.
//!
//! Each cycle regresses the working response for `ln λ` on `X` with weights
//! `V[Y]`, refreshes the cumulants, then regresses the working response for
//! `ln ν` on `ν∗Z` with weights `V[ln Y!]`. Either half-step is shrunk by
//! halving whenever it raises `−2ℓ` or pushes `ν` outside its bounds.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dist::{cumulants_with_log_z, log_factorial, CmpParams, CumulantPolicy, Cumulants};
use crate::error::{CmpError, Result};
use crate::wls::{wls_solve, DesignMatrix, WlsOptions};

/// Variances below this are treated as degenerate.
pub const MIN_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelData {
    y: Vec<u64>,
    x: DesignMatrix,
    z: DesignMatrix,
}

impl ModelData {
    pub fn new(y: Vec<u64>, x: DesignMatrix, z: DesignMatrix) -> Result<Self> {
        if x.nrows() != y.len() || z.nrows() != y.len() {
            return Err(CmpError::LengthMismatch(format!(
                "y has {} rows, X {}, Z {}",
                y.len(),
                x.nrows(),
                z.nrows()
            )));
        }
        if y.is_empty() {
            return Err(CmpError::Data("no observations".into()));
        }
        Ok(Self { y, x, z })
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

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            y: rows.iter().map(|&i| self.y[i]).collect(),
            x: self.x.select_rows(rows),
            z: self.z.select_rows(rows),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    #[default]
    TwoStep,
    /// Single WLS on `[X, g(Y)∗Z]`. Kept only as a reference for comparisons;
    /// it has no step control and tends to stall near its starting point.
    JointWls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub nu_init: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    pub nu_bounds: (f64, f64),
    /// Cumulants used for the working responses. The default is pmf
    /// summation; `Auto` swaps in the expansion's `E[Y]`, `V[Y]` inside its
    /// validity region, which moves the fixed point off the likelihood optimum.
    pub policy: CumulantPolicy,
    /// Hold `γ` at these values instead of estimating it.
    pub fixed_gamma: Option<Vec<f64>>,
    pub method: FitMethod,
    pub nu_response: NuResponse,
    /// Line search along each completed two-step cycle (see [`FitResult`] docs).
    pub extrapolate: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            nu_init: 0.2,
            tol: 1e-6,
            max_iter: 100,
            max_halvings: 10,
            nu_bounds: (1e-4, 50.0),
            policy: CumulantPolicy::pmf(),
            fixed_gamma: None,
            method: FitMethod::TwoStep,
            nu_response: NuResponse::Scoring,
            extrapolate: true,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.nu_bounds;
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(CmpError::InvalidParams(format!("tol must be positive, got {}", self.tol)));
        }
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(CmpError::InvalidParams(format!("bad ν bounds ({lo}, {hi})")));
        }
        if !(self.nu_init >= lo && self.nu_init <= hi) {
            return Err(CmpError::InvalidParams(format!(
                "nu_init {} outside bounds ({lo}, {hi})",
                self.nu_init
            )));
        }
        if self.max_iter == 0 {
            return Err(CmpError::InvalidParams("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InformationBlocks {
    pub i11: DMatrix<f64>,
    pub i12: DMatrix<f64>,
    pub i22: DMatrix<f64>,
}

impl InformationBlocks {
    /// The full symmetric `(p+q+2)`-square information matrix.
    pub fn joint(&self) -> DMatrix<f64> {
        let (p, q) = (self.i11.nrows(), self.i22.nrows());
        let mut m = DMatrix::zeros(p + q, p + q);
        m.view_mut((0, 0), (p, p)).copy_from(&self.i11);
        m.view_mut((0, p), (p, q)).copy_from(&self.i12);
        m.view_mut((p, 0), (q, p)).copy_from(&self.i12.transpose());
        m.view_mut((p, p), (q, q)).copy_from(&self.i22);
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub beta: DVector<f64>,
    pub gamma: DVector<f64>,
    pub beta_names: Vec<String>,
    pub gamma_names: Vec<String>,
    pub cov_beta: DMatrix<f64>,
    /// Zero when `γ` was held fixed.
    pub cov_gamma: DMatrix<f64>,
    pub gamma_fixed: bool,
    pub deviance: f64,
    /// `−2ℓ` at the starting values `λ = (y+0.1)^ν₀`, `ν = ν₀`.
    pub initial_deviance: f64,
    /// Accepted `−2ℓ` after each full cycle.
    pub deviance_trace: Vec<f64>,
    pub aic: f64,
    pub converged: bool,
    pub iterations: usize,
    pub lambda: Vec<f64>,
    pub nu: Vec<f64>,
}

impl FitResult {
    pub fn se_beta(&self) -> Vec<f64> {
        self.cov_beta.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    pub fn se_gamma(&self) -> Vec<f64> {
        self.cov_gamma.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

/// `t1 = η1 + (y − E[Y])/V[Y]` with weights `V[Y]`.
pub fn adjusted_response_lambda(y: &[u64], eta1: &[f64], cum: &[Cumulants]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_lengths(y.len(), &[eta1.len(), cum.len()])?;
    let mut t = Vec::with_capacity(y.len());
    let mut w = Vec::with_capacity(y.len());
    for (i, ((&yi, &e), c)) in y.iter().zip(eta1).zip(cum).enumerate() {
        if !(c.var_y >= MIN_VARIANCE) {
            return Err(CmpError::DegenerateVariance { index: i, value: c.var_y });
        }
        t.push(e + (yi as f64 - c.mean_y) / c.var_y);
        w.push(c.var_y);
    }
    Ok((t, w))
}

/// Residual scaling in the working response for `ln ν`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuResponse {
    /// `t2 = ν η2 + (E[ln Y!] − ln y!)/V[ln Y!]`: regressing this on `ν∗Z`
    /// with weights `V[ln Y!]` is exactly a Fisher-scoring step for `γ`.
    #[default]
    Scoring,
    /// `t2 = ν η2 + ν (E[ln Y!] − ln y!)/V[ln Y!]`. Its fixed point solves
    /// `Zᵀ ν² (E[ln Y!] − ln y!) = 0`, which equals the score equation only
    /// when `ν` is constant across observations.
    ScaledByNu,
}

/// Working response for `ln ν` with weights `V[ln Y!]`, and the row-scaled
/// design `ν∗Z` it is regressed on.
pub fn adjusted_response_nu(
    y: &[u64],
    eta2: &[f64],
    nu: &[f64],
    cum: &[Cumulants],
    z: &DMatrix<f64>,
    form: NuResponse,
) -> Result<(Vec<f64>, Vec<f64>, DMatrix<f64>)> {
    check_lengths(y.len(), &[eta2.len(), nu.len(), cum.len(), z.nrows()])?;
    let mut t = Vec::with_capacity(y.len());
    let mut w = Vec::with_capacity(y.len());
    for (i, c) in cum.iter().enumerate() {
        if !(c.var_lfy >= MIN_VARIANCE) {
            return Err(CmpError::DegenerateVariance { index: i, value: c.var_lfy });
        }
        let scale = match form {
            NuResponse::Scoring => 1.0,
            NuResponse::ScaledByNu => nu[i],
        };
        t.push(nu[i] * eta2[i] + scale * (c.mean_lfy - log_factorial(y[i])) / c.var_lfy);
        w.push(c.var_lfy);
    }
    let mut zs = z.clone();
    for (i, mut row) in zs.row_iter_mut().enumerate() {
        row *= nu[i];
    }
    Ok((t, w, zs))
}

/// `−2 Σ ln P(yᵢ; λᵢ, νᵢ)`.
pub fn deviance_proxy(y: &[u64], lambda: &[f64], nu: &[f64]) -> Result<f64> {
    Ok(-2.0 * crate::dist::log_likelihood(y, lambda, nu)?)
}

/// Expected information blocks at `(β, γ)`, built from pmf cumulants.
pub fn information_blocks(
    data: &ModelData,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
    opts: &FitOptions,
) -> Result<InformationBlocks> {
    let eta1 = data.x.matrix() * beta;
    let eta2 = data.z.matrix() * gamma;
    let policy = CumulantPolicy {
        method: crate::dist::CumulantMethod::Pmf,
        truncation: opts.policy.truncation,
    };
    let state = evaluate(&data.y, eta1.as_slice(), eta2.as_slice(), opts.nu_bounds, &policy)?;
    information_from_cumulants(data.x.matrix(), data.z.matrix(), &state.nu, &state.cum)
}

pub(crate) fn information_from_cumulants(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    nu: &[f64],
    cum: &[Cumulants],
) -> Result<InformationBlocks> {
    for (i, c) in cum.iter().enumerate() {
        if !(c.var_y >= MIN_VARIANCE) {
            return Err(CmpError::DegenerateVariance { index: i, value: c.var_y });
        }
    }
    let vy = DVector::from_iterator(cum.len(), cum.iter().map(|c| c.var_y));
    let cov = DVector::from_iterator(cum.len(), cum.iter().zip(nu).map(|(c, v)| v * c.cov_y_lfy));
    let vl = DVector::from_iterator(cum.len(), cum.iter().zip(nu).map(|(c, v)| v * v * c.var_lfy));
    let scale_rows = |m: &DMatrix<f64>, d: &DVector<f64>| {
        let mut out = m.clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row *= d[i];
        }
        out
    };
    let i11 = x.transpose() * scale_rows(x, &vy);
    let i12 = -(x.transpose() * scale_rows(z, &cov));
    let i22 = z.transpose() * scale_rows(z, &vl);
    Ok(InformationBlocks {
        i11: symmetrize(i11),
        i12,
        i22: symmetrize(i22),
    })
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn spd_inverse(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = m
        .cholesky()
        .ok_or_else(|| CmpError::SingularInformation(format!("{what} is not positive definite")))?;
    Ok(symmetrize(chol.inverse()))
}

/// Inverse Schur complements `(I11 − I12 I22⁻¹ I21)⁻¹` and `(I22 − I21 I11⁻¹ I12)⁻¹`.
pub fn conditional_covariances(
    i11: &DMatrix<f64>,
    i12: &DMatrix<f64>,
    i22: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if i11.nrows() != i12.nrows() || i22.nrows() != i12.ncols() {
        return Err(CmpError::LengthMismatch("information block shapes disagree".into()));
    }
    let i22_inv = spd_inverse(i22.clone(), "I22")?;
    let i11_inv = spd_inverse(i11.clone(), "I11")?;
    let s1 = i11 - i12 * &i22_inv * i12.transpose();
    let s2 = i22 - i12.transpose() * &i11_inv * i12;
    Ok((
        spd_inverse(symmetrize(s1), "Schur complement of I22")?,
        spd_inverse(symmetrize(s2), "Schur complement of I11")?,
    ))
}

fn check_lengths(n: usize, others: &[usize]) -> Result<()> {
    if others.iter().any(|&m| m != n) {
        return Err(CmpError::LengthMismatch(format!("expected {n} rows, got {others:?}")));
    }
    Ok(())
}

/// Cumulants and `−2ℓ` at one pair of linear predictors.
#[derive(Debug, Clone)]
pub(crate) struct State {
    pub eta1: Vec<f64>,
    pub eta2: Vec<f64>,
    pub nu: Vec<f64>,
    pub cum: Vec<Cumulants>,
    pub deviance: f64,
    /// Some `exp(η2)` fell outside the ν bounds and was clamped.
    pub clamped: bool,
    /// Roughness penalty added by the additive model; zero otherwise.
    pub penalty: f64,
}

impl State {
    /// Criterion minimized by step acceptance.
    pub fn objective(&self) -> f64 {
        self.deviance + self.penalty
    }

    pub fn lambda(&self) -> Vec<f64> {
        self.eta1.iter().map(|e| e.exp()).collect()
    }
}

pub(crate) fn evaluate(
    y: &[u64],
    eta1: &[f64],
    eta2: &[f64],
    bounds: (f64, f64),
    policy: &CumulantPolicy,
) -> Result<State> {
    let (lo, hi) = bounds;
    let mut clamped = false;
    let nu: Vec<f64> = eta2
        .iter()
        .map(|e| {
            let v = e.exp();
            if !(lo..=hi).contains(&v) {
                clamped = true;
            }
            v.clamp(lo, hi)
        })
        .collect();
    let per_obs: Vec<(Cumulants, f64)> = (0..y.len())
        .into_par_iter()
        .map(|i| {
            let params = CmpParams::new(eta1[i].exp(), nu[i])?;
            let (c, log_z) = cumulants_with_log_z(&params, policy)?;
            if !(c.var_y >= MIN_VARIANCE) {
                return Err(CmpError::DegenerateVariance { index: i, value: c.var_y });
            }
            if !(c.var_lfy >= MIN_VARIANCE) {
                return Err(CmpError::DegenerateVariance { index: i, value: c.var_lfy });
            }
            let ll = y[i] as f64 * eta1[i] - nu[i] * log_factorial(y[i]) - log_z;
            Ok((c, ll))
        })
        .collect::<Result<_>>()?;
    let deviance = -2.0 * per_obs.iter().map(|(_, ll)| ll).sum::<f64>();
    if !deviance.is_finite() {
        return Err(CmpError::InvalidParams("non-finite deviance".into()));
    }
    Ok(State {
        eta1: eta1.to_vec(),
        eta2: eta2.to_vec(),
        nu,
        cum: per_obs.into_iter().map(|(c, _)| c).collect(),
        deviance,
        clamped,
        penalty: 0.0,
    })
}

/// Tries step fractions `1, ½, ¼, …` until `trial` yields an admissible state.
/// A state is admissible when it evaluates, keeps ν in bounds (if
/// `respect_bounds`), and does not raise the objective above `reference`
/// by more than the relative slack. Returns `None` when every fraction fails.
pub(crate) fn step_halving<F>(
    reference: f64,
    slack: f64,
    max_halvings: usize,
    respect_bounds: bool,
    mut trial: F,
) -> Option<(f64, State)>
where
    F: FnMut(f64) -> Result<State>,
{
    let mut s = 1.0;
    for h in 0..=max_halvings {
        match trial(s) {
            Ok(state) if (!respect_bounds || !state.clamped) && state.objective() <= reference + slack * reference.abs() => {
                if h > 0 {
                    log::debug!("step accepted after {h} halvings (s = {s})");
                }
                return Some((s, state));
            }
            Ok(state) => log::trace!("rejected s = {s}: objective {} vs {reference}", state.objective()),
            Err(e) => log::trace!("rejected s = {s}: {e}"),
        }
        s *= 0.5;
    }
    None
}

/// Upper bound on the doubling search in [`extrapolate_cycle`].
pub(crate) const MAX_DOUBLINGS: usize = 12;

/// Pushes past the end of a completed cycle along its own displacement,
/// trying `θ + k·d` for `k = 1, 2, 4, …` while the deviance keeps falling.
/// Alternating updates zig-zag slowly when `β` and `γ` are strongly coupled;
/// this recovers most of the lost progress without moving any fixed point.
pub(crate) fn extrapolate_cycle<F>(current: &State, max_doublings: usize, mut trial: F) -> Option<(f64, State)>
where
    F: FnMut(f64) -> Result<State>,
{
    let mut best: Option<(f64, State)> = None;
    let mut best_dev = current.objective();
    let mut k = 1.0;
    for _ in 0..max_doublings {
        match trial(k) {
            Ok(st) if !st.clamped && st.objective() < best_dev => {
                best_dev = st.objective();
                best = Some((k, st));
            }
            _ => break,
        }
        k *= 2.0;
    }
    best
}

/// The `γ` half-step shared with the additive model.
pub(crate) fn gamma_step(
    y: &[u64],
    z: &DMatrix<f64>,
    gamma: &DVector<f64>,
    current: &State,
    opts: &FitOptions,
    halve: bool,
) -> Result<(DVector<f64>, State)> {
    let (t2, w2, zs) = adjusted_response_nu(y, &current.eta2, &current.nu, &current.cum, z, opts.nu_response)?;
    let sol = wls_solve(&zs, &w2, &t2, &WlsOptions::strict())?;
    let delta = sol.coefficients - gamma;
    let trial = |s: f64| {
        let g = gamma + &delta * s;
        let eta2 = z * &g;
        let mut st = evaluate(y, &current.eta1, eta2.as_slice(), opts.nu_bounds, &opts.policy)?;
        st.penalty = current.penalty;
        Ok(st)
    };
    if !halve {
        let state = trial(1.0)?;
        return Ok((gamma + delta, state));
    }
    match step_halving(current.objective(), opts.tol * 1e-3, opts.max_halvings, true, trial) {
        Some((s, state)) => Ok((gamma + delta * s, state)),
        None => {
            log::debug!("γ step rejected after {} halvings", opts.max_halvings);
            Ok((gamma.clone(), current.clone()))
        }
    }
}

/// Starting predictors: `ln λ = ν₀ ln(y + 0.1)` and `ln ν` either from the
/// fixed `γ` or the constant `ln ν₀` projected onto `Z`.
pub(crate) fn initial_predictors(
    y: &[u64],
    z: &DMatrix<f64>,
    opts: &FitOptions,
) -> Result<(Vec<f64>, DVector<f64>, Vec<f64>)> {
    let gamma = match &opts.fixed_gamma {
        Some(g) => {
            if g.len() != z.ncols() {
                return Err(CmpError::LengthMismatch(format!(
                    "fixed γ has {} entries, Z has {} columns",
                    g.len(),
                    z.ncols()
                )));
            }
            DVector::from_column_slice(g)
        }
        None => {
            let target = vec![opts.nu_init.ln(); y.len()];
            wls_solve(z, &vec![1.0; y.len()], &target, &WlsOptions::strict())?.coefficients
        }
    };
    let eta2: Vec<f64> = (z * &gamma).iter().copied().collect();
    let eta1 = y
        .iter()
        .zip(&eta2)
        .map(|(&yi, e2)| e2.exp().clamp(opts.nu_bounds.0, opts.nu_bounds.1) * (yi as f64 + 0.1).ln())
        .collect();
    Ok((eta1, gamma, eta2))
}

pub(crate) fn relative_change(prev: f64, cur: f64) -> f64 {
    (cur - prev).abs() / cur.abs().max(f64::MIN_POSITIVE)
}

/// Fits the model by two-step IRLS (or the reference joint scheme).
pub fn fit(data: &ModelData, opts: &FitOptions) -> Result<FitResult> {
    opts.validate()?;
    let x = data.x.matrix();
    let z = data.z.matrix();
    let y = &data.y;
    let strict = WlsOptions::strict();
    // Full rank checks up front so the failure is reported even if IRLS never reaches WLS.
    wls_solve(x, &vec![1.0; y.len()], &vec![0.0; y.len()], &strict)?;
    if opts.fixed_gamma.is_none() {
        wls_solve(z, &vec![1.0; y.len()], &vec![0.0; y.len()], &strict)?;
    }

    let (eta1, mut gamma, eta2) = initial_predictors(y, z, opts)?;
    let mut state = evaluate(y, &eta1, &eta2, opts.nu_bounds, &opts.policy)?;
    let initial_deviance = state.deviance;
    let mut beta = DVector::zeros(x.ncols());
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=opts.max_iter {
        iterations = iter;
        let prev = state.deviance;
        match opts.method {
            FitMethod::TwoStep => {
                let cycle_start = (iter > 1).then(|| (beta.clone(), gamma.clone()));
                let (t1, w1) = adjusted_response_lambda(y, &state.eta1, &state.cum)?;
                let target = wls_solve(x, &w1, &t1, &strict)?.coefficients;
                if iter == 1 {
                    // No β exists before the first solve, so there is nothing to halve towards.
                    beta = target;
                    let e1 = x * &beta;
                    state = evaluate(y, e1.as_slice(), &state.eta2, opts.nu_bounds, &opts.policy)?;
                } else {
                    let delta = &target - &beta;
                    let trial = |s: f64| {
                        let e1 = x * (&beta + &delta * s);
                        evaluate(y, e1.as_slice(), &state.eta2, opts.nu_bounds, &opts.policy)
                    };
                    if let Some((s, accepted)) =
                        step_halving(state.deviance, opts.tol * 1e-3, opts.max_halvings, false, trial)
                    {
                        beta += delta * s;
                        state = accepted;
                    } else {
                        log::debug!("β step rejected after {} halvings", opts.max_halvings);
                    }
                }
                if opts.fixed_gamma.is_none() {
                    let (g, s) = gamma_step(y, z, &gamma, &state, opts, true)?;
                    gamma = g;
                    state = s;
                }
                if let (true, Some((b0, g0))) = (opts.extrapolate, cycle_start) {
                    let (db, dg) = (&beta - b0, &gamma - g0);
                    let trial = |k: f64| {
                        let e1 = x * (&beta + &db * k);
                        let e2 = z * (&gamma + &dg * k);
                        evaluate(y, e1.as_slice(), e2.as_slice(), opts.nu_bounds, &opts.policy)
                    };
                    if let Some((k, better)) = extrapolate_cycle(&state, MAX_DOUBLINGS, trial) {
                        beta += db * k;
                        gamma += dg * k;
                        state = better;
                    }
                }
            }
            FitMethod::JointWls => match joint_step(y, x, z, &beta, &gamma, &state, opts, iter == 1) {
                Ok((b, g, s)) => {
                    beta = b;
                    gamma = g;
                    state = s;
                }
                Err(e) => {
                    log::warn!("joint WLS stopped at iteration {iter}: {e}");
                    if iter == 1 {
                        return Err(e);
                    }
                    break;
                }
            },
        }
        trace.push(state.deviance);
        log::debug!("iteration {iter}: deviance {:.6}", state.deviance);
        if iter > 1 && relative_change(prev, state.deviance) < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("IRLS did not converge in {} iterations", opts.max_iter);
    }

    let info_policy = CumulantPolicy {
        method: crate::dist::CumulantMethod::Pmf,
        truncation: opts.policy.truncation,
    };
    let pmf_state = evaluate(y, &state.eta1, &state.eta2, opts.nu_bounds, &info_policy)?;
    let blocks = information_from_cumulants(x, z, &pmf_state.nu, &pmf_state.cum)?;
    let gamma_fixed = opts.fixed_gamma.is_some();
    let (cov_beta, cov_gamma) = if gamma_fixed {
        (
            spd_inverse(blocks.i11.clone(), "I11")?,
            DMatrix::zeros(z.ncols(), z.ncols()),
        )
    } else {
        conditional_covariances(&blocks.i11, &blocks.i12, &blocks.i22)?
    };
    let n_params = x.ncols() + if gamma_fixed { 0 } else { z.ncols() };
    Ok(FitResult {
        beta,
        gamma,
        beta_names: data.x.column_names().to_vec(),
        gamma_names: data.z.column_names().to_vec(),
        cov_beta,
        cov_gamma,
        gamma_fixed,
        deviance: state.deviance,
        initial_deviance,
        deviance_trace: trace,
        aic: state.deviance + 2.0 * n_params as f64,
        converged,
        iterations,
        lambda: state.lambda(),
        nu: state.nu.clone(),
    })
}

#[allow(clippy::too_many_arguments)]
fn joint_step(
    y: &[u64],
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
    state: &State,
    opts: &FitOptions,
    first: bool,
) -> Result<(DVector<f64>, DVector<f64>, State)> {
    let n = y.len();
    let (p, q) = (x.ncols(), z.ncols());
    let mut design = DMatrix::zeros(n, p + q);
    let mut t = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let beta_eta: Vec<f64> = if first {
        state.eta1.clone()
    } else {
        (x * beta).iter().copied().collect()
    };
    for i in 0..n {
        let c = &state.cum[i];
        let resid = y[i] as f64 - c.mean_y;
        // g(y) blows up when y sits on its mean; such rows carry no ν information.
        let g = if resid.abs() > 1e-8 {
            state.nu[i] * (c.mean_lfy - log_factorial(y[i])) / resid
        } else {
            0.0
        };
        for j in 0..p {
            design[(i, j)] = x[(i, j)];
        }
        let mut gz_gamma = 0.0;
        for j in 0..q {
            design[(i, p + j)] = g * z[(i, j)];
            gz_gamma += g * z[(i, j)] * gamma[j];
        }
        if !(c.var_y >= MIN_VARIANCE) {
            return Err(CmpError::DegenerateVariance { index: i, value: c.var_y });
        }
        t.push(beta_eta[i] + gz_gamma + resid / c.var_y);
        w.push(c.var_y);
    }
    let sol = wls_solve(&design, &w, &t, &WlsOptions::default())?;
    let b = sol.coefficients.rows(0, p).into_owned();
    let g = if opts.fixed_gamma.is_some() {
        gamma.clone()
    } else {
        sol.coefficients.rows(p, q).into_owned()
    };
    let e1 = x * &b;
    let e2 = z * &g;
    let s = evaluate(y, e1.as_slice(), e2.as_slice(), opts.nu_bounds, &opts.policy)?;
    Ok((b, g, s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dispersion {
    Over,
    Equi,
    Under,
}

impl Dispersion {
    /// Verdict from a fitted `ln ν`: negative means over-dispersion.
    pub fn from_log_nu(log_nu: f64) -> Self {
        if log_nu < 0.0 {
            Self::Over
        } else if log_nu > 0.0 {
            Self::Under
        } else {
            Self::Equi
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Self::Over => "over-dispersed (nu < 1)",
            Self::Equi => "equi-dispersed (nu = 1)",
            Self::Under => "under-dispersed (nu > 1)",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    /// `"lambda"` for `ln λ` coefficients, `"nu"` for `ln ν`.
    pub component: String,
    pub estimate: f64,
    pub std_error: Option<f64>,
    pub z: Option<f64>,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub coefficients: Vec<CoefficientRow>,
    pub deviance: f64,
    pub aic: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Mean fitted `ln ν` across observations.
    pub mean_log_nu: f64,
    pub dispersion: Dispersion,
    pub dispersion_note: String,
}

/// Two-sided normal p-value of a Wald statistic.
pub fn wald_p_value(z: f64) -> f64 {
    let normal = Normal::standard();
    (2.0 * normal.sf(z.abs())).min(1.0)
}

/// Wald row; a missing, zero or non-finite se leaves z and p empty.
pub fn coefficient_row(name: &str, component: &str, estimate: f64, se: Option<f64>) -> CoefficientRow {
    let se = se.filter(|s| s.is_finite() && *s > 0.0);
    let z = se.map(|s| estimate / s);
    CoefficientRow {
        name: name.to_string(),
        component: component.to_string(),
        estimate,
        std_error: se,
        z,
        p_value: z.map(wald_p_value),
    }
}

pub fn summarize(fit: &FitResult) -> FitSummary {
    let se_b = fit.se_beta();
    let se_g = fit.se_gamma();
    let mut coefficients: Vec<CoefficientRow> = fit
        .beta_names
        .iter()
        .enumerate()
        .map(|(j, name)| coefficient_row(name, "lambda", fit.beta[j], Some(se_b[j])))
        .collect();
    coefficients.extend(fit.gamma_names.iter().enumerate().map(|(j, name)| {
        let se = (!fit.gamma_fixed).then_some(se_g[j]);
        coefficient_row(name, "nu", fit.gamma[j], se)
    }));
    let mean_log_nu = fit.nu.iter().map(|v| v.ln()).sum::<f64>() / fit.nu.len().max(1) as f64;
    let dispersion = Dispersion::from_log_nu(mean_log_nu);
    FitSummary {
        coefficients,
        deviance: fit.deviance,
        aic: fit.aic,
        converged: fit.converged,
        iterations: fit.iterations,
        mean_log_nu,
        dispersion,
        dispersion_note: format!("{}: mean fitted nu = {:.4}", dispersion.describe(), mean_log_nu.exp()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{cumulants, sample_one, CumulantMethod};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal as NormalDist, Uniform};

    fn design(cols: Vec<(String, Vec<f64>)>, n: usize) -> DesignMatrix {
        DesignMatrix::from_columns(n, true, &cols).unwrap()
    }

    /// Covariates as in the coefficient-recovery study, with `N(m, s)` read as
    /// mean and standard deviation.
    fn simulated(n: usize, beta: [f64; 5], nu: f64, seed: u64) -> ModelData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new(0.0, 1.0).unwrap();
        let n05 = NormalDist::new(0.0, 0.5).unwrap();
        let n01 = NormalDist::new(0.0, 0.1).unwrap();
        let mut cols = vec![Vec::new(); 4];
        let mut y = Vec::new();
        for _ in 0..n {
            let x1 = u.sample(&mut rng);
            let x2 = n05.sample(&mut rng);
            let x3 = n01.sample(&mut rng);
            let x4 = 0.2 * x3 + n05.sample(&mut rng);
            let eta = beta[0] + beta[1] * x1 + beta[2] * x2 + beta[3] * x3 + beta[4] * x4;
            let params = CmpParams::new(eta.exp(), nu).unwrap();
            y.push(sample_one(&params, &mut rng).unwrap());
            for (c, v) in cols.iter_mut().zip([x1, x2, x3, x4]) {
                c.push(v);
            }
        }
        let named = cols
            .into_iter()
            .enumerate()
            .map(|(j, c)| (format!("x{}", j + 1), c))
            .collect();
        ModelData::new(y, design(named, n), DesignMatrix::intercept_only(n)).unwrap()
    }

    fn poisson_glm_oracle(y: &[u64], x: &DMatrix<f64>) -> DVector<f64> {
        // Plain Newton iterations on the Poisson log-likelihood via normal equations.
        let yv = DVector::from_iterator(y.len(), y.iter().map(|&v| v as f64));
        let mut beta = DVector::zeros(x.ncols());
        for _ in 0..100 {
            let mu = (x * &beta).map(f64::exp);
            let mut xtwx = DMatrix::zeros(x.ncols(), x.ncols());
            for i in 0..y.len() {
                let r = x.row(i);
                xtwx += r.transpose() * r * mu[i];
            }
            let score = x.transpose() * (&yv - &mu);
            let step = xtwx.lu().solve(&score).unwrap();
            beta += &step;
            if step.amax() < 1e-13 {
                break;
            }
        }
        beta
    }

    fn cum(mean_y: f64, var_y: f64, mean_lfy: f64, var_lfy: f64) -> Cumulants {
        Cumulants {
            mean_y,
            var_y,
            mean_lfy,
            var_lfy,
            cov_y_lfy: 0.0,
        }
    }

    #[test]
    fn adjusted_lambda_zero_residual_and_poisson_identity() {
        let c = [cum(3.0, 2.0, 1.0, 1.0)];
        let (t, w) = adjusted_response_lambda(&[3], &[0.4], &c).unwrap();
        assert_eq!((t[0], w[0]), (0.4, 2.0));
        let lam: f64 = 2.5;
        let c = [cum(lam, lam, 1.0, 1.0)];
        let (t, _) = adjusted_response_lambda(&[4], &[lam.ln()], &c).unwrap();
        assert_relative_eq!(t[0], lam.ln() + (4.0 - lam) / lam, epsilon = 1e-15);
        let bad = [cum(1.0, 1e-13, 1.0, 1.0)];
        assert!(matches!(
            adjusted_response_lambda(&[1], &[0.0], &bad),
            Err(CmpError::DegenerateVariance { index: 0, .. })
        ));
    }

    #[test]
    fn adjusted_nu_zero_residual_and_scaled_design() {
        let lf = log_factorial(5);
        let c = [cum(4.0, 2.0, lf, 0.7)];
        let z = DMatrix::from_row_slice(1, 2, &[1.0, 3.0]);
        let (t, w, zs) = adjusted_response_nu(&[5], &[0.3], &[1.5], &c, &z, NuResponse::Scoring).unwrap();
        assert_relative_eq!(t[0], 1.5 * 0.3, epsilon = 1e-15);
        let (t, _, _) = adjusted_response_nu(&[5], &[0.3], &[1.5], &c, &z, NuResponse::ScaledByNu).unwrap();
        assert_relative_eq!(t[0], 1.5 * 0.3, epsilon = 1e-15);
        assert_eq!(w[0], 0.7);
        assert_eq!(zs, DMatrix::from_row_slice(1, 2, &[1.5, 4.5]));
        let bad = [cum(1.0, 1.0, 1.0, 0.0)];
        assert!(adjusted_response_nu(&[1], &[0.0], &[1.0], &bad, &z, NuResponse::Scoring).is_err());
    }

    #[test]
    fn adjusted_responses_match_elementwise_oracle() {
        let y = [0u64, 3, 7, 1];
        let eta1: [f64; 4] = [0.1, 1.2, 1.9, -0.4];
        let nu = [0.6, 1.1, 0.8, 2.0];
        let eta2: Vec<f64> = nu.iter().map(|v: &f64| v.ln()).collect();
        let cs: Vec<Cumulants> = (0..4)
            .map(|i| cumulants(&CmpParams::new(eta1[i].exp(), nu[i]).unwrap(), &CumulantPolicy::pmf()).unwrap())
            .collect();
        let (t1, _) = adjusted_response_lambda(&y, &eta1, &cs).unwrap();
        let z = DMatrix::from_element(4, 1, 1.0);
        let (t2, _, _) = adjusted_response_nu(&y, &eta2, &nu, &cs, &z, NuResponse::Scoring).unwrap();
        let (t2s, _, _) = adjusted_response_nu(&y, &eta2, &nu, &cs, &z, NuResponse::ScaledByNu).unwrap();
        for i in 0..4 {
            let lf: f64 = (1..=y[i]).map(|k| (k as f64).ln()).sum();
            assert_relative_eq!(t1[i], eta1[i] + (y[i] as f64 - cs[i].mean_y) / cs[i].var_y, epsilon = 1e-14);
            assert_relative_eq!(t2[i], nu[i] * eta2[i] + (cs[i].mean_lfy - lf) / cs[i].var_lfy, epsilon = 1e-12);
            assert_relative_eq!(
                t2s[i],
                nu[i] * eta2[i] + nu[i] * (cs[i].mean_lfy - lf) / cs[i].var_lfy,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn intercept_only_nu_step_is_scalar_update() {
        let y = [2u64, 5, 1, 0, 3];
        let nu = 0.8;
        let c = cumulants(&CmpParams::new(2.0, nu).unwrap(), &CumulantPolicy::pmf()).unwrap();
        let cs = vec![c; 5];
        let eta2 = vec![f64::ln(nu); 5];
        let z = DMatrix::from_element(5, 1, 1.0);
        for form in [NuResponse::Scoring, NuResponse::ScaledByNu] {
            let (t, w, zs) = adjusted_response_nu(&y, &eta2, &[nu; 5], &cs, &z, form).unwrap();
            let g = wls_solve(&zs, &w, &t, &WlsOptions::default()).unwrap().coefficients[0];
            let mean_t = t.iter().sum::<f64>() / 5.0;
            assert_relative_eq!(g, mean_t / nu, max_relative = 1e-12);
        }
    }

    #[test]
    fn deviance_examples() {
        assert_relative_eq!(deviance_proxy(&[0], &[2.0], &[1.0]).unwrap(), 4.0, epsilon = 1e-12);
        let a = deviance_proxy(&[1, 4], &[1.5, 3.0], &[0.7, 1.2]).unwrap();
        let b = deviance_proxy(&[1], &[1.5], &[0.7]).unwrap() + deviance_proxy(&[4], &[3.0], &[1.2]).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-14);
    }

    #[test]
    fn conditional_covariances_block_diagonal_and_joint_inverse() {
        let i11 = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let i22 = DMatrix::from_row_slice(1, 1, &[2.0]);
        let zero = DMatrix::zeros(2, 1);
        let (cb, cg) = conditional_covariances(&i11, &zero, &i22).unwrap();
        assert_relative_eq!(cb, i11.clone().try_inverse().unwrap(), epsilon = 1e-14);
        assert_relative_eq!(cg[(0, 0)], 0.5, epsilon = 1e-14);

        // Scalar blocks: (a - b²/c)⁻¹ and (c - b²/a)⁻¹.
        let (a, b, c) = (5.0, -1.5, 2.0);
        let (cb, cg) = conditional_covariances(
            &DMatrix::from_element(1, 1, a),
            &DMatrix::from_element(1, 1, b),
            &DMatrix::from_element(1, 1, c),
        )
        .unwrap();
        assert_relative_eq!(cb[(0, 0)], 1.0 / (a - b * b / c), epsilon = 1e-14);
        assert_relative_eq!(cg[(0, 0)], 1.0 / (c - b * b / a), epsilon = 1e-14);

        let i12 = DMatrix::from_row_slice(2, 1, &[0.5, -0.7]);
        let blocks = InformationBlocks { i11, i12, i22 };
        let (cb, cg) = conditional_covariances(&blocks.i11, &blocks.i12, &blocks.i22).unwrap();
        let full = blocks.joint().try_inverse().unwrap();
        assert!((cb - full.view((0, 0), (2, 2))).amax() < 1e-12);
        assert!((cg[(0, 0)] - full[(2, 2)]).abs() < 1e-12);

        let singular = DMatrix::from_element(1, 1, 1.0);
        assert!(matches!(
            conditional_covariances(&singular, &singular, &singular),
            Err(CmpError::SingularInformation(_))
        ));
    }

    #[test]
    fn information_poisson_and_scalar_cases() {
        let n = 6;
        let xcol: Vec<f64> = (0..n).map(|i| i as f64 / 5.0).collect();
        let x = design(vec![("x".into(), xcol.clone())], n);
        let data = ModelData::new(vec![1, 0, 2, 3, 1, 4], x, DesignMatrix::intercept_only(n)).unwrap();
        let beta = DVector::from_vec(vec![0.2, 0.9]);
        let gamma = DVector::from_vec(vec![0.0]);
        let blocks = information_blocks(&data, &beta, &gamma, &FitOptions::default()).unwrap();
        let mut oracle = DMatrix::zeros(2, 2);
        for &xi in &xcol {
            let lam = (0.2 + 0.9 * xi).exp();
            let r = DVector::from_vec(vec![1.0, xi]);
            oracle += &r * r.transpose() * lam;
        }
        assert_relative_eq!(blocks.i11, oracle, max_relative = 1e-9);

        // n = 1: entries are the single observation's cumulants.
        let one = ModelData::new(
            vec![2],
            DesignMatrix::intercept_only(1),
            DesignMatrix::intercept_only(1),
        )
        .unwrap();
        let (lam, nu): (f64, f64) = (1.7, 0.6);
        let b = information_blocks(
            &one,
            &DVector::from_vec(vec![lam.ln()]),
            &DVector::from_vec(vec![nu.ln()]),
            &FitOptions::default(),
        )
        .unwrap();
        let c = cumulants(&CmpParams::new(lam, nu).unwrap(), &CumulantPolicy::pmf()).unwrap();
        assert_relative_eq!(b.i11[(0, 0)], c.var_y, max_relative = 1e-12);
        assert_relative_eq!(b.i12[(0, 0)], -nu * c.cov_y_lfy, max_relative = 1e-12);
        assert_relative_eq!(b.i22[(0, 0)], nu * nu * c.var_lfy, max_relative = 1e-12);
    }

    #[test]
    fn wald_values() {
        assert_eq!(wald_p_value(0.0), 1.0);
        assert!((wald_p_value(1.959964) - 0.05).abs() < 1e-6);
        let row = coefficient_row("b", "lambda", 0.0, Some(0.3));
        assert_eq!(row.z, Some(0.0));
        assert_eq!(row.p_value, Some(1.0));
    }

    #[test]
    fn options_validation() {
        let bad = FitOptions {
            tol: 0.0,
            ..FitOptions::default()
        };
        assert!(fit_small(&bad).is_err());
        let bad = FitOptions {
            nu_bounds: (2.0, 1.0),
            ..FitOptions::default()
        };
        assert!(bad.validate().is_err());
    }

    fn fit_small(opts: &FitOptions) -> Result<FitResult> {
        let data = simulated(60, [0.5, 1.0, -1.0, 0.5, -0.5], 1.0, 3);
        fit(&data, opts)
    }

    #[test]
    fn rank_deficient_design_is_rejected() {
        let n = 20;
        let a: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let x = design(vec![("a".into(), a.clone()), ("b".into(), a.iter().map(|v| 2.0 * v).collect())], n);
        let data = ModelData::new(vec![1; n], x, DesignMatrix::intercept_only(n)).unwrap();
        assert!(matches!(
            fit(&data, &FitOptions::default()),
            Err(CmpError::RankDeficient { .. })
        ));
    }

    #[test]
    fn pinned_gamma_reproduces_poisson_glm() {
        let data = simulated(400, [0.5, 1.0, -1.0, 0.5, -0.5], 1.0, 11);
        let opts = FitOptions {
            fixed_gamma: Some(vec![0.0]),
            policy: CumulantPolicy::pmf(),
            tol: 1e-10,
            ..FitOptions::default()
        };
        let f = fit(&data, &opts).unwrap();
        let oracle = poisson_glm_oracle(data.y(), data.x().matrix());
        assert!((&f.beta - &oracle).amax() < 1e-4, "{} vs {}", f.beta, oracle);
        assert!(f.converged);
        assert_eq!(f.aic, f.deviance + 10.0);
    }

    #[test]
    fn recovers_over_dispersed_truth() {
        let truth = [0.05, 0.5, -0.5, 0.25, -0.25];
        let data = simulated(500, truth, 0.5, 21);
        let f = fit(&data, &FitOptions::default()).unwrap();
        assert!(f.converged);
        let se = f.se_beta();
        for j in 0..5 {
            assert!((f.beta[j] - truth[j]).abs() < 4.0 * se[j], "β{j} = {} ± {}", f.beta[j], se[j]);
        }
        assert!((f.gamma[0] - 0.5f64.ln()).abs() < 4.0 * f.se_gamma()[0]);
        let s = summarize(&f);
        assert_eq!(s.dispersion, Dispersion::Over);
        assert_eq!(s.coefficients.len(), 6);
    }

    #[test]
    fn deviance_trace_is_monotone_and_fixed_point_holds() {
        let data = simulated(300, [1.0, 3.0, -3.0, 2.0, -2.0], 2.5, 5);
        let opts = FitOptions::default();
        let f = fit(&data, &opts).unwrap();
        assert!(f.converged);
        for w in f.deviance_trace.windows(2) {
            assert!(w[1] <= w[0] + opts.tol * w[0].abs(), "{w:?}");
        }
        // One more cycle from the optimum barely moves the coefficients. The
        // stopping rule is on the deviance, which is quadratic near the
        // optimum, so coefficient slack scales with √tol.
        let z = data.z().matrix();
        let eta1: Vec<f64> = (data.x().matrix() * &f.beta).iter().copied().collect();
        let eta2: Vec<f64> = (z * &f.gamma).iter().copied().collect();
        let st = evaluate(data.y(), &eta1, &eta2, opts.nu_bounds, &opts.policy).unwrap();
        let (t1, w1) = adjusted_response_lambda(data.y(), &st.eta1, &st.cum).unwrap();
        let b = wls_solve(data.x().matrix(), &w1, &t1, &WlsOptions::strict()).unwrap().coefficients;
        assert!((&b - &f.beta).amax() < 10.0 * opts.tol.sqrt(), "{}", (&b - &f.beta).amax());
    }

    #[test]
    fn score_vanishes_at_optimum_with_pmf_cumulants() {
        let data = simulated(300, [0.5, 1.0, -1.0, 0.5, -0.5], 1.0, 8);
        let opts = FitOptions {
            policy: CumulantPolicy::pmf(),
            tol: 1e-10,
            ..FitOptions::default()
        };
        let f = fit(&data, &opts).unwrap();
        let eta1: Vec<f64> = f.lambda.iter().map(|l| l.ln()).collect();
        let eta2: Vec<f64> = f.nu.iter().map(|v| v.ln()).collect();
        let st = evaluate(data.y(), &eta1, &eta2, opts.nu_bounds, &opts.policy).unwrap();
        let n = data.n() as f64;
        let r1 = DVector::from_iterator(data.n(), data.y().iter().zip(&st.cum).map(|(&y, c)| y as f64 - c.mean_y));
        let r2 = DVector::from_iterator(
            data.n(),
            data.y().iter().zip(&st.cum).zip(&st.nu).map(|((&y, c), v)| v * (c.mean_lfy - log_factorial(y))),
        );
        assert!((data.x().matrix().transpose() * r1).amax() < 1e-3 * n);
        assert!((data.z().matrix().transpose() * r2).amax() < 1e-3 * n);
    }

    #[test]
    fn extrapolation_keeps_the_fixed_point() {
        let data = simulated(200, [1.0, 3.0, -3.0, 2.0, -2.0], 2.5, 13);
        let tight = FitOptions {
            tol: 1e-12,
            max_iter: 5000,
            ..FitOptions::default()
        };
        let fast = fit(&data, &tight).unwrap();
        let plain = fit(&data, &FitOptions { extrapolate: false, ..tight.clone() }).unwrap();
        assert!(fast.iterations < plain.iterations);
        assert!((&fast.beta - &plain.beta).amax() < 1e-3);
        assert!((&fast.gamma - &plain.gamma).amax() < 1e-3);
    }

    #[test]
    fn only_scoring_response_solves_the_nu_score_with_covariates() {
        let n = 400;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let u = Uniform::new(0.0, 1.0).unwrap();
        let (mut x1, mut z1, mut y) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let (a, b): (f64, f64) = (u.sample(&mut rng), u.sample(&mut rng));
            let params = CmpParams::new((0.8 + a).exp(), (-0.5 + 1.2 * b).exp()).unwrap();
            y.push(sample_one(&params, &mut rng).unwrap());
            x1.push(a);
            z1.push(b);
        }
        let data = ModelData::new(y, design(vec![("x1".into(), x1)], n), design(vec![("z1".into(), z1)], n)).unwrap();
        let gamma_score = |f: &FitResult| {
            let eta1: Vec<f64> = f.lambda.iter().map(|l| l.ln()).collect();
            let eta2: Vec<f64> = f.nu.iter().map(|v| v.ln()).collect();
            let st = evaluate(data.y(), &eta1, &eta2, (1e-4, 50.0), &CumulantPolicy::pmf()).unwrap();
            let r = DVector::from_iterator(
                n,
                data.y().iter().zip(&st.cum).zip(&st.nu).map(|((&y, c), v)| v * (c.mean_lfy - log_factorial(y))),
            );
            (data.z().matrix().transpose() * r).amax()
        };
        let opts = FitOptions {
            tol: 1e-12,
            max_iter: 1000,
            ..FitOptions::default()
        };
        let scoring = fit(&data, &opts).unwrap();
        let scaled = fit(&data, &FitOptions { nu_response: NuResponse::ScaledByNu, ..opts }).unwrap();
        assert!(gamma_score(&scoring) < 1e-4, "{}", gamma_score(&scoring));
        assert!(gamma_score(&scaled) > 1e-2, "{}", gamma_score(&scaled));
    }

    #[test]
    fn outlier_does_not_break_fit() {
        let mut data = simulated(200, [0.5, 1.0, -1.0, 0.5, -0.5], 1.0, 2);
        data.y[17] = 250;
        let f = fit(&data, &FitOptions::default()).unwrap();
        assert!(f.deviance.is_finite());
    }

    #[test]
    fn joint_wls_runs_as_reference() {
        let data = simulated(200, [0.5, 1.0, -1.0, 0.5, -0.5], 1.0, 4);
        let opts = FitOptions {
            method: FitMethod::JointWls,
            max_iter: 30,
            ..FitOptions::default()
        };
        let joint = fit(&data, &opts).unwrap();
        let two_step = fit(&data, &FitOptions::default()).unwrap();
        assert!(joint.deviance.is_finite());
        assert!(joint.deviance >= two_step.deviance - 1e-6 * two_step.deviance);
    }

    #[test]
    fn information_uses_pmf_even_with_auto_policy() {
        let n = 5;
        let data = ModelData::new(vec![3, 4, 2, 5, 6], DesignMatrix::intercept_only(n), DesignMatrix::intercept_only(n)).unwrap();
        let opts = FitOptions {
            policy: CumulantPolicy {
                method: CumulantMethod::Asymptotic,
                ..CumulantPolicy::default()
            },
            ..FitOptions::default()
        };
        let b = information_blocks(&data, &DVector::from_vec(vec![2f64.ln()]), &DVector::from_vec(vec![0.3f64.ln()]), &opts)
            .unwrap();
        let joint = b.joint();
        assert!(joint.clone().cholesky().is_some());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn start_values_do_not_matter(seed in 0u64..1000) {
            let data = simulated(250, [0.5, 1.0, -1.0, 0.5, -0.5], 1.0, seed);
            let fits: Vec<FitResult> = [0.2, 0.5, 1.0]
                .iter()
                .map(|&nu_init| {
                    fit(&data, &FitOptions { nu_init, tol: 1e-12, ..FitOptions::default() }).unwrap()
                })
                .collect();
            for f in &fits[1..] {
                prop_assert!((&f.beta - &fits[0].beta).amax() < 1e-4);
                prop_assert!((&f.gamma - &fits[0].gamma).amax() < 1e-4);
            }
        }

        #[test]
        fn covariance_blocks_symmetric_psd(seed in 0u64..1000) {
            let data = simulated(150, [0.5, 1.0, -1.0, 0.5, -0.5], 1.0, seed);
            let f = fit(&data, &FitOptions::default()).unwrap();
            for m in [&f.cov_beta, &f.cov_gamma] {
                prop_assert!((m - m.transpose()).amax() < 1e-12);
                prop_assert!(m.clone().symmetric_eigenvalues().min() > 0.0);
            }
        }
    }
}
