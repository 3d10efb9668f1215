//! Conway–Maxwell Poisson distribution engine.
//!
//! The pmf is `P(Y = y) = λ^y / ((y!)^ν ζ(λ, ν))` with the normalizing series
//! `ζ(λ, ν) = Σ_s λ^s / (s!)^ν`. Everything downstream (likelihood, IRLS
//! weights, information blocks) is built from the quantities here:
//!
//! * `ln ζ` by log-domain truncated summation, or by the three-term
//!   asymptotic expansion in `α = λ^(1/ν)` when `λ ≥ 2, ν ≤ 1`;
//! * the cumulants `E[Y]`, `V[Y]`, `E[ln Y!]`, `V[ln Y!]` and
//!   `Cov(Y, ln Y!)`;
//! * inverse-CDF sampling.
//!
//! `ν = 0` is only accepted for `λ < 1`, where the distribution is geometric.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CmpError, Result};

/// Smallest positive ν accepted; anything in `(0, NU_FLOOR)` is rejected.
pub const NU_FLOOR: f64 = 1e-8;
/// Default cap on the series mode `λ^(1/ν)`.
pub const DEFAULT_EXPECTED_COUNT_CAP: f64 = 1e5;
/// Default relative truncation error of the series.
pub const DEFAULT_EPS: f64 = 1e-12;
/// `ln y!` uses the cached recursion below this value and Stirling's series above.
pub const STIRLING_THRESHOLD: u64 = 254;
/// Terms summed past the series mode before the relative stopping rule applies.
const EXTRA_TERMS: usize = 20;

/// Lower edge of λ for the asymptotic expansion.
pub const ASYMPTOTIC_MIN_LAMBDA: f64 = 2.0;
/// Upper edge of ν for the asymptotic expansion.
pub const ASYMPTOTIC_MAX_NU: f64 = 1.0;

/// Parameter pair `(λ, ν)` of one CMP observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CmpParams {
    lambda: f64,
    nu: f64,
}

impl CmpParams {
    pub fn new(lambda: f64, nu: f64) -> Result<Self> {
        if !lambda.is_finite() || !nu.is_finite() {
            return Err(CmpError::InvalidParams(format!(
                "non-finite parameters λ = {lambda}, ν = {nu}"
            )));
        }
        if lambda <= 0.0 {
            return Err(CmpError::InvalidParams(format!("λ must be positive, got {lambda}")));
        }
        if nu == 0.0 {
            if lambda >= 1.0 {
                return Err(CmpError::InvalidParams(format!(
                    "ν = 0 (geometric) needs λ < 1, got λ = {lambda}"
                )));
            }
        } else if nu < NU_FLOOR {
            return Err(CmpError::InvalidParams(format!(
                "ν must be 0 or at least {NU_FLOOR:e}, got {nu:e}"
            )));
        }
        Ok(Self { lambda, nu })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn is_geometric(&self) -> bool {
        self.nu == 0.0
    }

    /// `ln α = ln λ / ν`, the log of the approximate series mode.
    pub fn log_alpha(&self) -> f64 {
        if self.is_geometric() {
            f64::NEG_INFINITY
        } else {
            self.lambda.ln() / self.nu
        }
    }

    /// Whether `(λ, ν)` lies in the region where the asymptotic expansion is used.
    pub fn in_asymptotic_region(&self) -> bool {
        self.lambda >= ASYMPTOTIC_MIN_LAMBDA && self.nu <= ASYMPTOTIC_MAX_NU && self.nu > 0.0
    }
}

/// Truncation rule for the normalizing series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    /// Stop once a term is below `eps` times the running sum (past the mode).
    pub eps: f64,
    /// Reject parameters whose series mode `λ^(1/ν)` exceeds this.
    pub count_cap: f64,
}

impl Default for Truncation {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            count_cap: DEFAULT_EXPECTED_COUNT_CAP,
        }
    }
}

impl Truncation {
    pub fn with_eps(eps: f64) -> Self {
        Self {
            eps,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZMethod {
    TruncatedSeries,
    Asymptotic,
    /// Closed form `ζ = 1/(1-λ)` for `ν = 0`.
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZEvaluation {
    pub log_z: f64,
    /// Number of series terms summed; 0 for the closed-form branches.
    pub terms_used: usize,
    pub method: ZMethod,
}

/// First four cumulant-type moments of `(Y, ln Y!)` plus their covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cumulants {
    pub mean_y: f64,
    pub var_y: f64,
    pub mean_lfy: f64,
    pub var_lfy: f64,
    pub cov_y_lfy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CumulantMethod {
    /// Direct summation over the truncated support.
    Pmf,
    /// Closed-form `E[Y]`, `V[Y]` from the expansion; the `ln Y!` moments
    /// and the cross covariance still come from the pmf.
    Asymptotic,
    /// Asymptotic inside `λ ≥ 2, ν ≤ 1`, pmf elsewhere.
    #[default]
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CumulantPolicy {
    pub method: CumulantMethod,
    pub truncation: Truncation,
}

impl CumulantPolicy {
    pub fn pmf() -> Self {
        Self {
            method: CumulantMethod::Pmf,
            truncation: Truncation::default(),
        }
    }

    pub fn asymptotic() -> Self {
        Self {
            method: CumulantMethod::Asymptotic,
            truncation: Truncation::default(),
        }
    }

    pub fn auto() -> Self {
        Self::default()
    }
}

fn log_factorial_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = Vec::with_capacity(STIRLING_THRESHOLD as usize);
        let mut acc = 0.0;
        table.push(acc);
        for k in 1..STIRLING_THRESHOLD {
            acc += (k as f64).ln();
            table.push(acc);
        }
        table
    })
}

/// Stirling's series `ln √(2πy) + y ln y − y + 1/(12y)`.
pub fn stirling_log_factorial(y: f64) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * y).ln() + y * y.ln() - y + 1.0 / (12.0 * y)
}

/// `ln y!`: cached cumulative logs below 254, Stirling's series from there on.
pub fn log_factorial(y: u64) -> f64 {
    if y < STIRLING_THRESHOLD {
        log_factorial_table()[y as usize]
    } else {
        stirling_log_factorial(y as f64)
    }
}

/// Walks the series terms `λ^s/(s!)^ν` in the log domain, handing each
/// term's weight relative to the peak to `visit`. Returns
/// `(log_peak, Σ weights, terms_used)` so that `ln ζ = log_peak + ln Σ`.
fn sweep<F>(params: &CmpParams, trunc: &Truncation, mut visit: F) -> Result<(f64, f64, usize)>
where
    F: FnMut(u64, f64, f64),
{
    let log_lambda = params.lambda.ln();
    let nu = params.nu;
    let (mode, min_terms) = if params.is_geometric() {
        (0u64, EXTRA_TERMS)
    } else {
        let log_alpha = params.log_alpha();
        if log_alpha > trunc.count_cap.ln() {
            return Err(CmpError::Overflow {
                mode: log_alpha.exp(),
                cap: trunc.count_cap,
            });
        }
        let alpha = log_alpha.exp();
        (alpha.floor() as u64, alpha.ceil() as usize + EXTRA_TERMS)
    };
    // The largest term sits at floor(α); anchoring there keeps every weight ≤ ~1.
    let log_peak = mode as f64 * log_lambda - nu * log_factorial(mode);

    let mut lf = 0.0;
    let mut sum = 0.0;
    let mut s: u64 = 0;
    // Hard stop well beyond anything the cap allows, so pathological eps cannot spin forever.
    let hard_limit = (trunc.count_cap as u64).saturating_mul(4).max(10_000) + min_terms as u64;
    loop {
        if s > 0 {
            lf += (s as f64).ln();
        }
        let w = (s as f64 * log_lambda - nu * lf - log_peak).exp();
        sum += w;
        visit(s, lf, w);
        s += 1;
        if s as usize >= min_terms && w <= trunc.eps * sum {
            break;
        }
        if s >= hard_limit {
            break;
        }
    }
    Ok((log_peak, sum, s as usize))
}

/// `ln ζ(λ, ν)` by log-domain summation with the default count cap.
pub fn log_z_truncated(params: &CmpParams, eps: f64) -> Result<ZEvaluation> {
    log_z_truncated_with(params, &Truncation::with_eps(eps))
}

pub fn log_z_truncated_with(params: &CmpParams, trunc: &Truncation) -> Result<ZEvaluation> {
    if !(trunc.eps > 0.0 && trunc.eps < 1.0) {
        return Err(CmpError::InvalidParams(format!(
            "truncation eps must lie in (0, 1), got {}",
            trunc.eps
        )));
    }
    if params.is_geometric() {
        return Ok(ZEvaluation {
            log_z: -(1.0 - params.lambda).ln(),
            terms_used: 0,
            method: ZMethod::Geometric,
        });
    }
    let (log_peak, sum, terms) = sweep(params, trunc, |_, _, _| {})?;
    Ok(ZEvaluation {
        log_z: log_peak + sum.ln(),
        terms_used: terms,
        method: ZMethod::TruncatedSeries,
    })
}

/// Pieces of the three-term expansion
/// `ζ ≈ e^{να} / (λ^{(ν-1)/(2ν)} (2π)^{(ν-1)/2} √ν) · [1 + (ν-1)(A + B)]`.
struct Expansion {
    nu: f64,
    log_lambda: f64,
    alpha: f64,
    a: f64,
    b: f64,
    d: f64,
}

impl Expansion {
    fn new(params: &CmpParams) -> Self {
        let nu = params.nu;
        let log_lambda = params.lambda.ln();
        let alpha = (log_lambda / nu).exp();
        let a = (8.0 * nu * nu + 12.0 * nu + 3.0) / (96.0 * alpha * nu * nu);
        let b = (1.0 + 6.0 * nu) / (144.0 * alpha * alpha * nu.powi(3));
        let d = 1.0 + (nu - 1.0) * (a + b);
        Self {
            nu,
            log_lambda,
            alpha,
            a,
            b,
            d,
        }
    }

    fn log_z(&self) -> f64 {
        let nu = self.nu;
        nu * self.alpha
            - (nu - 1.0) / (2.0 * nu) * self.log_lambda
            - (nu - 1.0) / 2.0 * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * nu.ln()
            + self.d.ln()
    }

    /// `∂ ln ζ / ∂ ln λ` and `∂² ln ζ / ∂ (ln λ)²`.
    fn mean_var(&self) -> (f64, f64) {
        let nu = self.nu;
        let (a, b, d) = (self.a, self.b, self.d);
        // A ∝ α⁻¹ and B ∝ α⁻², with ∂α/∂lnλ = α/ν.
        let g = -(nu - 1.0) * (a + 2.0 * b) / nu;
        let mean = self.alpha - (nu - 1.0) / (2.0 * nu) + g / d;
        let var = self.alpha / nu + (nu - 1.0) * (a + 4.0 * b) / (nu * nu * d) - g * g / (d * d);
        (mean, var)
    }

    /// `-∂ ln ζ / ∂ν` and `∂² ln ζ / ∂ν²`.
    fn log_factorial_mean_var(&self) -> (f64, f64) {
        let nu = self.nu;
        let l = self.log_lambda;
        let (alpha, a, b, d) = (self.alpha, self.a, self.b, self.d);
        let alpha_n = -alpha * l / (nu * nu);
        let alpha_nn = alpha * l * l / nu.powi(4) + 2.0 * alpha * l / nu.powi(3);

        // ln A = ln a(ν) − ln α, ln B = ln b(ν) − 2 ln α, ln α = L/ν.
        let pa = (8.0 + 12.0 / nu + 3.0 / (nu * nu)) / 96.0;
        let pa_n = (-12.0 / (nu * nu) - 6.0 / nu.powi(3)) / 96.0;
        let pa_nn = (24.0 / nu.powi(3) + 18.0 / nu.powi(4)) / 96.0;
        let pb = (1.0 / nu.powi(3) + 6.0 / (nu * nu)) / 144.0;
        let pb_n = (-3.0 / nu.powi(4) - 12.0 / nu.powi(3)) / 144.0;
        let pb_nn = (12.0 / nu.powi(5) + 36.0 / nu.powi(4)) / 144.0;

        let la_n = pa_n / pa + l / (nu * nu);
        let la_nn = pa_nn / pa - (pa_n / pa).powi(2) - 2.0 * l / nu.powi(3);
        let lb_n = pb_n / pb + 2.0 * l / (nu * nu);
        let lb_nn = pb_nn / pb - (pb_n / pb).powi(2) - 4.0 * l / nu.powi(3);

        let a_n = a * la_n;
        let a_nn = a * (la_n * la_n + la_nn);
        let b_n = b * lb_n;
        let b_nn = b * (lb_n * lb_n + lb_nn);

        let s = a + b;
        let s_n = a_n + b_n;
        let s_nn = a_nn + b_nn;
        let d_n = s + (nu - 1.0) * s_n;
        let d_nn = 2.0 * s_n + (nu - 1.0) * s_nn;

        let dlz = alpha + nu * alpha_n
            - l / (2.0 * nu * nu)
            - 0.5 * (2.0 * std::f64::consts::PI).ln()
            - 1.0 / (2.0 * nu)
            + d_n / d;
        let d2lz = 2.0 * alpha_n + nu * alpha_nn + l / nu.powi(3) + 1.0 / (2.0 * nu * nu)
            + d_nn / d
            - (d_n / d).powi(2);
        (-dlz, d2lz)
    }
}

fn require_asymptotic_region(params: &CmpParams) -> Result<()> {
    if params.in_asymptotic_region() {
        Ok(())
    } else {
        Err(CmpError::Domain {
            lambda: params.lambda,
            nu: params.nu,
        })
    }
}

/// `ln ζ` from the asymptotic expansion; only valid for `λ ≥ 2, ν ≤ 1`.
pub fn log_z_asymptotic(params: &CmpParams) -> Result<ZEvaluation> {
    require_asymptotic_region(params)?;
    Ok(ZEvaluation {
        log_z: Expansion::new(params).log_z(),
        terms_used: 0,
        method: ZMethod::Asymptotic,
    })
}

/// Closed-form `(E[Y], V[Y])` from the asymptotic expansion.
pub fn asymptotic_mean_var(params: &CmpParams) -> Result<(f64, f64)> {
    require_asymptotic_region(params)?;
    Ok(Expansion::new(params).mean_var())
}

/// Closed-form `(E[ln Y!], V[ln Y!])` from the asymptotic expansion.
///
/// Not used by [`cumulants`]: near `λ = 2` these miss the pmf values by a few
/// percent, so the asymptotic policy evaluates the `ln Y!` moments by summation.
pub fn asymptotic_log_factorial_moments(params: &CmpParams) -> Result<(f64, f64)> {
    require_asymptotic_region(params)?;
    Ok(Expansion::new(params).log_factorial_mean_var())
}

/// Exact (series) `ln ζ`.
pub fn log_z(params: &CmpParams, trunc: &Truncation) -> Result<f64> {
    log_z_truncated_with(params, trunc).map(|z| z.log_z)
}

/// Weighted moment accumulator over the support (West's update).
#[derive(Default)]
struct MomentAccumulator {
    weight: f64,
    mean_y: f64,
    mean_l: f64,
    m_yy: f64,
    m_ll: f64,
    m_yl: f64,
}

impl MomentAccumulator {
    fn push(&mut self, y: f64, l: f64, w: f64) {
        if w == 0.0 {
            return;
        }
        self.weight += w;
        let r = w / self.weight;
        let dy = y - self.mean_y;
        let dl = l - self.mean_l;
        self.mean_y += r * dy;
        self.mean_l += r * dl;
        self.m_yy += w * dy * (y - self.mean_y);
        self.m_ll += w * dl * (l - self.mean_l);
        self.m_yl += w * dy * (l - self.mean_l);
    }

    fn finish(self) -> Cumulants {
        Cumulants {
            mean_y: self.mean_y,
            var_y: self.m_yy / self.weight,
            mean_lfy: self.mean_l,
            var_lfy: self.m_ll / self.weight,
            cov_y_lfy: self.m_yl / self.weight,
        }
    }
}

fn pmf_cumulants(params: &CmpParams, trunc: &Truncation) -> Result<Cumulants> {
    let mut acc = MomentAccumulator::default();
    sweep(params, trunc, |s, lf, w| acc.push(s as f64, lf, w))?;
    let mut c = acc.finish();
    if params.is_geometric() {
        let lambda = params.lambda;
        c.mean_y = lambda / (1.0 - lambda);
        c.var_y = lambda / (1.0 - lambda).powi(2);
    }
    Ok(c)
}

/// Cumulants of `Y` and `ln Y!` under the requested policy.
pub fn cumulants(params: &CmpParams, policy: &CumulantPolicy) -> Result<Cumulants> {
    let use_asymptotic = match policy.method {
        CumulantMethod::Pmf => false,
        CumulantMethod::Asymptotic => {
            require_asymptotic_region(params)?;
            true
        }
        CumulantMethod::Auto => params.in_asymptotic_region(),
    };
    let mut c = pmf_cumulants(params, &policy.truncation)?;
    if use_asymptotic {
        let (mean, var) = Expansion::new(params).mean_var();
        c.mean_y = mean;
        c.var_y = var;
    }
    Ok(c)
}

/// Cumulants together with the exact series `ln ζ`, from a single sweep.
pub fn cumulants_with_log_z(params: &CmpParams, policy: &CumulantPolicy) -> Result<(Cumulants, f64)> {
    let use_asymptotic = match policy.method {
        CumulantMethod::Pmf => false,
        CumulantMethod::Asymptotic => {
            require_asymptotic_region(params)?;
            true
        }
        CumulantMethod::Auto => params.in_asymptotic_region(),
    };
    let mut acc = MomentAccumulator::default();
    let (log_peak, sum, _) = sweep(params, &policy.truncation, |s, lf, w| acc.push(s as f64, lf, w))?;
    let mut c = acc.finish();
    let log_z = if params.is_geometric() {
        let lambda = params.lambda;
        c.mean_y = lambda / (1.0 - lambda);
        c.var_y = lambda / (1.0 - lambda).powi(2);
        -(1.0 - lambda).ln()
    } else {
        log_peak + sum.ln()
    };
    if use_asymptotic {
        let (mean, var) = Expansion::new(params).mean_var();
        c.mean_y = mean;
        c.var_y = var;
    }
    Ok((c, log_z))
}

/// `ln P(Y = y)` with the exact series normalization.
pub fn log_pmf(y: u64, params: &CmpParams) -> Result<f64> {
    log_pmf_with(y, params, &Truncation::default())
}

pub fn log_pmf_with(y: u64, params: &CmpParams, trunc: &Truncation) -> Result<f64> {
    let lz = log_z(params, trunc)?;
    Ok(y as f64 * params.lambda.ln() - params.nu * log_factorial(y) - lz)
}

/// `Σ_i ln P(y_i; λ_i, ν_i)`.
pub fn log_likelihood(y: &[u64], lambda: &[f64], nu: &[f64]) -> Result<f64> {
    if y.len() != lambda.len() || y.len() != nu.len() {
        return Err(CmpError::LengthMismatch(format!(
            "y has {} entries, λ {}, ν {}",
            y.len(),
            lambda.len(),
            nu.len()
        )));
    }
    let trunc = Truncation::default();
    y.iter()
        .zip(lambda.iter().zip(nu))
        .map(|(&yi, (&l, &v))| log_pmf_with(yi, &CmpParams::new(l, v)?, &trunc))
        .sum()
}

/// Inverse-CDF sampler over the truncated support of one parameter pair.
#[derive(Debug, Clone)]
pub struct Sampler {
    cdf: Vec<f64>,
}

impl Sampler {
    pub fn new(params: &CmpParams) -> Result<Self> {
        let mut cdf = Vec::new();
        let mut acc = 0.0;
        sweep(params, &Truncation::default(), |_, _, w| {
            acc += w;
            cdf.push(acc);
        })?;
        let total = acc;
        cdf.iter_mut().for_each(|c| *c /= total);
        Ok(Self { cdf })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let u: f64 = rng.random();
        let idx = self.cdf.partition_point(|&c| c <= u);
        idx.min(self.cdf.len() - 1) as u64
    }
}

/// One draw from `CMP(λ, ν)` using the caller's generator.
pub fn sample_one<R: Rng + ?Sized>(params: &CmpParams, rng: &mut R) -> Result<u64> {
    Ok(Sampler::new(params)?.draw(rng))
}

/// `n` independent draws, deterministic in `seed`.
pub fn sample(params: &CmpParams, n: usize, seed: u64) -> Result<Vec<u64>> {
    if n == 0 {
        return Err(CmpError::InvalidParams("sample size must be at least 1".into()));
    }
    let sampler = Sampler::new(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| sampler.draw(&mut rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn p(lambda: f64, nu: f64) -> CmpParams {
        CmpParams::new(lambda, nu).unwrap()
    }

    /// Independent oracle: plain summation with 10× the terms and no early stop.
    fn brute_log_z(lambda: f64, nu: f64, terms: usize) -> f64 {
        let logs: Vec<f64> = (0..terms)
            .map(|s| s as f64 * lambda.ln() - nu * statrs::function::gamma::ln_gamma(s as f64 + 1.0))
            .collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
    }

    fn brute_cumulants(lambda: f64, nu: f64, terms: usize) -> Cumulants {
        let lz = brute_log_z(lambda, nu, terms);
        let lg = |s: usize| statrs::function::gamma::ln_gamma(s as f64 + 1.0);
        let pr: Vec<f64> = (0..terms)
            .map(|s| (s as f64 * lambda.ln() - nu * lg(s) - lz).exp())
            .collect();
        let ey: f64 = (0..terms).map(|s| pr[s] * s as f64).sum();
        let el: f64 = (0..terms).map(|s| pr[s] * lg(s)).sum();
        let vy: f64 = (0..terms).map(|s| pr[s] * (s as f64 - ey).powi(2)).sum();
        let vl: f64 = (0..terms).map(|s| pr[s] * (lg(s) - el).powi(2)).sum();
        let c: f64 = (0..terms).map(|s| pr[s] * (s as f64 - ey) * (lg(s) - el)).sum();
        Cumulants {
            mean_y: ey,
            var_y: vy,
            mean_lfy: el,
            var_lfy: vl,
            cov_y_lfy: c,
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(CmpParams::new(-1.0, 1.0).is_err());
        assert!(CmpParams::new(1.0, f64::NAN).is_err());
        assert!(CmpParams::new(f64::INFINITY, 1.0).is_err());
        assert!(CmpParams::new(0.5, 1e-12).is_err());
        assert!(CmpParams::new(1.5, 0.0).is_err());
        assert!(CmpParams::new(0.5, 0.0).is_ok());
    }

    #[test]
    fn log_z_poisson_is_lambda() {
        let z = log_z_truncated(&p(2.0, 1.0), 1e-6).unwrap();
        assert!((z.log_z - 2.0).abs() < 1e-6);
        assert_eq!(z.method, ZMethod::TruncatedSeries);
        assert!(z.terms_used >= 22);
    }

    #[test]
    fn log_z_geometric() {
        let z = log_z_truncated(&p(0.5, 0.0), 1e-6).unwrap();
        assert_relative_eq!(z.log_z, 2f64.ln(), epsilon = 1e-15);
        assert_eq!(z.method, ZMethod::Geometric);
    }

    #[test]
    fn log_z_matches_brute_force() {
        let z = log_z_truncated(&p(2.0, 0.5), 1e-10).unwrap();
        let oracle = brute_log_z(2.0, 0.5, 10 * z.terms_used);
        assert!((z.log_z - oracle).abs() < 1e-10, "{} vs {}", z.log_z, oracle);
    }

    #[test]
    fn overflow_cap() {
        let err = log_z_truncated(&p(100.0, 0.2), 1e-6).unwrap_err();
        assert!(matches!(err, CmpError::Overflow { .. }));
        let tight = Truncation {
            eps: 1e-6,
            count_cap: 10.0,
        };
        assert!(log_z_truncated_with(&p(20.0, 1.0), &tight).is_err());
    }

    #[test]
    fn asymptotic_poisson_exact() {
        let z = log_z_asymptotic(&p(10.0, 1.0)).unwrap();
        assert_relative_eq!(z.log_z, 10.0, epsilon = 1e-12);
        assert_eq!(z.method, ZMethod::Asymptotic);
    }

    #[test]
    fn asymptotic_outside_region() {
        assert!(matches!(log_z_asymptotic(&p(1.5, 0.5)), Err(CmpError::Domain { .. })));
        assert!(matches!(log_z_asymptotic(&p(3.0, 1.5)), Err(CmpError::Domain { .. })));
        assert!(cumulants(&p(3.0, 1.5), &CumulantPolicy::asymptotic()).is_err());
    }

    // Measured gaps of the three-term expansion against the series:
    // 5.22e-3 at (5, 0.8) and 4.31e-2 at (2, 0.5).
    #[test]
    fn asymptotic_gap_vs_truncated() {
        let gap = |l: f64, n: f64| {
            let a = log_z_asymptotic(&p(l, n)).unwrap().log_z;
            let t = log_z_truncated(&p(l, n), 1e-12).unwrap().log_z;
            (a - t).abs()
        };
        let g1 = gap(5.0, 0.8);
        assert!((g1 - 5.22e-3).abs() < 1e-4, "gap {g1}");
        let g2 = gap(2.0, 0.5);
        assert!((g2 - 4.31e-2).abs() < 1e-3, "gap {g2}");
        // Error shrinks as α = λ^(1/ν) grows.
        let g3 = gap(10.0, 0.5);
        let g4 = gap(10.0, 0.3);
        assert!(g3 < 2e-3, "gap {g3}");
        assert!((g4 - 2.17e-4).abs() < 1e-5, "gap {g4}");
        assert!(g4 < g3);
    }

    #[test]
    fn asymptotic_moments_are_derivatives_of_log_z() {
        // Central finite differences of the expansion's own ln ζ.
        for &(l, n) in &[(3.0, 0.5), (5.0, 0.8), (8.0, 0.3), (2.5, 0.95)] {
            let h = 1e-4;
            let lz = |ll: f64, nn: f64| Expansion::new(&p(ll.exp(), nn)).log_z();
            let ll = f64::ln(l);
            let (m, v) = Expansion::new(&p(l, n)).mean_var();
            let fd_m = (lz(ll + h, n) - lz(ll - h, n)) / (2.0 * h);
            let fd_v = (lz(ll + h, n) - 2.0 * lz(ll, n) + lz(ll - h, n)) / (h * h);
            assert_relative_eq!(m, fd_m, max_relative = 1e-7);
            assert_relative_eq!(v, fd_v, max_relative = 1e-5);
            let (el, vl) = Expansion::new(&p(l, n)).log_factorial_mean_var();
            // Richardson step: the ν derivatives have large third-order terms.
            let cd = |h: f64| -(lz(ll, n + h) - lz(ll, n - h)) / (2.0 * h);
            let fd_el = (4.0 * cd(h / 2.0) - cd(h)) / 3.0;
            let fd_vl = (lz(ll, n + h) - 2.0 * lz(ll, n) + lz(ll, n - h)) / (h * h);
            assert_relative_eq!(el, fd_el, max_relative = 1e-7);
            assert_relative_eq!(vl, fd_vl, max_relative = 1e-5);
        }
    }

    #[test]
    fn asymptotic_log_factorial_forms_miss_oracle_near_lambda_two() {
        // Justifies the pmf fallback for the ln Y! moments.
        let (el, _) = asymptotic_log_factorial_moments(&p(2.0, 1.0)).unwrap();
        let exact = cumulants(&p(2.0, 1.0), &CumulantPolicy::pmf()).unwrap();
        assert!(((el - exact.mean_lfy) / exact.mean_lfy).abs() > 1e-2);
    }

    #[test]
    fn combined_sweep_matches_separate_calls() {
        for &(l, n) in &[(0.5, 0.0), (2.0, 0.5), (3.0, 1.0), (1.5, 2.5)] {
            let params = p(l, n);
            let (c, lz) = cumulants_with_log_z(&params, &CumulantPolicy::auto()).unwrap();
            assert_eq!(c, cumulants(&params, &CumulantPolicy::auto()).unwrap());
            assert_relative_eq!(lz, log_z(&params, &Truncation::default()).unwrap(), max_relative = 1e-13);
        }
    }

    #[test]
    fn poisson_cumulants() {
        let c = cumulants(&p(3.0, 1.0), &CumulantPolicy::pmf()).unwrap();
        assert!((c.mean_y - 3.0).abs() < 1e-10);
        assert!((c.var_y - 3.0).abs() < 1e-10);
        let oracle = brute_cumulants(3.0, 1.0, 200);
        assert_relative_eq!(c.cov_y_lfy, oracle.cov_y_lfy, max_relative = 1e-9);
        assert_relative_eq!(c.mean_lfy, oracle.mean_lfy, max_relative = 1e-9);
        assert_relative_eq!(c.var_lfy, oracle.var_lfy, max_relative = 1e-9);
    }

    #[test]
    fn geometric_cumulants() {
        let c = cumulants(&p(0.5, 0.0), &CumulantPolicy::auto()).unwrap();
        assert!((c.mean_y - 1.0).abs() < 1e-12);
        assert!((c.var_y - 2.0).abs() < 1e-12);
        let oracle = brute_cumulants(0.5, 0.0, 200);
        assert_relative_eq!(c.mean_lfy, oracle.mean_lfy, max_relative = 1e-9);
    }

    #[test]
    fn auto_cumulants_close_to_pmf() {
        let a = cumulants(&p(5.0, 0.8), &CumulantPolicy::auto()).unwrap();
        let e = brute_cumulants(5.0, 0.8, 400);
        assert_relative_eq!(a.mean_y, e.mean_y, max_relative = 1e-3);
        assert_relative_eq!(a.var_y, e.var_y, max_relative = 1e-3);
        assert_relative_eq!(a.mean_lfy, e.mean_lfy, max_relative = 1e-3);
        assert_relative_eq!(a.var_lfy, e.var_lfy, max_relative = 1e-3);
    }

    #[test]
    fn pmf_cumulants_match_brute_force() {
        for &(l, n) in &[(0.5, 0.3), (2.0, 0.5), (7.0, 2.0), (1.0, 4.0)] {
            let c = cumulants(&p(l, n), &CumulantPolicy::pmf()).unwrap();
            let e = brute_cumulants(l, n, 1500);
            assert_relative_eq!(c.mean_y, e.mean_y, max_relative = 1e-9);
            assert_relative_eq!(c.var_y, e.var_y, max_relative = 1e-8);
            assert_relative_eq!(c.mean_lfy, e.mean_lfy, max_relative = 1e-9);
            assert_relative_eq!(c.var_lfy, e.var_lfy, max_relative = 1e-8);
            assert_relative_eq!(c.cov_y_lfy, e.cov_y_lfy, max_relative = 1e-8);
        }
    }

    #[test]
    fn log_factorial_values() {
        assert_eq!(log_factorial(0), 0.0);
        assert_eq!(log_factorial(1), 0.0);
        assert_relative_eq!(log_factorial(5), 120f64.ln(), epsilon = 1e-12);
        let lg = statrs::function::gamma::ln_gamma(301.0);
        assert_relative_eq!(log_factorial(300), lg, max_relative = 1e-8);
    }

    #[test]
    fn log_factorial_continuous_at_threshold() {
        let recursive = log_factorial(253) + 254f64.ln();
        assert!((recursive - stirling_log_factorial(254.0)).abs() < 1e-8);
        assert!((recursive - log_factorial(254)).abs() < 1e-8);
    }

    #[test]
    fn log_pmf_values() {
        assert_relative_eq!(log_pmf(0, &p(2.0, 1.0)).unwrap(), -2.0, epsilon = 1e-12);
        assert_relative_eq!(log_pmf(1, &p(0.5, 0.0)).unwrap(), 0.25f64.ln(), epsilon = 1e-12);
        let lz = brute_log_z(3.0, 1.7, 200);
        let expect = 4.0 * 3f64.ln() - 1.7 * 24f64.ln() - lz;
        assert_relative_eq!(log_pmf(4, &p(3.0, 1.7)).unwrap(), expect, epsilon = 1e-11);
    }

    #[test]
    fn normalization_grid() {
        for &l in &[0.5, 1.0, 2.0, 5.0, 10.0] {
            for &n in &[0.3, 0.5, 1.0, 2.0, 4.0] {
                let pp = p(l, n);
                let z = log_z_truncated(&pp, DEFAULT_EPS).unwrap();
                let total: f64 = (0..z.terms_used as u64)
                    .map(|y| (y as f64 * l.ln() - n * log_factorial(y) - z.log_z).exp())
                    .sum();
                assert_relative_eq!(log_pmf(3, &pp).unwrap(), 3.0 * l.ln() - n * log_factorial(3) - z.log_z, epsilon = 1e-12);
                assert!((total - 1.0).abs() < 1e-6, "λ={l} ν={n}: {total}");
            }
        }
    }

    #[test]
    fn dispersion_direction() {
        for &l in &[1.0, 2.0, 5.0] {
            let over = cumulants(&p(l, 0.5), &CumulantPolicy::pmf()).unwrap();
            assert!(over.var_y / over.mean_y > 1.0);
            let under = cumulants(&p(l, 2.0), &CumulantPolicy::pmf()).unwrap();
            assert!(under.var_y / under.mean_y < 1.0);
        }
    }

    #[test]
    fn log_likelihood_additive() {
        assert_relative_eq!(log_likelihood(&[0], &[2.0], &[1.0]).unwrap(), -2.0, epsilon = 1e-12);
        let y = vec![3u64; 7];
        let ll = log_likelihood(&y, &[1.5; 7], &[0.7; 7]).unwrap();
        let one = log_likelihood(&[3], &[1.5], &[0.7]).unwrap();
        assert_relative_eq!(ll, 7.0 * one, max_relative = 1e-12);
        assert!(log_likelihood(&[1, 2], &[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn log_likelihood_vs_per_term_oracle() {
        let y = [0u64, 4, 2, 9, 1];
        let lam: [f64; 5] = [0.7, 3.1, 1.9, 6.5, 1.2];
        let nu: [f64; 5] = [0.4, 1.3, 0.9, 1.0, 2.2];
        let oracle: f64 = (0..5)
            .map(|i| {
                y[i] as f64 * lam[i].ln()
                    - nu[i] * statrs::function::gamma::ln_gamma(y[i] as f64 + 1.0)
                    - brute_log_z(lam[i], nu[i], 400)
            })
            .sum();
        assert_relative_eq!(log_likelihood(&y, &lam, &nu).unwrap(), oracle, max_relative = 1e-10);
    }

    #[test]
    fn sampling_moments() {
        let n = 100_000;
        let xs = sample(&p(4.0, 1.0), n, 7).unwrap();
        let mean = xs.iter().sum::<u64>() as f64 / n as f64;
        assert!((mean - 4.0).abs() < 3.0 * (4.0 / n as f64).sqrt(), "mean {mean}");

        let xs = sample(&p(4.0, 2.0), n, 11).unwrap();
        let m = xs.iter().sum::<u64>() as f64 / n as f64;
        let v = xs.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!(v < m);

        let xs = sample(&p(0.5, 0.0), n, 3).unwrap();
        let mean = xs.iter().sum::<u64>() as f64 / n as f64;
        assert!((mean - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt(), "mean {mean}");

        assert_eq!(sample(&p(2.0, 0.7), 50, 99).unwrap(), sample(&p(2.0, 0.7), 50, 99).unwrap());
        assert!(sample(&p(2.0, 0.7), 0, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cauchy_schwarz_and_positive_variances(l in 0.05f64..20.0, n in 0.2f64..5.0) {
            let res = cumulants(&p(l, n), &CumulantPolicy::pmf());
            if l.ln() / n > DEFAULT_EXPECTED_COUNT_CAP.ln() {
                prop_assert!(matches!(res, Err(CmpError::Overflow { .. })), "expected overflow");
                return Ok(());
            }
            let c = res.unwrap();
            prop_assert!(c.var_y > 0.0);
            prop_assert!(c.var_lfy > 0.0);
            prop_assert!(c.cov_y_lfy.powi(2) <= c.var_y * c.var_lfy * (1.0 + 1e-9));
        }

        #[test]
        fn poisson_collapse(l in 0.1f64..30.0) {
            let c = cumulants(&p(l, 1.0), &CumulantPolicy::pmf()).unwrap();
            prop_assert!((c.mean_y - l).abs() < 1e-8);
            prop_assert!((c.var_y - l).abs() < 1e-8);
        }
    }
}
