//! Weighted cubic smoothing splines.
//!
//! The fit minimizes `Σ wᵢ (tᵢ − g(xᵢ))² + μ ∫ g''²` over natural cubic
//! splines with knots at the distinct `x` values. With `Q` and `R` the usual
//! tridiagonal band matrices, the second derivatives `γ` at the interior
//! knots solve the pentadiagonal system `(R + μ QᵀW⁻¹Q) γ = Qᵀ ȳ` and the
//! knot values are `g = ȳ − μ W⁻¹ Q γ`. Everything is `O(m)` in the number of
//! knots, including the smoother diagonal (via the band of `B⁻¹`).

use serde::{Deserialize, Serialize};

use crate::error::{CmpError, Result};

/// Smallest number of distinct positively weighted `x` values accepted.
pub const MIN_DISTINCT_X: usize = 4;

/// Default effective degrees of freedom for a smooth term.
pub const DEFAULT_DF: f64 = 4.0;

/// Achieved trace must land this close to the requested df.
pub const DF_TOLERANCE: f64 = 1e-3;

/// Roughness penalty actually used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "mu")]
pub enum Penalty {
    /// `μ = 0`: the spline interpolates the knot means.
    Interpolating,
    Finite(f64),
    /// `μ → ∞`: weighted straight-line fit.
    Linear,
}

/// Banded `LDLᵀ` of the symmetric pentadiagonal `B`.
#[derive(Debug, Clone)]
struct BandLdl {
    d: Vec<f64>,
    /// `L[i+1, i]`
    l1: Vec<f64>,
    /// `L[i+2, i]`
    l2: Vec<f64>,
}

impl BandLdl {
    fn factor(b0: &[f64], b1: &[f64], b2: &[f64]) -> Result<Self> {
        let n = b0.len();
        let mut d = vec![0.0; n];
        let mut l1 = vec![0.0; n];
        let mut l2 = vec![0.0; n];
        for i in 0..n {
            let mut di = b0[i];
            if i >= 1 {
                di -= l1[i - 1] * l1[i - 1] * d[i - 1];
            }
            if i >= 2 {
                di -= l2[i - 2] * l2[i - 2] * d[i - 2];
            }
            if !(di > 0.0) || !di.is_finite() {
                return Err(CmpError::Data(format!("smoothing system lost positive definiteness at row {i}")));
            }
            d[i] = di;
            if i + 1 < n {
                let mut v = b1[i];
                if i >= 1 {
                    v -= l2[i - 1] * l1[i - 1] * d[i - 1];
                }
                l1[i] = v / di;
            }
            if i + 2 < n {
                l2[i] = b2[i] / di;
            }
        }
        Ok(Self { d, l1, l2 })
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.d.len();
        let mut z = rhs.to_vec();
        for i in 0..n {
            if i >= 1 {
                z[i] -= self.l1[i - 1] * z[i - 1];
            }
            if i >= 2 {
                z[i] -= self.l2[i - 2] * z[i - 2];
            }
        }
        for i in 0..n {
            z[i] /= self.d[i];
        }
        for i in (0..n).rev() {
            if i + 1 < n {
                z[i] -= self.l1[i] * z[i + 1];
            }
            if i + 2 < n {
                z[i] -= self.l2[i] * z[i + 2];
            }
        }
        z
    }

    /// Entries of `B⁻¹` on the main diagonal and the first two
    /// superdiagonals (Hutchinson and de Hoog recursion).
    fn inverse_band(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.d.len();
        let mut s0 = vec![0.0; n];
        let mut s1 = vec![0.0; n];
        let mut s2 = vec![0.0; n];
        for i in (0..n).rev() {
            let a = if i + 1 < n { self.l1[i] } else { 0.0 };
            let b = if i + 2 < n { self.l2[i] } else { 0.0 };
            let s11 = if i + 1 < n { s0[i + 1] } else { 0.0 };
            let s12 = if i + 2 < n { s1[i + 1] } else { 0.0 };
            let s22 = if i + 2 < n { s0[i + 2] } else { 0.0 };
            s2[i] = -a * s12 - b * s22;
            s1[i] = -a * s11 - b * s12;
            s0[i] = 1.0 / self.d[i] - a * s1[i] - b * s2[i];
        }
        (s0, s1, s2)
    }
}

/// A smoother for fixed knots, weights and penalty; reusable across responses.
#[derive(Debug, Clone)]
pub struct SplineSmoother {
    knots: Vec<f64>,
    knot_weights: Vec<f64>,
    /// Knot index of each observation; `None` for zero-weight observations.
    obs_knot: Vec<Option<usize>>,
    obs_weights: Vec<f64>,
    h: Vec<f64>,
    penalty: Penalty,
    factor: Option<BandLdl>,
    knot_diag: Vec<f64>,
}

impl SplineSmoother {
    /// Smoother whose trace matches `df` within [`DF_TOLERANCE`].
    /// `df` at or above the knot count interpolates; `df ≤ 2` fits a line.
    pub fn with_df(x: &[f64], w: &[f64], df: f64) -> Result<Self> {
        if !(df.is_finite() && df > 0.0) {
            return Err(CmpError::InvalidParams(format!("df must be positive, got {df}")));
        }
        let layout = Layout::new(x, w)?;
        let m = layout.knots.len() as f64;
        if df >= m - DF_TOLERANCE {
            return layout.build(Penalty::Interpolating);
        }
        if df <= 2.0 + DF_TOLERANCE {
            return layout.build(Penalty::Linear);
        }
        // Trace falls monotonically from m (μ = 0) to 2 (μ → ∞); bisect on ln μ.
        let scale = layout.penalty_scale();
        let (mut lo, mut hi) = (scale.ln() - 30.0, scale.ln() + 30.0);
        let mut best = layout.build(Penalty::Linear)?;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            // Extreme μ can swamp R in floating point; that side is too smooth anyway.
            let Ok(cand) = layout.build(Penalty::Finite(mid.exp())) else {
                hi = mid;
                continue;
            };
            let tr = cand.trace();
            if (tr - df).abs() < (best.trace() - df).abs() {
                best = cand;
            }
            if (tr - df).abs() < DF_TOLERANCE * 0.1 {
                break;
            }
            if tr > df {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(best)
    }

    pub fn with_penalty(x: &[f64], w: &[f64], mu: f64) -> Result<Self> {
        if !(mu >= 0.0) {
            return Err(CmpError::InvalidParams(format!("penalty must be nonnegative, got {mu}")));
        }
        let layout = Layout::new(x, w)?;
        if mu == 0.0 {
            layout.build(Penalty::Interpolating)
        } else if mu.is_infinite() {
            layout.build(Penalty::Linear)
        } else {
            layout.build(Penalty::Finite(mu))
        }
    }

    pub fn with_mode(x: &[f64], w: &[f64], penalty: Penalty) -> Result<Self> {
        match penalty {
            Penalty::Interpolating => Self::with_penalty(x, w, 0.0),
            Penalty::Finite(mu) => Self::with_penalty(x, w, mu),
            Penalty::Linear => Self::with_penalty(x, w, f64::INFINITY),
        }
    }

    pub fn penalty(&self) -> Penalty {
        self.penalty
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// `μ` as a finite multiplier of [`roughness`]; zero in the interpolating
    /// and linear limits, where fitted curves carry no penalized part.
    pub fn penalty_weight(&self) -> f64 {
        match self.penalty {
            Penalty::Finite(mu) => mu,
            Penalty::Interpolating | Penalty::Linear => 0.0,
        }
    }

    /// Pooled weight at each knot.
    pub fn knot_weights(&self) -> &[f64] {
        &self.knot_weights
    }

    /// Diagonal of the knot-level smoother matrix.
    pub fn knot_diag(&self) -> &[f64] {
        &self.knot_diag
    }

    /// Effective degrees of freedom `tr(S)`.
    pub fn trace(&self) -> f64 {
        self.knot_diag.iter().sum()
    }

    /// Diagonal of the observation-level smoother matrix. Tied observations
    /// share their knot's leverage in proportion to their weights.
    pub fn operator_diag(&self) -> Vec<f64> {
        self.obs_knot
            .iter()
            .zip(&self.obs_weights)
            .map(|(k, &w)| match k {
                Some(k) => self.knot_diag[*k] * w / self.knot_weights[*k],
                None => 0.0,
            })
            .collect()
    }

    /// Knot-level fit; `fitted` holds NaN for zero-weight observations.
    fn smooth_knots(&self, t: &[f64]) -> Result<RawFit> {
        if t.len() != self.obs_knot.len() {
            return Err(CmpError::LengthMismatch(format!(
                "response has {} entries, smoother was built for {}",
                t.len(),
                self.obs_knot.len()
            )));
        }
        let m = self.knots.len();
        let mut ybar = vec![0.0; m];
        for (i, k) in self.obs_knot.iter().enumerate() {
            if let Some(k) = k {
                ybar[*k] += self.obs_weights[i] * t[i];
            }
        }
        for k in 0..m {
            ybar[k] /= self.knot_weights[k];
        }
        let (g, gamma) = match self.penalty {
            Penalty::Interpolating => {
                let gamma = interpolant_curvature(&self.h, &ybar);
                (ybar, gamma)
            }
            Penalty::Finite(mu) => {
                let gamma = self.factor.as_ref().expect("factor exists for finite μ").solve(&qt_mul(&self.h, &ybar));
                let qg = q_mul(&self.h, &gamma);
                let g: Vec<f64> = (0..m).map(|k| ybar[k] - mu * qg[k] / self.knot_weights[k]).collect();
                // The penalized solve loses digits when knots crowd together; take the
                // curvature of the returned values so the pair describes one spline exactly.
                let gamma = interpolant_curvature(&self.h, &g);
                (g, gamma)
            }
            Penalty::Linear => {
                let (a, b) = weighted_line(&self.knots, &self.knot_weights, &ybar);
                (self.knots.iter().map(|x| a + b * x).collect(), vec![0.0; m - 2])
            }
        };
        let fitted = self
            .obs_knot
            .iter()
            .map(|k| k.map_or(f64::NAN, |k| g[k]))
            .collect();
        Ok(RawFit {
            knot_values: g,
            second_derivs: gamma,
            fitted,
        })
    }
}

/// A fitted curve in natural-spline form plus its values at the observations.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFit {
    pub knot_values: Vec<f64>,
    /// Second derivatives at the interior knots (zero at the ends).
    pub second_derivs: Vec<f64>,
    pub fitted: Vec<f64>,
}

impl RawFit {
    pub fn zeros(knots: usize, n: usize) -> Self {
        Self {
            knot_values: vec![0.0; knots],
            second_derivs: vec![0.0; knots.saturating_sub(2)],
            fitted: vec![0.0; n],
        }
    }

    /// Shifts the curve so the observation values average to zero.
    pub fn centered(mut self) -> Self {
        let n = self.fitted.len().max(1) as f64;
        let c = self.fitted.iter().sum::<f64>() / n;
        self.fitted.iter_mut().for_each(|v| *v -= c);
        self.knot_values.iter_mut().for_each(|v| *v -= c);
        self
    }

    /// `self + s·(other − self)`; curves on the same knots combine linearly.
    pub fn lerp(&self, other: &Self, s: f64) -> Self {
        let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u + s * (v - u)).collect();
        Self {
            knot_values: mix(&self.knot_values, &other.knot_values),
            second_derivs: mix(&self.second_derivs, &other.second_derivs),
            fitted: mix(&self.fitted, &other.fitted),
        }
    }
}

/// Sorted distinct knots with pooled weights.
struct Layout {
    knots: Vec<f64>,
    knot_weights: Vec<f64>,
    obs_knot: Vec<Option<usize>>,
    obs_weights: Vec<f64>,
    h: Vec<f64>,
}

impl Layout {
    fn new(x: &[f64], w: &[f64]) -> Result<Self> {
        if x.len() != w.len() {
            return Err(CmpError::LengthMismatch(format!("x has {} entries, w {}", x.len(), w.len())));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(CmpError::InvalidParams(format!("x[{i}] is not finite")));
        }
        if let Some(i) = w.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(CmpError::InvalidParams(format!("weight {i} is {}", w[i])));
        }
        let mut order: Vec<usize> = (0..x.len()).filter(|&i| w[i] > 0.0).collect();
        order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
        let range = match (order.first(), order.last()) {
            (Some(&a), Some(&b)) => x[b] - x[a],
            _ => 0.0,
        };
        // Values closer than this are pooled into one knot; tighter gaps make
        // the banded system numerically indefinite.
        let tie = 1e-6 * range.max(f64::MIN_POSITIVE);
        let mut knots: Vec<f64> = Vec::new();
        let mut knot_weights: Vec<f64> = Vec::new();
        let mut obs_knot = vec![None; x.len()];
        for &i in &order {
            match knots.last() {
                Some(&last) if x[i] - last <= tie => {
                    *knot_weights.last_mut().unwrap() += w[i];
                }
                _ => {
                    knots.push(x[i]);
                    knot_weights.push(w[i]);
                }
            }
            obs_knot[i] = Some(knots.len() - 1);
        }
        if knots.len() < MIN_DISTINCT_X {
            return Err(CmpError::InsufficientDistinctX(knots.len()));
        }
        let h = knots.windows(2).map(|p| p[1] - p[0]).collect();
        Ok(Self {
            knots,
            knot_weights,
            obs_knot,
            obs_weights: w.to_vec(),
            h,
        })
    }

    /// A `μ` at which roughness and fidelity terms are of comparable size.
    fn penalty_scale(&self) -> f64 {
        let range = self.knots[self.knots.len() - 1] - self.knots[0];
        let mean_w = self.knot_weights.iter().sum::<f64>() / self.knots.len() as f64;
        mean_w * range.powi(3) / self.knots.len() as f64
    }

    fn build(&self, penalty: Penalty) -> Result<SplineSmoother> {
        let m = self.knots.len();
        let (factor, knot_diag) = match penalty {
            Penalty::Interpolating => (None, vec![1.0; m]),
            Penalty::Linear => (None, line_leverage(&self.knots, &self.knot_weights)),
            Penalty::Finite(mu) => {
                let (b0, b1, b2) = penalized_bands(&self.h, &self.knot_weights, mu);
                let f = BandLdl::factor(&b0, &b1, &b2)?;
                let diag = smoother_diag(&self.h, &self.knot_weights, mu, &f);
                (Some(f), diag)
            }
        };
        Ok(SplineSmoother {
            knots: self.knots.clone(),
            knot_weights: self.knot_weights.clone(),
            obs_knot: self.obs_knot.clone(),
            obs_weights: self.obs_weights.clone(),
            h: self.h.clone(),
            penalty,
            factor,
            knot_diag,
        })
    }
}

/// Nonzero entries of column `j` of `Q` (interior knot `j+1`): rows `j, j+1, j+2`.
/// Interior second derivatives of the natural spline through `g`.
fn interpolant_curvature(h: &[f64], g: &[f64]) -> Vec<f64> {
    let r = r_bands(h);
    let f = BandLdl::factor(&r.0, &r.1, &vec![0.0; g.len() - 2]).expect("R is positive definite");
    f.solve(&qt_mul(h, g))
}

fn q_col(h: &[f64], j: usize) -> [f64; 3] {
    [1.0 / h[j], -1.0 / h[j] - 1.0 / h[j + 1], 1.0 / h[j + 1]]
}

fn qt_mul(h: &[f64], v: &[f64]) -> Vec<f64> {
    (0..h.len() - 1)
        .map(|j| {
            let q = q_col(h, j);
            q[0] * v[j] + q[1] * v[j + 1] + q[2] * v[j + 2]
        })
        .collect()
}

fn q_mul(h: &[f64], g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; h.len() + 1];
    for (j, gj) in g.iter().enumerate() {
        let q = q_col(h, j);
        out[j] += q[0] * gj;
        out[j + 1] += q[1] * gj;
        out[j + 2] += q[2] * gj;
    }
    out
}

/// Diagonal and first superdiagonal of `R`.
fn r_bands(h: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = h.len() - 1;
    let d = (0..n).map(|j| (h[j] + h[j + 1]) / 3.0).collect();
    let e = (0..n).map(|j| if j + 1 < n { h[j + 1] / 6.0 } else { 0.0 }).collect();
    (d, e)
}

/// Bands of `B = R + μ QᵀW⁻¹Q`.
fn penalized_bands(h: &[f64], wk: &[f64], mu: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = h.len() - 1;
    let (r0, r1) = r_bands(h);
    let mut b0 = r0;
    let mut b1 = r1;
    let mut b2 = vec![0.0; n];
    for j in 0..n {
        let a = q_col(h, j);
        b0[j] += mu * (a[0] * a[0] / wk[j] + a[1] * a[1] / wk[j + 1] + a[2] * a[2] / wk[j + 2]);
        if j + 1 < n {
            let b = q_col(h, j + 1);
            // Columns j and j+1 overlap on rows j+1 and j+2.
            b1[j] += mu * (a[1] * b[0] / wk[j + 1] + a[2] * b[1] / wk[j + 2]);
        }
        if j + 2 < n {
            let c = q_col(h, j + 2);
            b2[j] += mu * a[2] * c[0] / wk[j + 2];
        }
    }
    (b0, b1, b2)
}

/// `S_kk = 1 − (μ/W_k) (Q B⁻¹ Qᵀ)_kk` using only the band of `B⁻¹`.
fn smoother_diag(h: &[f64], wk: &[f64], mu: f64, f: &BandLdl) -> Vec<f64> {
    let n = h.len() - 1;
    let m = h.len() + 1;
    let (s0, s1, s2) = f.inverse_band();
    let sigma = |a: usize, b: usize| {
        let (i, j) = if a <= b { (a, b) } else { (b, a) };
        match j - i {
            0 => s0[i],
            1 => s1[i],
            2 => s2[i],
            _ => unreachable!("row k of Q spans at most three adjacent columns"),
        }
    };
    (0..m)
        .map(|k| {
            // Columns j with Q[k, j] ≠ 0 are k-2, k-1, k; the row offset inside column j is k - j.
            let cols: Vec<(usize, f64)> = (k.saturating_sub(2)..=k)
                .filter(|&j| j < n)
                .map(|j| (j, q_col(h, j)[k - j]))
                .collect();
            let mut acc = 0.0;
            for &(a, qa) in &cols {
                for &(b, qb) in &cols {
                    acc += qa * qb * sigma(a, b);
                }
            }
            1.0 - mu * acc / wk[k]
        })
        .collect()
}

fn weighted_line(x: &[f64], w: &[f64], y: &[f64]) -> (f64, f64) {
    let sw: f64 = w.iter().sum();
    let xm = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let ym = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(a, b)| b * (a - xm).powi(2)).sum();
    let sxy: f64 = x.iter().zip(w).zip(y).map(|((a, b), c)| b * (a - xm) * (c - ym)).sum();
    let slope = sxy / sxx;
    (ym - slope * xm, slope)
}

fn line_leverage(x: &[f64], w: &[f64]) -> Vec<f64> {
    let sw: f64 = w.iter().sum();
    let xm = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(a, b)| b * (a - xm).powi(2)).sum();
    x.iter().zip(w).map(|(a, b)| b * (1.0 / sw + (a - xm).powi(2) / sxx)).collect()
}

/// `∫ g''²` of the natural cubic spline with interior second derivatives `gamma`.
pub fn roughness(knots: &[f64], gamma: &[f64]) -> f64 {
    let m = knots.len();
    let second = |k: usize| if k == 0 || k == m - 1 { 0.0 } else { gamma[k - 1] };
    (0..m - 1)
        .map(|i| {
            let (a, b) = (second(i), second(i + 1));
            (knots[i + 1] - knots[i]) / 3.0 * (a * a + a * b + b * b)
        })
        .sum()
}

/// Evaluates the natural cubic spline with knot values `g` and interior
/// second derivatives `gamma`; linear beyond the end knots.
pub fn natural_spline_eval(knots: &[f64], g: &[f64], gamma: &[f64], x: f64) -> f64 {
    let m = knots.len();
    let second = |k: usize| if k == 0 || k == m - 1 { 0.0 } else { gamma[k - 1] };
    if x <= knots[0] {
        let h = knots[1] - knots[0];
        let slope = (g[1] - g[0]) / h - h * second(1) / 6.0;
        return g[0] + slope * (x - knots[0]);
    }
    if x >= knots[m - 1] {
        let h = knots[m - 1] - knots[m - 2];
        let slope = (g[m - 1] - g[m - 2]) / h + h * second(m - 2) / 6.0;
        return g[m - 1] + slope * (x - knots[m - 1]);
    }
    let i = knots.partition_point(|&k| k <= x).saturating_sub(1).min(m - 2);
    let (tl, tr) = (knots[i], knots[i + 1]);
    let h = tr - tl;
    let (a, b) = (x - tl, tr - x);
    (a * g[i + 1] + b * g[i]) / h - a * b / 6.0 * ((1.0 + a / h) * second(i + 1) + (1.0 + b / h) * second(i))
}

/// One fitted, centered smooth component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothTerm {
    pub variable: String,
    pub knots: Vec<f64>,
    /// Centered values at the knots.
    pub knot_values: Vec<f64>,
    pub second_derivs: Vec<f64>,
    /// Centered fit at every observation (sums to zero over the sample).
    pub fitted: Vec<f64>,
    /// Achieved effective degrees of freedom.
    pub df: f64,
    pub penalty: Penalty,
    pub operator_diag: Vec<f64>,
}

impl SmoothTerm {
    pub fn predict(&self, x_new: &[f64]) -> Vec<f64> {
        predict_spline(self, x_new)
    }
}

/// Natural-spline interpolation of the fitted curve; linear outside the knots.
pub fn predict_spline(term: &SmoothTerm, x_new: &[f64]) -> Vec<f64> {
    x_new
        .iter()
        .map(|&x| natural_spline_eval(&term.knots, &term.knot_values, &term.second_derivs, x))
        .collect()
}

/// Smooths `t` on `x` with weights `w` at effective df `df`, centering the
/// result to sample mean zero.
pub fn fit_spline(variable: &str, x: &[f64], t: &[f64], w: &[f64], df: f64) -> Result<SmoothTerm> {
    let smoother = SplineSmoother::with_df(x, w, df)?;
    term_from_smoother(variable, x, &smoother, t)
}

pub(crate) fn term_from_smoother(variable: &str, x: &[f64], smoother: &SplineSmoother, t: &[f64]) -> Result<SmoothTerm> {
    let raw = smoother.smooth_at(x, t)?.centered();
    Ok(smooth_term(variable, smoother, raw))
}

pub(crate) fn smooth_term(variable: &str, smoother: &SplineSmoother, raw: RawFit) -> SmoothTerm {
    SmoothTerm {
        variable: variable.to_string(),
        knots: smoother.knots.clone(),
        knot_values: raw.knot_values,
        second_derivs: raw.second_derivs,
        fitted: raw.fitted,
        df: smoother.trace(),
        penalty: smoother.penalty,
        operator_diag: smoother.operator_diag(),
    }
}

impl SplineSmoother {
    /// Like [`smooth`](Self::smooth) but evaluates zero-weight observations
    /// on the fitted curve at their `x`.
    pub fn smooth_at(&self, x: &[f64], t: &[f64]) -> Result<RawFit> {
        if x.len() != self.obs_knot.len() {
            return Err(CmpError::LengthMismatch(format!(
                "x has {} entries, smoother was built for {}",
                x.len(),
                self.obs_knot.len()
            )));
        }
        let masked: Vec<f64> = t
            .iter()
            .zip(&self.obs_knot)
            .map(|(v, k)| if k.is_some() { *v } else { 0.0 })
            .collect();
        let mut raw = self.smooth_knots(&masked)?;
        for (i, k) in self.obs_knot.iter().enumerate() {
            raw.fitted[i] = match k {
                Some(k) => raw.knot_values[*k],
                None => natural_spline_eval(&self.knots, &raw.knot_values, &raw.second_derivs, x[i]),
            };
        }
        Ok(raw)
    }
}
