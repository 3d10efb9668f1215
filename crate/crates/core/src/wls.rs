//! Dense weighted least squares.
//!
//! `√W X` is factored by Householder QR with column pivoting on residual
//! column norms, so rank deficiency is detected instead of silently
//! producing huge coefficients. IRLS weights can span many orders of
//! magnitude when ν is small, which is why the normal equations are avoided.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CmpError, Result};

/// A named, finite design matrix with at least as many rows as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    values: DMatrix<f64>,
    column_names: Vec<String>,
}

impl DesignMatrix {
    pub fn new(values: DMatrix<f64>, column_names: Vec<String>) -> Result<Self> {
        if column_names.len() != values.ncols() {
            return Err(CmpError::LengthMismatch(format!(
                "{} column names for {} columns",
                column_names.len(),
                values.ncols()
            )));
        }
        if values.nrows() < values.ncols() {
            return Err(CmpError::InvalidSpec(format!(
                "design has {} rows but {} columns",
                values.nrows(),
                values.ncols()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % values.nrows(), pos / values.nrows());
            return Err(CmpError::InvalidSpec(format!(
                "non-finite design entry at row {r}, column `{}`",
                column_names[c]
            )));
        }
        Ok(Self {
            values,
            column_names,
        })
    }

    /// Builds a design from named columns, optionally prepending an intercept.
    pub fn from_columns(n: usize, intercept: bool, columns: &[(String, Vec<f64>)]) -> Result<Self> {
        let p = columns.len() + usize::from(intercept);
        let mut names = Vec::with_capacity(p);
        let mut m = DMatrix::zeros(n, p);
        let mut j = 0;
        if intercept {
            names.push("(Intercept)".to_string());
            m.column_mut(0).fill(1.0);
            j = 1;
        }
        for (name, col) in columns {
            if col.len() != n {
                return Err(CmpError::LengthMismatch(format!(
                    "column `{name}` has {} rows, expected {n}",
                    col.len()
                )));
            }
            m.column_mut(j).copy_from_slice(col);
            names.push(name.clone());
            j += 1;
        }
        Self::new(m, names)
    }

    pub fn intercept_only(n: usize) -> Self {
        Self {
            values: DMatrix::from_element(n, 1, 1.0),
            column_names: vec!["(Intercept)".to_string()],
        }
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    /// Subset of rows, in the given order (duplicates allowed).
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            values: self.values.select_rows(rows.iter()),
            column_names: self.column_names.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WlsOptions {
    /// Fail on rank deficiency instead of zeroing aliased coefficients.
    pub strict: bool,
    /// Columns whose residual norm falls below `rank_tol` times the largest
    /// column norm are treated as aliased.
    pub rank_tol: f64,
}

impl Default for WlsOptions {
    fn default() -> Self {
        Self {
            strict: false,
            rank_tol: 1e-10,
        }
    }
}

impl WlsOptions {
    pub fn strict() -> Self {
        Self {
            strict: true,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WlsSolution {
    pub coefficients: DVector<f64>,
    /// `(XᵀWX)⁻¹` on the estimable columns; rows and columns of aliased
    /// coefficients are zero.
    pub xtwx_inverse: DMatrix<f64>,
    pub rank: usize,
    pub aliased: Vec<bool>,
}

/// Householder QR of an `m × p` matrix with Businger–Golub column pivoting.
struct PivotedQr {
    r: DMatrix<f64>,
    reflectors: Vec<(DVector<f64>, f64)>,
    perm: Vec<usize>,
    rank: usize,
}

impl PivotedQr {
    fn factor(mut a: DMatrix<f64>, rank_tol: f64) -> Self {
        let (m, p) = a.shape();
        let steps = m.min(p);
        let mut perm: Vec<usize> = (0..p).collect();
        let mut reflectors = Vec::with_capacity(steps);
        let initial_max = (0..p)
            .map(|j| a.column(j).norm())
            .fold(0.0_f64, f64::max);
        let mut rank = 0;

        for k in 0..steps {
            let (best, best_norm) = (k..p)
                .map(|j| (j, a.view((k, j), (m - k, 1)).norm()))
                .fold((k, -1.0), |acc, (j, nrm)| if nrm > acc.1 { (j, nrm) } else { acc });
            if best_norm <= rank_tol * initial_max || best_norm == 0.0 {
                break;
            }
            a.swap_columns(k, best);
            perm.swap(k, best);

            let mut v: DVector<f64> = a.view((k, k), (m - k, 1)).column(0).into_owned();
            let alpha = if v[0] >= 0.0 { -best_norm } else { best_norm };
            v[0] -= alpha;
            let vtv = v.norm_squared();
            let beta = if vtv > 0.0 { 2.0 / vtv } else { 0.0 };
            for j in k..p {
                let mut col = a.view_mut((k, j), (m - k, 1));
                let s = beta * v.dot(&col.column(0));
                col.column_mut(0).axpy(-s, &v, 1.0);
            }
            reflectors.push((v, beta));
            rank += 1;
        }
        let mut r = DMatrix::zeros(rank, p);
        for i in 0..rank {
            for j in i..p {
                r[(i, j)] = a[(i, j)];
            }
        }
        Self {
            r,
            reflectors,
            perm,
            rank,
        }
    }

    fn qt_mul(&self, b: &mut DVector<f64>) {
        for (k, (v, beta)) in self.reflectors.iter().enumerate() {
            let mut seg = b.rows_mut(k, v.len());
            let s = beta * v.dot(&seg);
            seg.axpy(-s, v, 1.0);
        }
    }

    /// Inverse of the leading `rank × rank` upper-triangular block.
    fn r11_inverse(&self) -> DMatrix<f64> {
        let r = self.rank;
        let mut inv = DMatrix::zeros(r, r);
        for j in 0..r {
            inv[(j, j)] = 1.0 / self.r[(j, j)];
            for i in (0..j).rev() {
                let s: f64 = (i + 1..=j).map(|k| self.r[(i, k)] * inv[(k, j)]).sum();
                inv[(i, j)] = -s / self.r[(i, i)];
            }
        }
        inv
    }
}

/// Minimizes `Σ wᵢ (tᵢ − xᵢᵀβ)²`. Rows with zero weight are dropped first.
pub fn wls_solve(x: &DMatrix<f64>, w: &[f64], t: &[f64], opts: &WlsOptions) -> Result<WlsSolution> {
    let (n, p) = x.shape();
    if w.len() != n || t.len() != n {
        return Err(CmpError::LengthMismatch(format!(
            "design has {n} rows, weights {}, response {}",
            w.len(),
            t.len()
        )));
    }
    if let Some(i) = w.iter().position(|wi| !wi.is_finite() || *wi < 0.0) {
        return Err(CmpError::InvalidParams(format!("weight {i} is {}", w[i])));
    }
    if let Some(i) = t.iter().position(|ti| !ti.is_finite()) {
        return Err(CmpError::InvalidParams(format!("response {i} is {}", t[i])));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| w[i] > 0.0).collect();
    if rows.len() < p {
        return Err(CmpError::RankDeficient {
            rank: rows.len(),
            cols: p,
        });
    }
    let m = rows.len();
    let mut a = DMatrix::zeros(m, p);
    let mut b = DVector::zeros(m);
    for (r, &i) in rows.iter().enumerate() {
        let sw = w[i].sqrt();
        for j in 0..p {
            a[(r, j)] = sw * x[(i, j)];
        }
        b[r] = sw * t[i];
    }

    let qr = PivotedQr::factor(a, opts.rank_tol);
    if opts.strict && qr.rank < p {
        return Err(CmpError::RankDeficient { rank: qr.rank, cols: p });
    }
    qr.qt_mul(&mut b);

    let rank = qr.rank;
    let mut c = DVector::zeros(rank);
    for i in (0..rank).rev() {
        let s: f64 = (i + 1..rank).map(|k| qr.r[(i, k)] * c[k]).sum();
        c[i] = (b[i] - s) / qr.r[(i, i)];
    }
    let mut coefficients = DVector::zeros(p);
    let mut aliased = vec![true; p];
    for k in 0..rank {
        coefficients[qr.perm[k]] = c[k];
        aliased[qr.perm[k]] = false;
    }

    let rinv = qr.r11_inverse();
    let inner = &rinv * rinv.transpose();
    let mut xtwx_inverse = DMatrix::zeros(p, p);
    for a_ in 0..rank {
        for b_ in 0..rank {
            xtwx_inverse[(qr.perm[a_], qr.perm[b_])] = inner[(a_, b_)];
        }
    }
    Ok(WlsSolution {
        coefficients,
        xtwx_inverse,
        rank,
        aliased,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_system(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.random_range(-2.0..2.0) });
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..5.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        (x, w, t)
    }

    fn normal_equations(x: &DMatrix<f64>, w: &[f64], t: &[f64]) -> DVector<f64> {
        let wm = DMatrix::from_diagonal(&DVector::from_column_slice(w));
        let xtwx = x.transpose() * &wm * x;
        let xtwt = x.transpose() * &wm * DVector::from_column_slice(t);
        xtwx.try_inverse().unwrap() * xtwt
    }

    #[test]
    fn intercept_gives_mean() {
        let x = DMatrix::from_element(5, 1, 1.0);
        let t = [1.0, 2.0, 4.0, 8.0, 10.0];
        let s = wls_solve(&x, &[1.0; 5], &t, &WlsOptions::default()).unwrap();
        assert_relative_eq!(s.coefficients[0], 5.0, epsilon = 1e-12);
        assert_relative_eq!(s.xtwx_inverse[(0, 0)], 0.2, epsilon = 1e-12);
    }

    #[test]
    fn orthonormal_design_projects() {
        let x = DMatrix::from_row_slice(4, 2, &[0.5, 0.5, 0.5, -0.5, 0.5, 0.5, 0.5, -0.5]);
        let t = [1.0, 3.0, -2.0, 7.0];
        let s = wls_solve(&x, &[1.0; 4], &t, &WlsOptions::default()).unwrap();
        let xt = x.transpose() * DVector::from_column_slice(&t);
        assert_relative_eq!(s.coefficients, xt, epsilon = 1e-12);
    }

    #[test]
    fn matches_normal_equations() {
        let (x, w, t) = random_system(50, 3, 4);
        let s = wls_solve(&x, &w, &t, &WlsOptions::default()).unwrap();
        let oracle = normal_equations(&x, &w, &t);
        for j in 0..3 {
            assert!((s.coefficients[j] - oracle[j]).abs() < 1e-8);
        }
        let wm = DMatrix::from_diagonal(&DVector::from_column_slice(&w));
        let inv = (x.transpose() * wm * &x).try_inverse().unwrap();
        assert_relative_eq!(s.xtwx_inverse, inv, max_relative = 1e-9);
        assert_eq!(s.rank, 3);
    }

    #[test]
    fn rank_deficient_columns_are_flagged() {
        let (mut x, w, t) = random_system(30, 3, 9);
        let dup = x.column(1) * 2.0;
        x = x.insert_column(3, 0.0);
        x.set_column(3, &dup);
        let s = wls_solve(&x, &w, &t, &WlsOptions::default()).unwrap();
        assert_eq!(s.rank, 3);
        assert_eq!(s.aliased.iter().filter(|a| **a).count(), 1);
        let err = wls_solve(&x, &w, &t, &WlsOptions::strict()).unwrap_err();
        assert!(matches!(err, CmpError::RankDeficient { rank: 3, cols: 4 }));
    }

    #[test]
    fn zero_weight_rows_are_dropped() {
        let (x, mut w, mut t) = random_system(20, 2, 1);
        w[3] = 0.0;
        t[3] = 1e300;
        let s = wls_solve(&x, &w, &t, &WlsOptions::default()).unwrap();
        assert!(s.coefficients.iter().all(|c| c.is_finite()));
        let keep: Vec<usize> = (0..20).filter(|&i| i != 3).collect();
        let xs = x.select_rows(keep.iter());
        let ws: Vec<f64> = keep.iter().map(|&i| w[i]).collect();
        let ts: Vec<f64> = keep.iter().map(|&i| t[i]).collect();
        let oracle = normal_equations(&xs, &ws, &ts);
        assert!((s.coefficients - oracle).amax() < 1e-9);
    }

    #[test]
    fn bad_inputs() {
        let x = DMatrix::from_element(3, 1, 1.0);
        assert!(wls_solve(&x, &[1.0; 2], &[1.0; 3], &WlsOptions::default()).is_err());
        assert!(wls_solve(&x, &[1.0, -1.0, 1.0], &[1.0; 3], &WlsOptions::default()).is_err());
        assert!(wls_solve(&x, &[0.0; 3], &[1.0; 3], &WlsOptions::default()).is_err());
    }

    #[test]
    fn design_matrix_validation() {
        assert!(DesignMatrix::from_columns(2, true, &[("a".into(), vec![1.0, 2.0])]).is_ok());
        assert!(DesignMatrix::from_columns(2, true, &[("a".into(), vec![1.0, f64::NAN])]).is_err());
        assert!(DesignMatrix::from_columns(1, true, &[("a".into(), vec![1.0])]).is_err());
        let d = DesignMatrix::from_columns(3, true, &[("a".into(), vec![1.0, 2.0, 3.0])]).unwrap();
        assert_eq!(d.column_names(), &["(Intercept)".to_string(), "a".to_string()]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn residuals_orthogonal_and_scale_invariant(seed in 0u64..10_000, c in 1e-3f64..1e3) {
            let (x, w, t) = random_system(40, 4, seed);
            let s = wls_solve(&x, &w, &t, &WlsOptions::default()).unwrap();
            let tv = DVector::from_column_slice(&t);
            let wv = DVector::from_column_slice(&w);
            let resid = &tv - &x * &s.coefficients;
            let score = x.transpose() * resid.component_mul(&wv);
            let scale = (x.transpose() * tv.component_mul(&wv)).norm();
            prop_assert!(score.amax() <= 1e-8 * scale.max(1.0));

            let wc: Vec<f64> = w.iter().map(|v| v * c).collect();
            let s2 = wls_solve(&x, &wc, &t, &WlsOptions::default()).unwrap();
            prop_assert!((s.coefficients - s2.coefficients).amax() < 1e-9);
            let sym = (&s.xtwx_inverse - s.xtwx_inverse.transpose()).amax();
            prop_assert!(sym < 1e-10);
        }
    }
}
