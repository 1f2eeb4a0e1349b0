//! Kernel construction, marginal likelihood and low-rank inversion.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{AgpError, Result};
use crate::priors::GridSpec;
use crate::state::{ComponentState, InclusionVector};

const JITTER: f64 = 1e-10;

/// Symmetric kernel (correlation) matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix(DMatrix<f64>);

impl KernelMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if !values.is_square() {
            return Err(AgpError::DimensionMismatch(format!(
                "kernel matrix is {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(&self.0 * c)
    }
}

/// Inverse-gamma prior on the noise variance and the induced t scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalScale {
    a: f64,
    b: f64,
}

impl MarginalScale {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(AgpError::InvalidParameter(format!(
                "noise prior IG({a}, {b}) needs positive parameters"
            )));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> f64 {
        self.a
    }
    pub fn b(&self) -> f64 {
        self.b
    }
    /// Degrees of freedom of the marginal t, `2a`.
    pub fn dof(&self) -> f64 {
        2.0 * self.a
    }
}

impl Default for MarginalScale {
    fn default() -> Self {
        Self { a: 1.0, b: 1.0 }
    }
}

fn check_gamma(x: &DMatrix<f64>, gamma: &InclusionVector) -> Result<()> {
    if gamma.len() != x.ncols() {
        return Err(AgpError::DimensionMismatch(format!(
            "inclusion vector has length {} but X has {} columns",
            gamma.len(),
            x.ncols()
        )));
    }
    Ok(())
}

/// Squared-exponential correlation `exp(-lambda^2 |x_i,gamma - x_j,gamma|^2)`.
pub fn se_covariance(x: &DMatrix<f64>, gamma: &InclusionVector, lambda: f64) -> Result<KernelMatrix> {
    check_gamma(x, gamma)?;
    if !(lambda > 0.0) {
        return Err(AgpError::InvalidParameter(format!(
            "inverse length-scale {lambda} must be positive"
        )));
    }
    let n = x.nrows();
    let cols = gamma.indices();
    let l2 = lambda * lambda;
    let mut c = DMatrix::from_element(n, n, 1.0);
    if cols.is_empty() {
        return Ok(KernelMatrix(c));
    }
    let mut dist = vec![0.0; n];
    for j in 0..n {
        dist.iter_mut().for_each(|d| *d = 0.0);
        for &k in &cols {
            let col = x.column(k);
            let xj = col[j];
            for i in (j + 1)..n {
                let diff = col[i] - xj;
                dist[i] += diff * diff;
            }
        }
        for i in (j + 1)..n {
            let v = (-l2 * dist[i]).exp();
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Ok(KernelMatrix(c))
}

/// Cross-correlation between rows of `x1` (m rows) and `x2` (n rows), m x n.
pub fn se_cross_covariance(
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    gamma: &InclusionVector,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    check_gamma(x1, gamma)?;
    check_gamma(x2, gamma)?;
    let cols = gamma.indices();
    let l2 = lambda * lambda;
    let mut dist = DMatrix::<f64>::zeros(x1.nrows(), x2.nrows());
    for &k in &cols {
        let a = x1.column(k);
        let b = x2.column(k);
        for j in 0..x2.nrows() {
            for i in 0..x1.nrows() {
                let diff = a[i] - b[j];
                dist[(i, j)] += diff * diff;
            }
        }
    }
    Ok(dist.map(|d| (-l2 * d).exp()))
}

/// `K = sum_l rho_l^2 C_l` over the given components.
pub fn aggregate_kernel(
    components: &[ComponentState],
    grid: &GridSpec,
    x: &DMatrix<f64>,
) -> Result<KernelMatrix> {
    let n = x.nrows();
    let mut k = DMatrix::zeros(n, n);
    for c in components {
        check_gamma(x, &c.gamma)?;
        let rho = c.rho(grid);
        if rho > 0.0 {
            let cm = se_covariance(x, &c.gamma, c.lambda(grid))?;
            k += cm.values() * (rho * rho);
        }
    }
    Ok(KernelMatrix(k))
}

/// Cholesky factor of a symmetric positive-definite matrix, retrying once with
/// a small diagonal jitter.
pub fn cholesky(mut m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(AgpError::NonFinite("matrix passed to Cholesky".into()));
    }
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    for i in 0..m.nrows() {
        m[(i, i)] += JITTER;
    }
    Cholesky::new(m).ok_or_else(|| AgpError::NotPositiveDefinite("Cholesky failed after jitter".into()))
}

/// `log det` from a Cholesky factor.
pub fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Log density of the multivariate t with `2a` degrees of freedom and scale
/// `(b/a) Sigma`, given `log det Sigma` and `q = y' Sigma^-1 y`.
pub fn t_log_density(n: usize, logdet: f64, q: f64, scale: &MarginalScale) -> f64 {
    let a = scale.a;
    let b = scale.b;
    let half_n = n as f64 / 2.0;
    ln_gamma(a + half_n) - ln_gamma(a) - half_n * (2.0 * std::f64::consts::PI * b).ln()
        - 0.5 * logdet
        - (a + half_n) * (q / (2.0 * b)).ln_1p()
}

/// Log marginal likelihood from a dense `Sigma`, consumed by the factorization.
pub fn log_ml_dense_sigma(sigma: DMatrix<f64>, y: &DVector<f64>, scale: &MarginalScale) -> Result<f64> {
    let c = cholesky(sigma)?;
    let z = c.l_dirty().solve_lower_triangular(y).ok_or_else(|| {
        AgpError::NotPositiveDefinite("triangular solve failed".into())
    })?;
    finite(t_log_density(y.len(), chol_logdet(&c), z.norm_squared(), scale))
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(AgpError::NonFinite("log marginal likelihood".into()))
    }
}

/// Low-rank factor `K ~ R'R + diag(D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactor {
    r: DMatrix<f64>,
    d: DVector<f64>,
    pivots: Vec<usize>,
}

impl LowRankFactor {
    pub fn new(r: DMatrix<f64>, d: DVector<f64>) -> Result<Self> {
        if r.ncols() != d.len() {
            return Err(AgpError::DimensionMismatch(format!(
                "factor is {}x{} but residual has length {}",
                r.nrows(),
                r.ncols(),
                d.len()
            )));
        }
        if d.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(AgpError::InvalidParameter(
                "residual diagonal must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            r,
            d,
            pivots: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.d.len()
    }
    pub fn rank(&self) -> usize {
        self.r.nrows()
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn residual(&self) -> &DVector<f64> {
        &self.d
    }
    /// Pivot order chosen by the factorization.
    pub fn pivots(&self) -> &[usize] {
        &self.pivots
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut k = self.r.transpose() * &self.r;
        for i in 0..self.n() {
            k[(i, i)] += self.d[i];
        }
        k
    }
}

/// Pivoted rank used when none is given: `ceil(min(n, 2.5 (ln n)^2))`.
pub fn default_rank(n: usize) -> usize {
    let ln = (n.max(1) as f64).ln();
    (n as f64).min(2.5 * ln * ln).ceil().max(1.0) as usize
}

/// Greedy pivoted Cholesky over a matrix accessed by diagonal and columns.
///
/// Returns factor rows (each of length n), the pivots, and the residual
/// diagonal. Stops after `max_rank` pivots or once the largest residual
/// diagonal entry falls below `tol`.
pub fn pivoted_cholesky<F>(
    diag: &[f64],
    mut column: F,
    max_rank: usize,
    tol: f64,
) -> Result<(Vec<Vec<f64>>, Vec<usize>, Vec<f64>)>
where
    F: FnMut(usize) -> Vec<f64>,
{
    let n = diag.len();
    let mut resid = diag.to_vec();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut pivots = Vec::new();
    let mut is_pivot = vec![false; n];
    let scale = diag.iter().cloned().fold(0.0, f64::max).max(1.0);
    let slack = 1e3 * f64::EPSILON * scale * n as f64;
    while rows.len() < max_rank.min(n) {
        let (piv, &best) = resid
            .iter()
            .enumerate()
            .filter(|(i, _)| !is_pivot[*i])
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap_or((0, &0.0));
        if best < -slack {
            return Err(AgpError::NotPositiveDefinite(format!(
                "negative residual {best} during pivoted Cholesky"
            )));
        }
        if best <= tol || best <= 0.0 || pivots.len() == n {
            break;
        }
        let col = column(piv);
        let pivot_val = best.sqrt();
        let mut row = col;
        for prev in &rows {
            let f = prev[piv];
            if f != 0.0 {
                for (ri, pi) in row.iter_mut().zip(prev) {
                    *ri -= f * pi;
                }
            }
        }
        for (i, v) in row.iter_mut().enumerate() {
            *v /= pivot_val;
            if is_pivot[i] {
                *v = 0.0;
            }
        }
        row[piv] = pivot_val;
        for i in 0..n {
            resid[i] -= row[i] * row[i];
        }
        resid[piv] = 0.0;
        is_pivot[piv] = true;
        pivots.push(piv);
        rows.push(row);
    }
    for (i, r) in resid.iter_mut().enumerate() {
        if is_pivot[i] || (*r < 0.0 && *r >= -slack) {
            *r = r.max(0.0);
        } else if *r < -slack {
            return Err(AgpError::NotPositiveDefinite(format!(
                "negative residual {r} during pivoted Cholesky"
            )));
        }
    }
    Ok((rows, pivots, resid))
}

/// Pivoted low-rank factorization of a PSD matrix with `K ~ R'R + diag(D)`.
pub fn pivoted_lowrank(k: &KernelMatrix, r: usize, tol: f64) -> Result<LowRankFactor> {
    let n = k.n();
    if r == 0 || r > n {
        return Err(AgpError::InvalidParameter(format!(
            "rank {r} outside [1, {n}]"
        )));
    }
    if !(tol >= 0.0) {
        return Err(AgpError::InvalidParameter("tolerance must be >= 0".into()));
    }
    let m = k.values();
    let diag: Vec<f64> = m.diagonal().iter().copied().collect();
    let (rows, pivots, resid) = pivoted_cholesky(&diag, |j| m.column(j).iter().copied().collect(), r, tol)?;
    let rank = rows.len().max(1);
    let mut rm = DMatrix::zeros(rank, n);
    for (i, row) in rows.iter().enumerate() {
        for j in 0..n {
            rm[(i, j)] = row[j];
        }
    }
    let mut f = LowRankFactor::new(rm, DVector::from_vec(resid))?;
    f.pivots = pivots;
    Ok(f)
}

/// Factorization of `I + R'R + diag(D)` through the Woodbury identity.
#[derive(Debug, Clone)]
pub struct WoodburyFactor {
    e_inv: DVector<f64>,
    r: DMatrix<f64>,
    inner: Cholesky<f64, Dyn>,
    logdet: f64,
}

impl WoodburyFactor {
    pub fn new(factor: &LowRankFactor) -> Result<Self> {
        let e_inv = factor.d.map(|d| 1.0 / (1.0 + d));
        let mut re = factor.r.clone();
        for (j, mut col) in re.column_iter_mut().enumerate() {
            col *= e_inv[j].sqrt();
        }
        let mut inner = &re * re.transpose();
        for i in 0..inner.nrows() {
            inner[(i, i)] += 1.0;
        }
        let inner = Cholesky::new(inner).ok_or_else(|| {
            AgpError::NotPositiveDefinite("Woodbury capacitance matrix".into())
        })?;
        let logdet = chol_logdet(&inner) - e_inv.iter().map(|e| e.ln()).sum::<f64>();
        Ok(Self {
            e_inv,
            r: factor.r.clone(),
            inner,
            logdet,
        })
    }

    /// `log det(I + R'R + diag(D))`.
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        if rhs.len() != self.e_inv.len() {
            return Err(AgpError::DimensionMismatch(format!(
                "right-hand side has length {} but system has size {}",
                rhs.len(),
                self.e_inv.len()
            )));
        }
        let er = rhs.component_mul(&self.e_inv);
        let u = &self.r * &er;
        let w = self.inner.solve(&u);
        let back = self.r.transpose() * w;
        Ok(er - back.component_mul(&self.e_inv))
    }
}

/// Solves `(I + R'R + diag(D)) z = rhs`.
pub fn smw_solve(factor: &LowRankFactor, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    WoodburyFactor::new(factor)?.solve(rhs)
}

/// Kernel argument of [`log_marginal_likelihood`].
#[derive(Debug, Clone, Copy)]
pub enum KernelRef<'a> {
    Dense(&'a KernelMatrix),
    LowRank(&'a LowRankFactor),
}

/// Log density of `y` under the multivariate t with `2a` degrees of freedom,
/// location 0 and scale `(b/a)(I + K)`.
pub fn log_marginal_likelihood(y: &DVector<f64>, k: KernelRef<'_>, scale: &MarginalScale) -> Result<f64> {
    match k {
        KernelRef::Dense(km) => {
            if km.n() != y.len() {
                return Err(AgpError::DimensionMismatch(format!(
                    "kernel is {}x{} but y has length {}",
                    km.n(),
                    km.n(),
                    y.len()
                )));
            }
            let mut sigma = km.values().clone();
            for i in 0..y.len() {
                sigma[(i, i)] += 1.0;
            }
            log_ml_dense_sigma(sigma, y, scale)
        }
        KernelRef::LowRank(f) => {
            if f.n() != y.len() {
                return Err(AgpError::DimensionMismatch(format!(
                    "factor has size {} but y has length {}",
                    f.n(),
                    y.len()
                )));
            }
            let w = WoodburyFactor::new(f)?;
            let q = y.dot(&w.solve(y)?);
            finite(t_log_density(y.len(), w.logdet(), q, scale))
        }
    }
}

/// Numerically stable `log sum exp`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
