//! Dense row-major matrices, stable softmax, L2 normalization, momentum SGD
//! and a central-difference gradient oracle.
//!
//! Everything here is 64-bit and allocation-light. Matrices reject
//! non-finite entries at construction so downstream kernels never have to
//! re-check their inputs.

use std::fmt;

use crate::error::{Error, Result};

/// Norms at or below this are treated as degenerate by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Row-major matrix of finite `f64` values.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseMatrix({}x{}) ", self.rows, self.cols)?;
        f.debug_list()
            .entries(self.data.chunks(self.cols.max(1)))
            .finish()
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(
                "DenseMatrix::new",
                format!("{rows}x{cols} = {} values", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("DenseMatrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("DenseMatrix::from_rows", cols, bad.len()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Builds a matrix by evaluating `f(row, col)`; panics on non-finite output.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let v = f(r, c);
                assert!(v.is_finite(), "from_fn produced non-finite value at ({r}, {c})");
                data.push(v);
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers must keep entries finite;
    /// [`DenseMatrix::ensure_finite`] re-validates.
    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks(0) panics, and a 0-column matrix still has `rows` empty rows
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn ensure_finite(&self, what: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    /// Copies the selected rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks rows of several matrices sharing a column count.
    pub fn vstack<'a>(cols: usize, parts: impl IntoIterator<Item = &'a DenseMatrix>) -> Result<Self> {
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape("DenseMatrix::vstack", cols, p.cols));
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · rhs`
    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::shape(
                "matmul",
                format!("lhs cols {}", self.cols),
                format!("rhs rows {}", rhs.rows),
            ));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ`
    pub fn matmul_t(&self, rhs: &DenseMatrix) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(Error::shape(
                "matmul_t",
                format!("lhs cols {}", self.cols),
                format!("rhs cols {}", rhs.cols),
            ));
        }
        let mut out = Self::zeros(self.rows, rhs.rows);
        for r in 0..self.rows {
            let a = self.row(r);
            for j in 0..rhs.rows {
                out.data[r * rhs.rows + j] = dot(a, rhs.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs`
    pub fn t_matmul(&self, rhs: &DenseMatrix) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(Error::shape(
                "t_matmul",
                format!("lhs rows {}", self.rows),
                format!("rhs rows {}", rhs.rows),
            ));
        }
        let mut out = Self::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let b = rhs.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &bv) in out_row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, rhs: &DenseMatrix) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(
                "add_assign",
                format!("{:?}", self.shape()),
                format!("{:?}", rhs.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// In-place stable softmax of a single row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &DenseMatrix) -> Result<DenseMatrix> {
    x.ensure_finite("softmax_rows input")?;
    let mut out = x.clone();
    if out.cols == 0 {
        return Ok(out);
    }
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

/// Returns `v / ‖v‖`, or [`Error::DegenerateNorm`] when `‖v‖ ≤ NORM_EPS`.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::NonFinite("l2_normalize input"));
    }
    if n <= NORM_EPS {
        return Err(Error::DegenerateNorm(n));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Classical (heavy-ball) momentum SGD:
/// `v' = mu·v + grad`, `theta' = theta − gamma·v'`.
pub fn sgd_step(
    theta: &[f64],
    grad: &[f64],
    gamma: f64,
    momentum_state: &[f64],
    mu: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut theta = theta.to_vec();
    let mut velocity = momentum_state.to_vec();
    sgd_step_in_place(&mut theta, grad, gamma, &mut velocity, mu)?;
    Ok((theta, velocity))
}

/// In-place form of [`sgd_step`].
pub fn sgd_step_in_place(
    theta: &mut [f64],
    grad: &[f64],
    gamma: f64,
    velocity: &mut [f64],
    mu: f64,
) -> Result<()> {
    if theta.len() != grad.len() || theta.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("theta len {}", theta.len()),
            format!("grad len {}, momentum len {}", grad.len(), velocity.len()),
        ));
    }
    // gamma = 0 is accepted as the frozen-student configuration
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be >= 0, got {gamma}")));
    }
    if !(0.0..1.0).contains(&mu) {
        return Err(Error::invalid(format!("momentum must lie in [0, 1), got {mu}")));
    }
    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v + g;
        *t -= gamma * *v;
    }
    Ok(())
}

/// Central-difference gradient of `f` at `theta`.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let plus = f(&probe);
        probe[i] = theta[i] - h;
        let minus = f(&probe);
        probe[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("finite_diff_grad evaluation"));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Gradient magnitudes below this are measured against the floor instead of
/// themselves; central differences at h = 1e-6 carry ~1e-10 absolute
/// round-off, which no vanishing gradient can be compared to relatively.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Comparison of analytic and numerical gradients, per named parameter block.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// `(name, max abs err, max rel err)` per parameter block.
    pub per_parameter: Vec<(String, f64, f64)>,
    floor: f64,
}

impl Default for GradReport {
    fn default() -> Self {
        Self::with_floor(REL_ERR_FLOOR)
    }
}

impl GradReport {
    pub fn with_floor(floor: f64) -> Self {
        Self {
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            per_parameter: Vec::new(),
            floor,
        }
    }

    /// Records one parameter block. Relative error is
    /// `|a − n| / max(|a|, |n|, floor)` per coordinate.
    pub fn record(&mut self, name: impl Into<String>, analytic: &[f64], numeric: &[f64]) {
        assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
        let mut abs_max = 0.0f64;
        let mut rel_max = 0.0f64;
        for (&a, &n) in analytic.iter().zip(numeric) {
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(self.floor);
            abs_max = abs_max.max(abs);
            rel_max = rel_max.max(rel);
        }
        self.max_abs_err = self.max_abs_err.max(abs_max);
        self.max_rel_err = self.max_rel_err.max(rel_max);
        self.per_parameter.push((name.into(), abs_max, rel_max));
    }
}
