//! Dense real vectors and row-major matrices.
//!
//! Only what the recurrent cells, the optimizers and the stability projection
//! need: products, norms and a power-iteration spectral norm. The slice-level
//! kernels (`gemv_acc`, `gemv_t_acc`, `ger_acc`) are what the hot loops use;
//! the `Vector`/`Matrix` types wrap them with shape checking.

use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Iteration cap for [`spectral_norm`].
pub const POWER_ITERATION_CAP: usize = 10_000;

const POWER_ITERATION_RTOL: f64 = 1e-14;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Vector(data)
    }

    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::dim("dot", self.len(), other.len()));
        }
        Ok(dot(self, other))
    }

    pub fn norm(&self) -> f64 {
        norm(self)
    }

    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0, |acc, x| acc.max(x.abs()))
    }

    pub fn scaled(&self, alpha: f64) -> Vector {
        Vector(self.0.iter().map(|x| alpha * x).collect())
    }

    /// `alpha * self + beta * other`.
    pub fn lin_comb(&self, alpha: f64, other: &Vector, beta: f64) -> Result<Vector> {
        if self.len() != other.len() {
            return Err(Error::dim("lin_comb", self.len(), other.len()));
        }
        Ok(Vector(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| alpha * a + beta * b)
                .collect(),
        ))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Vector(data)
    }
}

impl From<&[f64]> for Vector {
    fn from(data: &[f64]) -> Self {
        Vector(data.to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dim("Matrix::new", "positive shape", format!("{rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::dim("Matrix::new", rows * cols, data.len()));
        }
        if let Some(t) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { context: "Matrix::new", t });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("Matrix::from_rows", "equal row lengths", "ragged rows"));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| alpha * x).collect(),
        }
    }

    pub fn matvec(&self, v: &Vector) -> Result<Vector> {
        matvec(self, v)
    }
}

impl fmt::Display for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            writeln!(f, "{row:?}")?;
        }
        Ok(())
    }
}

/// Matrix-vector product `A v`.
pub fn matvec(a: &Matrix, v: &Vector) -> Result<Vector> {
    if a.cols != v.len() {
        return Err(Error::dim(
            "matvec",
            format!("vector of length {} for a {}x{} matrix", a.cols, a.rows, a.cols),
            format!("length {}", v.len()),
        ));
    }
    let mut out = vec![0.0; a.rows];
    gemv_acc(a.rows, a.cols, &a.data, v, &mut out);
    if let Some(t) = out.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { context: "matvec", t });
    }
    Ok(Vector(out))
}

/// Largest singular value, by power iteration on `AᵀA`.
///
/// The iteration starts from the normalized all-ones vector. When that start
/// is (numerically) orthogonal to the dominant right singular vector the
/// estimate falls below the largest column norm, which is a lower bound on
/// the true value; the iteration is then rerun from that column's unit vector.
pub fn spectral_norm(a: &Matrix) -> Result<f64> {
    spectral_norm_slice(a.rows, a.cols, &a.data)
}

pub(crate) fn spectral_norm_slice(rows: usize, cols: usize, a: &[f64]) -> Result<f64> {
    debug_assert_eq!(a.len(), rows * cols);
    if a.is_empty() {
        return Err(Error::dim("spectral_norm", "nonempty matrix", "0 entries"));
    }
    if a.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    let start = vec![1.0 / (cols as f64).sqrt(); cols];
    let sigma = power_iteration(rows, cols, a, start)?;

    let (best_col, best_norm) = (0..cols)
        .map(|j| {
            let n = (0..rows).map(|i| a[i * cols + j].powi(2)).sum::<f64>().sqrt();
            (j, n)
        })
        .fold((0, 0.0), |acc, (j, n)| if n > acc.1 { (j, n) } else { acc });
    if sigma < best_norm * (1.0 - 1e-12) {
        let mut e = vec![0.0; cols];
        e[best_col] = 1.0;
        return power_iteration(rows, cols, a, e);
    }
    Ok(sigma)
}

fn power_iteration(rows: usize, cols: usize, a: &[f64], mut v: Vec<f64>) -> Result<f64> {
    let mut av = vec![0.0; rows];
    let mut w = vec![0.0; cols];
    let mut prev = f64::NAN;
    let mut residual = f64::INFINITY;
    for _ in 0..POWER_ITERATION_CAP {
        av.iter_mut().for_each(|x| *x = 0.0);
        gemv_acc(rows, cols, a, &v, &mut av);
        let sigma = norm(&av);
        w.iter_mut().for_each(|x| *x = 0.0);
        gemv_t_acc(rows, cols, a, &av, &mut w);
        let nw = norm(&w);
        if nw == 0.0 {
            return Ok(sigma);
        }
        let mu = sigma * sigma;
        residual = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - mu * vi).powi(2))
            .sum::<f64>()
            .sqrt()
            / mu;
        if (sigma - prev).abs() <= POWER_ITERATION_RTOL * sigma || residual <= 1e-13 {
            return Ok(sigma);
        }
        prev = sigma;
        v.iter_mut().zip(&w).for_each(|(vi, wi)| *vi = wi / nw);
    }
    Err(Error::NoConvergence {
        iterations: POWER_ITERATION_CAP,
        estimate: prev,
        residual,
        iterate: v,
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `out += A x` for a row-major `rows x cols` matrix.
#[inline]
pub(crate) fn gemv_acc(rows: usize, cols: usize, a: &[f64], x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        let row = &a[r * cols..(r + 1) * cols];
        *o += dot(row, x);
    }
}

/// `out += Aᵀ x` for a row-major `rows x cols` matrix.
#[inline]
pub(crate) fn gemv_t_acc(rows: usize, cols: usize, a: &[f64], x: &[f64], out: &mut [f64]) {
    for (r, xr) in x.iter().enumerate().take(rows) {
        if *xr == 0.0 {
            continue;
        }
        let row = &a[r * cols..(r + 1) * cols];
        for (o, arc) in out.iter_mut().zip(row) {
            *o += arc * xr;
        }
    }
}

/// Rank-one update `A += x yᵀ`.
#[inline]
pub(crate) fn ger_acc(rows: usize, cols: usize, a: &mut [f64], x: &[f64], y: &[f64]) {
    for (r, xr) in x.iter().enumerate().take(rows) {
        if *xr == 0.0 {
            continue;
        }
        let row = &mut a[r * cols..(r + 1) * cols];
        for (arc, yc) in row.iter_mut().zip(y) {
            *arc += xr * yc;
        }
    }
}
