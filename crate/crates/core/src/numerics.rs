//! Dense float64 arrays with paired analytic gradients.
//!
//! Every differentiable operation here ships as a forward function plus a
//! `*_backward` companion computing its vector-Jacobian product. There is no
//! general tape: the training graph is fixed, so layer gradients are composed
//! by hand and the single source of truth is [`finite_diff_check`], which
//! compares any analytic gradient against central finite differences.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Norm threshold below which a vector counts as degenerate for
/// L2 normalization. Distinguishes true zero vectors from small-but-valid
/// ones in float64.
pub const EPS_NORM: f64 = 1e-12;

/// Denominator floor in the finite-difference relative error.
pub const REL_ERR_FLOOR: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense row-major float64 matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Build from row-major data; the length must equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, 0));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    /// Identity in the top-left corner, zero elsewhere.
    pub fn identity_padded(rows: usize, cols: usize) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows.min(cols) {
            m.set(i, i, 1.0);
        }
        m
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what} contains a non-finite value")))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += other * scale`; shapes must match.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "add_scaled shapes {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b * scale;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    /// `self * other`, [N x K] * [K x M] -> [N x M].
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "matmul {:?} * {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * other`, [K x N]^T * [K x M] -> [N x M].
    pub fn matmul_transpose_self(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Dimension(format!(
                "matmul_transpose_self {:?}^T * {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`, [N x K] * [M x K]^T -> [N x M].
    pub fn matmul_transpose_other(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "matmul_transpose_other {:?} * {:?}^T",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                let b_row = other.row(j);
                let mut acc = 0.0;
                for (&a, &b) in a_row.iter().zip(b_row.iter()) {
                    acc += a * b;
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        Ok(out)
    }

    /// Sum over rows, producing one value per column.
    pub fn col_sum(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(r).iter()) {
                *o += v;
            }
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// ParamTensor
// ---------------------------------------------------------------------------

/// A named learnable array with its gradient accumulator.
///
/// Invariant: `grad` always has the same shape as `value`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        ParamTensor { name: name.into(), value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------------------
// Differentiable ops
// ---------------------------------------------------------------------------

/// `out[i][j] = sum_k x[i][k] * w[k][j] + b[j]`.
pub fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if x.cols() != w.rows() || b.len() != w.cols() {
        return Err(Error::Dimension(format!(
            "affine x{:?} w{:?} b[{}]",
            x.shape(),
            w.shape(),
            b.len()
        )));
    }
    x.check_finite("affine input")?;
    w.check_finite("affine weights")?;
    if !b.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("affine bias contains a non-finite value".into()));
    }
    let mut out = x.matmul(w)?;
    for r in 0..out.rows() {
        for (o, &bv) in out.row_mut(r).iter_mut().zip(b.iter()) {
            *o += bv;
        }
    }
    Ok(out)
}

/// Gradients of `affine` given the upstream gradient `g`:
/// `dx = g * w^T`, `dw = x^T * g`, `db = column-sum(g)`.
pub fn affine_backward(x: &Matrix, w: &Matrix, g: &Matrix) -> Result<(Matrix, Matrix, Vec<f64>)> {
    if g.rows() != x.rows() || g.cols() != w.cols() {
        return Err(Error::Dimension(format!(
            "affine_backward g{:?} vs x{:?} w{:?}",
            g.shape(),
            x.shape(),
            w.shape()
        )));
    }
    let dx = g.matmul_transpose_other(w)?;
    let dw = x.matmul_transpose_self(g)?;
    let db = g.col_sum();
    Ok((dx, dw, db))
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &Matrix) -> Result<Matrix> {
    x.check_finite("relu input")?;
    Ok(x.map(|v| v.max(0.0)))
}

/// ReLU gradient: pass-through where `x > 0`, zero where `x <= 0`.
/// The subgradient at exactly 0 is defined as 0.
pub fn relu_backward(x: &Matrix, g: &Matrix) -> Result<Matrix> {
    if x.shape() != g.shape() {
        return Err(Error::Dimension(format!(
            "relu_backward shapes {:?} vs {:?}",
            x.shape(),
            g.shape()
        )));
    }
    let mut out = g.clone();
    for (o, &xv) in out.data_mut().iter_mut().zip(x.data().iter()) {
        if xv <= 0.0 {
            *o = 0.0;
        }
    }
    Ok(out)
}

/// `v / ||v||_2`; errors when the norm is at or below [`EPS_NORM`].
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::Numeric("l2_normalize input contains a non-finite value".into()));
    }
    let norm = l2_norm(v);
    if norm <= EPS_NORM {
        return Err(Error::DegenerateVector { norm, limit: EPS_NORM });
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Gradient of `l2_normalize`: `dv = (g - out * (out . g)) / ||v||`,
/// the Jacobian `(I - out out^T) / ||v||` applied to `g`.
pub fn l2_normalize_backward(v: &[f64], out: &[f64], g: &[f64]) -> Vec<f64> {
    let norm = l2_norm(v);
    let proj = dot(out, g);
    out.iter()
        .zip(g.iter())
        .map(|(&o, &gv)| (gv - o * proj) / norm)
        .collect()
}

/// Row-wise L2 normalization.
pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let n = l2_normalize(m.row(r))?;
        out.row_mut(r).copy_from_slice(&n);
    }
    Ok(out)
}

pub fn l2_normalize_rows_backward(pre: &Matrix, normalized: &Matrix, g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(pre.rows(), pre.cols());
    for r in 0..pre.rows() {
        let d = l2_normalize_backward(pre.row(r), normalized.row(r), g.row(r));
        out.row_mut(r).copy_from_slice(&d);
    }
    out
}

/// Row-wise softmax with per-row max subtraction for stability.
pub fn softmax_rows(s: &Matrix) -> Result<Matrix> {
    s.check_finite("softmax input")?;
    let mut out = Matrix::zeros(s.rows(), s.cols());
    for r in 0..s.rows() {
        let row = s.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        {
            let out_row = out.row_mut(r);
            for (o, &v) in out_row.iter_mut().zip(row.iter()) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            for o in out_row.iter_mut() {
                *o /= sum;
            }
        }
    }
    Ok(out)
}

/// Softmax gradient per row: `ds = p .* (g - (g . p))`.
pub fn softmax_rows_backward(probs: &Matrix, g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let gr = g.row(r);
        let inner = dot(p, gr);
        for (o, (&pv, &gv)) in out.row_mut(r).iter_mut().zip(p.iter().zip(gr.iter())) {
            *o = pv * (gv - inner);
        }
    }
    out
}

/// `log(sum_i exp(row[i]))` computed stably.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

/// Per-parameter outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct ParamDiff {
    pub name: String,
    /// Max over all scalar entries of `|a - n| / max(|a|, |n|, 1e-12)`.
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub params: Vec<ParamDiff>,
}

impl FiniteDiffReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compare each tensor's analytic `grad` against central finite differences
/// of `f` taken over its `value` entries.
///
/// `f` must recompute the scalar objective from the tensors' current values;
/// the sweep perturbs one scalar at a time by `+/- eps` and restores it.
/// Requires `eps` in `[1e-8, 1e-4]` and finite `f` at every probe point.
pub fn finite_diff_check<F>(
    tensors: &mut [ParamTensor],
    eps: f64,
    mut f: F,
) -> Result<FiniteDiffReport>
where
    F: FnMut(&[ParamTensor]) -> Result<f64>,
{
    if !(1e-8..=1e-4).contains(&eps) {
        return Err(Error::Config(format!(
            "finite difference step {eps:e} outside [1e-8, 1e-4]"
        )));
    }
    let mut params = Vec::with_capacity(tensors.len());
    for t in 0..tensors.len() {
        let n = tensors[t].len();
        let mut max_rel = 0.0;
        let mut worst = 0;
        let mut worst_pair = (0.0, 0.0);
        for i in 0..n {
            let old = tensors[t].value.data()[i];
            tensors[t].value.data_mut()[i] = old + eps;
            let f_plus = f(&*tensors)?;
            tensors[t].value.data_mut()[i] = old - eps;
            let f_minus = f(&*tensors)?;
            tensors[t].value.data_mut()[i] = old;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "objective non-finite while probing {}[{}]",
                    tensors[t].name, i
                )));
            }
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let analytic = tensors[t].grad.data()[i];
            let rel = relative_error(analytic, numeric);
            if rel > max_rel {
                max_rel = rel;
                worst = i;
                worst_pair = (analytic, numeric);
            }
        }
        params.push(ParamDiff {
            name: tensors[t].name.clone(),
            max_rel_error: max_rel,
            worst_index: worst,
            worst_analytic: worst_pair.0,
            worst_numeric: worst_pair.1,
            checked: n,
        });
    }
    Ok(FiniteDiffReport { params })
}
