//! Deterministic dense real linear algebra.
//!
//! Everything is 64-bit, row-major, and single-threaded with a fixed
//! accumulation order (ascending inner index), so results are bit-reproducible
//! across runs and platforms. Sizes stay desk-scale (≲ 256), which keeps the
//! one-sided Jacobi SVD both simple and accurate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Which axis of a matrix an operation applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    Rows,
    Cols,
}

impl Matrix {
    /// Build from row-major data; rejects length mismatches and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "expected {}x{}={} elements, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite element {bad} in matrix")));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged row lengths".into()));
        }
        Matrix::from_vec(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        Matrix::from_fn(n, n, |i, j| if i == j { values[i] } else { 0.0 })
    }

    /// Column vector (n×1) from a slice.
    pub fn col_vec(values: &[f64]) -> Self {
        Matrix { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Matrix product in 64-bit arithmetic.
    ///
    /// Each output element accumulates `a[i][k]*b[k][j]` for ascending `k`,
    /// so the summation order is fixed and results are reproducible.
    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, b.rows, b.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.get(i, k);
                if aik == 0.0 {
                    continue;
                }
                let brow = b.row(k);
                let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
        Ok(out)
    }

    /// `self * v` for a plain vector.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::Shape(format!(
                "matvec {}x{} by len {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn add(&self, b: &Matrix) -> Result<Matrix> {
        self.zip_with(b, |x, y| x + y)
    }

    pub fn sub(&self, b: &Matrix) -> Result<Matrix> {
        self.zip_with(b, |x, y| x - y)
    }

    fn zip_with(&self, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != b.rows || self.cols != b.cols {
            return Err(Error::Shape(format!(
                "elementwise op on {}x{} and {}x{}",
                self.rows, self.cols, b.rows, b.cols
            )));
        }
        let data = self.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, b: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (b.rows, b.cols), "max_abs_diff shape");
        self.data
            .iter()
            .zip(&b.data)
            .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    /// Copy of the listed columns, in the given order.
    pub fn select_cols(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, idx.len(), |i, j| self.get(i, idx[j]))
    }

    /// Contiguous column range `[start, end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols, "column slice out of range");
        Matrix::from_fn(self.rows, end - start, |i, j| self.get(i, start + j))
    }

    /// Contiguous row range `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows, "row slice out of range");
        Matrix::from_fn(end - start, self.cols, |i, j| self.get(start + i, j))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    /// Hadamard product.
    pub fn mul_elem(&self, b: &Matrix) -> Result<Matrix> {
        self.zip_with(b, |x, y| x * y)
    }

    /// Copy of the listed rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(idx.len(), self.cols, |i, j| self.get(idx[i], j))
    }

    /// Reorder one axis: `out[i] = in[p.order()[i]]` along `axis`.
    ///
    /// Pure element moves, so applying `p.inverted()` afterwards restores the
    /// input bit-exactly.
    pub fn permute_axis(&self, p: &IndexPermutation, axis: Axis) -> Result<Matrix> {
        let len = match axis {
            Axis::Rows => self.rows,
            Axis::Cols => self.cols,
        };
        if p.len() != len {
            return Err(Error::Shape(format!(
                "permutation of length {} applied to axis of length {}",
                p.len(),
                len
            )));
        }
        let out = match axis {
            Axis::Rows => {
                Matrix::from_fn(self.rows, self.cols, |i, j| self.get(p.order[i], j))
            }
            Axis::Cols => {
                Matrix::from_fn(self.rows, self.cols, |i, j| self.get(i, p.order[j]))
            }
        };
        Ok(out)
    }

    /// Full singular value decomposition by one-sided Jacobi with cyclic
    /// sweeps. Column pairs are rotated until every off-diagonal Gram entry
    /// falls below `1e-14` of its scale; singular values come out sorted
    /// descending. Wide matrices are handled by factoring the transpose.
    pub fn svd(&self) -> Result<SvdResult> {
        if self.rows < self.cols {
            let t = self.transpose().svd()?;
            // A^T = U Σ V^T  ⇒  A = V Σ U^T
            return Ok(SvdResult {
                left: t.right_t.transpose(),
                singular: t.singular,
                right_t: t.left.transpose(),
            });
        }
        let (m, n) = (self.rows, self.cols);
        let k = n;
        let mut b = self.clone();
        let mut v = Matrix::identity(n);

        const MAX_SWEEPS: usize = 60;
        const REL_TOL: f64 = 1e-14;
        let mut sweeps = 0;
        loop {
            let mut rotated = false;
            for p in 0..n {
                for q in (p + 1)..n {
                    // Gram entries of the current column pair.
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for i in 0..m {
                        let bp = b.get(i, p);
                        let bq = b.get(i, q);
                        alpha += bp * bp;
                        beta += bq * bq;
                        gamma += bp * bq;
                    }
                    if gamma.abs() <= REL_TOL * (alpha * beta).sqrt() || alpha == 0.0 || beta == 0.0
                    {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..m {
                        let bp = b.get(i, p);
                        let bq = b.get(i, q);
                        b.set(i, p, c * bp - s * bq);
                        b.set(i, q, s * bp + c * bq);
                    }
                    for i in 0..n {
                        let vp = v.get(i, p);
                        let vq = v.get(i, q);
                        v.set(i, p, c * vp - s * vq);
                        v.set(i, q, s * vp + c * vq);
                    }
                }
            }
            sweeps += 1;
            if !rotated {
                break;
            }
            if sweeps >= MAX_SWEEPS {
                return Err(Error::Numeric(format!(
                    "jacobi svd did not converge after {sweeps} sweeps"
                )));
            }
        }

        // Column norms are the singular values; sort descending (index as
        // tie-break keeps the result deterministic).
        let mut norms: Vec<(f64, usize)> = (0..n)
            .map(|j| {
                let nrm = (0..m).map(|i| b.get(i, j).powi(2)).sum::<f64>().sqrt();
                (nrm, j)
            })
            .collect();
        norms.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

        let sigma_max = norms.first().map_or(0.0, |x| x.0);
        let null_tol = sigma_max * f64::EPSILON * (m.max(n) as f64);
        let mut left = Matrix::zeros(m, k);
        let mut singular = Vec::with_capacity(k);
        let mut right_t = Matrix::zeros(k, n);
        let mut null_cols = Vec::new();
        for (out_j, (nrm, src_j)) in norms.iter().enumerate() {
            singular.push(*nrm);
            for i in 0..n {
                right_t.set(out_j, i, v.get(i, *src_j));
            }
            if *nrm > null_tol {
                for i in 0..m {
                    left.set(i, out_j, b.get(i, *src_j) / nrm);
                }
            } else {
                null_cols.push(out_j);
            }
        }
        // Null-space columns of U get an orthonormal completion so that
        // U^T U = I holds even for rank-deficient input.
        for &j in &null_cols {
            complete_orthonormal_column(&mut left, j, &null_cols)?;
        }

        Ok(SvdResult { left, singular, right_t })
    }

    /// Best rank-`r` approximation `Φ_r Λ_r Ψ_r^T` (Eckart–Young).
    pub fn truncated_svd(&self, r: usize) -> Result<Matrix> {
        let k = self.rows.min(self.cols);
        if r == 0 || r > k {
            return Err(Error::Argument(format!(
                "truncation rank {r} out of range 1..={k}"
            )));
        }
        let svd = self.svd()?;
        let mut out = Matrix::zeros(self.rows, self.cols);
        for t in 0..r {
            let s = svd.singular[t];
            if s == 0.0 {
                break;
            }
            for i in 0..self.rows {
                let us = svd.left.get(i, t) * s;
                for j in 0..self.cols {
                    out.data[i * self.cols + j] += us * svd.right_t.get(t, j);
                }
            }
        }
        Ok(out)
    }

    /// Moore–Penrose pseudo-inverse with the default cutoff
    /// `max(rows, cols) · σ_max · ε_machine` (ε ≈ 2⁻⁵²).
    pub fn pinv(&self) -> Result<Matrix> {
        let svd = self.svd()?;
        let sigma_max = svd.singular.first().copied().unwrap_or(0.0);
        let tol = self.rows.max(self.cols) as f64 * sigma_max * f64::EPSILON;
        self.pinv_from_svd(&svd, tol)
    }

    /// Pseudo-inverse treating singular values `≤ tol` as zero.
    pub fn pinv_with_tol(&self, tol: f64) -> Result<Matrix> {
        if tol < 0.0 {
            return Err(Error::Argument(format!("pinv tolerance {tol} is negative")));
        }
        let svd = self.svd()?;
        self.pinv_from_svd(&svd, tol)
    }

    fn pinv_from_svd(&self, svd: &SvdResult, tol: f64) -> Result<Matrix> {
        // A† = V Σ† U^T
        let k = svd.singular.len();
        let mut out = Matrix::zeros(self.cols, self.rows);
        for t in 0..k {
            let s = svd.singular[t];
            if s <= tol || s == 0.0 {
                continue;
            }
            let inv = 1.0 / s;
            for i in 0..self.cols {
                let vs = svd.right_t.get(t, i) * inv;
                for j in 0..self.rows {
                    out.data[i * self.rows + j] += vs * svd.left.get(j, t);
                }
            }
        }
        Ok(out)
    }

    /// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
    /// Returns orthogonal `Q` and eigenvalues sorted descending with columns
    /// of `Q` matching: `self = Q diag(λ) Q^T`.
    pub fn sym_eig(&self) -> Result<(Matrix, Vec<f64>)> {
        if self.rows != self.cols {
            return Err(Error::Shape(format!(
                "sym_eig on non-square {}x{}",
                self.rows, self.cols
            )));
        }
        let n = self.rows;
        let asym = self.max_abs_diff(&self.transpose());
        if asym > 1e-9 * (1.0 + self.max_abs()) {
            return Err(Error::Argument(format!(
                "sym_eig on non-symmetric matrix (asymmetry {asym:.3e})"
            )));
        }
        let mut a = self.add(&self.transpose())?.scaled(0.5);
        let mut q = Matrix::identity(n);
        const MAX_SWEEPS: usize = 60;
        let scale = a.max_abs().max(f64::MIN_POSITIVE);
        for sweep in 0..=MAX_SWEEPS {
            let mut off = 0.0f64;
            for i in 0..n {
                for j in (i + 1)..n {
                    off = off.max(a.get(i, j).abs());
                }
            }
            if off <= 1e-14 * scale {
                break;
            }
            if sweep == MAX_SWEEPS {
                return Err(Error::Numeric(format!(
                    "jacobi eigensolver did not converge after {MAX_SWEEPS} sweeps"
                )));
            }
            for p in 0..n {
                for r in (p + 1)..n {
                    let apq = a.get(p, r);
                    if apq.abs() <= 1e-16 * scale {
                        continue;
                    }
                    let app = a.get(p, p);
                    let aqq = a.get(r, r);
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..n {
                        let aip = a.get(i, p);
                        let aiq = a.get(i, r);
                        a.set(i, p, c * aip - s * aiq);
                        a.set(i, r, s * aip + c * aiq);
                    }
                    for j in 0..n {
                        let apj = a.get(p, j);
                        let aqj = a.get(r, j);
                        a.set(p, j, c * apj - s * aqj);
                        a.set(r, j, s * apj + c * aqj);
                    }
                    for i in 0..n {
                        let qip = q.get(i, p);
                        let qiq = q.get(i, r);
                        q.set(i, p, c * qip - s * qiq);
                        q.set(i, r, s * qip + c * qiq);
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| a.get(j, j).partial_cmp(&a.get(i, i)).unwrap().then(i.cmp(&j)));
        let eigvals: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
        let qs = Matrix::from_fn(n, n, |i, j| q.get(i, order[j]));
        Ok((qs, eigvals))
    }

    /// Symmetric PSD square root. Eigenvalues slightly below zero (≥ −1e-10
    /// relative) are clamped; anything more negative is rejected.
    pub fn psd_sqrt(&self) -> Result<Matrix> {
        let (q, lam) = self.sym_eig()?;
        let lmax = lam.first().copied().unwrap_or(0.0).max(0.0);
        let floor = -1e-10 * lmax.max(1.0);
        if lam.iter().any(|&l| l < floor) {
            return Err(Error::Argument(format!(
                "matrix is not PSD (min eigenvalue {:.3e})",
                lam.last().copied().unwrap_or(0.0)
            )));
        }
        let roots: Vec<f64> = lam.iter().map(|&l| l.max(0.0).sqrt()).collect();
        let qs = q.matmul(&Matrix::diag(&roots))?;
        qs.matmul(&q.transpose())
    }
}

/// Orthonormalise column `j` of `u` against all non-null columns using
/// standard basis candidates (modified Gram-Schmidt).
fn complete_orthonormal_column(u: &mut Matrix, j: usize, pending: &[usize]) -> Result<()> {
    let m = u.rows();
    for cand in 0..m {
        let mut col: Vec<f64> = (0..m).map(|i| if i == cand { 1.0 } else { 0.0 }).collect();
        for other in 0..u.cols() {
            if other == j || (pending.contains(&other) && other > j) {
                continue;
            }
            let dot: f64 = (0..m).map(|i| col[i] * u.get(i, other)).sum();
            for (i, c) in col.iter_mut().enumerate() {
                *c -= dot * u.get(i, other);
            }
        }
        let nrm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nrm > 0.5 {
            for (i, c) in col.iter().enumerate() {
                u.set(i, j, c / nrm);
            }
            return Ok(());
        }
    }
    Err(Error::Numeric("failed to complete orthonormal basis".into()))
}

/// Result of [`Matrix::svd`]: `a = left · diag(singular) · right_t`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// m×k with orthonormal columns.
    pub left: Matrix,
    /// k = min(m, n) non-negative values, non-increasing.
    pub singular: Vec<f64>,
    /// k×n with orthonormal rows.
    pub right_t: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let k = self.singular.len();
        let m = self.left.rows();
        let n = self.right_t.cols();
        let mut out = Matrix::zeros(m, n);
        for t in 0..k {
            let s = self.singular[t];
            for i in 0..m {
                let us = self.left.get(i, t) * s;
                for j in 0..n {
                    out.data[i * n + j] += us * self.right_t.get(t, j);
                }
            }
        }
        out
    }

    /// Number of singular values above `tol`.
    pub fn rank(&self, tol: f64) -> usize {
        self.singular.iter().filter(|&&s| s > tol).count()
    }

    /// Rank with the pinv default cutoff.
    pub fn rank_default(&self) -> usize {
        let smax = self.singular.first().copied().unwrap_or(0.0);
        let dim = self.left.rows().max(self.right_t.cols());
        self.rank(dim as f64 * smax * f64::EPSILON)
    }
}

/// A permutation of `0..n` stored together with its inverse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexPermutation {
    order: Vec<usize>,
    inverse: Vec<usize>,
}

impl IndexPermutation {
    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut inverse = vec![usize::MAX; n];
        for (i, &o) in order.iter().enumerate() {
            if o >= n {
                return Err(Error::Argument(format!("index {o} out of range 0..{n}")));
            }
            if inverse[o] != usize::MAX {
                return Err(Error::Argument(format!("duplicate index {o} in permutation")));
            }
            inverse[o] = i;
        }
        Ok(IndexPermutation { order, inverse })
    }

    pub fn identity(n: usize) -> Self {
        let order: Vec<usize> = (0..n).collect();
        IndexPermutation { inverse: order.clone(), order }
    }

    pub fn inverted(&self) -> Self {
        IndexPermutation { order: self.inverse.clone(), inverse: self.order.clone() }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &o)| i == o)
    }

    /// Expand a permutation of `blocks` block slots into a permutation of
    /// `blocks * width` scalar indices, moving whole blocks.
    pub fn expand_blocks(&self, width: usize) -> Self {
        let mut order = Vec::with_capacity(self.order.len() * width);
        for &b in &self.order {
            for w in 0..width {
                order.push(b * width + w);
            }
        }
        IndexPermutation::from_order(order).expect("block expansion preserves validity")
    }
}
