//! Dense row-major matrices and the two decompositions the rest of the crate
//! leans on (full left SVD and thin QR). The left SVD is a one-sided Jacobi
//! iteration; QR and the pseudo-inverse are delegated to `nalgebra`.

use std::fmt;

use nalgebra::DMatrix;

use crate::error::{arg_err, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data. Non-finite entries are rejected.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return arg_err(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return arg_err("matrix entries must be finite");
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return arg_err("ragged rows");
        }
        Self::new(r, c, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Row-major entries.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub(crate) fn get_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return arg_err(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            ));
        }
        Ok(self.mul_unchecked(rhs))
    }

    pub(crate) fn mul_unchecked(&self, rhs: &Matrix) -> Matrix {
        let mut out = vec![0.0; self.rows * rhs.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
            for p in 0..self.cols {
                let a = self.data[i * self.cols + p];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[p * rhs.cols..(p + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Matrix::from_raw(self.rows, rhs.cols, out)
    }

    /// `selfᵀ · rhs` without materialising the transpose.
    pub(crate) fn tmul_unchecked(&self, rhs: &Matrix) -> Matrix {
        debug_assert_eq!(self.rows, rhs.rows);
        let mut out = vec![0.0; self.cols * rhs.cols];
        for p in 0..self.rows {
            let lhs_row = self.row(p);
            let rhs_row = rhs.row(p);
            for (i, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Matrix::from_raw(self.cols, rhs.cols, out)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * s).collect(),
        )
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, other: &Matrix, s: f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return arg_err(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(Matrix::from_raw(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + s * b)
                .collect(),
        ))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.add_scaled(other, -1.0)
    }

    /// `(A + Aᵀ) / 2`; only meaningful for square matrices.
    pub fn sym(&self) -> Matrix {
        debug_assert_eq!(self.rows, self.cols);
        Matrix::from_fn(self.rows, self.cols, |i, j| {
            0.5 * (self.get(i, j) + self.get(j, i))
        })
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn inner(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Leading `n` columns.
    pub fn leading_columns(&self, n: usize) -> Matrix {
        let n = n.min(self.cols);
        Matrix::from_fn(self.rows, n, |i, j| self.get(i, j))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest |entry| difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// ‖selfᵀself − I‖_F.
    pub fn orthonormality_defect(&self) -> f64 {
        let gram = self.tmul_unchecked(self);
        gram.sub(&Matrix::identity(self.cols))
            .map_or(f64::INFINITY, |d| d.frobenius_norm())
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    /// Full set of left singular vectors (`rows x rows`, orthonormal) and the
    /// `rows` singular values in non-increasing order, zero-padded when the
    /// matrix has fewer columns than rows.
    ///
    /// Each singular vector is sign-normalised so that its largest-magnitude
    /// entry (first one on ties) is nonnegative.
    pub fn left_singular(&self) -> (Matrix, Vec<f64>) {
        let m = self.rows;
        if m == 0 {
            return (Matrix::zeros(0, 0), Vec::new());
        }
        // One-sided Jacobi on the rows: rotate them until mutually orthogonal.
        // The accumulated rotation is U and the row norms are the singular
        // values. Unlike bidiagonal QR this keeps full relative accuracy on
        // rank-deficient inputs.
        let n = self.cols;
        let mut w = self.data.clone();
        let mut u = Matrix::identity(m);
        let tol = f64::EPSILON * m as f64;
        for _sweep in 0..100 {
            let mut rotated = false;
            for p in 0..m {
                for q in p + 1..m {
                    let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                    for k in 0..n {
                        let (a, b) = (w[p * n + k], w[q * n + k]);
                        alpha += a * a;
                        beta += b * b;
                        gamma += a * b;
                    }
                    if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for k in 0..n {
                        let (a, b) = (w[p * n + k], w[q * n + k]);
                        w[p * n + k] = c * a - s * b;
                        w[q * n + k] = s * a + c * b;
                    }
                    for i in 0..m {
                        let (a, b) = (u.get(i, p), u.get(i, q));
                        *u.get_mut(i, p) = c * a - s * b;
                        *u.get_mut(i, q) = s * a + c * b;
                    }
                }
            }
            if !rotated {
                break;
            }
        }
        let sv: Vec<f64> = (0..m)
            .map(|j| {
                w[j * n..(j + 1) * n]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();

        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&x, &y| sv[y].total_cmp(&sv[x]).then(x.cmp(&y)));

        let mut out = Matrix::zeros(m, m);
        let mut svals = Vec::with_capacity(m);
        for (dst, &src) in order.iter().enumerate() {
            svals.push(sv[src]);
            for i in 0..m {
                *out.get_mut(i, dst) = u.get(i, src);
            }
        }
        orthonormalize_in_place(&mut out);
        normalize_signs(&mut out);
        (out, svals)
    }
}

/// Flip each column so its largest-magnitude entry is nonnegative.
pub(crate) fn normalize_signs(u: &mut Matrix) {
    for j in 0..u.cols {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for i in 0..u.rows {
            let a = u.get(i, j).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if u.rows > 0 && u.get(best, j) < 0.0 {
            for i in 0..u.rows {
                *u.get_mut(i, j) = -u.get(i, j);
            }
        }
    }
}

/// Two passes of modified Gram-Schmidt on a square, nearly orthogonal matrix.
/// Columns that collapse are replaced with the standard basis vector that is
/// least represented so far. Only touches columns in need of repair.
fn orthonormalize_in_place(u: &mut Matrix) {
    if u.orthonormality_defect() < 1e-13 {
        return;
    }
    let (m, n) = u.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| u.column(j)).collect();
    for j in 0..n {
        for _ in 0..2 {
            for p in 0..j {
                let d: f64 = cols[j].iter().zip(&cols[p]).map(|(a, b)| a * b).sum();
                let prev = cols[p].clone();
                for (x, y) in cols[j].iter_mut().zip(prev) {
                    *x -= d * y;
                }
            }
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols[j].iter_mut().for_each(|v| *v /= norm);
            continue;
        }
        // Replace with a fresh basis direction orthogonal to the accepted ones.
        let mut best = vec![0.0; m];
        let mut best_norm = 0.0;
        for e in 0..m {
            let mut cand = vec![0.0; m];
            cand[e] = 1.0;
            for _ in 0..2 {
                for col in &cols[..j] {
                    let d: f64 = cand.iter().zip(col).map(|(a, b)| a * b).sum();
                    for (x, y) in cand.iter_mut().zip(col) {
                        *x -= d * y;
                    }
                }
            }
            let cn = cand.iter().map(|v| v * v).sum::<f64>().sqrt();
            if cn > best_norm {
                best_norm = cn;
                best = cand;
            }
        }
        cols[j] = best.into_iter().map(|v| v / best_norm).collect();
    }
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            *u.get_mut(i, j) = v;
        }
    }
}

/// Thin Householder QR of a tall matrix: returns `(Q, diag(R))` with `Q` of
/// shape `rows x cols`. Signs are whatever the factorisation produces.
pub(crate) fn thin_qr(y: &Matrix) -> (Matrix, Vec<f64>) {
    let qr = nalgebra::linalg::QR::new(y.to_nalgebra());
    let q = qr.q();
    let r = qr.r();
    let diag = (0..y.cols.min(y.rows)).map(|i| r[(i, i)]).collect();
    (Matrix::from_nalgebra(&q), diag)
}

/// Moore-Penrose pseudo-inverse via SVD.
pub(crate) fn pseudo_inverse(a: &Matrix) -> Matrix {
    if a.rows == 0 || a.cols == 0 {
        return Matrix::zeros(a.cols, a.rows);
    }
    let svd = nalgebra::linalg::SVD::new(a.to_nalgebra(), true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = smax * 1e-13 * (a.rows.max(a.cols) as f64);
    let pinv = svd.pseudo_inverse(eps).expect("U and V were computed");
    Matrix::from_nalgebra(&pinv)
}
