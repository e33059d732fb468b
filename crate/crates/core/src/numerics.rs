//! Dense real linear algebra.
//!
//! Everything here works on [`Matrix`], a row-major `f64` buffer. The routines
//! are the small set the rest of the crate needs: symmetric eigendecomposition
//! by cyclic Jacobi rotations, Cholesky-based ridge solves, pseudo-inverse
//! solves for the ridge-free limit, and index-based submatrix extraction.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of 64-bit floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "matrix data",
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
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

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, a: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * a).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Adds `other` into `self` in place.
    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self, false, other, false, 0.0, &mut out);
        Ok(out)
    }

    /// `selfᵀ * other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "t_matmul {:?}ᵀ x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(1.0, self, true, other, false, 0.0, &mut out);
        Ok(out)
    }

    /// `self * otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "matmul_t {:?} x {:?}ᵀ",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(1.0, self, false, other, true, 0.0, &mut out);
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "matvec {:?} x {}",
                self.shape(),
                x.len()
            )));
        }
        Ok((0..self.rows)
            .map(|r| dot(self.row(r), x))
            .collect())
    }

    /// Largest absolute difference between `self` and its transpose.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Replaces `self` by `(self + selfᵀ) / 2`.
    pub fn symmetrize(&mut self) {
        assert!(self.is_square());
        let n = self.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = v;
                self.data[j * n + i] = v;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `c ← alpha · op(a) · op(b) + beta · c`, where `op` optionally transposes.
///
/// Panics on inconsistent shapes; callers validate at their own boundary.
pub fn gemm(alpha: f64, a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool, beta: f64, c: &mut Matrix) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimensions");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.data.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: the strides above describe exactly the (m x k) and (k x n) views of
    // `a` and `b`, and `c` is an owned m x n row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Eigendecomposition of a symmetric positive semidefinite matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SymmetricSpectrum {
    /// Eigenvalues, sorted descending.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns.
    pub basis: Matrix,
}

impl SymmetricSpectrum {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Number of eigenvalues above `rel_tol · μ₁`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let top = self.eigenvalues.first().copied().unwrap_or(0.0);
        if top <= 0.0 {
            return 0;
        }
        self.eigenvalues.iter().filter(|&&mu| mu > rel_tol * top).count()
    }

    /// `U · diag(f(μ)) · Uᵀ`.
    pub fn apply_fn(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.dim();
        let mut scaled = self.basis.clone();
        for r in 0..n {
            let row = scaled.row_mut(r);
            for (v, &mu) in row.iter_mut().zip(&self.eigenvalues) {
                *v *= f(mu);
            }
        }
        scaled.matmul_t(&self.basis).expect("square basis")
    }

    pub fn reconstruct(&self) -> Matrix {
        self.apply_fn(|mu| mu)
    }
}

const SYMMETRY_TOL: f64 = 1e-10;
const INDEFINITE_TOL: f64 = 1e-10;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Eigenvalues in `[-1e-10·‖m‖_F, 0)` are clamped to zero; anything more
/// negative is reported as [`Error::IndefiniteBeyondTolerance`].
pub fn sym_eig(m: &Matrix) -> Result<SymmetricSpectrum> {
    let (eigenvalues, basis) = jacobi_eigen(m)?;
    let scale = m.frobenius_norm();
    let mut eigenvalues = eigenvalues;
    for mu in eigenvalues.iter_mut() {
        if *mu < 0.0 {
            if *mu < -INDEFINITE_TOL * scale {
                return Err(Error::IndefiniteBeyondTolerance { eigenvalue: *mu });
            }
            *mu = 0.0;
        }
    }
    Ok(SymmetricSpectrum { eigenvalues, basis })
}

/// Jacobi eigendecomposition of a symmetric (not necessarily PSD) matrix.
/// Returns eigenvalues sorted descending and eigenvectors as columns.
pub fn sym_eig_general(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    jacobi_eigen(m)
}

fn jacobi_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if !m.is_square() {
        return Err(Error::ShapeMismatch(format!("sym_eig needs a square matrix, got {:?}", m.shape())));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite { context: "sym_eig input" });
    }
    let max_asym = m.max_asymmetry();
    if max_asym > SYMMETRY_TOL {
        return Err(Error::NonSymmetric { max_asym });
    }
    let n = m.rows();
    let mut a = m.clone();
    a.symmetrize();
    let a = a.as_mut_slice();
    // rows of `vt` are the eigenvectors
    let mut vt = Matrix::identity(n);
    let v = vt.as_mut_slice();

    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for sweep in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += a[p * n + q] * a[p * n + q];
                }
            }
            if off.sqrt() <= 1e-17 * norm || off == 0.0 {
                break;
            }
            // Rutishauser's threshold for the first sweeps
            let thresh = if sweep < 3 { 0.2 * off.sqrt() / (n * n) as f64 } else { 0.0 };
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[p * n + q];
                    let app = a[p * n + p];
                    let aqq = a[q * n + q];
                    let g = 100.0 * apq.abs();
                    if sweep > 3 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                        a[p * n + q] = 0.0;
                        a[q * n + p] = 0.0;
                        continue;
                    }
                    if apq.abs() <= thresh || apq == 0.0 {
                        continue;
                    }
                    let h = aqq - app;
                    let t = if h.abs() + g == h.abs() {
                        apq / h
                    } else {
                        let theta = 0.5 * h / apq;
                        let t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
                        if theta < 0.0 {
                            -t
                        } else {
                            t
                        }
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        if k == p || k == q {
                            continue;
                        }
                        let x = a[p * n + k];
                        let y = a[q * n + k];
                        let np = c * x - s * y;
                        let nq = s * x + c * y;
                        a[p * n + k] = np;
                        a[q * n + k] = nq;
                        a[k * n + p] = np;
                        a[k * n + q] = nq;
                    }
                    a[p * n + p] = app - t * apq;
                    a[q * n + q] = aqq + t * apq;
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    let (head, tail) = v.split_at_mut(q * n);
                    let vp = &mut head[p * n..(p + 1) * n];
                    let vq = &mut tail[..n];
                    for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
                        let (ox, oy) = (*x, *y);
                        *x = c * ox - s * oy;
                        *y = s * ox + c * oy;
                    }
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let basis = Matrix::from_fn(n, n, |r, c| v[order[c] * n + r]);
    Ok((eigenvalues, basis))
}

/// Solves `(m + diag(ridge)) X = rhs` by Cholesky factorization.
///
/// A pivot below `1e-12 · trace(m + diag(ridge))` is reported as [`Error::Singular`];
/// Cholesky pivots bound the smallest eigenvalue from above, so this threshold
/// fires no later than the eigenvalue test would.
pub fn psd_solve(m: &Matrix, ridge: &[f64], rhs: &Matrix) -> Result<Matrix> {
    let chol = Cholesky::factor(m, ridge)?;
    chol.solve(rhs)
}

/// Lower-triangular Cholesky factor of `m + diag(ridge)`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn factor(m: &Matrix, ridge: &[f64]) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::ShapeMismatch(format!("psd_solve needs a square matrix, got {:?}", m.shape())));
        }
        let n = m.rows();
        if ridge.len() != n {
            return Err(Error::ShapeMismatch(format!("ridge length {} for {n}x{n} matrix", ridge.len())));
        }
        if ridge.iter().any(|&r| !(r >= 0.0) || !r.is_finite()) {
            return Err(Error::InvalidParameter("ridge entries must be finite and nonnegative".into()));
        }
        let trace: f64 = m.trace() + ridge.iter().sum::<f64>();
        let threshold = 1e-12 * trace.abs();
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = m.get(j, j) + ridge[j];
            {
                let lj = l.row(j);
                d -= dot(&lj[..j], &lj[..j]);
            }
            if !(d > threshold) {
                return Err(Error::Singular { pivot: d, threshold });
            }
            let djj = d.sqrt();
            l.set(j, j, djj);
            for i in (j + 1)..n {
                let s = m.get(i, j) - dot(&l.row(i)[..j], &l.row(j)[..j]);
                l.set(i, j, s / djj);
            }
        }
        Ok(Cholesky { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    pub fn solve(&self, rhs: &Matrix) -> Result<Matrix> {
        let n = self.dim();
        if rhs.rows() != n {
            return Err(Error::ShapeMismatch(format!("rhs has {} rows, system has {n}", rhs.rows())));
        }
        let k = rhs.cols();
        let mut x = rhs.clone();
        // forward: L y = b
        for i in 0..n {
            for j in 0..i {
                let lij = self.l.get(i, j);
                if lij != 0.0 {
                    for c in 0..k {
                        let v = x.get(i, c) - lij * x.get(j, c);
                        x.set(i, c, v);
                    }
                }
            }
            let lii = self.l.get(i, i);
            for c in 0..k {
                x.set(i, c, x.get(i, c) / lii);
            }
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            for j in (i + 1)..n {
                let lji = self.l.get(j, i);
                if lji != 0.0 {
                    for c in 0..k {
                        let v = x.get(i, c) - lji * x.get(j, c);
                        x.set(i, c, v);
                    }
                }
            }
            let lii = self.l.get(i, i);
            for c in 0..k {
                x.set(i, c, x.get(i, c) / lii);
            }
        }
        Ok(x)
    }
}

/// Minimum-norm solution of `(m + diag(ridge)) X = rhs` through the eigen
/// pseudo-inverse, discarding eigenvalues below `rcond · μ₁`.
pub fn pinv_solve(m: &Matrix, ridge: &[f64], rhs: &Matrix, rcond: f64) -> Result<Matrix> {
    if ridge.len() != m.rows() {
        return Err(Error::ShapeMismatch(format!("ridge length {} for {:?}", ridge.len(), m.shape())));
    }
    if rhs.rows() != m.rows() {
        return Err(Error::ShapeMismatch(format!("rhs has {} rows, system has {}", rhs.rows(), m.rows())));
    }
    let mut shifted = m.clone();
    for (i, r) in ridge.iter().enumerate() {
        shifted.set(i, i, shifted.get(i, i) + r);
    }
    let spec = sym_eig(&shifted)?;
    let cutoff = rcond * spec.eigenvalues.first().copied().unwrap_or(0.0);
    let inv = spec.apply_fn(|mu| if mu > cutoff && mu > 0.0 { 1.0 / mu } else { 0.0 });
    inv.matmul(rhs)
}

fn check_indices(idx: &[usize], dim: usize) -> Result<()> {
    let mut seen = HashSet::with_capacity(idx.len());
    for &i in idx {
        if i >= dim {
            return Err(Error::IndexOutOfRange { index: i, dim });
        }
        if !seen.insert(i) {
            return Err(Error::DuplicateIndex(i));
        }
    }
    Ok(())
}

/// Extracts `m[row_idx, col_idx]`. Duplicate indices are rejected.
pub fn submatrix(m: &Matrix, row_idx: &[usize], col_idx: &[usize]) -> Result<Matrix> {
    check_indices(row_idx, m.rows())?;
    check_indices(col_idx, m.cols())?;
    Ok(Matrix::from_fn(row_idx.len(), col_idx.len(), |a, b| m.get(row_idx[a], col_idx[b])))
}

/// Rows of `m` in the given order (duplicates rejected).
pub fn select_rows(m: &Matrix, row_idx: &[usize]) -> Result<Matrix> {
    let all: Vec<usize> = (0..m.cols()).collect();
    submatrix(m, row_idx, &all)
}

/// Largest singular value, via the smaller of the two Gram matrices.
pub fn op_norm(m: &Matrix) -> Result<f64> {
    let gram = if m.rows() <= m.cols() { m.matmul_t(m)? } else { m.t_matmul(m)? };
    let mut gram = gram;
    gram.symmetrize();
    let spec = sym_eig(&gram)?;
    Ok(spec.eigenvalues.first().copied().unwrap_or(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_psd(n: usize, seed: u64) -> Matrix {
        let g = random_matrix(n, n, seed);
        let mut m = g.t_matmul(&g).unwrap();
        m.symmetrize();
        m
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum())
    }

    #[test]
    fn gemm_variants_match_naive() {
        let a = random_matrix(5, 7, 1);
        let b = random_matrix(7, 3, 2);
        let expected = naive_matmul(&a, &b);
        let got = a.matmul(&b).unwrap();
        assert!(got.sub(&expected).unwrap().max_abs() < 1e-12);
        let got_t = a.transpose().t_matmul(&b).unwrap();
        assert!(got_t.sub(&expected).unwrap().max_abs() < 1e-12);
        let got_tt = a.matmul_t(&b.transpose()).unwrap();
        assert!(got_tt.sub(&expected).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn eig_identity() {
        let s = sym_eig(&Matrix::identity(3)).unwrap();
        assert_eq!(s.eigenvalues, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn eig_diagonal_sorted() {
        let s = sym_eig(&Matrix::from_diag(&[1.0, 3.0])).unwrap();
        assert_eq!(s.eigenvalues, vec![3.0, 1.0]);
        // basis is a permutation of the identity
        assert_eq!(s.basis.get(1, 0).abs(), 1.0);
        assert_eq!(s.basis.get(0, 1).abs(), 1.0);
        assert_eq!(s.basis.get(0, 0), 0.0);
    }

    #[test]
    fn eig_reconstructs_random_psd() {
        let m = random_psd(10, 7);
        let s = sym_eig(&m).unwrap();
        let err = s.reconstruct().sub(&m).unwrap().frobenius_norm() / m.frobenius_norm();
        assert!(err < 1e-8, "reconstruction error {err}");
        let utu = s.basis.t_matmul(&s.basis).unwrap();
        assert!(utu.sub(&Matrix::identity(10)).unwrap().max_abs() < 1e-10);
        assert!(s.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn eig_rejects_asymmetric_and_indefinite() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&m), Err(Error::NonSymmetric { .. })));
        let m = Matrix::from_diag(&[1.0, -0.5]);
        assert!(matches!(sym_eig(&m), Err(Error::IndefiniteBeyondTolerance { .. })));
        // tiny negative values are clamped
        let m = Matrix::from_diag(&[1.0, -1e-13]);
        assert_eq!(sym_eig(&m).unwrap().eigenvalues, vec![1.0, 0.0]);
    }

    #[test]
    fn eig_nonfinite_rejected() {
        let m = Matrix {
            rows: 1,
            cols: 1,
            data: vec![f64::NAN],
        };
        assert!(matches!(sym_eig(&m), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn solve_identity_and_pure_ridge() {
        let b = random_matrix(4, 2, 3);
        let x = psd_solve(&Matrix::identity(4), &[0.0; 4], &b).unwrap();
        assert!(x.sub(&b).unwrap().max_abs() < 1e-15);
        let lam = 0.25;
        let x = psd_solve(&Matrix::zeros(4, 4), &[lam; 4], &b).unwrap();
        assert!(x.sub(&b.scale(1.0 / lam)).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn solve_residual_random() {
        let m = random_psd(8, 11);
        let rhs = random_matrix(8, 3, 12);
        let ridge = vec![1e-3; 8];
        let x = psd_solve(&m, &ridge, &rhs).unwrap();
        let mut shifted = m.clone();
        for i in 0..8 {
            shifted.set(i, i, m.get(i, i) + 1e-3);
        }
        let res = naive_matmul(&shifted, &x).sub(&rhs).unwrap().frobenius_norm() / rhs.frobenius_norm();
        assert!(res < 1e-9, "residual {res}");
    }

    #[test]
    fn solve_singular_and_shape_errors() {
        let m = Matrix::from_diag(&[1.0, 0.0]);
        let rhs = Matrix::zeros(2, 1);
        assert!(matches!(psd_solve(&m, &[0.0, 0.0], &rhs), Err(Error::Singular { .. })));
        assert!(matches!(psd_solve(&m, &[0.0], &rhs), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn pinv_handles_rank_deficiency() {
        let m = Matrix::from_diag(&[2.0, 0.0]);
        let rhs = Matrix::from_rows(&[vec![4.0], vec![1.0]]).unwrap();
        let x = pinv_solve(&m, &[0.0, 0.0], &rhs, 1e-12).unwrap();
        assert_eq!(x.col(0), vec![2.0, 0.0]);
    }

    #[test]
    fn submatrix_cases() {
        let m = random_psd(3, 5);
        let all = [0, 1, 2];
        assert_eq!(submatrix(&m, &all, &all).unwrap(), m);
        let single = submatrix(&m, &[2], &[0]).unwrap();
        assert_eq!(single.shape(), (1, 1));
        assert_eq!(single.get(0, 0), m.get(2, 0));
        let fj = submatrix(&m, &all, &[0, 2]).unwrap();
        let jf = submatrix(&m, &[0, 2], &all).unwrap();
        assert_eq!(fj.transpose(), jf);
        assert!(matches!(submatrix(&m, &[3], &[0]), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(submatrix(&m, &[1, 1], &[0]), Err(Error::DuplicateIndex(1))));
    }

    #[test]
    fn op_norm_matches_known() {
        let m = Matrix::from_rows(&[vec![3.0, 0.0, 0.0], vec![0.0, 4.0, 0.0]]).unwrap();
        assert!((op_norm(&m).unwrap() - 4.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn reconstruction_and_trace(n in 1usize..64, seed in any::<u64>()) {
                let g = random_matrix(n, n, seed);
                let mut m = g.add(&g.transpose()).unwrap();
                m.symmetrize();
                let (vals, basis) = sym_eig_general(&m).unwrap();
                let spec = SymmetricSpectrum { eigenvalues: vals.clone(), basis };
                let err = spec.reconstruct().sub(&m).unwrap().frobenius_norm() / m.frobenius_norm().max(1e-300);
                prop_assert!(err < 1e-8);
                let tr: f64 = vals.iter().sum();
                prop_assert!((tr - m.trace()).abs() <= 1e-9 * m.frobenius_norm().max(1.0));
            }

            #[test]
            fn solve_residual(n in 1usize..24, seed in any::<u64>(), ridge in 1e-3f64..1.0) {
                let m = random_psd(n, seed);
                let rhs = random_matrix(n, 2, seed ^ 0x55);
                let x = psd_solve(&m, &vec![ridge; n], &rhs).unwrap();
                let mut shifted = m.clone();
                for i in 0..n { shifted.set(i, i, m.get(i, i) + ridge); }
                let res = shifted.matmul(&x).unwrap().sub(&rhs).unwrap().frobenius_norm() / rhs.frobenius_norm();
                prop_assert!(res < 1e-9);
            }
        }
    }
}
