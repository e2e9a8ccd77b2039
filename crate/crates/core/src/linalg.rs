//! Dense linear algebra kernels.
//!
//! Everything downstream (subspace selection, weight transformation, the
//! training engine) runs on the row-major [`Matrix`] defined here. The
//! eigensolver is cyclic Jacobi; the SVD is obtained from the eigenvectors of
//! the Gram matrix over the smaller side.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Largest square dimension accepted by [`sym_eig`] and [`svd`].
pub const MAX_DIM: usize = 4096;

const SYMMETRY_TOL: f64 = 1e-10;
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
/// Singular values below this fraction of the largest one carry no usable
/// direction when recovering the opposite singular vectors.
const SVD_ZERO_TOL: f64 = 1e-12;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting bad lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from a slice of equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.row_iter().map(<[f64]>::to_vec).collect()
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: indices.len(), cols: self.cols, data }
    }

    /// First `k` rows.
    pub fn top_rows(&self, k: usize) -> Matrix {
        let k = k.min(self.rows);
        Matrix { rows: k, cols: self.cols, data: self.data[..k * self.cols].to_vec() }
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "cannot stack {}x{} on {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix { rows: self.rows + other.rows, cols: self.cols, data })
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    /// `self * otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by the transpose of {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ * self`.
    pub fn gram(&self) -> Matrix {
        let d = self.cols;
        let mut g = Matrix::zeros(d, d);
        for row in self.row_iter() {
            for (i, &ri) in row.iter().enumerate() {
                if ri == 0.0 {
                    continue;
                }
                let out = &mut g.data[i * d..(i + 1) * d];
                for (o, &rj) in out.iter_mut().zip(row) {
                    *o += ri * rj;
                }
            }
        }
        g
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "elementwise op on {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn frobenius_sq(&self) -> f64 {
        frobenius_sq(self)
    }

    pub fn frobenius(&self) -> f64 {
        frobenius_sq(self).sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(A + Aᵀ) / 2`; used to scrub rounding asymmetry from computed Grams.
    pub fn symmetrized(&self) -> Matrix {
        debug_assert!(self.is_square());
        let n = self.rows;
        Matrix::from_fn(n, n, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for row in self.row_iter() {
            writeln!(f, "  {row:?}")?;
        }
        write!(f, "]")
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standard matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Dimension(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let n = b.cols;
    let mut out = Matrix::zeros(a.rows, n);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in a.row(i).iter().enumerate() {
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Sum of squared entries.
///
/// Squares are summed in ascending order, so the result depends only on the
/// multiset of entries and `frobenius_sq(A) == frobenius_sq(Aᵀ)` holds exactly.
pub fn frobenius_sq(a: &Matrix) -> f64 {
    let mut squares: Vec<f64> = a.data.iter().map(|v| v * v).collect();
    squares.sort_unstable_by(f64::total_cmp);
    squares.iter().sum()
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct EigDecomposition {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Row `i` is the unit eigenvector for `eigenvalues[i]`.
    pub eigenvectors: Matrix,
}

impl EigDecomposition {
    /// `Vᵀ diag(λ) V`.
    pub fn reconstruct(&self) -> Matrix {
        let v = &self.eigenvectors;
        let scaled = Matrix::from_fn(v.rows(), v.cols(), |i, j| v[(i, j)] * self.eigenvalues[i]);
        v.transpose().matmul(&scaled).expect("eigenvector shapes agree")
    }
}

/// Thin singular value decomposition `A = U diag(σ) Vᵀ`.
#[derive(Debug, Clone)]
pub struct SvdDecomposition {
    /// `rows x p` with orthonormal columns, `p = min(rows, cols)`.
    pub u: Matrix,
    /// Descending, non-negative, length `p`.
    pub singular_values: Vec<f64>,
    /// `p x cols` with orthonormal rows.
    pub vt: Matrix,
}

impl SvdDecomposition {
    pub fn reconstruct(&self) -> Matrix {
        let u = &self.u;
        let us = Matrix::from_fn(u.rows(), u.cols(), |i, j| u[(i, j)] * self.singular_values[j]);
        us.matmul(&self.vt).expect("svd factor shapes agree")
    }
}

fn check_symmetric(a: &Matrix) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "expected a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    if a.rows > MAX_DIM {
        return Err(Error::Dimension(format!("dimension {} exceeds {MAX_DIM}", a.rows)));
    }
    let norm = a.frobenius();
    let n = a.rows;
    let mut asym = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = a[(i, j)] - a[(j, i)];
            asym += 2.0 * d * d;
        }
    }
    let asym = asym.sqrt();
    if asym > SYMMETRY_TOL * norm {
        return Err(Error::Symmetry(if norm > 0.0 { asym / norm } else { asym }));
    }
    Ok(())
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows;
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Flips each row so that its first non-negligible component is positive.
fn canonicalize_signs(v: &mut Matrix) {
    for i in 0..v.rows {
        let row = v.row_mut(i);
        let scale = row.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if let Some(&lead) = row.iter().find(|x| x.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
            if lead < 0.0 {
                row.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Iterates until the off-diagonal Frobenius norm drops below
/// `1e-12 * ‖A‖_F`, for at most 100 sweeps. Eigenvalues come back descending
/// with eigenvectors as rows, each sign-normalized so its first nonzero
/// component is positive.
pub fn sym_eig(a: &Matrix) -> Result<EigDecomposition> {
    check_symmetric(a)?;
    let n = a.rows;
    let norm = a.frobenius();
    let mut m = a.symmetrized();
    // Columns of `v` accumulate the rotations.
    let mut v = Matrix::identity(n);

    let mut sweeps = 0;
    let mut off = off_diagonal_norm(&m);
    while off > JACOBI_TOL * norm {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::Convergence { sweeps, residual: off });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut m, &mut v, p, q, c, s);
            }
        }
        sweeps += 1;
        off = off_diagonal_norm(&m);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let eigenvalues = order.iter().map(|&i| m[(i, i)]).collect();
    let mut eigenvectors = Matrix::from_fn(n, n, |r, c| v[(c, order[r])]);
    canonicalize_signs(&mut eigenvectors);
    Ok(EigDecomposition { eigenvalues, eigenvectors })
}

/// Applies `Jᵀ M J` and `V J` for the plane rotation in (p, q).
fn rotate(m: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = m.rows;
    for k in 0..n {
        let mkp = m[(k, p)];
        let mkq = m[(k, q)];
        m[(k, p)] = c * mkp - s * mkq;
        m[(k, q)] = s * mkp + c * mkq;
    }
    for k in 0..n {
        let mpk = m[(p, k)];
        let mqk = m[(q, k)];
        m[(p, k)] = c * mpk - s * mqk;
        m[(q, k)] = s * mpk + c * mqk;
    }
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Orthonormalizes `vectors` in place by two passes of modified Gram-Schmidt.
///
/// Vectors whose residual collapses are replaced by the first standard basis
/// direction that is still independent of the accepted ones.
pub fn orthonormalize(vectors: &mut [Vec<f64>]) {
    let dim = vectors.first().map_or(0, Vec::len);
    for i in 0..vectors.len() {
        let original = norm(&vectors[i]);
        for _ in 0..2 {
            for j in 0..i {
                let (done, rest) = vectors.split_at_mut(i);
                let proj = dot(&rest[0], &done[j]);
                rest[0].iter_mut().zip(&done[j]).for_each(|(x, b)| *x -= proj * b);
            }
        }
        let n = norm(&vectors[i]);
        if n > 1e-8 * original && n > 0.0 {
            vectors[i].iter_mut().for_each(|x| *x /= n);
            continue;
        }
        // Collapsed: fall back to a standard basis vector.
        for e in 0..dim {
            let mut cand = vec![0.0; dim];
            cand[e] = 1.0;
            for _ in 0..2 {
                for v in &vectors[..i] {
                    let proj = dot(&cand, v);
                    cand.iter_mut().zip(v).for_each(|(x, b)| *x -= proj * b);
                }
            }
            let n = norm(&cand);
            if n > 1e-6 {
                cand.iter_mut().for_each(|x| *x /= n);
                vectors[i] = cand;
                break;
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Thin SVD via the eigendecomposition of the smaller-side Gram.
///
/// The factor on the Gram side comes straight from the eigenvectors; the
/// other factor is recovered as `A v / σ` and re-orthonormalized, with
/// directions for (numerically) zero singular values completed to an
/// orthonormal set.
pub fn svd(a: &Matrix) -> Result<SvdDecomposition> {
    if a.rows.min(a.cols) > MAX_DIM {
        return Err(Error::Dimension(format!(
            "min dimension {} exceeds {MAX_DIM}",
            a.rows.min(a.cols)
        )));
    }
    if !a.all_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    let tall = a.rows >= a.cols;
    let gram = if tall { a.gram() } else { a.transpose().gram() };
    let eig = sym_eig(&gram)?;
    let singular_values: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let p = singular_values.len();
    let sigma_max = singular_values.first().copied().unwrap_or(0.0);
    let cutoff = SVD_ZERO_TOL * sigma_max;

    // `gram_side` rows are the eigenvectors; recover the other side.
    let gram_side = eig.eigenvectors;
    let other_len = if tall { a.rows } else { a.cols };
    let mut other: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            let sigma = singular_values[i];
            if sigma <= cutoff || sigma == 0.0 {
                return vec![0.0; other_len];
            }
            let v = gram_side.row(i);
            if tall {
                a.row_iter().map(|r| dot(r, v) / sigma).collect()
            } else {
                let mut out = vec![0.0; other_len];
                for (k, r) in a.row_iter().enumerate() {
                    let w = v[k] / sigma;
                    out.iter_mut().zip(r).for_each(|(o, x)| *o += w * x);
                }
                out
            }
        })
        .collect();
    orthonormalize(&mut other);
    let other = Matrix::from_rows(&other)?;

    let (u, vt) = if tall { (other.transpose(), gram_side) } else { (gram_side.transpose(), other) };
    Ok(SvdDecomposition { u, singular_values, vt })
}

/// Singular values only, descending.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    let gram = if a.rows >= a.cols { a.gram() } else { a.transpose().gram() };
    Ok(sym_eig(&gram)?.eigenvalues.into_iter().map(|l| l.max(0.0).sqrt()).collect())
}
