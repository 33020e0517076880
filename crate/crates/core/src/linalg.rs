//! Dense row-major matrices and the factorizations the GP layers need.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative jitter tried first, as a fraction of the mean diagonal.
pub const DEFAULT_JITTER: f64 = 1e-6;
/// Number of ×10 escalations after the base jitter (1e-6 → 1e2).
pub const JITTER_ESCALATIONS: i32 = 8;

/// Row-major real matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "DenseMatrix::from_vec",
                rows * cols,
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("DenseMatrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Column vector.
    pub fn column_vector(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    /// Rows selected by index, in the given order.
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

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: f64, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn add_diag(&mut self, c: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += c;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("lhs cols = rhs rows ({})", self.cols),
                other.rows,
            ));
        }
        Ok(gemm(self, false, other, false))
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// `op(a) · op(b)` where `op` optionally transposes. Shapes are asserted.
pub fn gemm(a: &DenseMatrix, ta: bool, b: &DenseMatrix, tb: bool) -> DenseMatrix {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "gemm inner dimension");
    let mut c = DenseMatrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides and extents describe the owned buffers exactly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Lower-triangular factor stored densely; entries above the diagonal are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LowerTriangular {
    matrix: DenseMatrix,
    jitter: f64,
}

impl LowerTriangular {
    /// Wraps a square matrix, rejecting nonzero entries above the diagonal.
    pub fn from_matrix(matrix: DenseMatrix) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return Err(Error::shape(
                "LowerTriangular",
                "square matrix",
                format!("{:?}", matrix.shape()),
            ));
        }
        for i in 0..matrix.rows() {
            for j in i + 1..matrix.cols() {
                if matrix[(i, j)] != 0.0 {
                    return Err(Error::shape(
                        "LowerTriangular",
                        "zero above diagonal",
                        format!("entry ({i},{j}) = {}", matrix[(i, j)]),
                    ));
                }
            }
        }
        Ok(Self {
            matrix,
            jitter: 0.0,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: DenseMatrix::identity(dim),
            jitter: 0.0,
        }
    }

    pub fn scaled_identity(dim: usize, c: f64) -> Self {
        let mut matrix = DenseMatrix::zeros(dim, dim);
        matrix.add_diag(c);
        Self {
            matrix,
            jitter: 0.0,
        }
    }

    /// Unpacks row-major lower-triangular entries whose diagonal is stored as logs.
    pub fn from_packed_log_diag(dim: usize, packed: &[f64]) -> Result<Self> {
        if packed.len() != packed_len(dim) {
            return Err(Error::shape(
                "LowerTriangular::from_packed_log_diag",
                packed_len(dim),
                packed.len(),
            ));
        }
        let mut m = DenseMatrix::zeros(dim, dim);
        let mut k = 0;
        for i in 0..dim {
            for j in 0..=i {
                m[(i, j)] = if i == j { packed[k].exp() } else { packed[k] };
                k += 1;
            }
        }
        Ok(Self {
            matrix: m,
            jitter: 0.0,
        })
    }

    /// Inverse of [`Self::from_packed_log_diag`]. Requires a positive diagonal.
    pub fn to_packed_log_diag(&self) -> Vec<f64> {
        let n = self.dim();
        let mut out = Vec::with_capacity(packed_len(n));
        for i in 0..n {
            for j in 0..=i {
                let v = self.matrix[(i, j)];
                out.push(if i == j { v.ln() } else { v });
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.matrix
    }

    /// Jitter added to the diagonal before factorization succeeded.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `L · Lᵀ`
    pub fn reconstruct(&self) -> DenseMatrix {
        gemm(&self.matrix, false, &self.matrix, true)
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.matrix.diag().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Length of the packed lower triangle of a `dim × dim` matrix.
pub fn packed_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

fn check_symmetric(a: &DenseMatrix) -> Result<()> {
    if a.rows() != a.cols() {
        return Err(Error::shape(
            "cholesky",
            "square matrix",
            format!("{:?}", a.shape()),
        ));
    }
    let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for i in 0..a.rows() {
        for j in 0..i {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    let rel = if scale > 0.0 { worst / scale } else { worst };
    if rel > 1e-10 {
        return Err(Error::NotSymmetric { asymmetry: rel });
    }
    Ok(())
}

/// Plain Cholesky of `a + jitter·I`, reading only the lower triangle.
fn cholesky_raw(a: &DenseMatrix, jitter: f64) -> Option<DenseMatrix> {
    let n = a.rows();
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut s = a[(j, j)] + jitter;
        for v in &l.data[j * n..j * n + j] {
            s -= v * v;
        }
        if !(s > 0.0) || !s.is_finite() {
            return None;
        }
        let ljj = s.sqrt();
        l.data[j * n + j] = ljj;
        for i in j + 1..n {
            let (upper, lower) = l.data.split_at_mut(i * n);
            let row_j = &upper[j * n..j * n + j];
            let row_i = &mut lower[..n];
            let mut s = a[(i, j)];
            for (x, y) in row_i[..j].iter().zip(row_j) {
                s -= x * y;
            }
            row_i[j] = s / ljj;
        }
    }
    Some(l)
}

/// Cholesky factorization with escalating diagonal jitter.
///
/// Tries `j = 0`, then `base_jitter · 10^k · mean(diag(a))` for `k = 0..=8`,
/// and returns the first factor that succeeds. The jitter used is available
/// through [`LowerTriangular::jitter`].
pub fn cholesky_with_jitter(a: &DenseMatrix, base_jitter: f64) -> Result<LowerTriangular> {
    check_symmetric(a)?;
    let n = a.rows();
    if let Some(l) = cholesky_raw(a, 0.0) {
        return Ok(LowerTriangular {
            matrix: l,
            jitter: 0.0,
        });
    }
    let mean_diag = if n == 0 {
        1.0
    } else {
        a.diag().iter().sum::<f64>() / n as f64
    };
    let scale = if mean_diag > 0.0 && mean_diag.is_finite() {
        mean_diag
    } else {
        1.0
    };
    let mut jitter = 0.0;
    for k in 0..=JITTER_ESCALATIONS {
        jitter = base_jitter * 10f64.powi(k) * scale;
        if let Some(l) = cholesky_raw(a, jitter) {
            return Ok(LowerTriangular { matrix: l, jitter });
        }
    }
    Err(Error::JitterExhausted {
        dim: n,
        max_jitter: jitter,
    })
}

/// Solves `L·X = B`, or `Lᵀ·X = B` when `transposed` is set.
pub fn tri_solve(l: &LowerTriangular, b: &DenseMatrix, transposed: bool) -> Result<DenseMatrix> {
    if l.dim() != b.rows() {
        return Err(Error::shape("tri_solve", l.dim(), b.rows()));
    }
    Ok(tri_solve_dense(l.matrix(), b, transposed))
}

const SOLVE_BLOCK: usize = 32;

/// Triangular solve against a dense lower-triangular matrix. Shapes are asserted.
///
/// Blocked: off-diagonal updates go through gemm, diagonal blocks are solved
/// by substitution.
pub(crate) fn tri_solve_dense(l: &DenseMatrix, b: &DenseMatrix, transposed: bool) -> DenseMatrix {
    let n = l.rows();
    assert_eq!(n, b.rows(), "tri_solve rows");
    let c = b.cols();
    let mut x = b.clone();
    if n == 0 || c == 0 {
        return x;
    }
    let blocks: Vec<(usize, usize)> = (0..n)
        .step_by(SOLVE_BLOCK)
        .map(|i0| (i0, (i0 + SOLVE_BLOCK).min(n)))
        .collect();
    if !transposed {
        for &(i0, i1) in &blocks {
            let (done, rest) = x.data.split_at_mut(i0 * c);
            let target = &mut rest[..(i1 - i0) * c];
            if i0 > 0 {
                // target -= L[i0..i1, 0..i0] · X[0..i0]
                unsafe {
                    matrixmultiply::dgemm(
                        i1 - i0,
                        i0,
                        c,
                        -1.0,
                        l.data.as_ptr().add(i0 * n),
                        n as isize,
                        1,
                        done.as_ptr(),
                        c as isize,
                        1,
                        1.0,
                        target.as_mut_ptr(),
                        c as isize,
                        1,
                    );
                }
            }
            substitute_forward(l, i0, i1, target, c);
        }
    } else {
        for &(i0, i1) in blocks.iter().rev() {
            let (head, done) = x.data.split_at_mut(i1 * c);
            let target = &mut head[i0 * c..];
            if i1 < n {
                // target -= L[i1..n, i0..i1]ᵀ · X[i1..n]
                unsafe {
                    matrixmultiply::dgemm(
                        i1 - i0,
                        n - i1,
                        c,
                        -1.0,
                        l.data.as_ptr().add(i1 * n + i0),
                        1,
                        n as isize,
                        done.as_ptr(),
                        c as isize,
                        1,
                        1.0,
                        target.as_mut_ptr(),
                        c as isize,
                        1,
                    );
                }
            }
            substitute_backward(l, i0, i1, target, c);
        }
    }
    x
}

/// Solves the diagonal block `L[i0..i1, i0..i1]` in place on `x` (rows i0..i1).
fn substitute_forward(l: &DenseMatrix, i0: usize, i1: usize, x: &mut [f64], c: usize) {
    for i in i0..i1 {
        let (done, rest) = x.split_at_mut((i - i0) * c);
        let xi = &mut rest[..c];
        for k in i0..i {
            let lik = l[(i, k)];
            if lik != 0.0 {
                let xk = &done[(k - i0) * c..(k - i0 + 1) * c];
                for (a, b) in xi.iter_mut().zip(xk) {
                    *a -= lik * b;
                }
            }
        }
        let inv = 1.0 / l[(i, i)];
        for a in xi.iter_mut() {
            *a *= inv;
        }
    }
}

/// Solves with the transpose of the diagonal block, in place.
fn substitute_backward(l: &DenseMatrix, i0: usize, i1: usize, x: &mut [f64], c: usize) {
    for i in (i0..i1).rev() {
        let (head, done) = x.split_at_mut((i - i0 + 1) * c);
        let xi = &mut head[(i - i0) * c..];
        for k in i + 1..i1 {
            let lki = l[(k, i)];
            if lki != 0.0 {
                let xk = &done[(k - i - 1) * c..(k - i) * c];
                for (a, b) in xi.iter_mut().zip(xk) {
                    *a -= lki * b;
                }
            }
        }
        let inv = 1.0 / l[(i, i)];
        for a in xi.iter_mut() {
            *a *= inv;
        }
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// columns. Each eigenvector's largest-magnitude entry is made positive.
pub fn symmetric_eigen(a: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
    check_symmetric(a)?;
    let n = a.rows();
    let mut m = a.clone();
    let mut v = DenseMatrix::identity(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        let total: f64 = m.data().iter().map(|x| x * x).sum();
        if off <= 1e-30 * total.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
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
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        let mut vec = v.column(src);
        let pivot = vec
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            vec.iter_mut().for_each(|x| *x = -*x);
        }
        for (r, x) in vec.into_iter().enumerate() {
            vectors[(r, col)] = x;
        }
    }
    Ok((values, vectors))
}
