//! Dense linear algebra in double precision.
//!
//! Everything here is deliberately small and sequential: loop orders are fixed
//! so every result is bitwise reproducible for a given input, which the
//! determinism guarantees of the trainer depend on.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative threshold below which an R-factor diagonal counts as zero.
pub const RANK_TOLERANCE: f64 = 1e-12;
/// Relative asymmetry accepted by the symmetric eigensolver.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 100;

/// Row-major dense matrix with at least one row and one column.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl Matrix {
    /// Zero matrix. Panics on a zero dimension.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be >= 1, got {rows}x{cols}");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Diagonal matrix from the given entries.
    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting empty shapes and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidDimensions(format!("{rows}x{cols} matrix")));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidDimensions(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entries".into()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged or empty input; meant for literals.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let n = rows.len();
        let m = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n * m);
        for r in rows {
            assert_eq!(r.as_ref().len(), m, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::from_vec(n, m, data).expect("invalid matrix literal")
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (i, &v) in values.iter().enumerate() {
            self[(i, j)] = v;
        }
    }

    /// The first `k` columns.
    pub fn leading_columns(&self, k: usize) -> Matrix {
        assert!(k >= 1 && k <= self.cols);
        Matrix::from_fn(self.rows, k, |i, j| self[(i, j)])
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_range(&self, start: usize, end: usize) -> Matrix {
        assert!(start < end && end <= self.rows);
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_error(op, self, other));
        }
        Ok(())
    }

    /// `self · other` with a fixed i-k-j accumulation order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_error("matmul", self, other));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(shape_error("t_matmul", self, other));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        let n = other.cols;
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(shape_error("matmul_t", self, other));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                let b_row = other.row(j);
                let mut acc = 0.0;
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out[(i, j)] = acc;
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn zip_with(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        self.check_same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Sum over rows, giving a 1×cols matrix.
    pub fn column_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for i in 0..self.rows {
            for (o, &v) in out.data.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    /// Adds a 1×cols row vector to every row.
    pub fn add_row_broadcast(&self, row: &Matrix) -> Result<Matrix> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(shape_error("add_row_broadcast", self, row));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn fro_norm(&self) -> f64 {
        fro_norm(self)
    }

    /// Euclidean norm of column `j`.
    pub fn column_norm(&self, j: usize) -> f64 {
        (0..self.rows).map(|i| self[(i, j)] * self[(i, j)]).sum::<f64>().sqrt()
    }

    /// Largest `|self_ij - self_ji|`. Panics if not square.
    pub fn max_asymmetry(&self) -> f64 {
        assert_eq!(self.rows, self.cols, "max_asymmetry of a non-square matrix");
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// `(self + selfᵀ) / 2`, making symmetry exact.
    pub fn symmetrized(&self) -> Matrix {
        assert_eq!(self.rows, self.cols);
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let avg = 0.5 * (self[(i, j)] + self[(j, i)]);
                out[(i, j)] = avg;
                out[(j, i)] = avg;
            }
        }
        out
    }
}

fn shape_error(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::ShapeMismatch {
        op,
        left_rows: a.rows,
        left_cols: a.cols,
        right_rows: b.rows,
        right_cols: b.cols,
    }
}

/// Standard matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// Frobenius norm.
pub fn fro_norm(a: &Matrix) -> f64 {
    a.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Orthonormal basis for the column span of `a` (d×r, d ≥ r) via Householder QR.
///
/// The sign of each column is chosen so that the R factor has a nonnegative
/// diagonal, which makes the result unique for full-rank input.
pub fn qr_orthonormalize(a: &Matrix) -> Result<Matrix> {
    let (d, r) = a.shape();
    if d < r {
        return Err(Error::InvalidDimensions(format!(
            "qr_orthonormalize needs rows >= cols, got {d}x{r}"
        )));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("qr_orthonormalize input".into()));
    }
    let scale = (0..r).map(|j| a.column_norm(j)).fold(0.0_f64, f64::max);

    let mut work = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(r);
    let mut r_diag = vec![0.0; r];

    for k in 0..r {
        let norm_x = (k..d).map(|i| work[(i, k)] * work[(i, k)]).sum::<f64>().sqrt();
        if scale == 0.0 || norm_x < RANK_TOLERANCE * scale {
            return Err(Error::RankDeficient { column: k, magnitude: norm_x });
        }
        let x0 = work[(k, k)];
        let alpha = if x0 >= 0.0 { -norm_x } else { norm_x };
        // v = x - alpha e1, stored over rows k..d
        let mut v: Vec<f64> = (k..d).map(|i| work[(i, k)]).collect();
        v[0] -= alpha;
        let v_norm_sq: f64 = v.iter().map(|x| x * x).sum();
        r_diag[k] = alpha;
        if v_norm_sq > 0.0 {
            for j in k..r {
                let dot: f64 = (k..d).map(|i| v[i - k] * work[(i, j)]).sum();
                let f = 2.0 * dot / v_norm_sq;
                for i in k..d {
                    work[(i, j)] -= f * v[i - k];
                }
            }
        }
        reflectors.push(v);
    }

    // Q = H_0 H_1 ... H_{r-1} applied to the first r columns of the identity.
    let mut q = Matrix::zeros(d, r);
    for j in 0..r {
        q[(j, j)] = 1.0;
    }
    for k in (0..r).rev() {
        let v = &reflectors[k];
        let v_norm_sq: f64 = v.iter().map(|x| x * x).sum();
        if v_norm_sq == 0.0 {
            continue;
        }
        for j in 0..r {
            let dot: f64 = (k..d).map(|i| v[i - k] * q[(i, j)]).sum();
            let f = 2.0 * dot / v_norm_sq;
            for i in k..d {
                q[(i, j)] -= f * v[i - k];
            }
        }
    }

    for (j, &rjj) in r_diag.iter().enumerate() {
        if rjj < 0.0 {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Ok(q)
}

/// Eigenvalues (descending) and unit eigenvectors as matching columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl EigenPair {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_symmetric(c: &Matrix) -> Result<()> {
    if c.rows() != c.cols() {
        return Err(Error::InvalidDimensions(format!(
            "symmetric eigensolver needs a square matrix, got {}x{}",
            c.rows(),
            c.cols()
        )));
    }
    if !c.is_finite() {
        return Err(Error::NonFinite("symmetric eigensolver input".into()));
    }
    let asym = c.max_asymmetry();
    if asym > SYMMETRY_TOLERANCE * c.max_abs().max(1.0) {
        return Err(Error::NotSymmetric { max_asymmetry: asym });
    }
    Ok(())
}

/// Full symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Values are sorted descending (ties keep their diagonal order) and each
/// eigenvector is flipped so its first largest-magnitude entry is nonnegative.
pub fn sym_eig(c: &Matrix) -> Result<EigenPair> {
    check_symmetric(c)?;
    let n = c.rows();
    let mut a = c.symmetrized();
    let mut v = Matrix::identity(n);
    let total = fro_norm(&a);

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= f64::EPSILON * 1e-2 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
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
    // stable: equal eigenvalues keep diagonal order
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).expect("finite eigenvalues"));

    let values: Vec<f64> = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        let mut vec = v.column(src);
        let norm = vec.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in vec.iter_mut() {
            *x /= norm;
        }
        canonical_sign(&mut vec);
        vectors.set_column(col, &vec);
    }
    Ok(EigenPair { values, vectors })
}

/// Flips `v` so that its first entry of largest magnitude is nonnegative.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// The `r` leading eigenpairs of a symmetric matrix.
pub fn sym_eig_topr(c: &Matrix, r: usize) -> Result<EigenPair> {
    if r == 0 || r > c.rows() {
        return Err(Error::InvalidDimensions(format!(
            "requested {r} eigenpairs of a {}x{} matrix",
            c.rows(),
            c.cols()
        )));
    }
    let full = sym_eig(c)?;
    Ok(EigenPair { values: full.values[..r].to_vec(), vectors: full.vectors.leading_columns(r) })
}

/// Singular values (descending) by one-sided Jacobi rotations on the columns.
///
/// Works on the matrix itself rather than its Gram matrix, so small singular
/// values are resolved to roughly `ε·σ_max` instead of `√ε·σ_max`.
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    let mut w = if a.rows() >= a.cols() { a.clone() } else { a.transpose() };
    let (rows, cols) = w.shape();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..rows {
                    let (x, y) = (w[(i, p)], w[(i, q)]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (x, y) = (w[(i, p)], w[(i, q)]);
                    w[(i, p)] = c * x - s * y;
                    w[(i, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut values: Vec<f64> = (0..cols).map(|j| w.column_norm(j)).collect();
    values.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    values
}

/// Seeded random source built on ChaCha8, so streams are identical across platforms.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    /// ChaCha stream id; 0 for a root generator, derived from the fork path otherwise.
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent child stream keyed by `stream` and this generator's own fork path.
    /// Does not consume randomness from `self`.
    pub fn fork(&self, stream: u64) -> Rng {
        let child = splitmix64(self.stream ^ splitmix64(stream)) | 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(child);
        Self { seed: self.seed, stream: child, inner: rng }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.normal())
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.uniform(lo, hi))
    }

    /// Random d×r matrix with orthonormal columns.
    pub fn orthonormal(&mut self, d: usize, r: usize) -> Matrix {
        loop {
            let g = self.normal_matrix(d, r);
            if let Ok(q) = qr_orthonormalize(&g) {
                return q;
            }
        }
    }
}
