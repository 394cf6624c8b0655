//! Dense linear algebra used by every other module.
//!
//! Matrices are row-major `f64`. Reductions run sequentially in input order so
//! that repeated runs produce bit-identical results.

use std::fmt;
use std::ops::{Deref, DerefMut, Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Vector(data))
    }

    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        Vector(vec![value; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.0, &self.0)
    }

    pub fn sub(&self, other: &[f64]) -> Vector {
        Vector(self.0.iter().zip(other).map(|(a, b)| a - b).collect())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Matrix::diag(&vec![1.0; n])
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
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
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a 0-column matrix has no row payload anyway
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} * {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ`, the shape of a dense layer applied to a batch of rows.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} * ({}x{})ᵀ",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(a, rhs.row(j));
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vector> {
        if self.cols != v.len() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} * vector of {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok(Vector(self.row_iter().map(|r| dot(r, v)).collect()))
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a - b)
    }

    fn zip_with(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::DimensionMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add_diagonal(&mut self, value: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self[(i, i)] += value;
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest `|a_ij - a_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.max_abs();
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst / scale
    }

    pub fn outer(a: &[f64], b: &[f64]) -> Matrix {
        let mut m = Matrix::zeros(a.len(), b.len());
        for (i, x) in a.iter().enumerate() {
            for (j, y) in b.iter().enumerate() {
                m[(i, j)] = x * y;
            }
        }
        m
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in self.row_iter() {
            writeln!(f, "  {r:?}")?;
        }
        write!(f, "]")
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cholesky factor `L` of a symmetric positive-definite matrix, `A = L·Lᵀ`.
#[derive(Clone, PartialEq)]
pub struct SpdFactor {
    dim: usize,
    // row-major lower triangle, upper part zero
    lower: Vec<f64>,
}

impl SpdFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self) -> Matrix {
        Matrix {
            rows: self.dim,
            cols: self.dim,
            data: self.lower.clone(),
        }
    }

    pub fn reconstruct(&self) -> Matrix {
        let l = self.lower();
        l.matmul_t(&l).expect("square factor")
    }

    fn l(&self, i: usize, j: usize) -> f64 {
        self.lower[i * self.dim + j]
    }

    /// Solves `L·y = b` in place.
    fn forward_in_place(&self, y: &mut [f64]) {
        for i in 0..self.dim {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l(i, k) * y[k];
            }
            y[i] = s / self.l(i, i);
        }
    }

    /// Solves `Lᵀ·x = y` in place.
    fn backward_in_place(&self, x: &mut [f64]) {
        for i in (0..self.dim).rev() {
            let mut s = x[i];
            for k in (i + 1)..self.dim {
                s -= self.l(k, i) * x[k];
            }
            x[i] = s / self.l(i, i);
        }
    }

    /// `A⁻¹·b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vector> {
        if b.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "factor of dim {} vs rhs of dim {}",
                self.dim,
                b.len()
            )));
        }
        let mut x = b.to_vec();
        self.forward_in_place(&mut x);
        self.backward_in_place(&mut x);
        Ok(Vector(x))
    }

    /// `(vᵀ·A⁻¹·v, A⁻¹·v)` sharing one forward substitution; the scalar is
    /// bit-identical to [`SpdFactor::inv_quad_form`].
    pub fn solve_with_quad_form(&self, v: &[f64]) -> Result<(f64, Vector)> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "factor of dim {} vs vector of dim {}",
                self.dim,
                v.len()
            )));
        }
        let mut y = v.to_vec();
        self.forward_in_place(&mut y);
        let q = dot(&y, &y);
        self.backward_in_place(&mut y);
        Ok((q, Vector(y)))
    }

    /// `vᵀ·A⁻¹·v`, computed as `‖L⁻¹v‖²` with a single triangular solve.
    pub fn inv_quad_form(&self, v: &[f64]) -> Result<f64> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "factor of dim {} vs vector of dim {}",
                self.dim,
                v.len()
            )));
        }
        let mut y = v.to_vec();
        self.forward_in_place(&mut y);
        Ok(dot(&y, &y))
    }
}

impl fmt::Debug for SpdFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SpdFactor {:?}", self.lower())
    }
}

pub fn spd_factor(m: &Matrix) -> Result<SpdFactor> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "cannot factor a {}x{} matrix",
            m.rows, m.cols
        )));
    }
    let asym = m.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    let n = m.rows;
    let mut lower = vec![0.0; n * n];
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= lower[j * n + k] * lower[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { index: j, pivot: d });
        }
        let ljj = d.sqrt();
        lower[j * n + j] = ljj;
        for i in (j + 1)..n {
            // lower triangle of m only; the upper half is assumed to mirror it
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= lower[i * n + k] * lower[j * n + k];
            }
            lower[i * n + j] = s / ljj;
        }
    }
    Ok(SpdFactor { dim: n, lower })
}

pub fn spd_solve(f: &SpdFactor, b: &Vector) -> Result<Vector> {
    f.solve(b)
}

/// Streaming mean / co-moment accumulator (Welford).
///
/// The covariance it reports is the `1/N` (biased) estimator.
#[derive(Clone, Debug)]
pub struct CovAccumulator {
    count: usize,
    mean: Vec<f64>,
    // upper triangle only, mirrored on read
    comoment: Vec<f64>,
}

impl CovAccumulator {
    pub fn new(dim: usize) -> Self {
        CovAccumulator {
            count: 0,
            mean: vec![0.0; dim],
            comoment: vec![0.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "sample of dim {} pushed into accumulator of dim {d}",
                x.len()
            )));
        }
        self.count += 1;
        let n = self.count as f64;
        let delta_old: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (m, dl) in self.mean.iter_mut().zip(&delta_old) {
            *m += dl / n;
        }
        for i in 0..d {
            let di = delta_old[i];
            for j in i..d {
                self.comoment[i * d + j] += di * (x[j] - self.mean[j]);
            }
        }
        Ok(())
    }

    /// Folds `other` into `self` (pairwise update of Chan et al.).
    pub fn merge(&mut self, other: &CovAccumulator) -> Result<()> {
        let d = self.dim();
        if other.dim() != d {
            return Err(Error::DimensionMismatch("accumulator dims differ".into()));
        }
        if other.count == 0 {
            return Ok(());
        }
        if self.count == 0 {
            *self = other.clone();
            return Ok(());
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        for i in 0..d {
            for j in i..d {
                self.comoment[i * d + j] += other.comoment[i * d + j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl * nb / n;
        }
        self.count += other.count;
        Ok(())
    }

    pub fn mean(&self) -> Vector {
        Vector(self.mean.clone())
    }

    pub fn covariance(&self) -> Result<Matrix> {
        if self.count == 0 {
            return Err(Error::EmptyInput);
        }
        let d = self.dim();
        let n = self.count as f64;
        let mut cov = Matrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let v = self.comoment[i * d + j] / n;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        Ok(cov)
    }
}

/// Sample mean and `1/N`-normalized covariance.
pub fn mean_and_cov(samples: &[Vector]) -> Result<(Vector, Matrix)> {
    let first = samples.first().ok_or(Error::EmptyInput)?;
    let mut acc = CovAccumulator::new(first.dim());
    for s in samples {
        acc.push(s)?;
    }
    Ok((acc.mean(), acc.covariance()?))
}

/// [`mean_and_cov`] over the rows of a matrix.
pub fn mean_and_cov_rows(samples: &Matrix) -> Result<(Vector, Matrix)> {
    if samples.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let mut acc = CovAccumulator::new(samples.cols());
    for r in samples.row_iter() {
        acc.push(r)?;
    }
    Ok((acc.mean(), acc.covariance()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Matrix::from_vec(d, d, (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut a = b.transpose().matmul(&b).unwrap();
        a.add_diagonal(1.0);
        a
    }

    /// Gauss–Jordan inverse with partial pivoting; independent of the Cholesky path.
    fn gauss_jordan_inverse(m: &Matrix) -> Matrix {
        let n = m.rows();
        let mut a: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row = m.row(i).to_vec();
                row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap())
                .unwrap();
            a.swap(col, piv);
            let p = a[col][col];
            for v in a[col].iter_mut() {
                *v /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = a[r][col];
                    let pivot_row = a[col].clone();
                    for (v, pv) in a[r].iter_mut().zip(pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
        Matrix::from_rows(&a.into_iter().map(|r| r[n..].to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn factor_of_identity_is_identity() {
        let f = spd_factor(&Matrix::identity(3)).unwrap();
        assert_eq!(f.lower(), Matrix::identity(3));
    }

    #[test]
    fn factor_of_diagonal_is_sqrt() {
        let f = spd_factor(&Matrix::diag(&[4.0, 9.0])).unwrap();
        assert_eq!(f.lower(), Matrix::diag(&[2.0, 3.0]));
    }

    #[test]
    fn random_factor_reconstructs() {
        let a = random_spd(6, 11);
        let f = spd_factor(&a).unwrap();
        let rel = f.reconstruct().sub(&a).unwrap().frobenius() / a.frobenius();
        assert!(rel < 1e-10, "relative reconstruction error {rel:e}");
        let l = f.lower();
        assert!((0..6).all(|i| l[(i, i)] > 0.0));
    }

    #[test]
    fn rejects_indefinite_and_asymmetric() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            spd_factor(&m),
            Err(Error::NotPositiveDefinite { index: 1, .. })
        ));
        let z = Matrix::zeros(2, 2);
        assert!(matches!(
            spd_factor(&z),
            Err(Error::NotPositiveDefinite { index: 0, .. })
        ));
        let asym = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(spd_factor(&asym), Err(Error::NotSymmetric(_))));
        let rect = Matrix::zeros(2, 3);
        assert!(matches!(spd_factor(&rect), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn solve_trivial_cases() {
        let f = spd_factor(&Matrix::identity(3)).unwrap();
        let x = spd_solve(&f, &Vector::from(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0, 3.0]);

        let f = spd_factor(&Matrix::diag(&[4.0, 9.0])).unwrap();
        let x = spd_solve(&f, &Vector::from(vec![4.0, 9.0])).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 1.0]);

        assert!(matches!(
            spd_solve(&f, &Vector::from(vec![1.0])),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn solve_matches_gauss_jordan() {
        let a = random_spd(6, 23);
        let f = spd_factor(&a).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x = spd_solve(&f, &Vector::from(b.clone())).unwrap();
        let oracle = gauss_jordan_inverse(&a).matvec(&b).unwrap();
        for (u, v) in x.iter().zip(oracle.iter()) {
            assert!((u - v).abs() < 1e-8, "{u} vs {v}");
        }
        // residual
        let r = a.matvec(&x).unwrap().sub(&b);
        let rel = r.norm_sq().sqrt() / dot(&b, &b).sqrt();
        assert!(rel < 1e-9);
    }

    #[test]
    fn solve_inverts_product_for_many_vectors() {
        let a = random_spd(6, 99);
        let f = spd_factor(&a).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
            let b = a.matvec(&x).unwrap();
            let back = f.solve(&b).unwrap();
            let err = back.sub(&x).norm_sq().sqrt() / dot(&x, &x).sqrt();
            assert!(err < 1e-8);
        }
    }

    #[test]
    fn inv_quad_form_agrees_with_solve() {
        let a = random_spd(5, 3);
        let f = spd_factor(&a).unwrap();
        let v = [0.3, -1.0, 2.0, 0.5, -0.25];
        let via_solve = dot(&v, &f.solve(&v).unwrap());
        let q = f.inv_quad_form(&v).unwrap();
        assert!((q - via_solve).abs() < 1e-12 * q.abs().max(1.0));
    }

    #[test]
    fn mean_cov_single_sample() {
        let x = Vector::from(vec![1.5, -2.0, 0.25]);
        let (m, c) = mean_and_cov(std::slice::from_ref(&x)).unwrap();
        assert_eq!(m, x);
        assert_eq!(c, Matrix::zeros(3, 3));
    }

    #[test]
    fn mean_cov_symmetric_pair() {
        let s = [Vector::from(vec![-1.0, 0.0]), Vector::from(vec![1.0, 0.0])];
        let (m, c) = mean_and_cov(&s).unwrap();
        assert_eq!(m.as_slice(), &[0.0, 0.0]);
        assert_eq!(c, Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
    }

    #[test]
    fn mean_cov_errors() {
        assert!(matches!(mean_and_cov(&[]), Err(Error::EmptyInput)));
        let s = [Vector::from(vec![1.0]), Vector::from(vec![1.0, 2.0])];
        assert!(matches!(mean_and_cov(&s), Err(Error::DimensionMismatch(_))));
    }

    fn two_pass(samples: &[Vector]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = samples.len() as f64;
        let d = samples[0].dim();
        let mut mean = vec![0.0; d];
        for s in samples {
            for k in 0..d {
                mean[k] += s[k];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![vec![0.0; d]; d];
        for s in samples {
            for i in 0..d {
                for j in 0..d {
                    cov[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]);
                }
            }
        }
        cov.iter_mut().flatten().for_each(|v| *v /= n);
        (mean, cov)
    }

    #[test]
    fn mean_cov_matches_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let samples: Vec<Vector> = (0..50)
            .map(|_| Vector::from((0..4).map(|_| rng.random_range(-2.0..3.0)).collect::<Vec<_>>()))
            .collect();
        let (m, c) = mean_and_cov(&samples).unwrap();
        let (om, oc) = two_pass(&samples);
        for k in 0..4 {
            assert!((m[k] - om[k]).abs() < 1e-12);
            for j in 0..4 {
                assert!((c[(k, j)] - oc[k][j]).abs() < 1e-12);
                assert_eq!(c[(k, j)], c[(j, k)]);
            }
        }
    }

    #[test]
    fn merge_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut all = CovAccumulator::new(3);
        let mut a = CovAccumulator::new(3);
        let mut b = CovAccumulator::new(3);
        for (i, r) in rows.iter().enumerate() {
            all.push(r).unwrap();
            if i < 17 {
                a.push(r).unwrap()
            } else {
                b.push(r).unwrap()
            }
        }
        a.merge(&b).unwrap();
        let diff = a.covariance().unwrap().sub(&all.covariance().unwrap()).unwrap();
        assert!(diff.max_abs() < 1e-14);
        assert!(a.mean().sub(&all.mean()).norm_sq() < 1e-28);
    }
}
