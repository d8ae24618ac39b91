//! Minimal dense vector/matrix arithmetic in f64.
//!
//! Everything here is deterministic and allocation-explicit; matrices are
//! row-major so that a classifier row is a contiguous slice.

use std::fmt;

/// Norms at or below this value are treated as zero when normalizing.
pub const NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum LinalgError {
    /// Two operands disagree on dimension.
    DimensionMismatch { expected: usize, got: usize },
    /// Normalization of a vector whose norm is at or below [`NORM_EPSILON`].
    NearZeroNorm,
    /// Matrix construction where rows * cols does not match the data length.
    ShapeMismatch { rows: usize, cols: usize, len: usize },
    /// A constructor received a NaN or infinite entry.
    NonFinite,
    /// A vector must have at least one entry.
    Empty,
}

impl fmt::Display for LinalgError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinalgError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            LinalgError::NearZeroNorm => {
                write!(f, "cannot normalize: norm is below {NORM_EPSILON:e}")
            }
            LinalgError::ShapeMismatch { rows, cols, len } => {
                write!(f, "shape mismatch: {rows}x{cols} matrix cannot hold {len} entries")
            }
            LinalgError::NonFinite => write!(f, "non-finite entry"),
            LinalgError::Empty => write!(f, "empty vector"),
        }
    }
}

impl std::error::Error for LinalgError {}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense f64 vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    /// Builds a vector, rejecting empty or non-finite input.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(LinalgError::Empty);
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self { data })
    }

    pub fn from_slice(data: &[f64]) -> Result<Self> {
        Self::new(data.to_vec())
    }

    /// Internal constructor for values produced by our own arithmetic.
    pub(crate) fn raw(data: Vec<f64>) -> Self {
        debug_assert!(!data.is_empty());
        Self { data }
    }

    pub fn zeros(dim: usize) -> Self {
        debug_assert!(dim > 0);
        Self { data: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
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

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(LinalgError::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(dot_slices(&self.data, &other.data))
    }

    pub fn l2_norm(&self) -> f64 {
        dot_slices(&self.data, &self.data).sqrt()
    }

    /// Returns the unit-norm copy of `self`.
    pub fn l2_normalized(&self) -> Result<Vector> {
        let n = self.l2_norm();
        if n <= NORM_EPSILON {
            return Err(LinalgError::NearZeroNorm);
        }
        Ok(Vector::raw(self.data.iter().map(|x| x / n).collect()))
    }

    pub fn scaled(&self, c: f64) -> Vector {
        Vector::raw(self.data.iter().map(|x| x * c).collect())
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        if self.dim() != other.dim() {
            return Err(LinalgError::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(Vector::raw(
            self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        if self.dim() != other.dim() {
            return Err(LinalgError::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(Vector::raw(
            self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        ))
    }
}

#[inline]
pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Cosine similarity of two vectors of equal dimension.
pub fn cosine_similarity(a: &Vector, b: &Vector) -> Result<f64> {
    let na = a.l2_norm();
    let nb = b.l2_norm();
    if na <= NORM_EPSILON || nb <= NORM_EPSILON {
        return Err(LinalgError::NearZeroNorm);
    }
    Ok(a.dot(b)? / (na * nb))
}

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(LinalgError::ShapeMismatch { rows, cols, len: data.len() });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_vector(&self, i: usize) -> Vector {
        Vector::raw(self.row(i).to_vec())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Standard matrix-vector product.
    pub fn matvec(&self, v: &Vector) -> Result<Vector> {
        if self.cols != v.dim() {
            return Err(LinalgError::DimensionMismatch {
                expected: self.cols,
                got: v.dim(),
            });
        }
        let mut out = Vec::with_capacity(self.rows);
        for i in 0..self.rows {
            out.push(dot_slices(self.row(i), v.as_slice()));
        }
        Ok(Vector::raw(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_slice(xs).unwrap()
    }

    #[test]
    fn dot_orthogonal_is_zero() {
        assert_eq!(v(&[1.0, 0.0]).dot(&v(&[0.0, 1.0])).unwrap(), 0.0);
    }

    #[test]
    fn dot_hand_arithmetic() {
        assert_eq!(v(&[1.0, 2.0]).dot(&v(&[3.0, 4.0])).unwrap(), 11.0);
    }

    #[test]
    fn dot_unit_self() {
        let u = v(&[0.6, 0.8]);
        assert!((u.dot(&u).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dot_dimension_mismatch() {
        let err = v(&[1.0, 2.0]).dot(&v(&[1.0, 2.0, 3.0])).unwrap_err();
        assert_eq!(err, LinalgError::DimensionMismatch { expected: 2, got: 3 });
    }

    #[test]
    fn norm_three_four_five() {
        assert_eq!(v(&[3.0, 4.0]).l2_norm(), 5.0);
    }

    #[test]
    fn norm_zero_vector() {
        assert_eq!(v(&[0.0, 0.0]).l2_norm(), 0.0);
    }

    #[test]
    fn norm_all_ones() {
        assert_eq!(v(&[1.0, 1.0, 1.0, 1.0]).l2_norm(), 2.0);
    }

    #[test]
    fn normalize_three_four() {
        let u = v(&[3.0, 4.0]).l2_normalized().unwrap();
        assert!((u.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((u.as_slice()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_zero_errors() {
        assert_eq!(v(&[0.0, 0.0]).l2_normalized().unwrap_err(), LinalgError::NearZeroNorm);
    }

    #[test]
    fn normalize_axis() {
        let u = v(&[5.0, 0.0, 0.0]).l2_normalized().unwrap();
        assert_eq!(u.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn matvec_identity() {
        let m = Matrix::identity(2);
        let out = m.matvec(&v(&[7.0, 9.0])).unwrap();
        assert_eq!(out.as_slice(), &[7.0, 9.0]);
    }

    #[test]
    fn matvec_hand_example() {
        let m = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = m.matvec(&v(&[1.0, 1.0])).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matvec_zero_matrix() {
        let m = Matrix::zeros(3, 2);
        let out = m.matvec(&v(&[5.0, 5.0])).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn matvec_dimension_mismatch() {
        let m = Matrix::zeros(3, 2);
        assert!(m.matvec(&v(&[1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn matrix_shape_mismatch() {
        assert!(matches!(
            Matrix::new(2, 2, vec![1.0; 3]),
            Err(LinalgError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn constructors_reject_non_finite() {
        assert_eq!(Vector::new(vec![1.0, f64::NAN]).unwrap_err(), LinalgError::NonFinite);
        assert_eq!(
            Matrix::new(1, 2, vec![f64::INFINITY, 0.0]).unwrap_err(),
            LinalgError::NonFinite
        );
    }

    #[test]
    fn normalize_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let dim = rng.random_range(1..12);
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let base = match Vector::raw(x.clone()).l2_normalized() {
                Ok(u) => u,
                Err(_) => continue,
            };
            let c: f64 = rng.random_range(0.01..100.0);
            let scaled = Vector::raw(x.iter().map(|v| v * c).collect()).l2_normalized().unwrap();
            for (a, b) in base.as_slice().iter().zip(scaled.as_slice()) {
                assert!((a - b).abs() < 1e-12, "normalize not scale invariant: {a} vs {b}");
            }
        }
    }

    #[test]
    fn normalized_self_dot_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let dim = rng.random_range(1..16);
            let x = Vector::raw((0..dim).map(|_| rng.random_range(-5.0..5.0)).collect());
            if x.l2_norm() <= NORM_EPSILON {
                continue;
            }
            let u = x.l2_normalized().unwrap();
            assert!((u.dot(&u).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matvec_distributes_over_addition() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let rows = rng.random_range(1..8);
            let cols = rng.random_range(1..8);
            let m = Matrix::raw(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect(),
            );
            let a = Vector::raw((0..cols).map(|_| rng.random_range(-2.0..2.0)).collect());
            let b = Vector::raw((0..cols).map(|_| rng.random_range(-2.0..2.0)).collect());
            let lhs = m.matvec(&a.add(&b).unwrap()).unwrap();
            let rhs = m.matvec(&a).unwrap().add(&m.matvec(&b).unwrap()).unwrap();
            for (x, y) in lhs.as_slice().iter().zip(rhs.as_slice()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
