//! Numeric kernel: scalar trait, dense row-major matrices, Cholesky factors of
//! symmetric positive definite matrices, and the seedable generator used by all
//! randomized procedures.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

/// Floating point scalar usable by every numeric routine in the crate.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal into this scalar.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Sign with `sign(0) = 0`.
pub fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn squared_distance<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Index of the smallest entry; ties go to the lowest index.
pub fn argmin<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Temperature-scaled softmax with max subtraction.
pub fn softmax<T: Real>(logits: &[T], temperature: T) -> Vec<T> {
    let max = logits.iter().fold(T::neg_infinity(), |m, &z| m.max(z));
    let exps: Vec<T> = logits.iter().map(|&z| ((z - max) / temperature).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn diagonal(values: &[T]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_row_major(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                found: other.rows,
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                found: v.len(),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                expected: self.data.len(),
                found: other.data.len(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }
}

impl<T> std::ops::Index<(usize, usize)> for DenseMatrix<T> {
    type Output = T;

    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for DenseMatrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = M + ridge·I`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpdFactor<T> {
    lower: DenseMatrix<T>,
    ridge: T,
}

const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// Factors `m + ridge·I`. `m` must be square and symmetric within 1e-10.
pub fn cholesky<T: Real>(m: &DenseMatrix<T>, ridge: T) -> Result<SpdFactor<T>> {
    if m.rows != m.cols {
        return Err(Error::DimensionMismatch {
            expected: m.rows,
            found: m.cols,
        });
    }
    if !(ridge >= T::zero()) || !ridge.is_finite() {
        return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
    }
    let n = m.rows;
    let tol = T::lit(SYMMETRY_TOLERANCE);
    for i in 0..n {
        for j in (i + 1)..n {
            let gap = (m[(i, j)] - m[(j, i)]).abs();
            if gap > tol {
                return Err(Error::NotSymmetric {
                    row: i,
                    col: j,
                    gap: gap.to_f64_lossy(),
                });
            }
        }
    }

    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut diag = m[(j, j)] + ridge;
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > T::zero()) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite {
                row: j,
                pivot: diag.to_f64_lossy(),
            });
        }
        let d = diag.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            // lower triangle of the input only
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(SpdFactor { lower: l, ridge })
}

impl<T: Real> SpdFactor<T> {
    pub fn dim(&self) -> usize {
        self.lower.rows
    }

    pub fn lower(&self) -> &DenseMatrix<T> {
        &self.lower
    }

    pub fn ridge(&self) -> T {
        self.ridge
    }

    /// Reconstructs `L Lᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix<T> {
        self.lower
            .matmul(&self.lower.transpose())
            .expect("square factor")
    }

    fn check_dim(&self, v: &[T]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: v.len(),
            });
        }
        Ok(())
    }

    /// Solves `L y = v`.
    pub fn forward_solve(&self, v: &[T]) -> Result<Vec<T>> {
        self.check_dim(v)?;
        let n = self.dim();
        let mut y = vec![T::zero(); n];
        for i in 0..n {
            let mut s = v[i];
            for k in 0..i {
                s -= self.lower[(i, k)] * y[k];
            }
            y[i] = s / self.lower[(i, i)];
        }
        Ok(y)
    }

    /// Solves `Lᵀ x = y`.
    pub fn backward_solve(&self, y: &[T]) -> Result<Vec<T>> {
        self.check_dim(y)?;
        let n = self.dim();
        let mut x = vec![T::zero(); n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.lower[(k, i)] * x[k];
            }
            x[i] = s / self.lower[(i, i)];
        }
        Ok(x)
    }

    /// Solves `(M + ridge·I) x = v`.
    pub fn solve(&self, v: &[T]) -> Result<Vec<T>> {
        let y = self.forward_solve(v)?;
        self.backward_solve(&y)
    }
}

/// `vᵀ (M + ridge·I)⁻¹ v`, evaluated as `‖L⁻¹ v‖²`.
pub fn quad_form<T: Real>(f: &SpdFactor<T>, v: &[T]) -> Result<T> {
    let y = f.forward_solve(v)?;
    Ok(dot(&y, &y))
}

/// Seedable generator: ChaCha8 seeded through `SeedableRng::seed_from_u64`.
///
/// Derived draws are defined here so streams stay reproducible across
/// implementations:
/// * `next_f64`: `(next_u64 >> 11) · 2⁻⁵³`, uniform on `[0, 1)`.
/// * `below(n)`: Lemire's widening-multiply method with rejection.
/// * `gaussian`: basic Box-Muller, `mu + sigma·sqrt(-2 ln u1)·cos(2π u2)`
///   with `u1 = 1 - next_f64()` and `u2 = next_f64()`; exactly two
///   `next_u64` calls per draw, no cached spare.
#[derive(Clone, Debug)]
pub struct Prng {
    inner: ChaCha8Rng,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Child generator for an independent stream keyed by `stream`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Self::new(z ^ (z >> 31))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let mut m = u128::from(self.next_u64()) * u128::from(n);
        if (m as u64) < n {
            let threshold = n.wrapping_neg() % n;
            while (m as u64) < threshold {
                m = u128::from(self.next_u64()) * u128::from(n);
            }
        }
        (m >> 64) as usize
    }

    pub fn gaussian(&mut self, mu: f64, sigma: f64) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        if sigma == 0.0 {
            return mu;
        }
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        mu + sigma * z
    }

    /// Fisher-Yates shuffle, swapping from the back.
    pub fn shuffle<E>(&mut self, items: &mut [E]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_spd(p: &mut Prng, n: usize) -> DenseMatrix<f64> {
        let a = DenseMatrix::from_row_major(
            n,
            n,
            (0..n * n).map(|_| p.gaussian(0.0, 1.0)).collect(),
        )
        .unwrap();
        let mut m = a.matmul(&a.transpose()).unwrap();
        for i in 0..n {
            m[(i, i)] += 1.0;
        }
        m
    }

    /// Gauss-Jordan inverse with partial pivoting, test oracle only.
    fn invert(m: &DenseMatrix<f64>) -> DenseMatrix<f64> {
        let n = m.rows();
        let mut a = m.clone();
        let mut inv = DenseMatrix::identity(n);
        for c in 0..n {
            let p = (c..n)
                .max_by(|&i, &j| a[(i, c)].abs().total_cmp(&a[(j, c)].abs()))
                .unwrap();
            for j in 0..n {
                let (x, y) = (a[(c, j)], a[(p, j)]);
                a[(c, j)] = y;
                a[(p, j)] = x;
                let (x, y) = (inv[(c, j)], inv[(p, j)]);
                inv[(c, j)] = y;
                inv[(p, j)] = x;
            }
            let d = a[(c, c)];
            for j in 0..n {
                a[(c, j)] /= d;
                inv[(c, j)] /= d;
            }
            for r in 0..n {
                if r != c {
                    let f = a[(r, c)];
                    for j in 0..n {
                        a[(r, j)] -= f * a[(c, j)];
                        inv[(r, j)] -= f * inv[(c, j)];
                    }
                }
            }
        }
        inv
    }

    #[test]
    fn cholesky_identity_and_diagonal() {
        let f = cholesky(&DenseMatrix::<f64>::identity(2), 0.0).unwrap();
        assert_eq!(f.lower(), &DenseMatrix::identity(2));
        let f = cholesky(&DenseMatrix::diagonal(&[4.0, 9.0]), 0.0).unwrap();
        assert_eq!(f.lower(), &DenseMatrix::diagonal(&[2.0, 3.0]));
    }

    #[test]
    fn cholesky_reconstructs_random_spd() {
        let mut p = Prng::new(11);
        for n in [1, 2, 5, 12, 20] {
            let m = random_spd(&mut p, n);
            let f = cholesky(&m, 0.0).unwrap();
            let err = f.reconstruct().sub(&m).unwrap().frobenius_norm() / m.frobenius_norm();
            assert!(err < 1e-10, "n={n} err={err}");
            assert!((0..n).all(|i| f.lower()[(i, i)] > 0.0));
        }
    }

    #[test]
    fn cholesky_rejects_singular_and_asymmetric() {
        let singular = DenseMatrix::diagonal(&[1.0, 0.0]);
        assert!(matches!(
            cholesky(&singular, 0.0),
            Err(Error::NotPositiveDefinite { row: 1, .. })
        ));
        assert!(cholesky(&singular, 1e-6).is_ok());
        let asym = DenseMatrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(cholesky(&asym, 0.0), Err(Error::NotSymmetric { .. })));
        assert!(matches!(
            cholesky(&DenseMatrix::<f64>::identity(2), -1.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn quad_form_examples() {
        let f = cholesky(&DenseMatrix::<f64>::identity(2), 0.0).unwrap();
        assert_eq!(quad_form(&f, &[3.0, 4.0]).unwrap(), 25.0);
        let f = cholesky(&DenseMatrix::diagonal(&[4.0, 9.0]), 0.0).unwrap();
        assert_eq!(quad_form(&f, &[2.0, 3.0]).unwrap(), 2.0);
        assert!(matches!(
            quad_form(&f, &[1.0]),
            Err(Error::DimensionMismatch { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn quad_form_matches_explicit_inverse() {
        let mut p = Prng::new(5);
        for n in 1..=8 {
            let m = random_spd(&mut p, n);
            let inv = invert(&m);
            let v: Vec<f64> = (0..n).map(|_| p.gaussian(0.0, 2.0)).collect();
            let oracle = dot(&v, &inv.mul_vec(&v).unwrap());
            let got = quad_form(&cholesky(&m, 0.0).unwrap(), &v).unwrap();
            assert!((got - oracle).abs() <= 1e-9 * oracle.abs(), "{got} vs {oracle}");
        }
    }

    #[test]
    fn solve_inverts() {
        let mut p = Prng::new(8);
        let m = random_spd(&mut p, 6);
        let f = cholesky(&m, 0.0).unwrap();
        let b: Vec<f64> = (0..6).map(|i| i as f64 - 2.0).collect();
        let x = f.solve(&b).unwrap();
        let back = m.mul_vec(&x).unwrap();
        for (u, v) in back.iter().zip(&b) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn gaussian_degenerate_and_moments() {
        let mut p = Prng::new(1);
        assert_eq!(p.gaussian(7.0, 0.0), 7.0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| p.gaussian(0.0, 1.0)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn prng_is_deterministic() {
        let a: Vec<u64> = {
            let mut p = Prng::new(42);
            (0..16).map(|_| p.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut p = Prng::new(42);
            (0..16).map(|_| p.next_u64()).collect()
        };
        assert_eq!(a, b);
        let mut p = Prng::new(42);
        let mut q = Prng::new(42);
        for _ in 0..100 {
            assert_eq!(p.gaussian(1.0, 3.0).to_bits(), q.gaussian(1.0, 3.0).to_bits());
        }
        assert_ne!(Prng::derive(42, 1).next_u64(), Prng::derive(42, 2).next_u64());
    }

    #[test]
    fn below_stays_in_range_and_covers() {
        let mut p = Prng::new(3);
        let mut seen = [0usize; 7];
        for _ in 0..7000 {
            seen[p.below(7)] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800 && c < 1200), "{seen:?}");
    }

    #[test]
    fn works_in_single_precision() {
        let f = cholesky(&DenseMatrix::<f32>::diagonal(&[4.0, 9.0]), 0.0).unwrap();
        assert_eq!(quad_form(&f, &[2.0f32, 3.0]).unwrap(), 2.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn quad_form_nonnegative(seed in 0u64..500, n in 1usize..7, scale in 0.0f64..10.0) {
                let mut p = Prng::new(seed);
                let m = random_spd(&mut p, n);
                let f = cholesky(&m, 1e-9).unwrap();
                let v: Vec<f64> = (0..n).map(|_| p.gaussian(0.0, scale)).collect();
                let q = quad_form(&f, &v).unwrap();
                prop_assert!(q >= 0.0);
                let zero = vec![0.0; n];
                prop_assert_eq!(quad_form(&f, &zero).unwrap(), 0.0);
            }
        }
    }
}
