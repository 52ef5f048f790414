//! Dense `(n, c, h, w)` tensors and small row-major matrices.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::{Add, Mul};

use num_complex::Complex64;
use num_traits::Zero;

use crate::{Error, Result, Scalar};

/// Extents of a rank-4 tensor in sample/channel/height/width order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    /// Validated constructor: every extent must be at least one and the
    /// element count must fit in `usize`.
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        let shape = Self { n, c, h, w };
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("all extents must be >= 1, got {shape}")));
        }
        shape.checked_numel().ok_or_else(|| Error::Size(format!("{shape}")))?;
        Ok(shape)
    }

    /// Unchecked constructor for shapes derived from already valid shapes.
    pub(crate) const fn of(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::of(1, 1, 1, 1)
    }

    fn checked_numel(&self) -> Option<usize> {
        self.n.checked_mul(self.c)?.checked_mul(self.h)?.checked_mul(self.w)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one `h x w` plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one sample (`c * h * w`).
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn with_n(self, n: usize) -> Self {
        Self { n, ..self }
    }

    pub fn with_c(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 tensor stored row-major in `(n, c, h, w)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(shape: Shape4, fill: T) -> Result<Self> {
        let shape = Shape4::new(shape.n, shape.c, shape.h, shape.w)?;
        Ok(Self { shape, data: vec![fill; shape.numel()] })
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self { shape, data: vec![T::zero(); shape.numel()] }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        let shape = Shape4::new(shape.n, shape.c, shape.h, shape.w)?;
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: Shape4::scalar(), data: vec![v] }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.offset(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let o = self.shape.offset(n, c, h, w);
        self.data[o] = v;
    }

    /// Slice holding sample `i`.
    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.shape.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    /// Same data reinterpreted with a new shape of equal element count.
    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::Shape(format!("cannot reshape {} into {shape}", self.shape)));
        }
        Ok(Self { shape, data: self.data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape, data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|x| x * k)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len()).unwrap()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("shape mismatch: {} vs {}", self.shape, other.shape)));
        }
        Ok(())
    }

    /// Precision conversion (e.g. promoting trained `f32` weights for gradient checks).
    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 { shape: self.shape, data: self.data.iter().map(|&x| U::from_f64_lossy(x.as_f64())).collect() }
    }

    /// Copies the samples at `indices`, in order, into a new batch.
    pub fn gather_samples(&self, indices: &[usize]) -> Result<Self> {
        let len = self.shape.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            if i >= self.shape.n {
                return Err(Error::InvalidArgument(format!("sample index {i} out of range for {}", self.shape)));
            }
            data.extend_from_slice(self.sample(i));
        }
        Self::from_vec(self.shape.with_n(indices.len()), data)
    }

    /// Samples `[start, end)`.
    pub fn slice_samples(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.shape.n {
            return Err(Error::InvalidArgument(format!("sample range {start}..{end} invalid for {}", self.shape)));
        }
        let len = self.shape.sample_len();
        Ok(Self { shape: self.shape.with_n(end - start), data: self.data[start * len..end * len].to_vec() })
    }

    /// Stacks equally shaped tensors along the sample axis.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("nothing to stack".into()))?;
        let inner = first.shape;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut n = 0;
        for p in parts {
            if p.shape.with_n(1) != inner.with_n(1) {
                return Err(Error::Shape(format!("cannot stack {} with {}", p.shape, inner)));
            }
            n += p.shape.n;
            data.extend_from_slice(&p.data);
        }
        Self::from_vec(inner.with_n(n), data)
    }
}

/// Dense row-major matrix over real or complex entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<E> {
    rows: usize,
    cols: usize,
    data: Vec<E>,
}

/// Complex matrix used by the angular-delay transforms.
pub type CMatrix = Matrix<Complex64>;

impl<E: Copy + Zero> Matrix<E> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![E::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<E>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("matrix extents must be >= 1, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("data length {} does not match {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> E) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
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

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> E {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: E) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[E] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// First `rows` rows.
    pub fn top_rows(&self, rows: usize) -> Result<Self> {
        if rows == 0 || rows > self.rows {
            return Err(Error::InvalidArgument(format!("cannot keep {rows} of {} rows", self.rows)));
        }
        Ok(Self { rows, cols: self.cols, data: self.data[..rows * self.cols].to_vec() })
    }
}

impl<E> Matrix<E>
where
    E: Copy + Zero + Add<Output = E> + Mul<Output = E>,
{
    pub fn identity(n: usize) -> Self
    where
        E: num_traits::One,
    {
        Self::from_fn(n, n, |r, c| if r == c { E::one() } else { E::zero() })
    }
}

impl CMatrix {
    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r).conj())
    }

    /// Squared Frobenius norm.
    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn frobenius(&self) -> f64 {
        libm::sqrt(self.norm_sqr())
    }

    pub fn scale(&self, k: Complex64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&z| z * k).collect() }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matrix mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    /// Largest absolute entry-wise deviation.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }
}

/// Matrix product `a * b`.
///
/// Accumulation runs in `i, k, j` order with exact-zero entries of `a`
/// skipped, so every output row depends only on the matching row of `a`
/// and is bit-identical whether or not the other rows are computed.
pub fn mat_mul<E>(a: &Matrix<E>, b: &Matrix<E>) -> Result<Matrix<E>>
where
    E: Copy + Zero + Add<Output = E> + Mul<Output = E>,
{
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik.is_zero() {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o = *o + aik * bkj;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_fills_every_element() {
        let t = Tensor4::new(Shape4::of(1, 2, 2, 2), 0.0f32).unwrap();
        assert_eq!(t.data(), &[0.0; 8]);
        let t = Tensor4::new(Shape4::of(1, 1, 1, 1), 3.5f32).unwrap();
        assert_eq!(t.data(), &[3.5]);
        let t = Tensor4::new(Shape4::of(2, 32, 2, 2), 0.5f32).unwrap();
        assert_eq!(t.data().len(), 256);
        assert!(t.data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn shape_rejects_zero_and_overflow() {
        assert!(matches!(Shape4::new(0, 1, 1, 1), Err(Error::Shape(_))));
        assert!(matches!(Shape4::new(usize::MAX, 2, 2, 2), Err(Error::Size(_))));
        assert!(Tensor4::new(Shape4::of(usize::MAX, 2, 1, 1), 0.0f32).is_err());
    }

    #[test]
    fn elementwise_ops() {
        let s = Shape4::of(1, 1, 1, 2);
        let a = Tensor4::from_vec(s, vec![1.0f32, 2.0]).unwrap();
        let b = Tensor4::from_vec(s, vec![3.0f32, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        let one = Tensor4::new(s, 1.0f32).unwrap();
        assert_eq!(a.mul(&one).unwrap(), a);
        assert_eq!(a.sub(&a).unwrap().data(), &[0.0, 0.0]);
        let c = Tensor4::<f32>::zeros(Shape4::of(1, 1, 2, 1));
        assert!(matches!(a.add(&c), Err(Error::Shape(_))));
    }

    #[test]
    fn mat_mul_small_cases() {
        let x = Matrix::from_vec(2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(mat_mul(&Matrix::identity(2), &x).unwrap(), x);
        let ones = Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        assert_eq!(mat_mul(&x, &ones).unwrap().data(), &[3.0, 7.0]);
        assert!(matches!(mat_mul(&ones, &ones), Err(Error::Shape(_))));
    }

    #[test]
    fn unitary_dft_matrix_times_adjoint_is_identity() {
        // Build F directly from the definition, independent of the channel module.
        let n = 8;
        let f = CMatrix::from_fn(n, n, |j, k| {
            let ang = -2.0 * core::f64::consts::PI * (j * k) as f64 / n as f64;
            Complex64::new(libm::cos(ang), libm::sin(ang)) / libm::sqrt(n as f64)
        });
        let prod = mat_mul(&f, &f.adjoint()).unwrap();
        assert!(prod.max_abs_diff(&CMatrix::identity(n)) < 1e-6);
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f64>> {
        proptest::collection::vec(-10.0f64..10.0, rows * cols)
            .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn zip_add_commutes_bitwise(a in proptest::collection::vec(-1e3f32..1e3, 24),
                                    b in proptest::collection::vec(-1e3f32..1e3, 24)) {
            let s = Shape4::of(1, 2, 3, 4);
            let ta = Tensor4::from_vec(s, a).unwrap();
            let tb = Tensor4::from_vec(s, b).unwrap();
            prop_assert_eq!(ta.add(&tb).unwrap(), tb.add(&ta).unwrap());
        }

        #[test]
        fn mat_mul_is_linear(a in small_matrix(3, 4), b in small_matrix(4, 2), c in small_matrix(4, 2),
                             alpha in -3.0f64..3.0) {
            let bc = Matrix::from_vec(4, 2, b.data().iter().zip(c.data()).map(|(x, y)| alpha * x + y).collect()).unwrap();
            let lhs = mat_mul(&a, &bc).unwrap();
            let ab = mat_mul(&a, &b).unwrap();
            let ac = mat_mul(&a, &c).unwrap();
            for i in 0..lhs.data().len() {
                let rhs = alpha * ab.data()[i] + ac.data()[i];
                let scale = lhs.data()[i].abs().max(rhs.abs()).max(1.0);
                prop_assert!((lhs.data()[i] - rhs).abs() / scale < 1e-6);
            }
        }
    }
}
