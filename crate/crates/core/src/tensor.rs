//! Dense row-major tensors and the numeric kernels the model is built from.
//!
//! Every kernel here is a pure function of its inputs. Matrices are tensors
//! viewed as `rows × cols` where `cols` is the last dimension and `rows` the
//! product of the others, so a `[heads, head_dim, dim]` weight is used as a
//! `(heads·head_dim) × dim` matrix without copying.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Added to the variance before the square root in [`layernorm`].
pub const LAYERNORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    /// A rank-0 tensor holding one value.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Last dimension; 1 for a rank-0 tensor.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        match self.cols() {
            0 => 0,
            c => self.data.len() / c,
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }
}

/// Strided read-only matrix view used by [`gemm`].
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T: Scalar> MatRef<'a, T> {
    pub fn of(t: &'a Tensor<T>) -> Self {
        Self {
            data: t.data(),
            rows: t.rows(),
            cols: t.cols(),
            row_stride: t.cols(),
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn in_bounds(&self) -> bool {
        if self.rows == 0 || self.cols == 0 {
            return true;
        }
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride < self.data.len()
    }
}

/// `c = a·b + beta·c` with `c` contiguous row-major.
pub fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) -> Result<()> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", &[a.rows, a.cols], &[b.rows, b.cols]));
    }
    if c.len() != a.rows * b.cols {
        return Err(Error::shape("matmul output", &[a.rows, b.cols], &[c.len()]));
    }
    assert!(a.in_bounds() && b.in_bounds(), "strided view exceeds its buffer");
    if c.is_empty() {
        return Ok(());
    }
    if a.cols == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return Ok(());
    }
    // SAFETY: both views were bounds-checked above and `c` has exactly m·n slots.
    unsafe {
        T::gemm_unchecked(
            a.rows,
            a.cols,
            b.cols,
            a.data,
            (a.row_stride, a.col_stride),
            b.data,
            (b.row_stride, b.col_stride),
            beta,
            c,
        );
    }
    Ok(())
}

fn product<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>) -> Result<Tensor<T>> {
    let mut out = Tensor::zeros(vec![a.rows, b.cols]);
    gemm(a, b, T::zero(), out.data_mut())?;
    Ok(out)
}

/// `a·b` for `a: m×k`, `b: k×n`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    product(MatRef::of(a), MatRef::of(b)).map_err(|_| Error::shape("matmul", a.shape(), b.shape()))
}

/// `a·bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    product(MatRef::of(a), MatRef::of(b).t()).map_err(|_| Error::shape("matmul_nt", a.shape(), b.shape()))
}

/// `aᵀ·b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    product(MatRef::of(a).t(), MatRef::of(b)).map_err(|_| Error::shape("matmul_tn", a.shape(), b.shape()))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::shape("softmax", &[1], &[0]));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Vector-Jacobian product of softmax given its output `y`.
pub(crate) fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T]) {
    let dot: T = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(dy) {
        *d += yi * (gi - dot);
    }
}

/// Per-row statistics kept for the layernorm backward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// LayerNorm of one vector with biased (population) variance.
pub fn layernorm<T: Scalar>(v: &[T], gain: &[T], bias: &[T], eps: T) -> Result<Vec<T>> {
    if v.is_empty() || gain.len() != v.len() || bias.len() != v.len() {
        return Err(Error::shape("layernorm", &[v.len()], &[gain.len(), bias.len()]));
    }
    let mut out = vec![T::zero(); v.len()];
    layernorm_row(v, gain, bias, eps, &mut out);
    Ok(out)
}

fn layernorm_row<T: Scalar>(v: &[T], gain: &[T], bias: &[T], eps: T, out: &mut [T]) -> (T, T) {
    let n = T::from_usize(v.len()).unwrap();
    let mean = v.iter().copied().sum::<T>() / n;
    let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + eps).sqrt();
    for i in 0..v.len() {
        out[i] = (v[i] - mean) * rstd * gain[i] + bias[i];
    }
    (mean, rstd)
}

/// Row-wise layernorm of a matrix; returns the output and per-row stats.
pub(crate) fn layernorm_rows<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let cols = x.cols();
    if gain.len() != cols || bias.len() != cols || cols == 0 {
        return Err(Error::shape("layernorm", x.shape(), gain.shape()));
    }
    let eps = T::lit(LAYERNORM_EPS);
    let mut out = Tensor::zeros(x.shape().to_vec());
    let mut stats = NormStats {
        mean: Vec::with_capacity(x.rows()),
        rstd: Vec::with_capacity(x.rows()),
    };
    for r in 0..x.rows() {
        let (mean, rstd) = layernorm_row(x.row(r), gain.data(), bias.data(), eps, out.row_mut(r));
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((out, stats))
}

/// Gradients of row-wise layernorm with respect to input, gain and bias.
pub(crate) fn layernorm_rows_backward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    stats: &NormStats<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let cols = x.cols();
    let n = T::from_usize(cols).unwrap();
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dgain = Tensor::zeros(gain.shape().to_vec());
    let mut dbias = Tensor::zeros(gain.shape().to_vec());
    let mut xhat = vec![T::zero(); cols];
    let mut dxhat = vec![T::zero(); cols];
    for r in 0..x.rows() {
        let (mean, rstd) = (stats.mean[r], stats.rstd[r]);
        let xr = x.row(r);
        let dyr = dy.row(r);
        for i in 0..cols {
            xhat[i] = (xr[i] - mean) * rstd;
            dxhat[i] = dyr[i] * gain.data()[i];
            dgain.data_mut()[i] += dyr[i] * xhat[i];
            dbias.data_mut()[i] += dyr[i];
        }
        let sum_d: T = dxhat.iter().copied().sum();
        let sum_dx: T = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
        let dxr = dx.row_mut(r);
        for i in 0..cols {
            dxr[i] = rstd / n * (n * dxhat[i] - sum_d - xhat[i] * sum_dx);
        }
    }
    (dx, dgain, dbias)
}

/// Gaussian-error linear unit `x·Φ(x)` with the exact error function.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::FRAC_1_SQRT_2()).erf())
}

/// `d/dx [x·Φ(x)] = Φ(x) + x·φ(x)`.
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::FRAC_1_SQRT_2()).erf());
    let pdf = (-half * x * x).exp() / (T::TAU()).sqrt();
    cdf + x * pdf
}

/// `1 − ⟨a,b⟩/(‖a‖·‖b‖)`, clamped to `[0, 2]` against rounding.
pub fn cosine_distance<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("cosine_distance", &[a.len()], &[b.len()]));
    }
    let (dot, na, nb) = dot_norms(a, b);
    if na == T::zero() || nb == T::zero() {
        return Err(Error::Contract("cosine distance of a zero-norm vector".into()));
    }
    let d = T::one() - dot / (na * nb);
    let two = T::lit(2.0);
    Ok(if d < T::zero() {
        T::zero()
    } else if d > two {
        two
    } else {
        d
    })
}

fn dot_norms<T: Scalar>(a: &[T], b: &[T]) -> (T, T, T) {
    let dot = a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    (dot, na, nb)
}

/// Gradient of [`cosine_distance`] with respect to its first argument.
pub(crate) fn cosine_distance_grad<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    let (dot, na, nb) = dot_norms(a, b);
    let inv = T::one() / (na * nb);
    let coef = dot / (na * na * na * nb);
    a.iter()
        .zip(b)
        .map(|(&x, &y)| -(y * inv - x * coef))
        .collect()
}
