//! Dense complex and real tensors.
//!
//! Everything in the crate is built on [`Tensor<T>`] with `T` either `f64` or
//! [`C64`]. Layout is row-major. Batched network states put the batch index
//! last, so a `[features, batch]` complex tensor can be viewed as a
//! `[features, 2 * batch]` real matrix ("lanes"): multiplying it by a real
//! weight matrix is a single real GEMM.
//!
//! Convolutions use the cross-correlation convention
//! `out[co, oy, ox] = sum_{ci, ky, kx} w[co, ci, ky, kx] * x[ci, oy*s + ky - p, ox*s + kx - p]`,
//! and [`conv2d_transpose`] is its exact adjoint.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use num_complex::Complex64;
use thiserror::Error;

/// Complex scalar with 64-bit real and imaginary parts.
pub type C64 = Complex64;
/// Alias kept for readability at API boundaries.
pub type ComplexScalar = Complex64;

pub type ComplexTensor = Tensor<C64>;
pub type RealTensor = Tensor<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("invalid argument to {op}: {reason}")]
    Invalid { op: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Scalar field the tensors are defined over: `f64` or [`C64`].
pub trait Scalar:
    Copy
    + Send
    + Sync
    + Debug
    + Default
    + PartialEq
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
    /// Number of `f64` lanes per scalar.
    const LANES: usize;

    fn zero() -> Self;
    fn one() -> Self;
    fn from_real(x: f64) -> Self;
    /// Real part of a complex number; for `f64` the imaginary part is dropped.
    fn from_complex(z: C64) -> Self;
    fn to_complex(self) -> C64;
    fn re(self) -> f64;
    fn im(self) -> f64;
    fn conj(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn norm_sqr(self) -> f64;
    fn is_finite(self) -> bool;
    fn scale(self, k: f64) -> Self;

    fn abs(self) -> f64 {
        self.norm_sqr().sqrt()
    }

    fn as_lanes(s: &[Self]) -> &[f64];
    fn as_lanes_mut(s: &mut [Self]) -> &mut [f64];

    /// `c <- alpha * a * b + beta * c` for strided row/column-major operands.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n`, `m x n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f64 {
    const LANES: usize = 1;

    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_real(x: f64) -> Self {
        x
    }
    fn from_complex(z: C64) -> Self {
        z.re
    }
    fn to_complex(self) -> C64 {
        C64::new(self, 0.0)
    }
    fn re(self) -> f64 {
        self
    }
    fn im(self) -> f64 {
        0.0
    }
    fn conj(self) -> Self {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn norm_sqr(self) -> f64 {
        self * self
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn scale(self, k: f64) -> Self {
        self * k
    }
    fn as_lanes(s: &[Self]) -> &[f64] {
        s
    }
    fn as_lanes_mut(s: &mut [Self]) -> &mut [f64] {
        s
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for C64 {
    const LANES: usize = 2;

    fn zero() -> Self {
        C64::new(0.0, 0.0)
    }
    fn one() -> Self {
        C64::new(1.0, 0.0)
    }
    fn from_real(x: f64) -> Self {
        C64::new(x, 0.0)
    }
    fn from_complex(z: C64) -> Self {
        z
    }
    fn to_complex(self) -> C64 {
        self
    }
    fn re(self) -> f64 {
        self.re
    }
    fn im(self) -> f64 {
        self.im
    }
    fn conj(self) -> Self {
        Complex64::conj(&self)
    }
    fn exp(self) -> Self {
        Complex64::exp(self)
    }
    fn ln(self) -> Self {
        Complex64::ln(self)
    }
    fn norm_sqr(self) -> f64 {
        Complex64::norm_sqr(&self)
    }
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
    fn scale(self, k: f64) -> Self {
        C64::new(self.re * k, self.im * k)
    }
    fn as_lanes(s: &[Self]) -> &[f64] {
        // SAFETY: Complex<f64> is #[repr(C)] { re: f64, im: f64 }.
        unsafe { std::slice::from_raw_parts(s.as_ptr() as *const f64, s.len() * 2) }
    }
    fn as_lanes_mut(s: &mut [Self]) -> &mut [f64] {
        // SAFETY: as above; the borrow is exclusive.
        unsafe { std::slice::from_raw_parts_mut(s.as_mut_ptr() as *mut f64, s.len() * 2) }
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::zgemm(
            matrixmultiply::CGemmOption::Standard,
            matrixmultiply::CGemmOption::Standard,
            m,
            k,
            n,
            [alpha.re, alpha.im],
            a as *const [f64; 2],
            rsa,
            csa,
            b as *const [f64; 2],
            rsb,
            csb,
            [beta.re, beta.im],
            c as *mut [f64; 2],
            rsc,
            csc,
        );
    }
}

/// `e^z = e^{re}(cos im + i sin im)`. Overflow shows up as a non-finite result.
pub fn cexp(z: C64) -> C64 {
    z.exp()
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::BadLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Rank-0 tensor.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
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

    pub fn lanes(&self) -> &[f64] {
        T::as_lanes(&self.data)
    }

    pub fn lanes_mut(&mut self) -> &mut [f64] {
        T::as_lanes_mut(&mut self.data)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(T) -> T) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    fn broadcast(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Self {
                shape: self.shape.clone(),
                data,
            });
        }
        if other.shape.is_empty() {
            let b = other.data[0];
            return Ok(self.map(|a| f(a, b)));
        }
        if self.shape.is_empty() {
            let a = self.data[0];
            return Ok(other.map(|b| f(a, b)));
        }
        Err(TensorError::ShapeMismatch {
            op,
            left: self.shape.clone(),
            right: other.shape.clone(),
        })
    }

    /// Elementwise sum; shapes must match or one operand must be rank 0.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.broadcast(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.broadcast(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product with the same broadcasting rule as [`Tensor::add`].
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.broadcast(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|a| a * s)
    }

    /// `self += alpha * x`.
    pub fn axpy(&mut self, alpha: T, x: &Self) -> Result<()> {
        if self.shape != x.shape {
            return Err(TensorError::ShapeMismatch {
                op: "axpy",
                left: self.shape.clone(),
                right: x.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&x.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Bilinear inner product `sum_i a_i b_i` (no conjugation).
    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.data.len() != other.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    /// Any non-finite component marks the tensor diverged.
    pub fn is_diverged(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }

    pub fn to_complex(&self) -> ComplexTensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.to_complex()).collect(),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let [m, n] = self.dims2("transpose")?;
        let mut out = Self::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(out)
    }

    fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [m, n] => Ok([m, n]),
            _ => Err(TensorError::Invalid {
                op,
                reason: format!("expected a matrix, got shape {:?}", self.shape),
            }),
        }
    }

    /// Matrix product `[m x k] * [k x n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let [m, k] = self.dims2("matmul")?;
        let [k2, n] = other.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = Self::zeros(&[m, n]);
        if m * n * k > 0 {
            // SAFETY: row-major contiguous operands with the dimensions checked above.
            unsafe {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    self.data.as_ptr(),
                    k as isize,
                    1,
                    other.data.as_ptr(),
                    n as isize,
                    1,
                    T::zero(),
                    out.data.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Ok(out)
    }
}

impl ComplexTensor {
    pub fn from_real(x: &RealTensor) -> Self {
        x.to_complex()
    }

    /// True when every imaginary component is exactly zero.
    pub fn is_real(&self) -> bool {
        self.data.iter().all(|z| z.im == 0.0)
    }

    pub fn re(&self) -> RealTensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|z| z.re).collect(),
        }
    }

    pub fn im(&self) -> RealTensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|z| z.im).collect(),
        }
    }

    pub fn conj(&self) -> Self {
        self.map(|z| z.conj())
    }
}

pub fn cadd(a: &ComplexTensor, b: &ComplexTensor) -> Result<ComplexTensor> {
    a.add(b)
}

pub fn cmul(a: &ComplexTensor, b: &ComplexTensor) -> Result<ComplexTensor> {
    a.mul(b)
}

pub fn cscale(a: &ComplexTensor, s: C64) -> ComplexTensor {
    a.scale(s)
}

/// Applies a real matrix to the leading axis of `x`.
///
/// `w` is `[m, k]`; `x` has `k * cols` elements and is read as `[k, cols]`
/// (trailing axes flattened). Returns `[m, cols]`, or `[k, cols]` from `w^T x`
/// when `transpose` is set.
pub fn real_matmul<T: Scalar>(w: &RealTensor, x: &Tensor<T>, transpose: bool) -> Result<Tensor<T>> {
    let [m, k] = w.dims2("real_matmul")?;
    let (rows_in, rows_out) = if transpose { (m, k) } else { (k, m) };
    if rows_in == 0 || !x.len().is_multiple_of(rows_in) || (x.shape.first() != Some(&rows_in) && x.shape.len() > 1)
    {
        return Err(TensorError::ShapeMismatch {
            op: "real_matmul",
            left: w.shape.clone(),
            right: x.shape.clone(),
        });
    }
    let cols = x.len() / rows_in;
    let mut out = Tensor::<T>::zeros(&[rows_out, cols]);
    let lanes = cols * T::LANES;
    if rows_out * lanes * rows_in == 0 {
        return Ok(out);
    }
    let (rsa, csa) = if transpose {
        (1isize, k as isize)
    } else {
        (k as isize, 1isize)
    };
    let xl = x.lanes();
    let ol = out.lanes_mut();
    // SAFETY: `w` is row-major [m, k]; the lane views are contiguous [rows, lanes].
    unsafe {
        matrixmultiply::dgemm(
            rows_out,
            rows_in,
            lanes,
            1.0,
            w.data.as_ptr(),
            rsa,
            csa,
            xl.as_ptr(),
            lanes as isize,
            1,
            0.0,
            ol.as_mut_ptr(),
            lanes as isize,
            1,
        );
    }
    Ok(out)
}

/// `sum_b a[:, b] b[:, b]^T` for `a: [m, batch]`, `b: [n, batch]` (trailing axes flattened).
pub fn outer_sum<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, batch: usize) -> Result<Tensor<T>> {
    if batch == 0 || !a.len().is_multiple_of(batch) || !b.len().is_multiple_of(batch) {
        return Err(TensorError::ShapeMismatch {
            op: "outer_sum",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let m = a.len() / batch;
    let n = b.len() / batch;
    let mut out = Tensor::<T>::zeros(&[m, n]);
    if m * n == 0 {
        return Ok(out);
    }
    // SAFETY: a is [m, batch] row-major, b^T is read with swapped strides.
    unsafe {
        T::gemm(
            m,
            batch,
            n,
            T::one(),
            a.data.as_ptr(),
            batch as isize,
            1,
            b.data.as_ptr(),
            1,
            batch as isize,
            T::zero(),
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(out)
}

/// Geometry of a 2-D convolution over `[C, H, W]` or `[C, H, W, batch]` tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    /// Output extent for an input extent and kernel size, if the kernel fits.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        if self.stride == 0 || input + 2 * self.padding < kernel {
            return None;
        }
        Some((input + 2 * self.padding - kernel) / self.stride + 1)
    }
}

fn split_chw(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w, 1)),
        [c, h, w, b] => Ok((c, h, w, b)),
        _ => Err(TensorError::Invalid {
            op,
            reason: format!("expected [C, H, W] or [C, H, W, batch], got {shape:?}"),
        }),
    }
}

fn kernel_dims(w: &RealTensor, op: &'static str) -> Result<[usize; 4]> {
    match w.shape[..] {
        [co, ci, kh, kw] => Ok([co, ci, kh, kw]),
        _ => Err(TensorError::Invalid {
            op,
            reason: format!("kernel must be [C_out, C_in, kh, kw], got {:?}", w.shape),
        }),
    }
}

fn with_batch(c: usize, h: usize, w: usize, batch: usize, batched: bool) -> Vec<usize> {
    if batched {
        vec![c, h, w, batch]
    } else {
        vec![c, h, w]
    }
}

/// Cross-correlation of `x` with real kernels `w` (`[C_out, C_in, kh, kw]`).
pub fn conv2d<T: Scalar>(w: &RealTensor, x: &Tensor<T>, geom: ConvGeometry) -> Result<Tensor<T>> {
    let [co, ci, kh, kw] = kernel_dims(w, "conv2d")?;
    let (xc, h, wd, batch) = split_chw(&x.shape, "conv2d")?;
    if xc != ci {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: w.shape.clone(),
            right: x.shape.clone(),
        });
    }
    let (ho, wo) = match (geom.out_extent(h, kh), geom.out_extent(wd, kw)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(TensorError::Invalid {
                op: "conv2d",
                reason: format!("kernel {kh}x{kw} does not fit input {h}x{wd} with {geom:?}"),
            })
        }
    };
    let mut out = Tensor::<T>::zeros(&with_batch(co, ho, wo, batch, x.shape.len() == 4));
    let lanes = batch * T::LANES;
    let xl = x.lanes();
    let ol = out.lanes_mut();
    let (s, p) = (geom.stride as isize, geom.padding as isize);
    for o in 0..co {
        for i in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = w.data[((o * ci + i) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let src = ((i * h + iy as usize) * wd + ix as usize) * lanes;
                            let dst = ((o * ho + oy) * wo + ox) * lanes;
                            for (d, &v) in ol[dst..dst + lanes].iter_mut().zip(&xl[src..src + lanes]) {
                                *d += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv2d`]: maps `[C_out, H_out, W_out(, batch)]` back to
/// `[C_in, input_hw.0, input_hw.1(, batch)]`.
pub fn conv2d_transpose<T: Scalar>(
    w: &RealTensor,
    y: &Tensor<T>,
    geom: ConvGeometry,
    input_hw: (usize, usize),
) -> Result<Tensor<T>> {
    let [co, ci, kh, kw] = kernel_dims(w, "conv2d_transpose")?;
    let (yc, ho, wo, batch) = split_chw(&y.shape, "conv2d_transpose")?;
    let (h, wd) = input_hw;
    if yc != co
        || geom.out_extent(h, kh) != Some(ho)
        || geom.out_extent(wd, kw) != Some(wo)
    {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_transpose",
            left: w.shape.clone(),
            right: y.shape.clone(),
        });
    }
    let mut out = Tensor::<T>::zeros(&with_batch(ci, h, wd, batch, y.shape.len() == 4));
    let lanes = batch * T::LANES;
    let yl = y.lanes();
    let ol = out.lanes_mut();
    let (s, p) = (geom.stride as isize, geom.padding as isize);
    for o in 0..co {
        for i in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = w.data[((o * ci + i) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let src = ((o * ho + oy) * wo + ox) * lanes;
                            let dst = ((i * h + iy as usize) * wd + ix as usize) * lanes;
                            for (d, &v) in ol[dst..dst + lanes].iter_mut().zip(&yl[src..src + lanes]) {
                                *d += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Kernel gradient of `<g, conv2d(w, x)>` with respect to `w`, summed over the batch:
/// `out[co, ci, ky, kx] = sum g[co, oy, ox, b] * x[ci, oy*s + ky - p, ox*s + kx - p, b]`.
pub fn conv2d_weight_grad<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    kernel: (usize, usize),
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let (co, ho, wo, gb) = split_chw(&g.shape, "conv2d_weight_grad")?;
    let (ci, h, wd, xb) = split_chw(&x.shape, "conv2d_weight_grad")?;
    let (kh, kw) = kernel;
    if gb != xb || geom.out_extent(h, kh) != Some(ho) || geom.out_extent(wd, kw) != Some(wo) {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_weight_grad",
            left: g.shape.clone(),
            right: x.shape.clone(),
        });
    }
    let batch = gb;
    let mut out = Tensor::<T>::zeros(&[co, ci, kh, kw]);
    let (s, p) = (geom.stride as isize, geom.padding as isize);
    for o in 0..co {
        for i in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = T::zero();
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let gi = ((o * ho + oy) * wo + ox) * batch;
                            let xi = ((i * h + iy as usize) * wd + ix as usize) * batch;
                            for b in 0..batch {
                                acc += g.data[gi + b] * x.data[xi + b];
                            }
                        }
                    }
                    out.data[((o * ci + i) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    Ok(out)
}
