//! Dense 4-D tensors and the hand-differentiated layer set.
//!
//! Every layer comes as a forward function plus a backward function that
//! takes the upstream gradient and whatever the forward produced. There is
//! no tape: callers compose backward passes in reverse order themselves.

mod activation;
mod conv;
mod fft;
mod gradcheck;
mod pool;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use indexmap::IndexMap;
use num_complex::Complex;
use num_traits::Float;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftNum;

use crate::error::{Error, Result};
use crate::rng::Xoshiro256;

pub use activation::{
    relu, relu_backward, sigmoid, sigmoid_backward, sigmoid_scalar, softmax_rows,
    softmax_rows_backward,
};
pub use conv::{
    conv2d, conv2d_backward, conv2d_backward_params, conv_out_size, conv_transpose2d, conv_transpose2d_backward,
    ConvGrads,
};
pub use fft::{fft2d, fft2d_complex, ifft2d, ifft2d_complex};
pub use gradcheck::{grad_check, Differentiable, FnOp, GradCheckOptions, GradCheckReport};
pub use pool::{global_avg_pool, global_avg_pool_backward, max_pool2d, max_pool2d_backward, PoolIndices};

/// Scalar type of a tensor: `f32` for training and tracking, `f64` for
/// gradient checks.
pub trait Real:
    Float + FftNum + Default + Sum + Send + Sync + Debug + Display + 'static
{
    /// Name used in diagnostics.
    const NAME: &'static str;

    /// `c = alpha * a @ b + beta * c` on raw row/column strides.
    ///
    /// # Safety
    /// Pointers must cover the strided ranges implied by `m`, `k`, `n`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    #[inline]
    fn of(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("f64 converts to every Real")
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix product `c = a' @ b' + (accumulate ? c : 0)`, where
/// `a'` is `a` (m×k) or, with `trans_a`, the transpose of a stored k×m
/// matrix; likewise for `b'` (k×n).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths checked above against the strides chosen here.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Dense (n, c, h, w) tensor in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: [usize; 4], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn scalar(value: T) -> Self {
        Self {
            dims: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(dims: [usize; 4], std: f64, rng: &mut Xoshiro256) -> Self {
        let data = (0..dims.iter().product::<usize>())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Self { dims, data }
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform(dims: [usize; 4], lo: f64, hi: f64, rng: &mut Xoshiro256) -> Self {
        let data = (0..dims.iter().product::<usize>())
            .map(|_| T::of(rng.uniform(lo, hi)))
            .collect();
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }
    pub fn n(&self) -> usize {
        self.dims[0]
    }
    pub fn c(&self) -> usize {
        self.dims[1]
    }
    pub fn h(&self) -> usize {
        self.dims[2]
    }
    pub fn w(&self) -> usize {
        self.dims[3]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Size of one (h, w) plane.
    pub fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    /// Size of one sample (c, h, w).
    pub fn sample_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.sample_len();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let s = self.sample_len();
        &mut self.data[n * s..(n + 1) * s]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.plane_len();
        let off = (n * self.dims[1] + c) * p;
        &self.data[off..off + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.plane_len();
        let off = (n * self.dims[1] + c) * p;
        &mut self.data[off..off + p]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let [_, cc, h, w] = self.dims;
        self.data[((n * cc + c) * h + y) * w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut T {
        let [_, cc, h, w] = self.dims;
        &mut self.data[((n * cc + c) * h + y) * w + x]
    }

    /// Same data under new dims; element count must match.
    pub fn reshape(self, dims: [usize; 4]) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|v| U::of(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    /// `self += k * other`.
    pub fn axpy(&mut self, k: T, other: &Tensor<T>) {
        assert_eq!(self.dims, other.dims, "axpy dims");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + k * b;
        }
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn zip_with(&self, other: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::shape(
                op,
                format!("dims {:?} vs {:?}", self.dims, other.dims),
            ));
        }
        Ok(Self {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.dims, other.dims, "dot dims");
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest element (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(a: &Tensor<T>, b: &Tensor<T>) -> Result<Self> {
        if a.n() != b.n() || a.h() != b.h() || a.w() != b.w() {
            return Err(Error::shape(
                "concat",
                format!("dims {:?} vs {:?}", a.dims, b.dims),
            ));
        }
        let mut data = Vec::with_capacity(a.len() + b.len());
        for n in 0..a.n() {
            data.extend_from_slice(a.sample(n));
            data.extend_from_slice(b.sample(n));
        }
        Ok(Self {
            dims: [a.n(), a.c() + b.c(), a.h(), a.w()],
            data,
        })
    }

    /// Inverse of [`Tensor::concat_channels`]: splits off the first `ca` channels.
    pub fn split_channels(&self, ca: usize) -> (Self, Self) {
        let [n, c, h, w] = self.dims;
        assert!(ca <= c);
        let p = h * w;
        let mut a = Vec::with_capacity(n * ca * p);
        let mut b = Vec::with_capacity(n * (c - ca) * p);
        for s in 0..n {
            let smp = self.sample(s);
            a.extend_from_slice(&smp[..ca * p]);
            b.extend_from_slice(&smp[ca * p..]);
        }
        (
            Self {
                dims: [n, ca, h, w],
                data: a,
            },
            Self {
                dims: [n, c - ca, h, w],
                data: b,
            },
        )
    }

    /// Copies out sample `i` as a batch of one.
    pub fn take_sample(&self, i: usize) -> Self {
        Self {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.sample(i).to_vec(),
        }
    }

    /// Stacks equally shaped single-sample tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors"))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            if t.dims[1..] != first.dims[1..] {
                return Err(Error::shape(
                    "stack",
                    format!("dims {:?} vs {:?}", t.dims, first.dims),
                ));
            }
            n += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            dims: [n, c, h, w],
            data,
        })
    }
}

/// Complex counterpart of [`Tensor`]; elements are stored as interleaved
/// (re, im) pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor<T = f32> {
    dims: [usize; 4],
    data: Vec<Complex<T>>,
}

impl<T: Real> ComplexTensor<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![Complex::new(T::zero(), T::zero()); dims.iter().product()],
        }
    }

    pub fn from_real(x: &Tensor<T>) -> Self {
        Self {
            dims: x.dims(),
            data: x.data().iter().map(|&v| Complex::new(v, T::zero())).collect(),
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<Complex<T>>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::shape(
                "complex tensor",
                format!("dims {dims:?} need {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }
    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    /// Flat interleaved view: `[re0, im0, re1, im1, ...]`.
    pub fn interleaved(&self) -> Vec<T> {
        self.data.iter().flat_map(|z| [z.re, z.im]).collect()
    }

    pub fn real(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|z| z.re).collect(),
        }
    }

    pub fn plane(&self, n: usize, c: usize) -> &[Complex<T>] {
        let p = self.dims[2] * self.dims[3];
        let off = (n * self.dims[1] + c) * p;
        &self.data[off..off + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [Complex<T>] {
        let p = self.dims[2] * self.dims[3];
        let off = (n * self.dims[1] + c) * p;
        &mut self.data[off..off + p]
    }
}

/// Ordered, uniquely named parameter tensors.
///
/// The same type doubles as the gradient container: a gradient set has the
/// same names and shapes as the parameters it belongs to.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T = f32> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Looks up a parameter that the caller knows exists.
    ///
    /// Panics with the missing name otherwise; parameter names are fixed by
    /// the network layout, so a miss is a programming error.
    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.entries.shift_remove(name)
    }

    /// Scalar parameter value (gains, biases, delta).
    pub fn scalar(&self, name: &str) -> T {
        self.get(name).data()[0]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.dims())))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Adds `k * grad` for every name present in `other`.
    pub fn axpy(&mut self, k: T, other: &ParamSet<T>) {
        for (name, g) in other.iter() {
            self.get_mut(name).axpy(k, g);
        }
    }

    pub fn scale_all(&mut self, k: T) {
        for t in self.entries.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v * k);
        }
    }

    pub fn l2_norm(&self) -> T {
        self.entries
            .values()
            .flat_map(|t| t.data().iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    /// Checks that `other` has exactly the same names, order and shapes.
    pub fn check_aligned(&self, other: &ParamSet<T>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Config(format!(
                "parameter count {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.iter().zip(other.iter()) {
            if na != nb || ta.dims() != tb.dims() {
                return Err(Error::Config(format!(
                    "parameter {na} {:?} does not line up with {nb} {:?}",
                    ta.dims(),
                    tb.dims()
                )));
            }
        }
        Ok(())
    }
}
