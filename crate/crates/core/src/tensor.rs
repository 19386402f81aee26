//! Dense NCHW activation volumes and the matrix kernel every layer is built on.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar type for activations and parameters. Training runs in `f32`,
/// finite-difference gradient checks in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `c = alpha * a * b + beta * c` on strided row/column views.
    ///
    /// # Safety
    /// The caller guarantees every strided index stays inside the buffers.
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

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major matrix product `c (m×n) = op(a) (m×k) · op(b) (k×n)`, where
/// `op` optionally transposes the stored matrix. With `accumulate` the result
/// is added onto `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "lhs length");
    assert_eq!(b.len(), k * n, "rhs length");
    assert_eq!(c.len(), m * n, "output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths were checked above against the logical dimensions, and
    // the strides describe exactly those row-major layouts.
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
        );
    }
}

/// Rank-4 activation volume in (batch, channels, height, width) order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self::filled(n, c, h, w, T::zero())
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, value: T) -> Self {
        FeatureMap {
            n,
            c,
            h,
            w,
            data: vec![value; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::shape(format!(
                "buffer of {} values cannot hold {n}x{c}x{h}x{w}",
                data.len()
            )));
        }
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("empty dimension in {n}x{c}x{h}x{w}")));
        }
        Ok(FeatureMap { n, c, h, w, data })
    }

    pub fn from_fn(n: usize, c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        FeatureMap { n, c, h, w, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Spatial positions per channel plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, ch: usize, y: usize, x: usize) -> usize {
        ((b * self.c + ch) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, b: usize, ch: usize, y: usize, x: usize) -> T {
        self.data[self.index(b, ch, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, ch: usize, y: usize, x: usize, v: T) {
        let i = self.index(b, ch, y, x);
        self.data[i] = v;
    }

    /// The contiguous `channels × height × width` block of one sample.
    pub fn sample(&self, b: usize) -> &[T] {
        let len = self.c * self.h * self.w;
        &self.data[b * len..(b + 1) * len]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [T] {
        let len = self.c * self.h * self.w;
        &mut self.data[b * len..(b + 1) * len]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(format!(
                "cannot add {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        FeatureMap {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        if a.n != b.n || a.h != b.h || a.w != b.w {
            return Err(Error::Alignment(format!(
                "cannot concatenate {:?} with {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let c = a.c + b.c;
        let mut data = Vec::with_capacity(a.n * c * a.h * a.w);
        for s in 0..a.n {
            data.extend_from_slice(a.sample(s));
            data.extend_from_slice(b.sample(s));
        }
        Ok(FeatureMap {
            n: a.n,
            c,
            h: a.h,
            w: a.w,
            data,
        })
    }

    /// Inverse of [`FeatureMap::concat_channels`]: the first `c_first` channels, then the rest.
    pub fn split_channels(&self, c_first: usize) -> Result<(Self, Self)> {
        if c_first == 0 || c_first >= self.c {
            return Err(Error::shape(format!(
                "cannot split {} channels at {c_first}",
                self.c
            )));
        }
        let plane = self.plane();
        let mut first = Vec::with_capacity(self.n * c_first * plane);
        let mut second = Vec::with_capacity(self.n * (self.c - c_first) * plane);
        for s in 0..self.n {
            let block = self.sample(s);
            first.extend_from_slice(&block[..c_first * plane]);
            second.extend_from_slice(&block[c_first * plane..]);
        }
        Ok((
            FeatureMap {
                n: self.n,
                c: c_first,
                h: self.h,
                w: self.w,
                data: first,
            },
            FeatureMap {
                n: self.n,
                c: self.c - c_first,
                h: self.h,
                w: self.w,
                data: second,
            },
        ))
    }

    /// Copies the `h×w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.h || left + w > self.w || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "window {h}x{w} at ({top},{left}) exceeds {}x{}",
                self.h, self.w
            )));
        }
        let mut out = Self::zeros(self.n, self.c, h, w);
        for b in 0..self.n {
            for ch in 0..self.c {
                for y in 0..h {
                    let src = self.index(b, ch, top + y, left);
                    let dst = out.index(b, ch, y, 0);
                    out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`FeatureMap::crop`]: places `self` into a zero volume of size `h×w`.
    pub fn uncrop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + self.h > h || left + self.w > w {
            return Err(Error::shape(format!(
                "window {}x{} at ({top},{left}) exceeds {h}x{w}",
                self.h, self.w
            )));
        }
        let mut out = Self::zeros(self.n, self.c, h, w);
        for b in 0..self.n {
            for ch in 0..self.c {
                for y in 0..self.h {
                    let src = self.index(b, ch, y, 0);
                    let dst = out.index(b, ch, top + y, left);
                    out.data[dst..dst + self.w].copy_from_slice(&self.data[src..src + self.w]);
                }
            }
        }
        Ok(out)
    }
}
