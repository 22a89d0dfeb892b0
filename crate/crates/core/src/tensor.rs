//! Dense 4-D tensors in NCHW layout and the scalar abstraction they are generic over.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{shape_err, Result};

/// Floating-point element type. Training runs in `f32`, gradient checks in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a(m×k) · b(k×n) + beta * c` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass slices covering every strided index of
                // the m×k, k×n and m×n operands (checked below in debug builds).
                debug_assert!(k == 0 || a.len() as isize > (m as isize - 1) * rsa + (k as isize - 1) * csa);
                debug_assert!(k == 0 || b.len() as isize > (k as isize - 1) * rsb + (n as isize - 1) * csb);
                debug_assert!(c.len() as isize > (m as isize - 1) * rsc + (n as isize - 1) * csc);
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dimensions `(batch, channels, height, width)`.
pub type Dims = [usize; 4];

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(shape_err("tensor", format!("zero-sized dims {dims:?}")));
        }
        let numel: usize = dims.iter().product();
        if data.len() != numel {
            return Err(shape_err(
                "tensor",
                format!("dims {dims:?} need {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: Dims, value: T) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "zero-sized dims {dims:?}");
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = dims.iter().product();
        Self {
            dims,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    /// Elements in one `(channel, height, width)` sample.
    pub fn sample_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let [_, cs, hs, ws] = self.dims;
        self.data[((n * cs + c) * hs + h) * ws + w]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, v| if v.abs() > acc { v.abs() } else { acc })
    }

    /// Inner product over all elements.
    pub fn dot(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    /// Contiguous sub-batch `[start, start + len)`.
    pub fn slice_batch(&self, start: usize, len: usize) -> Self {
        let per = self.sample_len();
        Self {
            dims: [len, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[start * per..(start + len) * per].to_vec(),
        }
    }

    pub fn reshape(self, dims: Dims) -> Result<Self> {
        Self::new(dims, self.data)
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("values", &preview)
            .finish()
    }
}
