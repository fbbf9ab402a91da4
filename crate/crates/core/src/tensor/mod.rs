//! Dense NCHW tensors, a reverse-mode tape, and the Adam optimizer.
//!
//! Everything is generic over [`Real`] so the same model code trains in `f32`
//! and runs finite-difference checks in `f64`.

pub mod gradcheck;
mod kernels;
mod optim;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use thiserror::Error;

pub use kernels::{conv2d_output_extent, transposed_conv2d_output_extent};
pub use optim::{adam_step, AdamConfig, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: output would have zero size (input {input:?}, kernel {kernel:?})")]
    ZeroSizeOutput {
        op: &'static str,
        input: Vec<usize>,
        kernel: Vec<usize>,
    },
    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Floating point element type usable by the engine.
pub trait Real:
    Float
    + FromPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// `c = op(a) * op(b) + (accumulate ? c : 0)` where `op(a)` is `m x k`
    /// and `op(b)` is `k x n`, all row-major.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

fn gemm_strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = gemm_strides(m, k, a_trans);
                let (rsb, csb) = gemm_strides(k, n, b_trans);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the slices are at least as long as the strided views
                // described by (m, k, n) and the strides above.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
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
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major n-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self {
            shape,
            data: (0..len).map(&mut f).collect(),
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Extents of a 4-d NCHW tensor.
    pub fn dims4(&self) -> Option<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Some((n, c, h, w)),
            _ => None,
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Sum of elementwise products, accumulated in `f64`.
    pub fn dot(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.to_f64().unwrap() * b.to_f64().unwrap())
            .sum()
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Two-dimensional cross-correlation over an NCHW batch with an OIKK kernel.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    kernels::conv2d_forward(input, kernel, stride, padding)
}

/// Adjoint of [`conv2d`] for the same kernel, stride and padding.
///
/// `output_padding` (< `stride`) selects among the input extents that map to
/// the same conv2d output extent.
pub fn transposed_conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor<T>> {
    kernels::transposed_conv2d_forward(input, kernel, stride, padding, output_padding)
}

/// `max(x, slope * x)` elementwise.
pub fn leaky_relu<T: Real>(input: &Tensor<T>, slope: T) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { slope * x })
}

/// Logistic sigmoid, clamped so every output is strictly inside (0, 1).
pub fn sigmoid<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    let one = T::one();
    let s = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    let hi = one - T::epsilon() / T::lit(2.0);
    s.max(T::min_positive_value()).min(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::DataLength { .. })
        ));
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::from_fn(vec![1, 1, 3, 3], |i| i as f64 * 0.5 - 1.0);
        let k = Tensor::full(vec![1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn hand_evaluated_cross_correlation() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn conv_output_extent_formula() {
        let x = Tensor::<f32>::zeros(vec![2, 3, 17, 12]);
        let k = Tensor::<f32>::zeros(vec![4, 3, 5, 5]);
        let y = conv2d(&x, &k, 2, 2).unwrap();
        assert_eq!(y.shape(), &[2, 4, 9, 6]);
        assert_eq!(conv2d_output_extent(17, 5, 2, 2), (17 + 4 - 5) / 2 + 1);
    }

    #[test]
    fn conv_shape_errors_name_both_shapes() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 4, 4]);
        let k = Tensor::<f32>::zeros(vec![1, 3, 3, 3]);
        let msg = conv2d(&x, &k, 1, 0).unwrap_err().to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
        let k = Tensor::<f32>::zeros(vec![1, 1, 5, 5]);
        assert!(matches!(
            conv2d(&Tensor::<f32>::zeros(vec![1, 1, 2, 2]), &k, 1, 0),
            Err(TensorError::ZeroSizeOutput { .. })
        ));
    }

    #[test]
    fn single_pixel_transposed_conv_scales_the_kernel() {
        let x = Tensor::full(vec![1, 1, 1, 1], 3.0);
        let k = Tensor::new(vec![1, 1, 2, 2], vec![1.0, -2.0, 0.5, 4.0]).unwrap();
        let y = transposed_conv2d(&x, &k, 2, 0, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[3.0, -6.0, 1.5, 12.0]);
    }

    #[test]
    fn transposed_extent_with_output_padding() {
        let x = Tensor::<f32>::zeros(vec![1, 4, 8, 8]);
        let k = Tensor::<f32>::zeros(vec![4, 2, 5, 5]);
        assert_eq!(transposed_conv2d(&x, &k, 2, 2, 1).unwrap().shape(), &[1, 2, 16, 16]);
        assert_eq!(transposed_conv2d(&x, &k, 2, 2, 0).unwrap().shape(), &[1, 2, 15, 15]);
        assert!(transposed_conv2d(&x, &k, 2, 2, 2).is_err());
    }

    fn random(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn transposed_conv_is_the_adjoint_of_conv() {
        use rand::SeedableRng;
        for seed in 0..20 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (stride, pad, k) = [(1, 0, 3), (2, 2, 5), (2, 1, 3), (3, 1, 4)][seed as usize % 4];
            let h = rng.random_range(k..k + 9);
            let w = h + stride * rng.random_range(0..3);
            let x = random(&[2, 3, h, w], &mut rng);
            let kernel = random(&[4, 3, k, k], &mut rng);
            let y_shape = conv2d(&x, &kernel, stride, pad).unwrap().shape().to_vec();
            let y = random(&y_shape, &mut rng);
            // Pick the output padding that maps back onto the original extent.
            let op = (h + 2 * pad - k) % stride;
            assert_eq!(op, (w + 2 * pad - k) % stride, "test geometry");
            let lhs = conv2d(&x, &kernel, stride, pad).unwrap().dot(&y);
            let back = transposed_conv2d(&y, &kernel.clone(), stride, pad, op);
            let Ok(back) = back else { continue };
            assert_eq!(back.shape(), x.shape());
            let rhs = x.dot(&back);
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "seed {seed}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn leaky_relu_definition() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(leaky_relu(&x, 0.2).data(), &[-0.2, 0.0, 2.0]);
        let pos = Tensor::from_fn(vec![10], |i| i as f64 + 0.1);
        assert_eq!(leaky_relu(&pos, 0.2), pos);
    }

    #[test]
    fn sigmoid_is_bounded() {
        let x = Tensor::new(vec![5], vec![0.0, 1e6, -1e6, f64::MAX, 40.0]).unwrap();
        let y = sigmoid(&x);
        assert_eq!(y.data()[0], 0.5);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0 && v.is_finite()));
        let y32 = sigmoid(&Tensor::new(vec![2], vec![100.0f32, -100.0]).unwrap());
        assert!(y32.data()[0] < 1.0 && y32.data()[1] > 0.0);
        assert_relative_eq!(sigmoid_scalar(2.0f64), 1.0 / (1.0 + (-2.0f64).exp()), epsilon = 1e-15);
    }

    #[test]
    fn conv_is_deterministic() {
        let x = Tensor::from_fn(vec![2, 3, 16, 16], |i| ((i * 7919) % 101) as f32 / 100.0);
        let k = Tensor::from_fn(vec![8, 3, 5, 5], |i| ((i * 31) % 17) as f32 / 17.0 - 0.5);
        let a = conv2d(&x, &k, 2, 2).unwrap();
        let b = conv2d(&x, &k, 2, 2).unwrap();
        assert_eq!(a.data(), b.data());
    }

    proptest! {
        #[test]
        fn shape_product_equals_length(dims in prop::collection::vec(1usize..5, 1..5)) {
            let t = Tensor::<f32>::zeros(dims.clone());
            prop_assert_eq!(t.len(), dims.iter().product::<usize>());
        }

        #[test]
        fn conv_outputs_stay_finite(seed in any::<u64>(), stride in 1usize..3, pad in 0usize..3) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[1, 2, 9, 7], &mut rng).map(|v| v * 1e3);
            let k = random(&[3, 2, 3, 3], &mut rng);
            let y = conv2d(&x, &k, stride, pad).unwrap();
            prop_assert!(y.all_finite());
            prop_assert!(sigmoid(&y).all_finite());
        }
    }
}
