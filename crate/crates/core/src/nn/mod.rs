//! Differentiable building blocks with explicit forward/backward passes.
//!
//! Every layer caches what its backward pass needs during a caching forward
//! ([`Phase::Train`] or [`Phase::Eval`]); [`Phase::Infer`] skips the cache.
//! A layer instance therefore serves exactly one call site per forward pass.

mod activation;
mod batchnorm;
mod conv;
mod gradcheck;
mod pool;
mod upconv;

pub use activation::{softmax_channels, Relu};
pub use batchnorm::BatchNorm2d;
pub use conv::Conv2d;
pub use gradcheck::{grad_check, GradCheckOptions};
pub use pool::MaxPool2;
pub use upconv::UpConv2;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics, caches kept for backward.
    Train,
    /// Running statistics, caches kept for backward.
    Eval,
    /// Running statistics, nothing cached.
    Infer,
}

impl Phase {
    pub fn caches(self) -> bool {
        !matches!(self, Phase::Infer)
    }
}

/// A parameter tensor with its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Param {
            shape: shape.to_vec(),
            value: vec![T::zero(); n],
            grad: vec![T::zero(); n],
            trainable: true,
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let mut p = Self::zeros(shape);
        p.value.fill(v);
        p
    }

    /// A buffer carried with the parameters (checkpointed) but never optimized.
    pub fn buffer(shape: &[usize], v: T) -> Self {
        let mut p = Self::filled(shape, v);
        p.trainable = false;
        p
    }

    /// Uniform on `[-bound, bound]`.
    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        for v in p.value.iter_mut() {
            *v = T::lit(dist.sample(rng));
        }
        p
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        Param {
            shape: self.shape.clone(),
            value: self.value.iter().map(|v| U::lit(v.as_f64())).collect(),
            grad: self.grad.iter().map(|v| U::lit(v.as_f64())).collect(),
            trainable: self.trainable,
        }
    }
}

/// Joins a parameter path segment onto a prefix with a dot.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub type ParamVisitor<'a, T> = dyn FnMut(&str, &Param<T>) + 'a;
pub type ParamVisitorMut<'a, T> = dyn FnMut(&str, &mut Param<T>) + 'a;

/// Anything owning parameters, enumerated in declaration order.
pub trait Parameterized<T: Real> {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>);
    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>);

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable() {
                n += p.len();
            }
        });
        n
    }
}

/// A single-input, single-output differentiable operation.
pub trait Layer<T: Real>: Parameterized<T> {
    fn forward(&mut self, x: &FeatureMap<T>, phase: Phase) -> Result<FeatureMap<T>>;

    /// Given the loss gradient w.r.t. the last cached output, accumulates
    /// parameter gradients and returns the gradient w.r.t. the input.
    fn backward(&mut self, dy: &FeatureMap<T>) -> Result<FeatureMap<T>>;
}

pub(crate) fn missing_cache(layer: &str) -> Error {
    Error::Unsupported(format!("{layer}: backward called without a cached forward pass"))
}

pub(crate) fn check_grad_shape<T: Real>(layer: &str, expect: [usize; 4], dy: &FeatureMap<T>) -> Result<()> {
    if dy.shape() != expect {
        return Err(Error::shape(format!(
            "{layer}: upstream gradient {:?} does not match output {:?}",
            dy.shape(),
            expect
        )));
    }
    Ok(())
}

/// Conv → batch norm → ReLU, twice.
#[derive(Clone, Debug)]
pub struct ConvBlock<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    relu1: Relu,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    relu2: Relu,
}

impl<T: Real> ConvBlock<T> {
    pub fn new<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        ConvBlock {
            conv1: Conv2d::new(c_in, c_out, 3, rng),
            bn1: BatchNorm2d::new(c_out),
            relu1: Relu::default(),
            conv2: Conv2d::new(c_out, c_out, 3, rng),
            bn2: BatchNorm2d::new(c_out),
            relu2: Relu::default(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }
}

impl<T: Real> Parameterized<T> for ConvBlock<T> {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
    }
}

impl<T: Real> Layer<T> for ConvBlock<T> {
    fn forward(&mut self, x: &FeatureMap<T>, phase: Phase) -> Result<FeatureMap<T>> {
        let y = self.conv1.forward(x, phase)?;
        let y = self.bn1.forward(&y, phase)?;
        let y = self.relu1.forward(&y, phase)?;
        let y = self.conv2.forward(&y, phase)?;
        let y = self.bn2.forward(&y, phase)?;
        self.relu2.forward(&y, phase)
    }

    fn backward(&mut self, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let d = self.relu2.backward(dy)?;
        let d = self.bn2.backward(&d)?;
        let d = self.conv2.backward(&d)?;
        let d = self.relu1.backward(&d)?;
        let d = self.bn1.backward(&d)?;
        self.conv1.backward(&d)
    }
}

/// He-uniform bound for a ReLU layer with the given fan-in.
pub(crate) fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}
