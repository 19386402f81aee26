use super::{check_grad_shape, join, missing_cache, Layer, Param, ParamVisitor, ParamVisitorMut, Parameterized, Phase};
use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Real};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
struct BnCache<T> {
    xhat: FeatureMap<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

/// Per-channel batch normalization with learned scale/shift and running
/// statistics (momentum 0.1, unbiased running variance).
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::filled(&[channels], T::one()),
            beta: Param::zeros(&[channels]),
            running_mean: Param::buffer(&[channels], T::zero()),
            running_var: Param::buffer(&[channels], T::one()),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

impl<T: Real> Parameterized<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

impl<T: Real> Layer<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: &FeatureMap<T>, phase: Phase) -> Result<FeatureMap<T>> {
        let [n, c, h, w] = x.shape();
        if c != self.channels() {
            return Err(Error::shape(format!(
                "batch norm over {} channels got {c}",
                self.channels()
            )));
        }
        let plane = h * w;
        let count = n * plane;
        let eps = T::lit(BN_EPS);
        let batch_stats = phase == Phase::Train;
        if batch_stats && count < 2 {
            return Err(Error::Degenerate(format!(
                "batch norm in training needs at least 2 values per channel, got {count}"
            )));
        }

        let mut mean = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        if batch_stats {
            let m = T::lit(BN_MOMENTUM);
            let cnt = T::lit(count as f64);
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s += x.sample(b)[ch * plane..(ch + 1) * plane].iter().copied().sum::<T>();
                }
                let mu = s / cnt;
                let mut ss = T::zero();
                for b in 0..n {
                    for &v in &x.sample(b)[ch * plane..(ch + 1) * plane] {
                        let d = v - mu;
                        ss += d * d;
                    }
                }
                let var = ss / cnt;
                mean[ch] = mu;
                inv_std[ch] = T::one() / (var + eps).sqrt();
                let unbiased = ss / T::lit((count - 1) as f64);
                let rm = &mut self.running_mean.value[ch];
                *rm = (T::one() - m) * *rm + m * mu;
                let rv = &mut self.running_var.value[ch];
                *rv = (T::one() - m) * *rv + m * unbiased;
            }
        } else {
            for ch in 0..c {
                mean[ch] = self.running_mean.value[ch];
                inv_std[ch] = T::one() / (self.running_var.value[ch] + eps).sqrt();
            }
        }

        let mut xhat = x.clone();
        let mut y = x.clone();
        for b in 0..n {
            let xs = xhat.sample_mut(b);
            let ys = y.sample_mut(b);
            for ch in 0..c {
                let (g, be) = (self.gamma.value[ch], self.beta.value[ch]);
                for p in ch * plane..(ch + 1) * plane {
                    let v = (xs[p] - mean[ch]) * inv_std[ch];
                    xs[p] = v;
                    ys[p] = g * v + be;
                }
            }
        }
        self.cache = phase.caches().then_some(BnCache {
            xhat,
            inv_std,
            batch_stats,
        });
        Ok(y)
    }

    fn backward(&mut self, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache("batchnorm"))?;
        let xhat = &cache.xhat;
        check_grad_shape("batchnorm", xhat.shape(), dy)?;
        let [n, c, h, w] = xhat.shape();
        let plane = h * w;
        let count = T::lit((n * plane) as f64);
        let mut dx = FeatureMap::zeros(n, c, h, w);
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for b in 0..n {
                let g = &dy.sample(b)[ch * plane..(ch + 1) * plane];
                let xh = &xhat.sample(b)[ch * plane..(ch + 1) * plane];
                for (&gv, &xv) in g.iter().zip(xh) {
                    sum_dy += gv;
                    sum_dy_xhat += gv * xv;
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat;
            self.beta.grad[ch] += sum_dy;
            let gamma = self.gamma.value[ch];
            let inv = cache.inv_std[ch];
            for b in 0..n {
                let g = &dy.sample(b)[ch * plane..(ch + 1) * plane];
                let xh = &xhat.sample(b)[ch * plane..(ch + 1) * plane];
                let out = &mut dx.sample_mut(b)[ch * plane..(ch + 1) * plane];
                if cache.batch_stats {
                    let k = gamma * inv / count;
                    for ((o, &gv), &xv) in out.iter_mut().zip(g).zip(xh) {
                        *o = k * (count * gv - sum_dy - xv * sum_dy_xhat);
                    }
                } else {
                    for (o, &gv) in out.iter_mut().zip(g) {
                        *o = gamma * inv * gv;
                    }
                }
            }
        }
        Ok(dx)
    }
}
