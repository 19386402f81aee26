use super::{check_grad_shape, missing_cache, Layer, ParamVisitor, ParamVisitorMut, Parameterized, Phase};
use crate::error::Result;
use crate::tensor::{FeatureMap, Real};

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<(Vec<bool>, [usize; 4])>,
}

impl<T: Real> Parameterized<T> for Relu {
    fn visit(&self, _prefix: &str, _f: &mut ParamVisitor<'_, T>) {}
    fn visit_mut(&mut self, _prefix: &str, _f: &mut ParamVisitorMut<'_, T>) {}
}

impl<T: Real> Layer<T> for Relu {
    fn forward(&mut self, x: &FeatureMap<T>, phase: Phase) -> Result<FeatureMap<T>> {
        // NaN passes through so divergence stays visible downstream.
        let y = x.map(|v| if v < T::zero() { T::zero() } else { v });
        self.mask = phase
            .caches()
            .then(|| (x.as_slice().iter().map(|&v| v > T::zero()).collect(), x.shape()));
        Ok(y)
    }

    fn backward(&mut self, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let (mask, shape) = self.mask.as_ref().ok_or_else(|| missing_cache("relu"))?;
        check_grad_shape("relu", *shape, dy)?;
        let mut dx = dy.clone();
        for (g, &on) in dx.as_mut_slice().iter_mut().zip(mask) {
            if !on {
                *g = T::zero();
            }
        }
        Ok(dx)
    }
}

/// Softmax over the channel axis at every spatial position.
pub fn softmax_channels<T: Real>(logits: &FeatureMap<T>) -> FeatureMap<T> {
    let [n, c, h, w] = logits.shape();
    let plane = h * w;
    let mut out = logits.clone();
    for b in 0..n {
        let s = out.sample_mut(b);
        for p in 0..plane {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(s[ch * plane + p]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (s[ch * plane + p] - m).exp();
                s[ch * plane + p] = e;
                z += e;
            }
            for ch in 0..c {
                s[ch * plane + p] = s[ch * plane + p] / z;
            }
        }
    }
    out
}
