//! AdamW with decoupled, multiplicative weight decay.

use crate::nn::Parameterized;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment buffers for one tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// One update of a single tensor at step `t` (1-based).
pub fn adamw_step<T: Real>(params: &mut [T], grads: &[T], state: &mut Moments<T>, t: u64, lr: f64, cfg: &AdamWConfig) {
    if state.m.len() != params.len() {
        state.m = vec![T::zero(); params.len()];
        state.v = vec![T::zero(); params.len()];
    }
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t as i32));
    let shrink = T::lit(1.0 - lr * cfg.weight_decay);
    let (lr, eps, one) = (T::lit(lr), T::lit(cfg.eps), T::one());
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        *p *= shrink;
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Optimizer state for every trainable tensor of a model, in visit order.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    step: u64,
    state: Vec<Moments<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            state: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<P: Parameterized<T> + ?Sized>(&mut self, model: &mut P, lr: f64) {
        self.step += 1;
        let t = self.step;
        let cfg = self.cfg;
        let mut i = 0;
        let state = &mut self.state;
        model.visit_mut("", &mut |_, p| {
            if !p.trainable() {
                return;
            }
            if state.len() <= i {
                state.push(Moments::default());
            }
            let grad = std::mem::take(&mut p.grad);
            adamw_step(&mut p.value, &grad, &mut state[i], t, lr, &cfg);
            p.grad = grad;
            i += 1;
        });
    }
}
