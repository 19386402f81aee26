use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Layer, Phase};
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub phase: Phase,
    /// Check at most this many coordinates per tensor (input or parameter),
    /// sampled deterministically. `None` checks all of them.
    pub max_entries_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            phase: Phase::Train,
            max_entries_per_tensor: None,
            seed: 0x5eed,
        }
    }
}

fn pick(len: usize, limit: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            let mut v = sample(rng, len, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares analytic gradients against central finite differences.
///
/// The operation's output is reduced to a scalar through a fixed random
/// projection; the result is the maximum over checked input and trainable
/// parameter coordinates of `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check<L: Layer<f64> + ?Sized>(
    op: &mut L,
    x: &FeatureMap<f64>,
    epsilon: f64,
    opts: &GradCheckOptions,
) -> Result<f64> {
    if !(1e-6..=1e-2).contains(&epsilon) {
        return Err(Error::config(format!("epsilon {epsilon} outside [1e-6, 1e-2]")));
    }
    if !x.all_finite() {
        return Err(Error::Numeric("gradient check input is not finite".into()));
    }
    let phase = opts.phase;
    let y = op.forward(x, phase)?;
    let again = op.forward(x, phase)?;
    if y.as_slice().iter().zip(again.as_slice()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(Error::Unsupported("operation is not deterministic".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let [n, c, h, w] = y.shape();
    let proj = FeatureMap::from_fn(n, c, h, w, |_, _, _, _| rng.random_range(-1.0..1.0));

    op.zero_grad();
    op.forward(x, phase)?;
    let dx = op.backward(&proj)?;
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    op.visit("", &mut |_, p| {
        if p.trainable() {
            analytic.push(p.grad.clone());
        }
    });

    let scalar = |op: &mut L, input: &FeatureMap<f64>| -> Result<f64> {
        let out = op.forward(input, phase)?;
        Ok(out.as_slice().iter().zip(proj.as_slice()).map(|(a, b)| a * b).sum())
    };

    let mut worst = 0.0_f64;
    let mut probe = x.clone();
    for i in pick(x.len(), opts.max_entries_per_tensor, &mut rng) {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + epsilon;
        let up = scalar(op, &probe)?;
        probe.as_mut_slice()[i] = orig - epsilon;
        let down = scalar(op, &probe)?;
        probe.as_mut_slice()[i] = orig;
        worst = worst.max(rel_err(dx.as_slice()[i], (up - down) / (2.0 * epsilon)));
    }

    for (t, grads) in analytic.iter().enumerate() {
        for e in pick(grads.len(), opts.max_entries_per_tensor, &mut rng) {
            let nudge = |op: &mut L, delta: f64| {
                let mut k = 0;
                op.visit_mut("", &mut |_, p| {
                    if p.trainable() {
                        if k == t {
                            p.value[e] += delta;
                        }
                        k += 1;
                    }
                });
            };
            let orig = {
                let mut k = 0;
                let mut v = 0.0;
                op.visit("", &mut |_, p| {
                    if p.trainable() {
                        if k == t {
                            v = p.value[e];
                        }
                        k += 1;
                    }
                });
                v
            };
            nudge(op, epsilon);
            let up = scalar(op, x)?;
            nudge(op, -2.0 * epsilon);
            let down = scalar(op, x)?;
            // Restore exactly rather than by adding epsilon back.
            let mut k = 0;
            op.visit_mut("", &mut |_, p| {
                if p.trainable() {
                    if k == t {
                        p.value[e] = orig;
                    }
                    k += 1;
                }
            });
            worst = worst.max(rel_err(grads[e], (up - down) / (2.0 * epsilon)));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Conv2d, ParamVisitor, ParamVisitorMut, Parameterized};

    #[test]
    fn linear_projection_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut proj = Conv2d::<f64>::new(4, 3, 1, &mut rng);
        let x = FeatureMap::from_fn(2, 4, 3, 3, |_, _, _, _| rng.random_range(-1.0..1.0));
        let err = grad_check(&mut proj, &x, 1e-4, &GradCheckOptions::default()).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn epsilon_outside_range_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut proj = Conv2d::<f64>::new(1, 1, 1, &mut rng);
        let x = FeatureMap::zeros(1, 1, 2, 2);
        for eps in [1e-7, 0.1] {
            assert!(matches!(
                grad_check(&mut proj, &x, eps, &GradCheckOptions::default()),
                Err(Error::Config(_))
            ));
        }
    }

    struct Flaky {
        calls: usize,
    }

    impl Parameterized<f64> for Flaky {
        fn visit(&self, _: &str, _: &mut ParamVisitor<'_, f64>) {}
        fn visit_mut(&mut self, _: &str, _: &mut ParamVisitorMut<'_, f64>) {}
    }

    impl Layer<f64> for Flaky {
        fn forward(&mut self, x: &FeatureMap<f64>, _: Phase) -> Result<FeatureMap<f64>> {
            self.calls += 1;
            Ok(x.map(|v| v + self.calls as f64))
        }
        fn backward(&mut self, dy: &FeatureMap<f64>) -> Result<FeatureMap<f64>> {
            Ok(dy.clone())
        }
    }

    #[test]
    fn nondeterministic_op_is_unsupported() {
        let x = FeatureMap::zeros(1, 1, 2, 2);
        assert!(matches!(
            grad_check(&mut Flaky { calls: 0 }, &x, 1e-4, &GradCheckOptions::default()),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        struct Doubler;
        impl Parameterized<f64> for Doubler {
            fn visit(&self, _: &str, _: &mut ParamVisitor<'_, f64>) {}
            fn visit_mut(&mut self, _: &str, _: &mut ParamVisitorMut<'_, f64>) {}
        }
        impl Layer<f64> for Doubler {
            fn forward(&mut self, x: &FeatureMap<f64>, _: Phase) -> Result<FeatureMap<f64>> {
                Ok(x.map(|v| 2.0 * v))
            }
            fn backward(&mut self, dy: &FeatureMap<f64>) -> Result<FeatureMap<f64>> {
                Ok(dy.clone())
            }
        }
        let x = FeatureMap::filled(1, 1, 2, 2, 1.0);
        let err = grad_check(&mut Doubler, &x, 1e-4, &GradCheckOptions::default()).unwrap();
        assert!(err > 0.1);
    }
}
