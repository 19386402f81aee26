use super::{check_grad_shape, missing_cache, Layer, ParamVisitor, ParamVisitorMut, Parameterized, Phase};
use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Real};

/// 2×2 max pooling with stride 2. Ties go to the first cell in scan order.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2 {
    cache: Option<(Vec<usize>, [usize; 4])>,
}

impl<T: Real> Parameterized<T> for MaxPool2 {
    fn visit(&self, _prefix: &str, _f: &mut ParamVisitor<'_, T>) {}
    fn visit_mut(&mut self, _prefix: &str, _f: &mut ParamVisitorMut<'_, T>) {}
}

impl<T: Real> Layer<T> for MaxPool2 {
    fn forward(&mut self, x: &FeatureMap<T>, phase: Phase) -> Result<FeatureMap<T>> {
        let [n, c, h, w] = x.shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("max pooling needs even sizes, got {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = FeatureMap::zeros(n, c, ho, wo);
        let mut argmax = Vec::with_capacity(out.len());
        let src = x.as_slice();
        let mut o = 0;
        for b in 0..n {
            for ch in 0..c {
                for y in 0..ho {
                    for xx in 0..wo {
                        let i0 = x.index(b, ch, 2 * y, 2 * xx);
                        let mut best = i0;
                        for i in [i0 + 1, i0 + w, i0 + w + 1] {
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                        out.as_mut_slice()[o] = src[best];
                        argmax.push(best);
                        o += 1;
                    }
                }
            }
        }
        self.cache = phase.caches().then_some((argmax, x.shape()));
        Ok(out)
    }

    fn backward(&mut self, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let (argmax, [n, c, h, w]) = self.cache.as_ref().ok_or_else(|| missing_cache("maxpool"))?;
        check_grad_shape("maxpool", [*n, *c, h / 2, w / 2], dy)?;
        let mut dx = FeatureMap::zeros(*n, *c, *h, *w);
        for (&i, &g) in argmax.iter().zip(dy.as_slice()) {
            dx.as_mut_slice()[i] += g;
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn halves_spatial_size() {
        let x = FeatureMap::<f32>::zeros(1, 2, 288, 288);
        let y = MaxPool2::default().forward(&x, Phase::Infer).unwrap();
        assert_eq!(y.shape(), [1, 2, 144, 144]);
    }

    #[test]
    fn constant_input_stays_constant() {
        let x = FeatureMap::<f32>::filled(1, 1, 4, 6, 2.5);
        let y = MaxPool2::default().forward(&x, Phase::Infer).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn odd_size_is_rejected() {
        let x = FeatureMap::<f32>::zeros(1, 1, 5, 4);
        assert!(matches!(MaxPool2::default().forward(&x, Phase::Infer), Err(Error::Shape(_))));
    }

    #[test]
    fn matches_window_scan_and_dominates_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = FeatureMap::<f64>::from_fn(2, 3, 4, 4, |_, _, _, _| rng.random_range(-1.0..1.0));
        let y = MaxPool2::default().forward(&x, Phase::Infer).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                for i in 0..2 {
                    for j in 0..2 {
                        let cells = [
                            x.at(b, c, 2 * i, 2 * j),
                            x.at(b, c, 2 * i, 2 * j + 1),
                            x.at(b, c, 2 * i + 1, 2 * j),
                            x.at(b, c, 2 * i + 1, 2 * j + 1),
                        ];
                        let m = cells.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        assert_eq!(y.at(b, c, i, j), m);
                        assert!(m >= cells.iter().sum::<f64>() / 4.0);
                    }
                }
            }
        }
    }

    #[test]
    fn gradient_routes_to_argmax() {
        let x = FeatureMap::<f64>::from_vec(1, 1, 2, 2, vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        let mut pool = MaxPool2::default();
        pool.forward(&x, Phase::Train).unwrap();
        let dx = pool.backward(&FeatureMap::filled(1, 1, 1, 1, 2.0)).unwrap();
        assert_eq!(dx.as_slice(), &[0.0, 2.0, 0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = FeatureMap::<f64>::from_fn(1, 2, 4, 6, |_, _, _, _| rng.random_range(-1.0..1.0));
        let err = grad_check(&mut pool, &x, 1e-6, &GradCheckOptions::default()).unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
