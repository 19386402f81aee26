use rand::Rng;

use super::{check_grad_shape, he_bound, join, missing_cache, Layer, Param, ParamVisitor, ParamVisitorMut, Parameterized, Phase};
use crate::error::{Error, Result};
use crate::tensor::{matmul, FeatureMap, Real};

/// 2×2 transposed convolution with stride 2: doubles height and width.
/// Weight layout is `[c_in, c_out, 2, 2]`.
#[derive(Clone, Debug)]
pub struct UpConv2<T> {
    c_in: usize,
    c_out: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<FeatureMap<T>>,
}

impl<T: Real> UpConv2<T> {
    pub fn new<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        UpConv2 {
            c_in,
            c_out,
            weight: Param::uniform(&[c_in, c_out, 2, 2], he_bound(c_in), rng),
            bias: Param::zeros(&[c_out]),
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.c_in
    }

    pub fn out_channels(&self) -> usize {
        self.c_out
    }
}

impl<T: Real> Parameterized<T> for UpConv2<T> {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<T: Real> Layer<T> for UpConv2<T> {
    fn forward(&mut self, x: &FeatureMap<T>, phase: Phase) -> Result<FeatureMap<T>> {
        let [n, c, h, w] = x.shape();
        if c != self.c_in {
            return Err(Error::shape(format!(
                "upconv expects {} input channels, got {c}",
                self.c_in
            )));
        }
        let plane = h * w;
        let taps = self.c_out * 4;
        let mut tmp = vec![T::zero(); taps * plane];
        let mut out = FeatureMap::zeros(n, self.c_out, 2 * h, 2 * w);
        for b in 0..n {
            matmul(taps, self.c_in, plane, &self.weight.value, true, x.sample(b), false, &mut tmp, false);
            let dst = out.sample_mut(b);
            for co in 0..self.c_out {
                let bias = self.bias.value[co];
                for a in 0..2 {
                    for e in 0..2 {
                        let row = &tmp[(co * 4 + a * 2 + e) * plane..][..plane];
                        for i in 0..h {
                            let base = (co * 2 * h + 2 * i + a) * 2 * w + e;
                            for j in 0..w {
                                dst[base + 2 * j] = row[i * w + j] + bias;
                            }
                        }
                    }
                }
            }
        }
        self.cache = phase.caches().then(|| x.clone());
        Ok(out)
    }

    fn backward(&mut self, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let x = self.cache.as_ref().ok_or_else(|| missing_cache("upconv"))?;
        let [n, _, h, w] = x.shape();
        check_grad_shape("upconv", [n, self.c_out, 2 * h, 2 * w], dy)?;
        let plane = h * w;
        let taps = self.c_out * 4;
        let mut tmp = vec![T::zero(); taps * plane];
        let mut dx = FeatureMap::zeros(n, self.c_in, h, w);
        for b in 0..n {
            let g = dy.sample(b);
            for co in 0..self.c_out {
                let mut bsum = T::zero();
                for a in 0..2 {
                    for e in 0..2 {
                        let row = &mut tmp[(co * 4 + a * 2 + e) * plane..][..plane];
                        for i in 0..h {
                            let base = (co * 2 * h + 2 * i + a) * 2 * w + e;
                            for j in 0..w {
                                let v = g[base + 2 * j];
                                row[i * w + j] = v;
                                bsum += v;
                            }
                        }
                    }
                }
                self.bias.grad[co] += bsum;
            }
            matmul(self.c_in, plane, taps, x.sample(b), false, &tmp, true, &mut self.weight.grad, true);
            matmul(self.c_in, taps, plane, &self.weight.value, false, &tmp, false, dx.sample_mut(b), false);
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn doubles_spatial_size_with_stage_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut up = UpConv2::<f32>::new(320, 256, &mut rng);
        let x = FeatureMap::zeros(1, 320, 18, 18);
        assert_eq!(up.forward(&x, Phase::Infer).unwrap().shape(), [1, 256, 36, 36]);
        assert!(matches!(
            up.forward(&FeatureMap::zeros(1, 3, 2, 2), Phase::Infer),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn all_ones_kernel_is_nearest_upsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut up = UpConv2::<f64>::new(1, 1, &mut rng);
        up.weight.value.fill(1.0);
        let x = FeatureMap::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = up.forward(&x, Phase::Infer).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(y.at(0, 0, i, j), x.at(0, 0, i / 2, j / 2));
            }
        }
    }

    #[test]
    fn equals_transpose_of_strided_conv_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut up = UpConv2::<f64>::new(1, 1, &mut rng);
        let k = up.weight.value.clone();
        // Explicit matrix of the stride-2 2×2 convolution mapping 6×6 → 3×3.
        let mut a = vec![0.0; 9 * 36];
        for i in 0..3 {
            for j in 0..3 {
                for p in 0..2 {
                    for q in 0..2 {
                        a[(i * 3 + j) * 36 + (2 * i + p) * 6 + 2 * j + q] = k[p * 2 + q];
                    }
                }
            }
        }
        let x = FeatureMap::<f64>::from_fn(1, 1, 3, 3, |_, _, i, j| ((i * 3 + j) as f64 * 0.7).sin());
        let y = up.forward(&x, Phase::Infer).unwrap();
        for r in 0..36 {
            let expect: f64 = (0..9).map(|s| a[s * 36 + r] * x.as_slice()[s]).sum();
            assert!((y.as_slice()[r] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let mut up = UpConv2::<f64>::new(3, 2, &mut rng);
        let x = FeatureMap::<f64>::from_fn(2, 3, 2, 3, |_, _, _, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let err = grad_check(&mut up, &x, 1e-5, &GradCheckOptions::default()).unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
