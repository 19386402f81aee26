use rand::Rng;

use super::{check_grad_shape, he_bound, join, missing_cache, Layer, Param, ParamVisitor, ParamVisitorMut, Parameterized, Phase};
use crate::error::{Error, Result};
use crate::tensor::{matmul, FeatureMap, Real};

/// Stride-1 convolution with a square odd kernel and "same" zero padding
/// (`k / 2`), plus bias. Kernel sizes 1 and 3 are what the network uses.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    c_in: usize,
    c_out: usize,
    k: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<FeatureMap<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng>(c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        Conv2d {
            c_in,
            c_out,
            k,
            weight: Param::uniform(&[c_out, c_in, k, k], he_bound(c_in * k * k), rng),
            bias: Param::zeros(&[c_out]),
            cache: None,
        }
    }

    pub fn zeros(c_in: usize, c_out: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        Conv2d {
            c_in,
            c_out,
            k,
            weight: Param::zeros(&[c_out, c_in, k, k]),
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

    pub fn kernel(&self) -> usize {
        self.k
    }

    fn check_input(&self, x: &FeatureMap<T>) -> Result<()> {
        if x.channels() != self.c_in {
            return Err(Error::shape(format!(
                "conv{}x{} expects {} input channels, got {}",
                self.k,
                self.k,
                self.c_in,
                x.channels()
            )));
        }
        Ok(())
    }

    /// Unrolls one sample into a `(c_in·k·k) × (h·w)` patch matrix.
    fn im2col(&self, src: &[T], h: usize, w: usize, cols: &mut [T]) {
        let k = self.k;
        let pad = (k / 2) as isize;
        let plane = h * w;
        for ci in 0..self.c_in {
            let chan = &src[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * plane..][..plane];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        let out = &mut row[y * w..(y + 1) * w];
                        if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                            out.fill(T::zero());
                            continue;
                        }
                        out[..x_lo].fill(T::zero());
                        out[x_hi..].fill(T::zero());
                        let base = sy as usize * w;
                        let s0 = (x_lo as isize + dx) as usize;
                        out[x_lo..x_hi].copy_from_slice(&chan[base + s0..base + s0 + (x_hi - x_lo)]);
                    }
                }
            }
        }
    }

    /// Adjoint of [`Conv2d::im2col`], accumulating into `dst`.
    fn col2im(&self, cols: &[T], h: usize, w: usize, dst: &mut [T]) {
        let k = self.k;
        let pad = (k / 2) as isize;
        let plane = h * w;
        for ci in 0..self.c_in {
            let chan = &mut dst[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * plane..][..plane];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let base = sy as usize * w;
                        let s0 = (x_lo as isize + dx) as usize;
                        let target = &mut chan[base + s0..base + s0 + (x_hi - x_lo)];
                        for (t, v) in target.iter_mut().zip(&row[y * w + x_lo..y * w + x_hi]) {
                            *t += *v;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Parameterized<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<T: Real> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &FeatureMap<T>, phase: Phase) -> Result<FeatureMap<T>> {
        self.check_input(x)?;
        let [n, _, h, w] = x.shape();
        let plane = h * w;
        let kk = self.c_in * self.k * self.k;
        let mut out = FeatureMap::zeros(n, self.c_out, h, w);
        let mut cols = if self.k == 1 { Vec::new() } else { vec![T::zero(); kk * plane] };
        for b in 0..n {
            let src = x.sample(b);
            let patches: &[T] = if self.k == 1 {
                src
            } else {
                self.im2col(src, h, w, &mut cols);
                &cols
            };
            let dst = out.sample_mut(b);
            for (co, row) in dst.chunks_mut(plane).enumerate() {
                row.fill(self.bias.value[co]);
            }
            matmul(self.c_out, kk, plane, &self.weight.value, false, patches, false, dst, true);
        }
        self.cache = phase.caches().then(|| x.clone());
        Ok(out)
    }

    fn backward(&mut self, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let x = self.cache.take().ok_or_else(|| missing_cache("conv"))?;
        let [n, _, h, w] = x.shape();
        check_grad_shape("conv", [n, self.c_out, h, w], dy)?;
        let plane = h * w;
        let kk = self.c_in * self.k * self.k;
        let mut dx = FeatureMap::zeros(n, self.c_in, h, w);
        let mut cols = if self.k == 1 { Vec::new() } else { vec![T::zero(); kk * plane] };
        let mut dcols = vec![T::zero(); kk * plane];
        for b in 0..n {
            let g = dy.sample(b);
            for (co, row) in g.chunks(plane).enumerate() {
                self.bias.grad[co] += row.iter().copied().sum::<T>();
            }
            let patches: &[T] = if self.k == 1 {
                x.sample(b)
            } else {
                self.im2col(x.sample(b), h, w, &mut cols);
                &cols
            };
            matmul(self.c_out, plane, kk, g, false, patches, true, &mut self.weight.grad, true);
            if self.k == 1 {
                matmul(kk, self.c_out, plane, &self.weight.value, true, g, false, dx.sample_mut(b), false);
            } else {
                matmul(kk, self.c_out, plane, &self.weight.value, true, g, false, &mut dcols, false);
                self.col2im(&dcols, h, w, dx.sample_mut(b));
            }
        }
        self.cache = Some(x);
        Ok(dx)
    }
}
