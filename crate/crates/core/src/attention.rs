//! Scaled dot-product self-attention over spatial tokens, and the hooking
//! operator that fuses a center-cropped context feature into the target
//! branch before attending.
//!
//! Tokens are spatial positions and the channel vector is the embedding.
//! Queries, keys and values come from learned 1×1 projections of the same
//! input volume; the attended values are projected back to the input width
//! and added residually, so a zero output projection makes the block an
//! identity.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{check_grad_shape, join, missing_cache, Param, ParamVisitor, ParamVisitorMut, Parameterized, Phase};
use crate::tensor::{matmul, FeatureMap, Real};

/// Default token budget: maps above 48×48 positions are pooled first.
pub const DEFAULT_TOKEN_CAP: usize = 48 * 48;

/// Key/query width for a concatenated input of `channels` channels.
pub fn key_dim(channels: usize) -> usize {
    channels.div_ceil(8).max(1)
}

/// Crops the central `(H/2)×(W/2)` window at offset `(⌊H/4⌋, ⌊W/4⌋)`.
pub fn center_crop_half<T: Real>(x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let (h, w) = (x.height(), x.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("center crop needs even sizes, got {h}x{w}")));
    }
    x.crop(h / 4, w / 4, h / 2, w / 2)
}

fn center_crop_half_adjoint<T: Real>(g: &FeatureMap<T>, h: usize, w: usize) -> Result<FeatureMap<T>> {
    g.uncrop(h / 4, w / 4, h, w)
}

/// Smallest integer pooling factor that brings `h×w` within `cap` tokens.
fn pool_factor(h: usize, w: usize, cap: Option<usize>) -> usize {
    match cap {
        Some(cap) if h * w > cap => (2..).find(|f| h.div_ceil(*f) * w.div_ceil(*f) <= cap.max(1)).unwrap(),
        _ => 1,
    }
}

/// Mean over `f×f` windows; edge windows average only their valid cells.
fn avg_pool<T: Real>(x: &FeatureMap<T>, f: usize) -> FeatureMap<T> {
    let [n, c, h, w] = x.shape();
    let (hp, wp) = (h.div_ceil(f), w.div_ceil(f));
    FeatureMap::from_fn(n, c, hp, wp, |b, ch, i, j| {
        let (y0, y1) = (i * f, ((i + 1) * f).min(h));
        let (x0, x1) = (j * f, ((j + 1) * f).min(w));
        let mut s = T::zero();
        for y in y0..y1 {
            for xx in x0..x1 {
                s += x.at(b, ch, y, xx);
            }
        }
        s / T::lit(((y1 - y0) * (x1 - x0)) as f64)
    })
}

fn avg_pool_adjoint<T: Real>(g: &FeatureMap<T>, f: usize, h: usize, w: usize) -> FeatureMap<T> {
    let [n, c, _, _] = g.shape();
    FeatureMap::from_fn(n, c, h, w, |b, ch, y, xx| {
        let (i, j) = (y / f, xx / f);
        let rows = ((i + 1) * f).min(h) - i * f;
        let cols = ((j + 1) * f).min(w) - j * f;
        g.at(b, ch, i, j) / T::lit((rows * cols) as f64)
    })
}

/// Half-pixel linear interpolation taps `(lo, hi, frac)` for each output index.
fn linear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn bilinear_resize<T: Real>(x: &FeatureMap<T>, h: usize, w: usize) -> FeatureMap<T> {
    let [n, c, hi, wi] = x.shape();
    let ty = linear_taps(h, hi);
    let tx = linear_taps(w, wi);
    FeatureMap::from_fn(n, c, h, w, |b, ch, y, xx| {
        let (y0, y1, fy) = ty[y];
        let (x0, x1, fx) = tx[xx];
        let (fy, fx) = (T::lit(fy), T::lit(fx));
        let one = T::one();
        (one - fy) * ((one - fx) * x.at(b, ch, y0, x0) + fx * x.at(b, ch, y0, x1))
            + fy * ((one - fx) * x.at(b, ch, y1, x0) + fx * x.at(b, ch, y1, x1))
    })
}

fn bilinear_resize_adjoint<T: Real>(g: &FeatureMap<T>, hi: usize, wi: usize) -> FeatureMap<T> {
    let [n, c, h, w] = g.shape();
    let ty = linear_taps(h, hi);
    let tx = linear_taps(w, wi);
    let mut out = FeatureMap::zeros(n, c, hi, wi);
    let one = T::one();
    for b in 0..n {
        for ch in 0..c {
            for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v = g.at(b, ch, y, xx);
                    let (fy, fx) = (T::lit(fy), T::lit(fx));
                    for (yy, wy) in [(y0, one - fy), (y1, fy)] {
                        for (xs, wx) in [(x0, one - fx), (x1, fx)] {
                            let i = out.index(b, ch, yy, xs);
                            out.as_mut_slice()[i] += wy * wx * v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Softmax-normalized attention weights of one sample, row-major `tokens × tokens`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub grid: (usize, usize),
    pub weights: Vec<f32>,
}

impl AttentionMap {
    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Writes `<stem>.raw` (little-endian f32, row-major) and a plain-text
    /// `<stem>.hdr` with depth and shape.
    pub fn write_dump(&self, dir: &Path, stem: &str, depth: usize) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let hdr = dir.join(format!("{stem}.hdr"));
        let t = self.tokens();
        let text = format!(
            "depth={depth}\nrows={t}\ncols={t}\ngrid={}x{}\ndtype=f32le\n",
            self.grid.0, self.grid.1
        );
        fs::write(&hdr, text).map_err(|e| Error::io(&hdr, e))?;
        let raw = dir.join(format!("{stem}.raw"));
        let mut f = fs::File::create(&raw).map_err(|e| Error::io(&raw, e))?;
        let mut bytes = Vec::with_capacity(self.weights.len() * 4);
        for v in &self.weights {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes).map_err(|e| Error::io(&raw, e))
    }
}

#[derive(Clone, Debug)]
struct SampleCache<T> {
    x: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    attn: Vec<T>,
    o: Vec<T>,
}

#[derive(Clone, Debug)]
struct AttentionCache<T> {
    shape: [usize; 4],
    factor: usize,
    pooled: (usize, usize),
    samples: Vec<SampleCache<T>>,
}

/// Single-head self-attention block with residual output.
#[derive(Clone, Debug)]
pub struct SelfAttention<T> {
    channels: usize,
    d_k: usize,
    d_v: usize,
    pub token_cap: Option<usize>,
    pub q_proj: Param<T>,
    pub q_bias: Param<T>,
    pub k_proj: Param<T>,
    pub k_bias: Param<T>,
    pub v_proj: Param<T>,
    pub v_bias: Param<T>,
    pub out_proj: Param<T>,
    pub out_bias: Param<T>,
    /// When set, the next forward keeps each sample's attention weights.
    pub record_weights: bool,
    recorded: Vec<AttentionMap>,
    cache: Option<AttentionCache<T>>,
}

impl<T: Real> SelfAttention<T> {
    pub fn new<R: Rng>(channels: usize, token_cap: Option<usize>, rng: &mut R) -> Self {
        let d_k = key_dim(channels);
        let d_v = d_k;
        let b_in = (1.0 / channels as f64).sqrt();
        let b_out = (1.0 / d_v as f64).sqrt();
        SelfAttention {
            channels,
            d_k,
            d_v,
            token_cap,
            q_proj: Param::uniform(&[d_k, channels], b_in, rng),
            q_bias: Param::zeros(&[d_k]),
            k_proj: Param::uniform(&[d_k, channels], b_in, rng),
            k_bias: Param::zeros(&[d_k]),
            v_proj: Param::uniform(&[d_v, channels], b_in, rng),
            v_bias: Param::zeros(&[d_v]),
            out_proj: Param::uniform(&[channels, d_v], b_out, rng),
            out_bias: Param::zeros(&[channels]),
            record_weights: false,
            recorded: Vec::new(),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn key_dim(&self) -> usize {
        self.d_k
    }

    pub fn value_dim(&self) -> usize {
        self.d_v
    }

    /// Zeroes the output projection, turning the block into an identity.
    pub fn set_identity(&mut self) {
        self.out_proj.value.fill(T::zero());
        self.out_bias.value.fill(T::zero());
    }

    /// Attention weights recorded by the last forward with `record_weights`.
    pub fn recorded_weights(&self) -> &[AttentionMap] {
        &self.recorded
    }

    fn project(w: &Param<T>, bias: &Param<T>, rows: usize, cols_in: usize, x: &[T], tokens: usize) -> Vec<T> {
        let mut out = vec![T::zero(); rows * tokens];
        for (r, row) in out.chunks_mut(tokens).enumerate() {
            row.fill(bias.value[r]);
        }
        matmul(rows, cols_in, tokens, &w.value, false, x, false, &mut out, true);
        out
    }

    pub fn forward(&mut self, m: &FeatureMap<T>, phase: Phase) -> Result<FeatureMap<T>> {
        let [n, c, h, w] = m.shape();
        if c != self.channels {
            return Err(Error::shape(format!(
                "attention over {} channels got {c}",
                self.channels
            )));
        }
        if !m.all_finite() {
            return Err(Error::Numeric("attention input contains non-finite values".into()));
        }
        let factor = pool_factor(h, w, self.token_cap);
        let pooled = if factor > 1 { avg_pool(m, factor) } else { m.clone() };
        let (hp, wp) = (pooled.height(), pooled.width());
        let t = hp * wp;
        let scale = T::one() / T::lit(self.d_k as f64).sqrt();

        let mut delta = FeatureMap::zeros(n, c, hp, wp);
        let mut samples = Vec::with_capacity(if phase.caches() { n } else { 0 });
        self.recorded.clear();
        for b in 0..n {
            let x = pooled.sample(b);
            let q = Self::project(&self.q_proj, &self.q_bias, self.d_k, c, x, t);
            let k = Self::project(&self.k_proj, &self.k_bias, self.d_k, c, x, t);
            let v = Self::project(&self.v_proj, &self.v_bias, self.d_v, c, x, t);
            let mut attn = vec![T::zero(); t * t];
            matmul(t, self.d_k, t, &q, true, &k, false, &mut attn, false);
            for row in attn.chunks_mut(t) {
                let mut mx = T::neg_infinity();
                for s in row.iter_mut() {
                    *s *= scale;
                    mx = mx.max(*s);
                }
                let mut z = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                for s in row.iter_mut() {
                    *s = *s / z;
                }
            }
            let mut o = vec![T::zero(); self.d_v * t];
            matmul(self.d_v, t, t, &v, false, &attn, true, &mut o, false);
            let out = delta.sample_mut(b);
            for (ch, row) in out.chunks_mut(t).enumerate() {
                row.fill(self.out_bias.value[ch]);
            }
            matmul(c, self.d_v, t, &self.out_proj.value, false, &o, false, out, true);
            if self.record_weights {
                self.recorded.push(AttentionMap {
                    grid: (hp, wp),
                    weights: attn.iter().map(|v| v.as_f64() as f32).collect(),
                });
            }
            if phase.caches() {
                samples.push(SampleCache {
                    x: x.to_vec(),
                    q,
                    k,
                    v,
                    attn,
                    o,
                });
            }
        }
        let delta = if factor > 1 { bilinear_resize(&delta, h, w) } else { delta };
        let mut y = m.clone();
        y.add_assign(&delta)?;
        self.cache = phase.caches().then_some(AttentionCache {
            shape: [n, c, h, w],
            factor,
            pooled: (hp, wp),
            samples,
        });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache("attention"))?;
        check_grad_shape("attention", cache.shape, dy)?;
        let [n, c, h, w] = cache.shape;
        let (hp, wp) = cache.pooled;
        let t = hp * wp;
        let (dk, dv) = (self.d_k, self.d_v);
        let scale = T::one() / T::lit(dk as f64).sqrt();
        let d_delta = if cache.factor > 1 {
            bilinear_resize_adjoint(dy, hp, wp)
        } else {
            dy.clone()
        };
        let mut dx_pooled = FeatureMap::zeros(n, c, hp, wp);
        for (b, sc) in cache.samples.iter().enumerate() {
            let g = d_delta.sample(b);
            for (ch, row) in g.chunks(t).enumerate() {
                self.out_bias.grad[ch] += row.iter().copied().sum::<T>();
            }
            matmul(c, t, dv, g, false, &sc.o, true, &mut self.out_proj.grad, true);
            let mut d_o = vec![T::zero(); dv * t];
            matmul(dv, c, t, &self.out_proj.value, true, g, false, &mut d_o, false);

            let mut d_v = vec![T::zero(); dv * t];
            matmul(dv, t, t, &d_o, false, &sc.attn, false, &mut d_v, false);
            let mut d_attn = vec![T::zero(); t * t];
            matmul(t, dv, t, &d_o, true, &sc.v, false, &mut d_attn, false);
            // Softmax backward, folded with the 1/sqrt(d_k) scale.
            for (drow, arow) in d_attn.chunks_mut(t).zip(sc.attn.chunks(t)) {
                let dot: T = drow.iter().zip(arow).map(|(&d, &a)| d * a).sum();
                for (d, &a) in drow.iter_mut().zip(arow) {
                    *d = a * (*d - dot) * scale;
                }
            }
            let mut d_q = vec![T::zero(); dk * t];
            matmul(dk, t, t, &sc.k, false, &d_attn, true, &mut d_q, false);
            let mut d_k = vec![T::zero(); dk * t];
            matmul(dk, t, t, &sc.q, false, &d_attn, false, &mut d_k, false);

            let dx = dx_pooled.sample_mut(b);
            for (proj, bias, grad, rows) in [
                (&mut self.q_proj, &mut self.q_bias, &d_q, dk),
                (&mut self.k_proj, &mut self.k_bias, &d_k, dk),
                (&mut self.v_proj, &mut self.v_bias, &d_v, dv),
            ] {
                for (r, row) in grad.chunks(t).enumerate() {
                    bias.grad[r] += row.iter().copied().sum::<T>();
                }
                matmul(rows, t, c, grad, false, &sc.x, true, &mut proj.grad, true);
                matmul(c, rows, t, &proj.value, true, grad, false, dx, true);
            }
        }
        let mut dm = dy.clone();
        if cache.factor > 1 {
            dm.add_assign(&avg_pool_adjoint(&dx_pooled, cache.factor, h, w))?;
        } else {
            dm.add_assign(&dx_pooled)?;
        }
        Ok(dm)
    }
}

impl<T: Real> Parameterized<T> for SelfAttention<T> {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "q_proj"), &self.q_proj);
        f(&join(prefix, "q_bias"), &self.q_bias);
        f(&join(prefix, "k_proj"), &self.k_proj);
        f(&join(prefix, "k_bias"), &self.k_bias);
        f(&join(prefix, "v_proj"), &self.v_proj);
        f(&join(prefix, "v_bias"), &self.v_bias);
        f(&join(prefix, "out_proj"), &self.out_proj);
        f(&join(prefix, "out_bias"), &self.out_bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        f(&join(prefix, "q_proj"), &mut self.q_proj);
        f(&join(prefix, "q_bias"), &mut self.q_bias);
        f(&join(prefix, "k_proj"), &mut self.k_proj);
        f(&join(prefix, "k_bias"), &mut self.k_bias);
        f(&join(prefix, "v_proj"), &mut self.v_proj);
        f(&join(prefix, "v_bias"), &mut self.v_bias);
        f(&join(prefix, "out_proj"), &mut self.out_proj);
        f(&join(prefix, "out_bias"), &mut self.out_bias);
    }
}

/// Paired features entering one hooking junction.
#[derive(Clone, Debug)]
pub struct HookingStage<'a, T> {
    pub depth: usize,
    pub target: &'a FeatureMap<T>,
    pub context: &'a FeatureMap<T>,
}

impl<'a, T: Real> HookingStage<'a, T> {
    pub fn new(depth: usize, target: &'a FeatureMap<T>, context: &'a FeatureMap<T>) -> Result<Self> {
        if !(1..=3).contains(&depth) {
            return Err(Error::config(format!("hooking depth {depth} outside 1..=3")));
        }
        if context.height() != 2 * target.height() || context.width() != 2 * target.width() {
            return Err(Error::Alignment(format!(
                "context {}x{} is not twice target {}x{} at depth {depth}",
                context.height(),
                context.width(),
                target.height(),
                target.width()
            )));
        }
        if context.batch() != target.batch() {
            return Err(Error::Alignment("batch sizes differ between branches".into()));
        }
        Ok(HookingStage { depth, target, context })
    }
}

/// Center-crop the context feature, concatenate it behind the target
/// feature, and optionally attend over the result.
#[derive(Clone, Debug)]
pub struct AttentionHook<T> {
    target_channels: usize,
    context_channels: usize,
    pub attention: Option<SelfAttention<T>>,
    context_dims: Option<(usize, usize)>,
}

impl<T: Real> AttentionHook<T> {
    /// A hook with attention; `token_cap` bounds the attended token count.
    pub fn with_attention<R: Rng>(target_channels: usize, context_channels: usize, token_cap: Option<usize>, rng: &mut R) -> Self {
        AttentionHook {
            target_channels,
            context_channels,
            attention: Some(SelfAttention::new(target_channels + context_channels, token_cap, rng)),
            context_dims: None,
        }
    }

    /// Plain crop-and-concatenate hooking.
    pub fn plain(target_channels: usize, context_channels: usize) -> Self {
        AttentionHook {
            target_channels,
            context_channels,
            attention: None,
            context_dims: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.target_channels + self.context_channels
    }

    pub fn forward(&mut self, stage: &HookingStage<'_, T>, phase: Phase) -> Result<FeatureMap<T>> {
        if stage.target.channels() != self.target_channels || stage.context.channels() != self.context_channels {
            return Err(Error::shape(format!(
                "hook at depth {} expects {}+{} channels, got {}+{}",
                stage.depth,
                self.target_channels,
                self.context_channels,
                stage.target.channels(),
                stage.context.channels()
            )));
        }
        let cropped = center_crop_half(stage.context)?;
        if cropped.height() != stage.target.height() || cropped.width() != stage.target.width() {
            return Err(Error::Alignment(format!(
                "cropped context {}x{} does not match target {}x{} at depth {}",
                cropped.height(),
                cropped.width(),
                stage.target.height(),
                stage.target.width(),
                stage.depth
            )));
        }
        let merged = FeatureMap::concat_channels(stage.target, &cropped)?;
        self.context_dims = phase.caches().then_some((stage.context.height(), stage.context.width()));
        match self.attention.as_mut() {
            Some(att) => att.forward(&merged, phase),
            None => Ok(merged),
        }
    }

    /// Returns gradients for (target feature, full uncropped context feature).
    pub fn backward(&mut self, dy: &FeatureMap<T>) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
        let (h, w) = self.context_dims.ok_or_else(|| missing_cache("hook"))?;
        let dm = match self.attention.as_mut() {
            Some(att) => att.backward(dy)?,
            None => dy.clone(),
        };
        let (d_target, d_crop) = dm.split_channels(self.target_channels)?;
        Ok((d_target, center_crop_half_adjoint(&d_crop, h, w)?))
    }
}

impl<T: Real> Parameterized<T> for AttentionHook<T> {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        if let Some(att) = &self.attention {
            att.visit(&join(prefix, "attention"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        if let Some(att) = &mut self.attention {
            att.visit_mut(&join(prefix, "attention"), f);
        }
    }
}
