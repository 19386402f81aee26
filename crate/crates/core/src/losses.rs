//! Cross-entropy + soft Dice per output, combined across the target head,
//! the context head and the deep-supervision heads.

use crate::error::{Error, Result};
use crate::model::{DeepLogits, ForwardOutputs, OutputGrads, HOOK_DEPTHS};
use crate::nn::softmax_channels;
use crate::raster::Raster;
use crate::tensor::{FeatureMap, Real};

/// Smoothing term of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be a non-negative finite number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Zone labels for a batch, `n×h×w`, sample-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelBatch {
    n: usize,
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelBatch {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w || data.is_empty() {
            return Err(Error::shape(format!("{} labels cannot fill {n}x{h}x{w}", data.len())));
        }
        Ok(LabelBatch { n, h, w, data })
    }

    pub fn from_rasters(rasters: &[&Raster<u8>]) -> Result<Self> {
        let first = rasters.first().ok_or_else(|| Error::shape("empty label batch"))?;
        let (h, w) = first.dims();
        let mut data = Vec::with_capacity(rasters.len() * h * w);
        for r in rasters {
            if r.dims() != (h, w) {
                return Err(Error::shape(format!("label raster {:?} differs from {:?}", r.dims(), (h, w))));
            }
            data.extend_from_slice(r.as_slice());
        }
        LabelBatch::new(rasters.len(), h, w, data)
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn sample(&self, b: usize) -> Raster<u8> {
        let plane = self.h * self.w;
        Raster::from_vec(self.h, self.w, self.data[b * plane..(b + 1) * plane].to_vec()).expect("plane size")
    }

    /// Keeps the label at `(i·f, j·f)` of every `f×f` block.
    pub fn subsample(&self, f: usize) -> Result<LabelBatch> {
        if f == 0 || !self.h.is_multiple_of(f) || !self.w.is_multiple_of(f) {
            return Err(Error::shape(format!("{}x{} is not divisible by {f}", self.h, self.w)));
        }
        let (h, w) = (self.h / f, self.w / f);
        let mut data = Vec::with_capacity(self.n * h * w);
        for b in 0..self.n {
            let base = b * self.h * self.w;
            for i in 0..h {
                for j in 0..w {
                    data.push(self.data[base + i * f * self.w + j * f]);
                }
            }
        }
        LabelBatch::new(self.n, h, w, data)
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.data.iter().position(|&v| v as usize >= classes) {
            Some(index) => Err(Error::Label {
                value: self.data[index],
                index,
                classes,
            }),
            None => Ok(()),
        }
    }
}

/// Labels for every supervised output of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionBundle {
    pub y_t: LabelBatch,
    pub y_c: LabelBatch,
    /// `y_t` subsampled to the deep-logit size at depths 1..=3.
    pub y_t_pyramid: Vec<LabelBatch>,
}

impl SupervisionBundle {
    pub fn new(y_t: LabelBatch, y_c: LabelBatch) -> Result<Self> {
        if y_t.batch() != y_c.batch() || y_t.dims() != y_c.dims() {
            return Err(Error::shape("target and context labels differ in shape"));
        }
        let y_t_pyramid = (1..=HOOK_DEPTHS)
            .map(|d| y_t.subsample(1 << (4 - d)))
            .collect::<Result<Vec<_>>>()?;
        Ok(SupervisionBundle { y_t, y_c, y_t_pyramid })
    }

    pub fn pyramid(&self, depth: usize) -> Option<&LabelBatch> {
        self.y_t_pyramid.get(depth.checked_sub(1)?)
    }
}

fn check_pair<T: Real>(logits: &FeatureMap<T>, labels: &LabelBatch) -> Result<()> {
    let [n, c, h, w] = logits.shape();
    if n != labels.batch() || (h, w) != labels.dims() {
        return Err(Error::shape(format!(
            "logits {:?} do not match labels {}x{:?}",
            logits.shape(),
            labels.batch(),
            labels.dims()
        )));
    }
    labels.validate(c)
}

/// Mean over pixels of `-log softmax(logits)[label]`.
pub fn cross_entropy<T: Real>(logits: &FeatureMap<T>, labels: &LabelBatch) -> Result<f64> {
    check_pair(logits, labels)?;
    let [n, c, h, w] = logits.shape();
    let plane = h * w;
    let mut total = 0.0;
    for b in 0..n {
        let s = logits.sample(b);
        for p in 0..plane {
            let m = (0..c).map(|k| s[k * plane + p].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|k| (s[k * plane + p].as_f64() - m).exp()).sum();
            let y = labels.data[b * plane + p] as usize;
            total += m + z.ln() - s[y * plane + p].as_f64();
        }
    }
    Ok(total / (n * plane) as f64)
}

struct DiceSums {
    inter: Vec<f64>,
    pred: Vec<f64>,
    truth: Vec<f64>,
}

fn dice_sums<T: Real>(probs: &FeatureMap<T>, labels: &LabelBatch) -> DiceSums {
    let [n, c, h, w] = probs.shape();
    let plane = h * w;
    let mut s = DiceSums {
        inter: vec![0.0; c],
        pred: vec![0.0; c],
        truth: vec![0.0; c],
    };
    for b in 0..n {
        let pb = probs.sample(b);
        let lb = &labels.data[b * plane..(b + 1) * plane];
        for k in 0..c {
            s.pred[k] += pb[k * plane..(k + 1) * plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        for (p, &y) in lb.iter().enumerate() {
            let y = y as usize;
            s.truth[y] += 1.0;
            s.inter[y] += pb[y * plane + p].as_f64();
        }
    }
    s
}

fn dice_from_sums(s: &DiceSums) -> f64 {
    let c = s.inter.len();
    let mean: f64 = (0..c)
        .map(|k| (2.0 * s.inter[k] + DICE_EPS) / (s.pred[k] + s.truth[k] + DICE_EPS))
        .sum::<f64>()
        / c as f64;
    1.0 - mean
}

/// Macro soft Dice loss over all classes, with sums taken over the batch.
pub fn dice_loss<T: Real>(logits: &FeatureMap<T>, labels: &LabelBatch) -> Result<f64> {
    check_pair(logits, labels)?;
    Ok(dice_from_sums(&dice_sums(&softmax_channels(logits), labels)))
}

/// CE + Dice and its gradient with respect to the logits.
pub fn ce_dice_with_grad<T: Real>(logits: &FeatureMap<T>, labels: &LabelBatch) -> Result<(f64, FeatureMap<T>)> {
    check_pair(logits, labels)?;
    let [n, c, h, w] = logits.shape();
    let plane = h * w;
    let probs = softmax_channels(logits);
    let sums = dice_sums(&probs, labels);
    let value = cross_entropy(logits, labels)? + dice_from_sums(&sums);

    let inv_pixels = 1.0 / (n * plane) as f64;
    // dDice/dp_k = -(1/C)·(2·g_k·den_k - num_k) / den_k²
    let num: Vec<f64> = (0..c).map(|k| 2.0 * sums.inter[k] + DICE_EPS).collect();
    let den: Vec<f64> = (0..c).map(|k| sums.pred[k] + sums.truth[k] + DICE_EPS).collect();
    let inv_c = 1.0 / c as f64;

    let mut grad = FeatureMap::zeros(n, c, h, w);
    let mut dp = vec![0.0; c];
    for b in 0..n {
        let pb = probs.sample(b);
        let gb = grad.sample_mut(b);
        for p in 0..plane {
            let y = labels.data[b * plane + p] as usize;
            let mut dot = 0.0;
            for k in 0..c {
                let g = if k == y { 1.0 } else { 0.0 };
                dp[k] = -inv_c * (2.0 * g * den[k] - num[k]) / (den[k] * den[k]);
                dot += pb[k * plane + p].as_f64() * dp[k];
            }
            for k in 0..c {
                let pk = pb[k * plane + p].as_f64();
                let ce = (pk - if k == y { 1.0 } else { 0.0 }) * inv_pixels;
                gb[k * plane + p] = T::lit(ce + pk * (dp[k] - dot));
            }
        }
    }
    Ok((value, grad))
}

/// Unweighted constituent terms of the joint loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub target: f64,
    pub context: Option<f64>,
    /// `(depth, value)` for every deep head present.
    pub deep: Vec<(usize, f64)>,
}

impl LossBreakdown {
    /// `(name, value)` of each term present: target, context, deep1..3.
    pub fn terms(&self) -> Vec<(String, f64)> {
        let mut out = vec![("target".to_string(), self.target)];
        if let Some(c) = self.context {
            out.push(("context".to_string(), c));
        }
        for &(d, v) in &self.deep {
            out.push((format!("deep{d}"), v));
        }
        out
    }

    pub fn deep_sum(&self) -> f64 {
        self.deep.iter().map(|(_, v)| v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.terms().iter().all(|(_, v)| v.is_finite()) && self.total.is_finite()
    }
}

fn deep_labels<'a>(sup: &'a SupervisionBundle, d: &DeepLogits<impl Real>) -> Result<&'a LabelBatch> {
    sup.pyramid(d.depth)
        .ok_or_else(|| Error::shape(format!("no supervision for depth {}", d.depth)))
}

/// Weighted joint loss; `λ1·L_t + λ2·L_c + λ3·Σ_D L_D`.
pub fn total_loss<T: Real>(outs: &ForwardOutputs<T>, sup: &SupervisionBundle, w: &LossWeights) -> Result<LossBreakdown> {
    let term = |logits: &FeatureMap<T>, y: &LabelBatch| -> Result<f64> { Ok(cross_entropy(logits, y)? + dice_loss(logits, y)?) };
    let target = term(&outs.target_logits, &sup.y_t)?;
    let context = outs.context_logits.as_ref().map(|o| term(o, &sup.y_c)).transpose()?;
    let deep = outs
        .deep_logits
        .iter()
        .map(|d| Ok((d.depth, term(&d.logits, deep_labels(sup, d)?)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(combine(target, context, deep, w))
}

fn combine(target: f64, context: Option<f64>, deep: Vec<(usize, f64)>, w: &LossWeights) -> LossBreakdown {
    let deep_sum: f64 = deep.iter().map(|(_, v)| v).sum();
    LossBreakdown {
        total: w.lambda1 * target + w.lambda2 * context.unwrap_or(0.0) + w.lambda3 * deep_sum,
        target,
        context,
        deep,
    }
}

/// [`total_loss`] together with the gradients for [`crate::model::Model::backward`].
pub fn total_loss_with_grad<T: Real>(
    outs: &ForwardOutputs<T>,
    sup: &SupervisionBundle,
    w: &LossWeights,
) -> Result<(LossBreakdown, OutputGrads<T>)> {
    let scaled = |(v, mut g): (f64, FeatureMap<T>), lambda: f64| {
        let l = T::lit(lambda);
        g.as_mut_slice().iter_mut().for_each(|x| *x *= l);
        (v, g)
    };
    let (target, g_t) = scaled(ce_dice_with_grad(&outs.target_logits, &sup.y_t)?, w.lambda1);
    let (context, g_c) = match &outs.context_logits {
        Some(o) => {
            let (v, g) = scaled(ce_dice_with_grad(o, &sup.y_c)?, w.lambda2);
            (Some(v), Some(g))
        }
        None => (None, None),
    };
    let mut deep = Vec::new();
    let mut g_deep = Vec::new();
    for d in &outs.deep_logits {
        let (v, g) = scaled(ce_dice_with_grad(&d.logits, deep_labels(sup, d)?)?, w.lambda3);
        deep.push((d.depth, v));
        g_deep.push(DeepLogits { depth: d.depth, logits: g });
    }
    Ok((
        combine(target, context, deep, w),
        OutputGrads {
            target: g_t,
            context: g_c,
            deep: g_deep,
        },
    ))
}
