//! Target/context patch pairs, joint augmentation, and merging of
//! overlapping patch predictions back into a scene-sized label raster.
//!
//! The context patch covers a `2S×2S` footprint centred on the `S×S` target
//! and is reduced to `S×S` (2×2 mean for intensity, top-left sample for
//! labels), so its central half lines up with the target at half resolution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::frontline::NA;
use crate::losses::LabelBatch;
use crate::raster::Raster;
use crate::synth::Scene;
use crate::tensor::FeatureMap;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub target: Raster<f32>,
    pub context: Raster<f32>,
    pub y_t: Raster<u8>,
    pub y_c: Raster<u8>,
    /// Top-left corner of the target in the scene.
    pub offset: (usize, usize),
}

impl PatchPair {
    pub fn size(&self) -> usize {
        self.target.height()
    }
}

/// Grid positions `0, stride, 2·stride, …` plus a final one flush with the end.
pub fn grid_offsets(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = extent - patch;
    let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
    if *v.last().expect("non-empty") != last {
        v.push(last);
    }
    v
}

fn check_patch(scene: &Scene, patch: usize) -> Result<()> {
    let (h, w) = scene.dims();
    if patch == 0 || !patch.is_multiple_of(16) {
        return Err(Error::config(format!("patch size {patch} is not a positive multiple of 16")));
    }
    if patch > h || patch > w {
        return Err(Error::config(format!("patch size {patch} exceeds scene {h}x{w}")));
    }
    Ok(())
}

/// The `2S×2S` context footprint centred on the target at `(r, c)`, zero-padded.
pub fn context_footprint<T: Copy>(r: &Raster<T>, top: usize, left: usize, patch: usize, fill: T) -> Raster<T> {
    let half = (patch / 2) as isize;
    r.window(top as isize - half, left as isize - half, 2 * patch, 2 * patch, fill)
}

pub fn make_pair(scene: &Scene, top: usize, left: usize, patch: usize) -> Result<PatchPair> {
    check_patch(scene, patch)?;
    let (h, w) = scene.dims();
    if top + patch > h || left + patch > w {
        return Err(Error::Geometry(format!("patch at ({top},{left}) leaves the {h}x{w} scene")));
    }
    let target = scene.intensity.window(top as isize, left as isize, patch, patch, 0.0);
    let y_t = scene.zones.window(top as isize, left as isize, patch, patch, NA);
    let context = context_footprint(&scene.intensity, top, left, patch, 0.0).mean_pool2()?;
    let y_c = context_footprint(&scene.zones, top, left, patch, NA).subsample(2)?;
    Ok(PatchPair {
        target,
        context,
        y_t,
        y_c,
        offset: (top, left),
    })
}

/// Sliding-window pairs covering the whole scene, row-major order.
pub fn extract_pairs(scene: &Scene, patch: usize, stride: usize) -> Result<Vec<PatchPair>> {
    check_patch(scene, patch)?;
    if stride == 0 || stride > patch {
        return Err(Error::config(format!("stride {stride} must lie in 1..={patch} to cover the scene")));
    }
    let (h, w) = scene.dims();
    let mut out = Vec::new();
    for &r in &grid_offsets(h, patch, stride) {
        for &c in &grid_offsets(w, patch, stride) {
            out.push(make_pair(scene, r, c, patch)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub rotate_prob: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotate_prob: 0.5,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            rotate_prob: 0.0,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
        }
    }
}

/// Quarter turns followed by optional horizontal then vertical mirroring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Transform {
    pub quarter_turns: usize,
    pub hflip: bool,
    pub vflip: bool,
}

impl Transform {
    pub fn sample<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let quarter_turns = if rng.random_bool(cfg.rotate_prob) { rng.random_range(1..4) } else { 0 };
        Transform {
            quarter_turns,
            hflip: rng.random_bool(cfg.hflip_prob),
            vflip: rng.random_bool(cfg.vflip_prob),
        }
    }

    pub fn apply<T: Copy>(&self, r: &Raster<T>) -> Raster<T> {
        let mut out = r.rot90(self.quarter_turns);
        if self.hflip {
            out = out.hflip();
        }
        if self.vflip {
            out = out.vflip();
        }
        out
    }

    pub fn apply_pair(&self, p: &PatchPair) -> PatchPair {
        PatchPair {
            target: self.apply(&p.target),
            context: self.apply(&p.context),
            y_t: self.apply(&p.y_t),
            y_c: self.apply(&p.y_c),
            offset: p.offset,
        }
    }
}

/// Applies one sampled transform jointly to all four rasters.
pub fn augment<R: Rng>(p: &PatchPair, cfg: &AugmentConfig, rng: &mut R) -> PatchPair {
    Transform::sample(cfg, rng).apply_pair(p)
}

/// Network inputs and labels for a batch of pairs.
pub struct Batch {
    pub target: FeatureMap<f32>,
    pub context: FeatureMap<f32>,
    pub y_t: LabelBatch,
    pub y_c: LabelBatch,
}

pub fn stack_inputs(pairs: &[&PatchPair]) -> Result<(FeatureMap<f32>, FeatureMap<f32>)> {
    let s = pairs.first().ok_or_else(|| Error::shape("empty batch"))?.size();
    let n = pairs.len();
    let mut t = Vec::with_capacity(n * s * s);
    let mut c = Vec::with_capacity(n * s * s);
    for p in pairs {
        if p.target.dims() != (s, s) || p.context.dims() != (s, s) {
            return Err(Error::shape("patches in a batch must share one size"));
        }
        t.extend_from_slice(p.target.as_slice());
        c.extend_from_slice(p.context.as_slice());
    }
    Ok((FeatureMap::from_vec(n, 1, s, s, t)?, FeatureMap::from_vec(n, 1, s, s, c)?))
}

pub fn stack_batch(pairs: &[&PatchPair]) -> Result<Batch> {
    let (target, context) = stack_inputs(pairs)?;
    let y_t = LabelBatch::from_rasters(&pairs.iter().map(|p| &p.y_t).collect::<Vec<_>>())?;
    let y_c = LabelBatch::from_rasters(&pairs.iter().map(|p| &p.y_c).collect::<Vec<_>>())?;
    Ok(Batch { target, context, y_t, y_c })
}

/// Running per-pixel probability sums and coverage counts.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMerger {
    height: usize,
    width: usize,
    classes: usize,
    sums: Vec<f64>,
    counts: Vec<u32>,
}

impl PredictionMerger {
    pub fn new(height: usize, width: usize, classes: usize) -> Self {
        PredictionMerger {
            height,
            width,
            classes,
            sums: vec![0.0; classes * height * width],
            counts: vec![0; height * width],
        }
    }

    /// Adds class-major `classes×s×s` probabilities at `offset`.
    pub fn add(&mut self, offset: (usize, usize), s: usize, probs: &[f32]) -> Result<()> {
        let (top, left) = offset;
        if top + s > self.height || left + s > self.width {
            return Err(Error::Geometry(format!(
                "{s}x{s} patch at ({top},{left}) leaves the {}x{} scene",
                self.height, self.width
            )));
        }
        if probs.len() != self.classes * s * s {
            return Err(Error::shape(format!(
                "{} probabilities for a {}x{s}x{s} patch",
                probs.len(),
                self.classes
            )));
        }
        let plane = self.height * self.width;
        for k in 0..self.classes {
            for i in 0..s {
                let src = &probs[k * s * s + i * s..k * s * s + (i + 1) * s];
                let row = k * plane + (top + i) * self.width + left;
                for (acc, &p) in self.sums[row..row + s].iter_mut().zip(src) {
                    *acc += p as f64;
                }
            }
        }
        for i in 0..s {
            let row = (top + i) * self.width + left;
            self.counts[row..row + s].iter_mut().for_each(|c| *c += 1);
        }
        Ok(())
    }

    /// Folds in a partial merger built over disjoint patches.
    pub fn absorb(&mut self, other: &PredictionMerger) -> Result<()> {
        if (other.height, other.width, other.classes) != (self.height, self.width, self.classes) {
            return Err(Error::shape("merger dimensions differ"));
        }
        self.sums.iter_mut().zip(&other.sums).for_each(|(a, b)| *a += b);
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Coverage-averaged probabilities, class-major.
    pub fn mean_probabilities(&self) -> Result<Vec<f64>> {
        if let Some(i) = self.counts.iter().position(|&c| c == 0) {
            return Err(Error::Geometry(format!(
                "pixel ({},{}) is not covered by any patch",
                i / self.width,
                i % self.width
            )));
        }
        let plane = self.height * self.width;
        Ok(self
            .sums
            .iter()
            .enumerate()
            .map(|(i, &s)| s / self.counts[i % plane] as f64)
            .collect())
    }

    /// Per-pixel argmax of the averaged probabilities; ties go to the lower class.
    pub fn finish(&self) -> Result<Raster<u8>> {
        let mean = self.mean_probabilities()?;
        let plane = self.height * self.width;
        Ok(Raster::from_fn(self.height, self.width, |r, c| {
            let p = r * self.width + c;
            let mut best = 0;
            for k in 1..self.classes {
                if mean[k * plane + p] > mean[best * plane + p] {
                    best = k;
                }
            }
            best as u8
        }))
    }
}

/// One patch's class probabilities, class-major `classes×s×s`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchProbs {
    pub offset: (usize, usize),
    pub size: usize,
    pub probs: Vec<f32>,
}

pub fn merge_predictions(patches: &[PatchProbs], shape: (usize, usize), classes: usize) -> Result<Raster<u8>> {
    let mut m = PredictionMerger::new(shape.0, shape.1, classes);
    for p in patches {
        m.add(p.offset, p.size, &p.probs)?;
    }
    m.finish()
}
