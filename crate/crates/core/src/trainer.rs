//! Training loop, validation and sliding-window scene prediction.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionMap;
use crate::error::{Error, Result};
use crate::frontline::{delineate, ZoneMask, ZONE_CLASSES};
use crate::losses::{total_loss_with_grad, LossWeights, SupervisionBundle};
use crate::metrics::{confusion, segmentation_metrics, ConfusionCounts, SceneRecord};
use crate::model::{Model, ModelConfig};
use crate::nn::{softmax_channels, Parameterized, Phase};
use crate::optim::{AdamW, AdamWConfig};
use crate::patches::{augment, extract_pairs, stack_batch, stack_inputs, AugmentConfig, PatchPair, PredictionMerger};
use crate::raster::Raster;
use crate::synth::Scene;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub adamw: AdamWConfig,
    pub patch: usize,
    /// Sliding-window stride for training patches; `None` means `patch / 2`.
    pub stride: Option<usize>,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            decay: 0.99,
            epochs: 300,
            batch_size: 30,
            seed: 0,
            loss: LossWeights::default(),
            adamw: AdamWConfig::default(),
            patch: 288,
            stride: None,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings: 64-pixel patches, 30 epochs, batches of 8.
    pub fn toy() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            patch: 64,
            ..TrainConfig::default()
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay.powi(epoch as i32)
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.patch / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::config("lr0 must be positive"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config("decay must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.patch == 0 || !self.patch.is_multiple_of(16) {
            return Err(Error::config("patch must be a positive multiple of 16"));
        }
        self.loss.validate()
    }
}

/// Splits scenes into (train, validation): a seeded shuffle, then the
/// first `ceil(fraction·n)` (at least one) go to validation.
pub fn split_scenes(scenes: Vec<Scene>, val_fraction: f64, seed: u64) -> Result<(Vec<Scene>, Vec<Scene>)> {
    if scenes.len() < 2 {
        return Err(Error::Data("at least two scenes are needed for a train/validation split".into()));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::config("validation fraction must lie in [0, 1)"));
    }
    let mut idx: Vec<usize> = (0..scenes.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((val_fraction * scenes.len() as f64).ceil() as usize).clamp(1, scenes.len() - 1);
    let val_set: std::collections::BTreeSet<usize> = idx[..n_val].iter().copied().collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, s) in scenes.into_iter().enumerate() {
        if val_set.contains(&i) {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    Ok((train, val))
}

/// One row of the training report; loss terms are means over batches.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub target: f64,
    pub context: Option<f64>,
    pub deep: [Option<f64>; 3],
    pub val_iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    /// Epoch of the kept checkpoint; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub wall_seconds: f64,
}

pub const REPORT_HEADER: &str = "epoch,lr,loss_total,loss_target,loss_context,loss_deep1,loss_deep2,loss_deep3,val_iou";

fn opt(v: Option<f64>) -> String {
    v.map_or("NA".to_string(), |x| x.to_string())
}

impl TrainReport {
    /// CSV with [`REPORT_HEADER`]; wall time is left out so the file is
    /// reproducible.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.lr,
                r.total,
                r.target,
                opt(r.context),
                opt(r.deep[0]),
                opt(r.deep[1]),
                opt(r.deep[2]),
                opt(r.val_iou)
            )
            .expect("string write");
        }
        s
    }
}

pub struct TrainOutcome {
    pub report: TrainReport,
    /// Parameters from the epoch with the highest validation IoU.
    pub best: Model<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictConfig {
    pub patch: usize,
    pub stride: usize,
    pub batch_size: usize,
}

impl PredictConfig {
    pub fn for_patch(patch: usize) -> Self {
        PredictConfig {
            patch,
            stride: patch / 2,
            batch_size: 8,
        }
    }
}

/// Attention weights recorded for one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchAttention {
    pub offset: (usize, usize),
    pub depth: usize,
    pub map: AttentionMap,
}

pub struct Prediction {
    pub zones: Raster<u8>,
    pub attention: Vec<PatchAttention>,
}

/// Sliding-window inference over a scene with overlap averaging.
pub fn predict_scene(model: &mut Model<f32>, scene: &Scene, cfg: &PredictConfig) -> Result<Prediction> {
    let pairs = extract_pairs(scene, cfg.patch, cfg.stride)?;
    let (h, w) = scene.dims();
    let classes = model.config().class_count;
    let mut merger = PredictionMerger::new(h, w, classes);
    let mut attention = Vec::new();
    for chunk in pairs.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&PatchPair> = chunk.iter().collect();
        let (t, c) = stack_inputs(&refs)?;
        let out = model.forward(&t, &c, Phase::Infer)?;
        let probs = softmax_channels(&out.target_logits);
        for (b, p) in chunk.iter().enumerate() {
            merger.add(p.offset, cfg.patch, probs.sample(b))?;
        }
        for (depth, maps) in model.recorded_attention() {
            for (b, map) in maps.iter().enumerate() {
                attention.push(PatchAttention {
                    offset: chunk[b].offset,
                    depth,
                    map: map.clone(),
                });
            }
        }
    }
    Ok(Prediction {
        zones: merger.finish()?,
        attention,
    })
}

/// Pooled confusion counts of the model's predictions over `scenes`.
pub fn evaluate_scenes(model: &mut Model<f32>, scenes: &[Scene], cfg: &PredictConfig) -> Result<ConfusionCounts> {
    let mut total = ConfusionCounts::default();
    for s in scenes {
        let pred = predict_scene(model, s, cfg)?;
        let pm = ZoneMask {
            labels: pred.zones,
            resolution_m: s.resolution_m,
        };
        total.add(&confusion(&pm, &s.zone_mask())?);
    }
    Ok(total)
}

/// Predicts, delineates and scores every scene against its ground truth.
pub fn score_scenes(model: &mut Model<f32>, scenes: &[Scene], cfg: &PredictConfig) -> Result<Vec<SceneRecord>> {
    scenes
        .iter()
        .map(|s| {
            let pred = predict_scene(model, s, cfg)?;
            let pm = ZoneMask {
                labels: pred.zones,
                resolution_m: s.resolution_m,
            };
            Ok(SceneRecord {
                id: s.id.clone(),
                tags: s.tags.clone(),
                confusion: Some(confusion(&pm, &s.zone_mask())?),
                gt_front: s.front_gt.clone(),
                pred_front: delineate(&pm),
            })
        })
        .collect()
}

fn first_non_finite(b: &crate::losses::LossBreakdown) -> Option<String> {
    b.terms()
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
        .or_else(|| (!b.total.is_finite()).then(|| "total".to_string()))
}

/// Trains a fresh model. `on_epoch` sees every report row as it is produced.
pub fn train(
    model_cfg: &ModelConfig,
    train_scenes: &[Scene],
    val_scenes: &[Scene],
    tcfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRow),
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    model_cfg.validate()?;
    if train_scenes.is_empty() || val_scenes.is_empty() {
        return Err(Error::Data("training and validation sets must both be non-empty".into()));
    }
    let start = Instant::now();
    let mut model = Model::<f32>::new(model_cfg, &mut ChaCha8Rng::seed_from_u64(tcfg.seed))?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x5eed_da7a_0000_0001);
    let mut pairs = Vec::new();
    for s in train_scenes {
        pairs.extend(extract_pairs(s, tcfg.patch, tcfg.stride())?);
    }
    let predict = PredictConfig::for_patch(tcfg.patch);
    let mut opt = AdamW::new(tcfg.adamw);
    let mut best = model.clone();
    let mut best_iou = f64::NEG_INFINITY;
    let mut report = TrainReport {
        rows: Vec::new(),
        best_epoch: None,
        wall_seconds: 0.0,
    };

    for epoch in 0..tcfg.epochs {
        let lr = tcfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut data_rng);
        let mut sums = [0.0f64; 6];
        let mut batches = 0usize;
        for chunk in order.chunks(tcfg.batch_size) {
            let aug: Vec<PatchPair> = chunk.iter().map(|&i| augment(&pairs[i], &tcfg.augment, &mut data_rng)).collect();
            let batch = stack_batch(&aug.iter().collect::<Vec<_>>())?;
            let out = model.forward(&batch.target, &batch.context, Phase::Train)?;
            let sup = SupervisionBundle::new(batch.y_t, batch.y_c)?;
            let (breakdown, grads) = total_loss_with_grad(&out, &sup, &tcfg.loss)?;
            if let Some(term) = first_non_finite(&breakdown) {
                return Err(Error::Divergence { epoch, term });
            }
            model.zero_grad();
            model.backward(&grads)?;
            opt.step(&mut model, lr);
            sums[0] += breakdown.total;
            sums[1] += breakdown.target;
            sums[2] += breakdown.context.unwrap_or(0.0);
            for &(d, v) in &breakdown.deep {
                sums[2 + d] += v;
            }
            batches += 1;
        }
        let mean = |k: usize| sums[k] / batches.max(1) as f64;
        let layout = *model.layout();
        let conf = evaluate_scenes(&mut model, val_scenes, &predict)?;
        let val_iou = segmentation_metrics(&conf).macro_avg.iou;
        let row = EpochRow {
            epoch,
            lr,
            total: mean(0),
            target: mean(1),
            context: layout.context_branch.then(|| mean(2)),
            deep: [0, 1, 2].map(|d| layout.deep[d].then(|| mean(3 + d))),
            val_iou,
        };
        let score = val_iou.unwrap_or(f64::NEG_INFINITY);
        if score > best_iou || report.best_epoch.is_none() {
            best_iou = score;
            best = model.clone();
            report.best_epoch = Some(epoch);
        }
        on_epoch(&row);
        report.rows.push(row);
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(TrainOutcome { report, best })
}

/// Macro IoU over a scene set; convenience for reporting.
pub fn macro_iou(model: &mut Model<f32>, scenes: &[Scene], cfg: &PredictConfig) -> Result<Option<f64>> {
    Ok(segmentation_metrics(&evaluate_scenes(model, scenes, cfg)?).macro_avg.iou)
}

/// Number of classes the zone rasters use.
pub const CLASSES: usize = ZONE_CLASSES;
