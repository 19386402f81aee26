use std::path::{Path, PathBuf};

use hooknet_core::checkpoint;
use hooknet_core::frontline::{delineate, ZoneMask};
use hooknet_core::losses::LossWeights;
use hooknet_core::metrics::{confusion, grouped_report, report_csv, report_table, SceneRecord};
use hooknet_core::optim::AdamWConfig;
use hooknet_core::patches::AugmentConfig;
use hooknet_core::synth::{
    generate_scene, list_scene_dirs, read_front, read_scene, read_zones, write_front, write_scene, write_zones, Scene,
    SceneHeader, SynthConfig, ZONES_FILE,
};
use hooknet_core::trainer::{predict_scene, split_scenes, train, PredictConfig, TrainConfig};
use hooknet_core::{ModelConfig, Variant};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, CliResult};
use crate::jobs::par_map_with;
use crate::manifest::RunManifest;
use crate::settings::{OptCount, Settings};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.csv";
pub const METRICS_FILE: &str = "metrics.csv";

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| hooknet_core::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| hooknet_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Scene-like subdirectories of `root`; a missing or empty root is a
/// missing-input error.
pub fn scene_dirs(root: &Path, what: &str) -> CliResult<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(CliError::MissingInput(format!("{what} directory {} does not exist", root.display())));
    }
    let dirs = list_scene_dirs(root)?;
    if dirs.is_empty() {
        return Err(CliError::MissingInput(format!("no scenes under {}", root.display())));
    }
    Ok(dirs)
}

pub fn load_scenes(root: &Path) -> CliResult<Vec<Scene>> {
    scene_dirs(root, "scene")?
        .iter()
        .map(|d| read_scene(d).map_err(CliError::from))
        .collect()
}

fn dir_name(dir: &Path) -> String {
    dir.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned())
}

pub fn synth(settings: &mut Settings, out: &Path) -> CliResult<()> {
    let mut manifest = RunManifest::start("synth");
    let n = settings.resolve("n", 50usize)?;
    let seed = settings.resolve("seed", 0u64)?;
    let d = SynthConfig::default();
    let base = SynthConfig {
        seed,
        height: settings.resolve("height", d.height)?,
        width: settings.resolve("width", d.width)?,
        resolution_m: settings.resolve("resolution_m", d.resolution_m)?,
        levels: d.levels,
        texture: settings.resolve("texture", d.texture)?,
        speckle: settings.resolve("speckle", d.speckle)?,
        waviness: settings.resolve("waviness", d.waviness)?,
        melange_prob: settings.resolve("melange_prob", d.melange_prob)?,
        na_prob: settings.resolve("na_prob", d.na_prob)?,
    };
    base.validate()?;
    if n == 0 {
        return Err(CliError::usage("n must be positive"));
    }
    create_dir(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut winter = 0;
    for i in 0..n {
        let cfg = SynthConfig {
            seed: rng.next_u64(),
            ..base.clone()
        };
        let scene = generate_scene(&cfg)?;
        winter += usize::from(scene.tags.get("season").is_some_and(|s| s == "winter"));
        write_scene(&scene, &out.join(format!("scene_{i:04}")))?;
    }
    eprintln!("wrote {n} scenes ({winter} winter) to {}", out.display());
    manifest.seed = Some(seed);
    manifest.output("scenes", out);
    manifest.config = settings.resolved().clone();
    manifest.finish(out)
}

/// Model and training settings shared by `train` and `ablate`.
pub struct TrainSetup {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub val_fraction: f64,
}

pub fn train_setup(settings: &mut Settings) -> CliResult<TrainSetup> {
    let toy = settings.resolve("toy", false)?;
    let (dm, dt) = if toy {
        (ModelConfig::toy(Variant::AmdHookNet, 8), TrainConfig::toy())
    } else {
        (ModelConfig::default(), TrainConfig::default())
    };
    let model = ModelConfig {
        variant: settings.resolve("variant", dm.variant)?,
        base_channels: settings.resolve("base_channels", dm.base_channels)?,
        token_cap: settings.resolve("token_cap", OptCount(dm.token_cap))?.0,
        ..dm
    };
    model.validate()?;
    let augment = settings.resolve("augment", true)?;
    let train = TrainConfig {
        lr0: settings.resolve("lr0", dt.lr0)?,
        decay: settings.resolve("decay", dt.decay)?,
        epochs: settings.resolve("epochs", dt.epochs)?,
        batch_size: settings.resolve("batch_size", dt.batch_size)?,
        seed: settings.resolve("seed", dt.seed)?,
        loss: LossWeights {
            lambda1: settings.resolve("lambda1", dt.loss.lambda1)?,
            lambda2: settings.resolve("lambda2", dt.loss.lambda2)?,
            lambda3: settings.resolve("lambda3", dt.loss.lambda3)?,
        },
        adamw: AdamWConfig {
            weight_decay: settings.resolve("weight_decay", dt.adamw.weight_decay)?,
            ..dt.adamw
        },
        patch: settings.resolve("patch", dt.patch)?,
        stride: settings.resolve("stride", OptCount(dt.stride))?.0,
        augment: if augment { AugmentConfig::default() } else { AugmentConfig::none() },
    };
    train.validate()?;
    let val_fraction = settings.resolve("val_fraction", 0.1)?;
    Ok(TrainSetup {
        model,
        train,
        val_fraction,
    })
}

pub fn train_cmd(settings: &mut Settings, data: &Path, out: &Path) -> CliResult<()> {
    let mut manifest = RunManifest::start("train");
    let setup = train_setup(settings)?;
    let scenes = load_scenes(data)?;
    let (train_set, val_set) = split_scenes(scenes, setup.val_fraction, setup.train.seed)?;
    create_dir(out)?;
    eprintln!(
        "training {} on {} scenes ({} validation)",
        setup.model.variant,
        train_set.len(),
        val_set.len()
    );
    let outcome = train(&setup.model, &train_set, &val_set, &setup.train, &mut |row| {
        eprintln!(
            "epoch {:>3}  lr {:.3e}  loss {:.4}  val IoU {}",
            row.epoch,
            row.lr,
            row.total,
            row.val_iou.map_or("NA".into(), |v| format!("{v:.4}"))
        );
    })?;
    let ckpt = out.join(CHECKPOINT_FILE);
    checkpoint::save(&outcome.best, &ckpt)?;
    let report = out.join(REPORT_FILE);
    write_text(&report, &outcome.report.to_csv())?;
    if let Some(best) = outcome.report.best_epoch {
        eprintln!("best epoch {best}; checkpoint {}", ckpt.display());
    }
    manifest.seed = Some(setup.train.seed);
    manifest.input("data", data);
    manifest.output("checkpoint", &ckpt);
    manifest.output("report", &report);
    manifest.config = settings.resolved().clone();
    manifest.finish(out)
}

pub fn predict_config(settings: &mut Settings) -> CliResult<PredictConfig> {
    let toy = settings.resolve("toy", false)?;
    let patch = settings.resolve("patch", if toy { 64 } else { 288 })?;
    let d = PredictConfig::for_patch(patch);
    let cfg = PredictConfig {
        patch,
        stride: settings.resolve("predict_stride", d.stride)?,
        batch_size: settings.resolve("predict_batch_size", d.batch_size)?,
    };
    if cfg.patch == 0 || !cfg.patch.is_multiple_of(16) {
        return Err(CliError::usage("patch must be a positive multiple of 16"));
    }
    if cfg.stride == 0 || cfg.stride > cfg.patch || cfg.batch_size == 0 {
        return Err(CliError::usage("predict_stride must lie in 1..=patch and predict_batch_size be positive"));
    }
    Ok(cfg)
}

pub fn infer(settings: &mut Settings, ckpt: &Path, data: &Path, out: &Path, dump_attention: bool) -> CliResult<()> {
    let mut manifest = RunManifest::start("infer");
    if !ckpt.is_file() {
        return Err(CliError::MissingInput(format!("checkpoint {} does not exist", ckpt.display())));
    }
    let cfg = predict_config(settings)?;
    let jobs = settings.resolve("jobs", 1usize)?;
    let mut model = checkpoint::load(ckpt)?;
    model.set_record_attention(dump_attention);
    let dirs = scene_dirs(data, "scene")?;
    create_dir(out)?;
    par_map_with(
        &dirs,
        jobs,
        || model.clone(),
        |model, dir| -> CliResult<()> {
            let scene = read_scene(dir)?;
            let pred = predict_scene(model, &scene, &cfg)?;
            let target = out.join(dir_name(dir));
            SceneHeader::of(&scene).write(&target)?;
            write_zones(&pred.zones, &target)?;
            if dump_attention {
                let adir = target.join("attention");
                create_dir(&adir)?;
                for a in &pred.attention {
                    let stem = format!("r{}_c{}_d{}", a.offset.0, a.offset.1, a.depth);
                    a.map.write_dump(&adir, &stem, a.depth)?;
                }
            }
            Ok(())
        },
    )?;
    eprintln!("predicted {} scenes into {}", dirs.len(), out.display());
    manifest.input("checkpoint", ckpt);
    manifest.input("data", data);
    manifest.output("zones", out);
    manifest.config = settings.resolved().clone();
    manifest.config.insert("dump_attention".into(), dump_attention.to_string());
    manifest.finish(out)
}

pub fn delineate_cmd(settings: &mut Settings, zones: &Path, out: &Path) -> CliResult<()> {
    let mut manifest = RunManifest::start("delineate");
    let jobs = settings.resolve("jobs", 1usize)?;
    let dirs = scene_dirs(zones, "zone")?;
    create_dir(out)?;
    let empty: usize = par_map_with(
        &dirs,
        jobs,
        || (),
        |_, dir| -> CliResult<usize> {
            let header = SceneHeader::read(dir)?;
            let mask = ZoneMask::new(read_zones(dir, &header)?, header.resolution_m)?;
            let front = delineate(&mask);
            let target = out.join(dir_name(dir));
            header.write(&target)?;
            write_zones(&mask.labels, &target)?;
            write_front(&front, &target)?;
            Ok(usize::from(front.is_empty()))
        },
    )?
    .into_iter()
    .sum();
    eprintln!("delineated {} scenes ({empty} without a front)", dirs.len());
    manifest.input("zones", zones);
    manifest.output("fronts", out);
    manifest.config = settings.resolved().clone();
    manifest.finish(out)
}

fn scene_record(pred_root: &Path, gt_dir: &Path) -> CliResult<SceneRecord> {
    let name = dir_name(gt_dir);
    let pred_dir = pred_root.join(&name);
    if !pred_dir.is_dir() {
        return Err(CliError::MissingInput(format!("no prediction for scene {name} under {}", pred_root.display())));
    }
    let gt = SceneHeader::read(gt_dir)?;
    let pred = SceneHeader::read(&pred_dir)?;
    if (gt.height, gt.width) != (pred.height, pred.width) || gt.resolution_m != pred.resolution_m {
        return Err(CliError::usage(format!(
            "scene {name}: prediction is {}x{} at {} m, ground truth {}x{} at {} m",
            pred.height, pred.width, pred.resolution_m, gt.height, gt.width, gt.resolution_m
        )));
    }
    let confusion = if gt_dir.join(ZONES_FILE).is_file() && pred_dir.join(ZONES_FILE).is_file() {
        let g = ZoneMask::new(read_zones(gt_dir, &gt)?, gt.resolution_m)?;
        let p = ZoneMask::new(read_zones(&pred_dir, &pred)?, pred.resolution_m)?;
        Some(confusion(&p, &g)?)
    } else {
        None
    };
    Ok(SceneRecord {
        id: gt.id.clone(),
        tags: gt.tags.clone(),
        confusion,
        gt_front: read_front(gt_dir, &gt)?,
        pred_front: read_front(&pred_dir, &pred)?,
    })
}

pub fn evaluate(settings: &mut Settings, pred: &Path, gt: &Path, out: &Path) -> CliResult<()> {
    let mut manifest = RunManifest::start("evaluate");
    let jobs = settings.resolve("jobs", 1usize)?;
    let group_by = settings.resolve("group_by", OptTag(None))?.0;
    if !pred.is_dir() {
        return Err(CliError::MissingInput(format!("prediction directory {} does not exist", pred.display())));
    }
    let dirs = scene_dirs(gt, "ground-truth")?;
    let records = par_map_with(&dirs, jobs, || (), |_, d| scene_record(pred, d))?;
    let rows = grouped_report(&records, group_by.as_deref())?;
    create_dir(out)?;
    let csv = out.join(METRICS_FILE);
    write_text(&csv, &report_csv(&rows))?;
    print!("{}", report_table(&rows));
    manifest.input("pred", pred);
    manifest.input("gt", gt);
    manifest.output("metrics", &csv);
    manifest.config = settings.resolved().clone();
    manifest.finish(out)
}

/// Optional tag name rendered as `none` when absent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OptTag(pub Option<String>);

impl std::str::FromStr for OptTag {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(OptTag((s != "none" && !s.is_empty()).then(|| s.to_string())))
    }
}

impl std::fmt::Display for OptTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.0.as_deref().unwrap_or("none"))
    }
}
