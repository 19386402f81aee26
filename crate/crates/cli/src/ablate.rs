//! Trains each variant of the ablation ladder under one seed and
//! configuration and tabulates test metrics as mean ± std over repeats.

use std::fmt::Write as _;
use std::path::Path;

use hooknet_core::metrics::{grouped_report, render_table};
use hooknet_core::synth::Scene;
use hooknet_core::trainer::{score_scenes, split_scenes, train, PredictConfig};
use hooknet_core::{ModelConfig, Variant};

use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::pipeline::{create_dir, load_scenes, train_setup};
use crate::settings::Settings;

pub const RUNS_FILE: &str = "ablation_runs.csv";
pub const SUMMARY_FILE: &str = "ablation.csv";

/// Test metrics of one trained variant; pixel metrics are macro averages.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub variant: Variant,
    pub repeat: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub iou: Option<f64>,
    pub mde_m: Option<f64>,
    pub empty: usize,
}

impl RunMetrics {
    fn values(&self) -> [Option<f64>; 5] {
        [self.precision, self.recall, self.f1, self.iou, self.mde_m]
    }
}

/// Mean and sample standard deviation of the defined values.
pub fn mean_std(values: &[Option<f64>]) -> Option<(f64, f64)> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

pub fn parse_variants(text: &str) -> CliResult<Vec<Variant>> {
    let vs = text
        .split(',')
        .map(|s| s.trim().parse::<Variant>().map_err(|e| CliError::usage(e.to_string())))
        .collect::<CliResult<Vec<_>>>()?;
    if vs.is_empty() {
        return Err(CliError::usage("no variants given"));
    }
    Ok(vs)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("NA".into(), |x| format!("{x:.6}"))
}

pub fn runs_csv(runs: &[RunMetrics]) -> String {
    let mut s = String::from("variant,repeat,precision,recall,f1,iou,mde_m,empty\n");
    for r in runs {
        let vals: Vec<String> = r.values().iter().map(|v| fmt_opt(*v)).collect();
        writeln!(s, "{},{},{},{}", r.variant, r.repeat, vals.join(","), r.empty).expect("string write");
    }
    s
}

fn per_variant<'a>(runs: &'a [RunMetrics], variants: &'a [Variant]) -> impl Iterator<Item = (Variant, Vec<&'a RunMetrics>)> + 'a {
    variants
        .iter()
        .map(move |&v| (v, runs.iter().filter(|r| r.variant == v).collect::<Vec<_>>()))
}

pub fn summary_csv(runs: &[RunMetrics], variants: &[Variant]) -> String {
    let names = ["precision", "recall", "f1", "iou", "mde_m"];
    let mut s = String::from("variant,runs");
    for n in names {
        write!(s, ",{n}_mean,{n}_std").expect("string write");
    }
    s.push_str(",empty_total\n");
    for (v, rs) in per_variant(runs, variants) {
        write!(s, "{v},{}", rs.len()).expect("string write");
        for k in 0..names.len() {
            let col: Vec<Option<f64>> = rs.iter().map(|r| r.values()[k]).collect();
            match mean_std(&col) {
                Some((m, sd)) => write!(s, ",{m:.6},{sd:.6}"),
                None => write!(s, ",NA,NA"),
            }
            .expect("string write");
        }
        writeln!(s, ",{}", rs.iter().map(|r| r.empty).sum::<usize>()).expect("string write");
    }
    s
}

/// Pixel metrics in percent, MDE in meters.
pub fn summary_table(runs: &[RunMetrics], variants: &[Variant]) -> String {
    let header = ["Variant", "Precision", "Recall", "F1", "IoU", "MDE (m)", "∅"];
    let mut cells = vec![header.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
    for (v, rs) in per_variant(runs, variants) {
        let mut row = vec![v.to_string()];
        for k in 0..5 {
            let scale = if k < 4 { 100.0 } else { 1.0 };
            let col: Vec<Option<f64>> = rs.iter().map(|r| r.values()[k]).collect();
            row.push(mean_std(&col).map_or("NA".into(), |(m, sd)| format!("{:.2} ± {:.2}", m * scale, sd * scale)));
        }
        row.push(rs.iter().map(|r| r.empty).sum::<usize>().to_string());
        cells.push(row);
    }
    render_table(&cells)
}

fn run_one(
    model_cfg: &ModelConfig,
    setup: &crate::pipeline::TrainSetup,
    seed: u64,
    repeat: usize,
    train_set: &[Scene],
    val_set: &[Scene],
    test_set: &[Scene],
) -> CliResult<RunMetrics> {
    let tcfg = hooknet_core::trainer::TrainConfig {
        seed,
        ..setup.train.clone()
    };
    let mut outcome = train(model_cfg, train_set, val_set, &tcfg, &mut |_| {})?;
    let records = score_scenes(&mut outcome.best, test_set, &PredictConfig::for_patch(tcfg.patch))?;
    let all = grouped_report(&records, None)?.pop().expect("All row");
    let m = all.segmentation.map(|s| s.macro_avg).unwrap_or_default();
    Ok(RunMetrics {
        variant: model_cfg.variant,
        repeat,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        iou: m.iou,
        mde_m: all.mde_m,
        empty: all.empty,
    })
}

pub fn ablate(settings: &mut Settings, data: &Path, test: Option<&Path>, out: &Path) -> CliResult<()> {
    let mut manifest = RunManifest::start("ablate");
    let setup = train_setup(settings)?;
    let repeats = settings.resolve("repeats", 1usize)?;
    let ladder: Vec<String> = Variant::ABLATION_LADDER.iter().map(|v| v.to_string()).collect();
    let variants = parse_variants(&settings.resolve("variants", ladder.join(","))?)?;
    if repeats == 0 {
        return Err(CliError::usage("repeats must be positive"));
    }
    let scenes = load_scenes(data)?;
    let test_scenes = test.map(load_scenes).transpose()?;
    create_dir(out)?;

    let mut runs = Vec::new();
    for r in 0..repeats {
        let seed = setup.train.seed.wrapping_add(r as u64);
        let (train_set, val_set) = split_scenes(scenes.clone(), setup.val_fraction, seed)?;
        let test_set = test_scenes.as_deref().unwrap_or(&val_set);
        for &v in &variants {
            let model_cfg = ModelConfig {
                variant: v,
                ..setup.model.clone()
            };
            let run = run_one(&model_cfg, &setup, seed, r, &train_set, &val_set, test_set)?;
            eprintln!(
                "repeat {r} {v}: IoU {} MDE {} m ∅ {}",
                fmt_opt(run.iou),
                fmt_opt(run.mde_m),
                run.empty
            );
            runs.push(run);
        }
    }

    let runs_path = out.join(RUNS_FILE);
    let summary_path = out.join(SUMMARY_FILE);
    for (p, text) in [(&runs_path, runs_csv(&runs)), (&summary_path, summary_csv(&runs, &variants))] {
        std::fs::write(p, text).map_err(|e| hooknet_core::Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?;
    }
    print!("{}", summary_table(&runs, &variants));
    manifest.seed = Some(setup.train.seed);
    manifest.input("data", data);
    if let Some(t) = test {
        manifest.input("test", t);
    }
    manifest.output("runs", &runs_path);
    manifest.output("summary", &summary_path);
    manifest.config = settings.resolved().clone();
    manifest.finish(out)
}
