use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hooknet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hooknet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("run hooknet")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = hooknet(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    hooknet(args, cwd).status.code().expect("exit code")
}

/// Every file below `root` except manifests, keyed by relative path.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.file_name().unwrap() != "manifest.txt" {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

const TINY: &[&str] = &["--toy", "--epochs", "1", "--set", "base_channels=2", "--set", "batch_size=16"];

#[test]
fn synth_is_deterministic_and_tags_melange_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        ok(&["synth", "--out", out, "--n", "40", "--seed", "7", "--melange-prob", "0.5"], d);
    }
    let (a, b) = (tree(&d.join("a")), tree(&d.join("b")));
    assert_eq!(a.len(), 40 * 4);
    assert!(a == b);
    let winter = a
        .iter()
        .filter(|(p, bytes)| p.ends_with("header.txt") && String::from_utf8_lossy(bytes).contains("tag.season=winter"))
        .count();
    assert!((10..=30).contains(&winter), "{winter} of 40 winter scenes");
    let manifest = fs::read_to_string(d.join("a/manifest.txt")).unwrap();
    assert!(manifest.contains("command = synth") && manifest.contains("config.melange_prob = 0.5"));
}

#[test]
fn usage_and_missing_input_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&["synth", "--n", "3"], d), 2);
    assert_eq!(code(&["synth", "--out", "s", "--set", "melange_prob=2"], d), 2);
    assert_eq!(code(&["synth", "--out", "s", "--set", "bogus=1"], d), 2);
    fs::write(d.join("bad.cfg"), "epochs: 3\n").unwrap();
    assert_eq!(code(&["synth", "--out", "s", "--config", "bad.cfg"], d), 2);
    assert_eq!(code(&["synth", "--out", "s", "--config", "absent.cfg"], d), 3);
    assert_eq!(code(&["train", "--data", "absent", "--out", "r", "--toy"], d), 3);
    ok(&["synth", "--out", "scenes", "--n", "2"], d);
    assert_eq!(code(&["infer", "--checkpoint", "absent.ckpt", "--data", "scenes", "--out", "p"], d), 3);
    assert_eq!(code(&["train", "--data", "scenes", "--out", "r", "--toy", "--set", "patch=60"], d), 2);
    assert_eq!(code(&["evaluate", "--pred", "absent", "--gt", "scenes", "--out", "e"], d), 3);
    assert_eq!(code(&["--version"], d), 0);
}

#[test]
fn self_evaluation_of_ground_truth_fronts_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--out", "scenes", "--n", "4", "--seed", "2"], d);
    ok(&["delineate", "--zones", "scenes", "--out", "gt_fronts", "--jobs", "2"], d);
    let table = ok(&["evaluate", "--pred", "gt_fronts", "--gt", "gt_fronts", "--out", "eval"], d);
    assert!(table.contains("All"));
    let csv = fs::read_to_string(d.join("eval/metrics.csv")).unwrap();
    let all: Vec<&str> = csv.lines().last().unwrap().split(',').collect();
    assert_eq!(all[0], "All");
    assert_eq!(all[10], "0.000");
    assert_eq!(all[11], "0");
    assert_eq!(all[5], "1.000000");
}

#[test]
fn pipeline_runs_and_variants_give_different_rasters() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--out", "scenes", "--n", "4", "--seed", "5"], d);
    let mut preds = Vec::new();
    for variant in ["hooknet", "amd_hooknet"] {
        let run = format!("run_{variant}");
        let pred = format!("pred_{variant}");
        let mut args = vec!["train", "--data", "scenes", "--out", &run, "--variant", variant, "--seed", "1"];
        args.extend_from_slice(TINY);
        ok(&args, d);
        let ckpt = format!("{run}/model.ckpt");
        ok(&["infer", "--checkpoint", &ckpt, "--data", "scenes", "--out", &pred, "--toy"], d);
        preds.push(tree(&d.join(&pred)));
    }
    assert_eq!(preds[0].keys().collect::<Vec<_>>(), preds[1].keys().collect::<Vec<_>>());
    assert_ne!(preds[0], preds[1]);

    ok(&["infer", "--checkpoint", "run_amd_hooknet/model.ckpt", "--data", "scenes", "--out", "pred_jobs", "--toy", "--jobs", "3"], d);
    assert!(tree(&d.join("pred_jobs")) == preds[1]);

    ok(&["infer", "--checkpoint", "run_amd_hooknet/model.ckpt", "--data", "scenes", "--out", "pred_att", "--toy", "--dump-attention"], d);
    let att = d.join("pred_att/scene_0000/attention");
    let dumps: Vec<_> = fs::read_dir(&att).unwrap().collect();
    assert!(!dumps.is_empty());
    assert!(!d.join("pred_amd_hooknet/scene_0000/attention").exists());

    ok(&["delineate", "--zones", "pred_amd_hooknet", "--out", "fronts"], d);
    ok(&["evaluate", "--pred", "fronts", "--gt", "scenes", "--out", "eval", "--group-by", "season"], d);
    let report = fs::read_to_string(d.join("run_amd_hooknet/report.csv")).unwrap();
    assert!(report.starts_with("epoch,lr,loss_total"));
    for f in ["run_amd_hooknet", "pred_amd_hooknet", "fronts", "eval"] {
        assert!(d.join(f).join("manifest.txt").is_file(), "{f}");
    }
}

#[test]
fn ablate_emits_one_row_per_ladder_variant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--out", "scenes", "--n", "8", "--seed", "9"], d);
    let args = [
        "ablate", "--data", "scenes", "--test", "scenes", "--out", "abl", "--repeats", "1", "--toy", "--epochs", "4",
        "--set", "base_channels=4",
    ];
    let table = ok(&args, d);
    let ladder = ["hooknet", "hooknet_attention", "hooknet_deepsup", "hooknet_multihook_deepsup", "amd_hooknet"];
    let csv = fs::read_to_string(d.join("abl/ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    for (row, v) in rows.iter().zip(ladder) {
        assert!(row.starts_with(&format!("{v},1,")), "{row}");
        assert!(!row.contains("NA"), "{row}");
    }
    let order: Vec<usize> = ladder.iter().map(|v| table.find(&format!("\n{v} ")).unwrap()).collect();
    assert!(order.windows(2).all(|w| w[0] < w[1]));
}
