//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report is always printed.
//! Positional arguments select criteria by number; with none, all run.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use hooknet_core::attention::{AttentionHook, HookingStage, SelfAttention};
use hooknet_core::checkpoint;
use hooknet_core::frontline::{
    connected_components, extract_front, retain_ocean, Connectivity, FrontSet, ZoneMask, GLACIER, OCEAN,
};
use hooknet_core::losses::{cross_entropy, dice_loss, total_loss, LabelBatch, LossWeights, SupervisionBundle};
use hooknet_core::metrics::mde;
use hooknet_core::model::{ForwardOutputs, LayerShape};
use hooknet_core::nn::{
    grad_check, BatchNorm2d, Conv2d, ConvBlock, GradCheckOptions, Layer, MaxPool2, ParamVisitor, ParamVisitorMut,
    Parameterized, Phase, Relu, UpConv2,
};
use hooknet_core::raster::Raster;
use hooknet_core::synth::{generate_scene, read_scene, write_scene, SynthConfig};
use hooknet_core::{FeatureMap, Model, ModelConfig, Result, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Status {
    Pass,
    Fail,
    Warn,
}

struct Outcome {
    status: Status,
    detail: String,
}

fn verdict(ok: bool, detail: String) -> Outcome {
    Outcome {
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

type Criterion = fn() -> Outcome;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_map(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
    FeatureMap::from_fn(n, c, h, w, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, s: usize) -> LabelBatch {
    LabelBatch::new(n, s, s, (0..n * s * s).map(|_| rng.random_range(0..4u8)).collect()).unwrap()
}

fn hooknet(args: &[&str], cwd: &Path) -> std::result::Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hooknet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

/// Named column of the last CSV row whose first field is `row`.
fn csv_field(csv: &str, row: &str, column: &str) -> Option<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next()?.split(',').collect();
    let idx = header.iter().position(|h| *h == column)?;
    lines
        .rfind(|l| l.split(',').next() == Some(row))
        .and_then(|l| l.split(',').nth(idx).map(str::to_string))
}

// 1. Shape table at 288×288.

fn expected_rows() -> Vec<(&'static str, [usize; 3])> {
    vec![
        ("input", [288, 288, 1]),
        ("enc1", [288, 288, 32]),
        ("enc2", [144, 144, 64]),
        ("enc3", [72, 72, 128]),
        ("enc4", [36, 36, 256]),
        ("enc5", [18, 18, 320]),
        ("dec1", [36, 36, 256]),
        ("dec2", [72, 72, 128]),
        ("dec3", [144, 144, 64]),
        ("dec4", [288, 288, 32]),
        ("head", [288, 288, 4]),
    ]
}

fn shape_table() -> Outcome {
    let start = Instant::now();
    let mut model = Model::<f32>::new(&ModelConfig::default(), &mut rng(1)).unwrap();
    let x = FeatureMap::<f32>::zeros(1, 1, 288, 288);
    let trace = model.feature_shapes(&x, &x).unwrap();
    let elapsed = start.elapsed();
    let mut mismatches = Vec::new();
    for branch in ["context", "target"] {
        let got: Vec<&LayerShape> = trace.iter().filter(|s| s.branch == branch).collect();
        let want = expected_rows();
        if got.len() != want.len() {
            mismatches.push(format!("{branch}: {} rows", got.len()));
            continue;
        }
        for (g, (name, [h, w, c])) in got.iter().zip(want) {
            if g.layer != name || g.shape != [1, c, h, w] {
                mismatches.push(format!("{branch}.{}: {:?}", g.layer, g.shape));
            }
        }
    }
    verdict(
        mismatches.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} rows per branch, mismatches {:?}, forward {:.1} s",
            expected_rows().len(),
            mismatches,
            elapsed.as_secs_f64()
        ),
    )
}

// 2. Gradient suite.

struct AttentionProbe(SelfAttention<f64>);

impl Parameterized<f64> for AttentionProbe {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, f64>) {
        self.0.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, f64>) {
        self.0.visit_mut(prefix, f);
    }
}

impl Layer<f64> for AttentionProbe {
    fn forward(&mut self, x: &FeatureMap<f64>, phase: Phase) -> Result<FeatureMap<f64>> {
        self.0.forward(x, phase)
    }
    fn backward(&mut self, dy: &FeatureMap<f64>) -> Result<FeatureMap<f64>> {
        self.0.backward(dy)
    }
}

/// The hooking composite as a function of one of its two inputs.
struct HookProbe {
    hook: AttentionHook<f64>,
    fixed: FeatureMap<f64>,
    vary_target: bool,
}

impl Parameterized<f64> for HookProbe {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, f64>) {
        self.hook.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, f64>) {
        self.hook.visit_mut(prefix, f);
    }
}

impl Layer<f64> for HookProbe {
    fn forward(&mut self, x: &FeatureMap<f64>, phase: Phase) -> Result<FeatureMap<f64>> {
        let (t, c) = if self.vary_target { (x, &self.fixed) } else { (&self.fixed, x) };
        self.hook.forward(&HookingStage::new(1, t, c)?, phase)
    }
    fn backward(&mut self, dy: &FeatureMap<f64>) -> Result<FeatureMap<f64>> {
        let (dt, dc) = self.hook.backward(dy)?;
        Ok(if self.vary_target { dt } else { dc })
    }
}

/// Model plus joint loss, as a scalar function of one input patch.
struct ModelProbe {
    model: Model<f64>,
    fixed: FeatureMap<f64>,
    vary_target: bool,
    sup: SupervisionBundle,
    outs: Option<ForwardOutputs<f64>>,
}

impl Parameterized<f64> for ModelProbe {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, f64>) {
        self.model.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, f64>) {
        self.model.visit_mut(prefix, f);
    }
}

impl Layer<f64> for ModelProbe {
    fn forward(&mut self, x: &FeatureMap<f64>, phase: Phase) -> Result<FeatureMap<f64>> {
        let (t, c) = if self.vary_target { (x, &self.fixed) } else { (&self.fixed, x) };
        let outs = self.model.forward(t, c, phase)?;
        let total = total_loss(&outs, &self.sup, &LossWeights::default())?.total;
        self.outs = Some(outs);
        Ok(FeatureMap::filled(1, 1, 1, 1, total))
    }
    fn backward(&mut self, dy: &FeatureMap<f64>) -> Result<FeatureMap<f64>> {
        let outs = self.outs.as_ref().expect("forward first");
        let (_, mut g) = hooknet_core::losses::total_loss_with_grad(outs, &self.sup, &LossWeights::default())?;
        let s = dy.as_slice()[0];
        let scale = |m: &mut FeatureMap<f64>| m.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        scale(&mut g.target);
        g.context.iter_mut().for_each(scale);
        g.deep.iter_mut().for_each(|d| scale(&mut d.logits));
        let (dt, dc) = self.model.backward(&g)?;
        Ok(if self.vary_target { dt } else { dc.expect("context gradient") })
    }
}

const GRAD_EPS: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-3;

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let full = GradCheckOptions::default();
    let mut results: Vec<(String, f64)> = Vec::new();
    let mut r = rng(2);
    let mut check = |name: &str, op: &mut dyn Layer<f64>, x: FeatureMap<f64>, opts: &GradCheckOptions| {
        let err = grad_check(op, &x, GRAD_EPS, opts).unwrap_or(f64::INFINITY);
        results.push((name.to_string(), err));
    };

    let x = random_map(&mut r, 2, 3, 6, 6);
    check("conv3x3", &mut Conv2d::<f64>::new(3, 4, 3, &mut r), x.clone(), &full);
    check("conv1x1", &mut Conv2d::<f64>::new(3, 4, 1, &mut r), x.clone(), &full);
    check("batchnorm", &mut BatchNorm2d::<f64>::new(3), x.clone(), &full);
    check("relu", &mut Relu::default(), x.clone(), &full);
    check("maxpool", &mut MaxPool2::default(), x.clone(), &full);
    check("upconv", &mut UpConv2::<f64>::new(3, 2, &mut r), x.clone(), &full);
    check("convblock", &mut ConvBlock::<f64>::new(3, 4, &mut r), x.clone(), &full);
    for cap in [None, Some(9)] {
        let name = format!("self_attention(cap {cap:?})");
        check(&name, &mut AttentionProbe(SelfAttention::new(3, cap, &mut r)), x.clone(), &full);
    }
    for vary_target in [true, false] {
        let t = random_map(&mut r, 2, 3, 4, 4);
        let c = random_map(&mut r, 2, 2, 8, 8);
        let (x, fixed) = if vary_target { (t, c) } else { (c, t) };
        let mut probe = HookProbe {
            hook: AttentionHook::with_attention(3, 2, None, &mut r),
            fixed,
            vary_target,
        };
        check(&format!("attention_hook(d/d{})", if vary_target { "target" } else { "context" }), &mut probe, x, &full);
    }

    let sampled = GradCheckOptions {
        max_entries_per_tensor: Some(8),
        ..GradCheckOptions::default()
    };
    for (i, v) in Variant::ALL.into_iter().enumerate() {
        for vary_target in [true, false] {
            if !vary_target && !v.layout().context_branch {
                continue;
            }
            let mut mr = rng(100 + i as u64);
            let model = Model::<f64>::new(&ModelConfig::toy(v, 2), &mut mr).unwrap();
            let t = random_map(&mut mr, 2, 1, 16, 16);
            let c = random_map(&mut mr, 2, 1, 16, 16);
            let sup = SupervisionBundle::new(random_labels(&mut mr, 2, 16), random_labels(&mut mr, 2, 16)).unwrap();
            let (x, fixed) = if vary_target { (t, c) } else { (c, t) };
            let mut probe = ModelProbe {
                model,
                fixed,
                vary_target,
                sup,
                outs: None,
            };
            let opts = GradCheckOptions {
                seed: 100 + i as u64,
                ..sampled.clone()
            };
            check(&format!("model {v} (d/d{})", if vary_target { "target" } else { "context" }), &mut probe, x, &opts);
        }
    }
    let elapsed = start.elapsed();
    let (worst_name, worst) = results
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap_or_default();
    let failing: Vec<&str> = results.iter().filter(|(_, e)| e.is_nan() || *e > GRAD_TOL).map(|(n, _)| n.as_str()).collect();
    verdict(
        failing.is_empty() && elapsed < Duration::from_secs(300),
        format!(
            "{} checks, worst {worst:.2e} ({worst_name}), failing {failing:?}, {:.1} s",
            results.len(),
            elapsed.as_secs_f64()
        ),
    )
}

// 3. Attention normalization and dense oracle.

fn dense_weights(att: &SelfAttention<f64>, m: &FeatureMap<f64>, b: usize) -> Vec<f64> {
    let (c, t, dk) = (m.channels(), m.plane(), att.key_dim());
    let x = m.sample(b);
    let project = |w: &[f64], bias: &[f64]| -> Vec<Vec<f64>> {
        (0..t)
            .map(|tok| (0..dk).map(|d| bias[d] + (0..c).map(|ch| w[d * c + ch] * x[ch * t + tok]).sum::<f64>()).collect())
            .collect()
    };
    let q = project(&att.q_proj.value, &att.q_bias.value);
    let k = project(&att.k_proj.value, &att.k_bias.value);
    let mut out = Vec::with_capacity(t * t);
    for qi in &q {
        let s: Vec<f64> = k
            .iter()
            .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt())
            .collect();
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    out
}

fn attention_oracle() -> Outcome {
    let mut r = rng(3);
    let (mut worst_row, mut worst_oracle, mut maps) = (0.0f64, 0.0f64, 0usize);
    let mut row_check = |weights: &[f32], t: usize| {
        for row in weights.chunks(t) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            worst_row = worst_row.max((s - 1.0).abs());
        }
    };
    for case in 0..40 {
        let (h, w) = (r.random_range(1..7), r.random_range(1..7));
        let c = r.random_range(1..10);
        let mut att = SelfAttention::<f64>::new(c, None, &mut r);
        att.record_weights = true;
        let m = FeatureMap::from_fn(2, c, h, w, |_, _, _, _| r.random_range(-3.0..3.0));
        att.forward(&m, Phase::Infer).unwrap();
        for (b, map) in att.recorded_weights().iter().enumerate() {
            row_check(&map.weights, map.tokens());
            let dense = dense_weights(&att, &m, b);
            for (a, d) in map.weights.iter().zip(&dense) {
                worst_oracle = worst_oracle.max((*a as f64 - d).abs());
            }
            maps += 1;
        }
        // Pooled path: rows still normalized.
        let mut capped = SelfAttention::<f64>::new(c, Some(4 + case % 5), &mut r);
        capped.record_weights = true;
        let big = FeatureMap::from_fn(1, c, 2 * h + 4, 2 * w + 4, |_, _, _, _| r.random_range(-3.0..3.0));
        capped.forward(&big, Phase::Infer).unwrap();
        for map in capped.recorded_weights() {
            row_check(&map.weights, map.tokens());
            maps += 1;
        }
    }
    let mut model = Model::<f32>::new(&ModelConfig::toy(Variant::AmdHookNet, 8), &mut r).unwrap();
    model.set_record_attention(true);
    let x = FeatureMap::<f32>::from_fn(2, 1, 64, 64, |_, _, _, _| r.random_range(0.0..1.0));
    model.forward(&x, &x, Phase::Infer).unwrap();
    for (_, ms) in model.recorded_attention() {
        for map in ms {
            row_check(&map.weights, map.tokens());
            maps += 1;
        }
    }
    verdict(
        worst_row <= 1e-6 && worst_oracle <= 1e-6,
        format!("{maps} maps, worst row-sum error {worst_row:.1e}, worst oracle error {worst_oracle:.1e}"),
    )
}

// 4. Geometry oracles.

const NEIGHBOURS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

fn step(r: usize, c: usize, (dr, dc): (isize, isize), h: usize, w: usize) -> Option<(usize, usize)> {
    let (nr, nc) = (r as isize + dr, c as isize + dc);
    (nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w).then_some((nr as usize, nc as usize))
}

/// Components in raster order of their first pixel, by breadth-first fill.
fn flood_components(mask: &Raster<bool>) -> Vec<BTreeSet<(usize, usize)>> {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut comps = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) || seen[r * w + c] {
                continue;
            }
            let mut comp = BTreeSet::new();
            let mut queue = VecDeque::from([(r, c)]);
            seen[r * w + c] = true;
            while let Some((y, x)) = queue.pop_front() {
                comp.insert((y, x));
                for d in NEIGHBOURS {
                    if let Some((ny, nx)) = step(y, x, d, h, w) {
                        if mask.get(ny, nx) && !seen[ny * w + nx] {
                            seen[ny * w + nx] = true;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            comps.push(comp);
        }
    }
    comps
}

fn random_zones(r: &mut ChaCha8Rng) -> Raster<u8> {
    if r.random_bool(0.5) {
        return Raster::from_fn(16, 16, |_, _| r.random_range(0..4u8));
    }
    let mut z = Raster::filled(16, 16, r.random_range(0..4u8));
    for _ in 0..r.random_range(1..8) {
        let (top, left) = (r.random_range(0..16), r.random_range(0..16));
        let (bh, bw) = (r.random_range(1..8), r.random_range(1..8));
        let v = r.random_range(0..4u8);
        for y in top..(top + bh).min(16) {
            for x in left..(left + bw).min(16) {
                z.set(y, x, v);
            }
        }
    }
    z
}

fn geometry_oracles() -> Outcome {
    let mut r = rng(4);
    let (mut cc_bad, mut retain_bad, mut front_bad) = (0, 0, 0);
    for _ in 0..500 {
        let labels = random_zones(&mut r);
        let zm = ZoneMask::new(labels.clone(), 20.0).unwrap();

        let class = r.random_range(0..4u8);
        let mask = labels.map(|v| v == class || v == OCEAN);
        let comps = connected_components(&mask, Connectivity::Four);
        let oracle = flood_components(&mask);
        let mut got: BTreeMap<u32, BTreeSet<(usize, usize)>> = BTreeMap::new();
        for y in 0..16 {
            for x in 0..16 {
                let id = comps.labels.get(y, x);
                if (id != 0) != mask.get(y, x) {
                    cc_bad += 1;
                }
                if id != 0 {
                    got.entry(id).or_default().insert((y, x));
                }
            }
        }
        let got_sets: BTreeSet<BTreeSet<(usize, usize)>> = got.values().cloned().collect();
        let want_sets: BTreeSet<BTreeSet<(usize, usize)>> = oracle.iter().cloned().collect();
        let sizes_ok = got.iter().all(|(id, px)| comps.sizes.get(*id as usize - 1) == Some(&px.len()));
        if got_sets != want_sets || comps.count() != oracle.len() || !sizes_ok {
            cc_bad += 1;
        }

        let oceans = flood_components(&labels.map(|v| v == OCEAN));
        let mut expect = labels.clone();
        if let Some(keep) = oceans.iter().enumerate().max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0))) {
            for (i, comp) in oceans.iter().enumerate() {
                if i != keep.0 {
                    comp.iter().for_each(|&(y, x)| expect.set(y, x, GLACIER));
                }
            }
        }
        let kept = retain_ocean(&zm);
        if kept.mask.labels != expect || kept.no_ocean != oceans.is_empty() {
            retain_bad += 1;
        }

        let front = extract_front(&zm);
        let mut want = BTreeSet::new();
        for y in 0..16 {
            for x in 0..16 {
                let touches = NEIGHBOURS
                    .iter()
                    .filter_map(|&d| step(y, x, d, 16, 16))
                    .any(|(ny, nx)| labels.get(ny, nx) == OCEAN);
                if labels.get(y, x) == GLACIER && touches {
                    want.insert((y, x));
                }
            }
        }
        if front.pixels != want {
            front_bad += 1;
        }
    }
    verdict(
        cc_bad + retain_bad + front_bad == 0,
        format!("500 rasters; mismatches: components {cc_bad}, retain_ocean {retain_bad}, extract_front {front_bad}"),
    )
}

// 5. MDE oracle.

fn all_pairs_mde(p: &FrontSet, q: &FrontSet) -> f64 {
    let nearest = |from: &BTreeSet<(usize, usize)>, to: &BTreeSet<(usize, usize)>| -> f64 {
        from.iter()
            .map(|&(a, b)| {
                to.iter()
                    .map(|&(c, d)| ((a as f64 - c as f64).powi(2) + (b as f64 - d as f64).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum()
    };
    p.resolution_m * (nearest(&p.pixels, &q.pixels) + nearest(&q.pixels, &p.pixels)) / (p.len() + q.len()) as f64
}

fn mde_oracle() -> Outcome {
    let mut r = rng(5);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let side = if i % 4 == 0 { 256 } else { 64 };
        let max_len = if i % 4 == 0 { 400 } else { 60 };
        let res = [10.0, 20.0, 50.0][i % 3];
        let front = |r: &mut ChaCha8Rng| {
            let n = r.random_range(1..max_len);
            FrontSet::new((0..n).map(|_| (r.random_range(0..side), r.random_range(0..side))), res)
        };
        let (p, q) = (front(&mut r), front(&mut r));
        let got = mde(&[(p.clone(), q.clone())]).unwrap().0.unwrap();
        let want = all_pairs_mde(&p, &q);
        worst = worst.max((got - want).abs() / want.abs().max(f64::MIN_POSITIVE));
    }
    let p = FrontSet::new([(0, 0)], 20.0);
    let q = FrontSet::new([(3, 4)], 20.0);
    let pythagoras = mde(&[(p.clone(), q)]).unwrap().0;
    let big = FrontSet::new((0..50).map(|i| (i, (i * 7) % 40)), 20.0);
    let same = mde(&[(big.clone(), big)]).unwrap().0;
    verdict(
        worst <= 1e-9 && pythagoras == Some(100.0) && same == Some(0.0),
        format!("200 pairs, worst relative error {worst:.1e}; 3-4-5 case {pythagoras:?} m; P=Q {same:?} m"),
    )
}

// 6. Loss anchors.

fn loss_anchors() -> Outcome {
    let mut r = rng(6);
    let labels = random_labels(&mut r, 2, 8);
    let uniform = FeatureMap::<f64>::zeros(2, 4, 8, 8);
    let ce_uniform = cross_entropy(&uniform, &labels).unwrap();

    let onehot = FeatureMap::<f64>::from_fn(2, 4, 8, 8, |b, k, y, x| {
        if labels.as_slice()[b * 64 + y * 8 + x] as usize == k {
            20.0
        } else {
            0.0
        }
    });
    let perfect = cross_entropy(&onehot, &labels).unwrap() + dice_loss(&onehot, &labels).unwrap();

    let mut model = Model::<f64>::new(&ModelConfig::toy(Variant::AmdHookNet, 2), &mut r).unwrap();
    let (t, c) = (random_map(&mut r, 2, 1, 32, 32), random_map(&mut r, 2, 1, 32, 32));
    let outs = model.forward(&t, &c, Phase::Infer).unwrap();
    let sup = SupervisionBundle::new(random_labels(&mut r, 2, 32), random_labels(&mut r, 2, 32)).unwrap();
    let w = |a: f64, b: f64, c: f64| LossWeights {
        lambda1: a,
        lambda2: b,
        lambda3: c,
    };
    let unit: Vec<f64> = [w(1.0, 0.0, 0.0), w(0.0, 1.0, 0.0), w(0.0, 0.0, 1.0)]
        .iter()
        .map(|wt| total_loss(&outs, &sup, wt).unwrap().total)
        .collect();
    let mut linearity = 0.0f64;
    for _ in 0..20 {
        let (a, b, cc) = (r.random_range(0.0..3.0), r.random_range(0.0..3.0), r.random_range(0.0..3.0));
        let got = total_loss(&outs, &sup, &w(a, b, cc)).unwrap().total;
        let want = a * unit[0] + b * unit[1] + cc * unit[2];
        linearity = linearity.max((got - want).abs() / want.abs());
    }
    let bd = total_loss(&outs, &sup, &LossWeights::default()).unwrap();
    let terms = bd.terms();
    let dw = LossWeights::default();
    let resum = terms
        .iter()
        .map(|(name, v)| match name.as_str() {
            "target" => dw.lambda1 * v,
            "context" => dw.lambda2 * v,
            _ => dw.lambda3 * v,
        })
        .sum::<f64>();
    let resum_err = (resum - bd.total).abs();
    verdict(
        (ce_uniform - 4f64.ln()).abs() <= 1e-6 && perfect < 1e-3 && linearity <= 1e-12 && terms.len() == 5 && resum_err <= 1e-9,
        format!(
            "uniform CE {ce_uniform:.9} (ln 4 = {:.9}); perfect CE+Dice {perfect:.1e}; λ-linearity {linearity:.1e}; {} terms re-sum to within {resum_err:.1e}",
            4f64.ln(),
            terms.len()
        ),
    )
}

// 7. Toy end-to-end.

const TOY_IOU_MIN: f64 = 0.9;
const TOY_MDE_MAX_PX: f64 = 5.0;
const TOY_RESOLUTION_M: f64 = 50.0;

fn toy_end_to_end() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let steps: [&[&str]; 6] = [
        &["synth", "--out", "train_scenes", "--n", "50", "--seed", "7", "--melange-prob", "0"],
        &["synth", "--out", "test_scenes", "--n", "20", "--seed", "1000", "--melange-prob", "0"],
        &["train", "--data", "train_scenes", "--out", "run", "--toy", "--variant", "amd_hooknet", "--seed", "7"],
        &["infer", "--checkpoint", "run/model.ckpt", "--data", "test_scenes", "--out", "pred", "--toy"],
        &["delineate", "--zones", "pred", "--out", "pred_fronts"],
        &["evaluate", "--pred", "pred_fronts", "--gt", "test_scenes", "--out", "eval"],
    ];
    for args in steps {
        if let Err(e) = hooknet(args, d) {
            return verdict(false, e);
        }
    }
    let csv = fs::read_to_string(d.join("eval/metrics.csv")).unwrap();
    let iou = csv_field(&csv, "All", "iou").and_then(|v| v.parse::<f64>().ok());
    let mde_m = csv_field(&csv, "All", "mde_m").and_then(|v| v.parse::<f64>().ok());
    let empty = csv_field(&csv, "All", "empty").unwrap_or_default();
    let elapsed = start.elapsed();
    let max_m = TOY_MDE_MAX_PX * TOY_RESOLUTION_M;
    verdict(
        iou.is_some_and(|v| v > TOY_IOU_MIN) && mde_m.is_some_and(|v| v < max_m) && elapsed < Duration::from_secs(900),
        format!(
            "held-out macro IoU {iou:?} (> {TOY_IOU_MIN}), MDE {mde_m:?} m (< {max_m} m), ∅ {empty}, {:.0} s",
            elapsed.as_secs_f64()
        ),
    )
}

// 8. Ablation direction.

fn ablation_direction() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let steps: [&[&str]; 3] = [
        &["synth", "--out", "scenes", "--n", "20", "--seed", "11", "--melange-prob", "0.5"],
        &["synth", "--out", "test", "--n", "12", "--seed", "2000", "--melange-prob", "0.5"],
        &[
            "ablate", "--data", "scenes", "--test", "test", "--out", "abl", "--toy", "--repeats", "3", "--epochs", "8",
            "--variants", "hooknet,amd_hooknet", "--seed", "7",
        ],
    ];
    for args in steps {
        if let Err(e) = hooknet(args, d) {
            return verdict(false, e);
        }
    }
    let csv = fs::read_to_string(d.join("abl/ablation.csv")).unwrap();
    let mean = |v: &str| csv_field(&csv, v, "mde_m_mean").and_then(|s| s.parse::<f64>().ok());
    let (amd, base) = (mean("amd_hooknet"), mean("hooknet"));
    let ordered = matches!((amd, base), (Some(a), Some(b)) if a <= b);
    Outcome {
        status: if ordered { Status::Pass } else { Status::Warn },
        detail: format!(
            "mean MDE over 3 repeats: amd_hooknet {amd:?} m, hooknet {base:?} m{}",
            if ordered { "" } else { " (ordering differs; soft warning)" }
        ),
    }
}

// 9. Determinism.

fn without_wall_time(text: &str) -> String {
    text.lines().filter(|l| !l.starts_with("wall_seconds")).collect::<Vec<_>>().join("\n")
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    if let Err(e) = hooknet(&["synth", "--out", "scenes", "--n", "6", "--seed", "3"], d) {
        return verdict(false, e);
    }
    for run in ["run_a", "run_b"] {
        let args = [
            "train", "--data", "scenes", "--out", run, "--toy", "--seed", "7", "--epochs", "3", "--set", "base_channels=4",
        ];
        if let Err(e) = hooknet(&args, d) {
            return verdict(false, e);
        }
    }
    let same = |f: &str| fs::read(d.join("run_a").join(f)).ok() == fs::read(d.join("run_b").join(f)).ok();
    let manifest = |r: &str| {
        let text = fs::read_to_string(d.join(r).join("manifest.txt")).unwrap_or_default();
        without_wall_time(&text).replace(r, "RUN")
    };
    let (ckpt, report) = (same("model.ckpt"), same("report.csv"));
    let manifests = manifest("run_a") == manifest("run_b");
    verdict(
        ckpt && report && manifests,
        format!("checkpoint identical {ckpt}, report identical {report}, manifests identical up to wall time and output path {manifests}"),
    )
}

// 10. Round trips.

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect()
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut r = rng(10);
    let mut scene_ok = 0;
    for seed in 0..5 {
        let scene = generate_scene(&SynthConfig {
            seed,
            melange_prob: 0.5,
            ..SynthConfig::default()
        })
        .unwrap();
        let (a, b) = (d.join(format!("s{seed}_a")), d.join(format!("s{seed}_b")));
        write_scene(&scene, &a).unwrap();
        write_scene(&read_scene(&a).unwrap(), &b).unwrap();
        let c = d.join(format!("s{seed}_c"));
        write_scene(&read_scene(&b).unwrap(), &c).unwrap();
        scene_ok += usize::from(dir_bytes(&b) == dir_bytes(&c) && dir_bytes(&a) == dir_bytes(&b));
    }

    let mut front_ok = 0;
    for i in 0..20 {
        let n = r.random_range(0..200);
        let f = FrontSet::new((0..n).map(|_| (r.random_range(0..500), r.random_range(0..500))), [12.5, 20.0, 0.1][i % 3]);
        let paths: Vec<_> = (0..3).map(|k| d.join(format!("front{i}_{k}.txt"))).collect();
        f.write(&paths[0]).unwrap();
        FrontSet::read(&paths[0]).unwrap().write(&paths[1]).unwrap();
        FrontSet::read(&paths[1]).unwrap().write(&paths[2]).unwrap();
        front_ok += usize::from(fs::read(&paths[1]).unwrap() == fs::read(&paths[2]).unwrap());
    }

    let mut ckpt_ok = 0;
    for (i, v) in Variant::ALL.into_iter().enumerate() {
        let model = Model::<f32>::new(&ModelConfig::toy(v, 4), &mut r).unwrap();
        let paths: Vec<_> = (0..3).map(|k| d.join(format!("m{i}_{k}.ckpt"))).collect();
        checkpoint::save(&model, &paths[0]).unwrap();
        checkpoint::save(&checkpoint::load(&paths[0]).unwrap(), &paths[1]).unwrap();
        checkpoint::save(&checkpoint::load(&paths[1]).unwrap(), &paths[2]).unwrap();
        let bytes: Vec<_> = paths.iter().map(|p| fs::read(p).unwrap()).collect();
        ckpt_ok += usize::from(bytes[1] == bytes[2] && bytes[0] == bytes[1]);
    }
    verdict(
        scene_ok == 5 && front_ok == 20 && ckpt_ok == Variant::ALL.len(),
        format!("scenes {scene_ok}/5, fronts {front_ok}/20, checkpoints {ckpt_ok}/{}", Variant::ALL.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, Criterion); 10] = [
        (1, "shape table", shape_table),
        (2, "gradient suite", gradient_suite),
        (3, "attention normalization and oracle", attention_oracle),
        (4, "geometry oracles", geometry_oracles),
        (5, "MDE oracle", mde_oracle),
        (6, "loss anchors", loss_anchors),
        (7, "toy end-to-end", toy_end_to_end),
        (8, "ablation direction", ablation_direction),
        (9, "determinism", determinism),
        (10, "round trips", round_trips),
    ];
    let positional: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Option<BTreeSet<u32>> = if positional.is_empty() || positional.iter().any(|a| a == "acceptance") {
        None
    } else {
        Some(positional.iter().filter_map(|a| a.parse().ok()).collect())
    };

    let mut failed = 0;
    let mut ran = 0;
    for (n, name, f) in criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let tag = match outcome.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Warn => "WARN",
        };
        println!(
            "{tag} criterion {n:>2} {name}: {} [{:.1} s]",
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(outcome.status == Status::Fail);
        ran += 1;
    }
    println!("acceptance: {ran} criteria run, {failed} failed");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
