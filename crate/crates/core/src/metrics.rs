//! Pixel metrics per zone class and the mean distance error between fronts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::frontline::{FrontSet, ZoneMask, ZONE_CLASSES};

pub const CLASS_NAMES: [&str; ZONE_CLASSES] = ["na", "rock", "glacier", "ocean"];

/// Front sizes above which the grid index replaces the all-pairs scan.
const BRUTE_FORCE_LIMIT: usize = 64 * 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// One-vs-rest counts for every class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub classes: Vec<ClassCounts>,
}

impl Default for ConfusionCounts {
    fn default() -> Self {
        ConfusionCounts {
            classes: vec![ClassCounts::default(); ZONE_CLASSES],
        }
    }
}

impl ConfusionCounts {
    pub fn add(&mut self, other: &ConfusionCounts) {
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
            a.tn += b.tn;
        }
    }
}

pub fn confusion(pred: &ZoneMask, gt: &ZoneMask) -> Result<ConfusionCounts> {
    if pred.labels.dims() != gt.labels.dims() {
        return Err(Error::shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.labels.dims(),
            gt.labels.dims()
        )));
    }
    let mut pairs = [[0u64; ZONE_CLASSES]; ZONE_CLASSES];
    for (&p, &g) in pred.labels.as_slice().iter().zip(gt.labels.as_slice()) {
        pairs[p as usize][g as usize] += 1;
    }
    let total = pred.labels.len() as u64;
    let classes = (0..ZONE_CLASSES)
        .map(|k| {
            let tp = pairs[k][k];
            let pred_k: u64 = pairs[k].iter().sum();
            let gt_k: u64 = pairs.iter().map(|row| row[k]).sum();
            let (fp, fn_) = (pred_k - tp, gt_k - tp);
            ClassCounts {
                tp,
                fp,
                fn_,
                tn: total - tp - fp - fn_,
            }
        })
        .collect();
    Ok(ConfusionCounts { classes })
}

/// Each metric is `None` where its denominator is zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub iou: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ClassMetrics {
    pub fn from_counts(c: &ClassCounts) -> Self {
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        // Equals 2PR/(P+R) when P+R > 0 and tends to 0 when both vanish.
        let f1 = match (precision, recall) {
            (Some(_), Some(_)) => ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            _ => None,
        };
        ClassMetrics {
            precision,
            recall,
            f1,
            iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMetrics {
    pub per_class: Vec<ClassMetrics>,
    /// Mean over classes where the metric is defined.
    pub macro_avg: ClassMetrics,
    /// Number of undefined per-class values left out of the macro averages.
    pub undefined: usize,
}

pub fn segmentation_metrics(c: &ConfusionCounts) -> SegmentationMetrics {
    let per_class: Vec<ClassMetrics> = c.classes.iter().map(ClassMetrics::from_counts).collect();
    let mut undefined = 0;
    let mut avg = |get: fn(&ClassMetrics) -> Option<f64>| {
        let vals: Vec<f64> = per_class.iter().filter_map(get).collect();
        undefined += per_class.len() - vals.len();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let macro_avg = ClassMetrics {
        precision: avg(|m| m.precision),
        recall: avg(|m| m.recall),
        f1: avg(|m| m.f1),
        iou: avg(|m| m.iou),
    };
    SegmentationMetrics {
        per_class,
        macro_avg,
        undefined,
    }
}

/// Bucketed point set for nearest-neighbour queries.
struct GridIndex {
    cell: f64,
    origin: (isize, isize),
    dims: (isize, isize),
    buckets: Vec<Vec<(f64, f64)>>,
}

impl GridIndex {
    fn new(points: &BTreeSet<(usize, usize)>) -> Self {
        let min_r = points.iter().map(|p| p.0).min().unwrap_or(0) as isize;
        let max_r = points.iter().map(|p| p.0).max().unwrap_or(0) as isize;
        let min_c = points.iter().map(|p| p.1).min().unwrap_or(0) as isize;
        let max_c = points.iter().map(|p| p.1).max().unwrap_or(0) as isize;
        let area = ((max_r - min_r + 1) * (max_c - min_c + 1)) as f64;
        let cell = (area / points.len().max(1) as f64).sqrt().ceil().max(1.0);
        let s = cell as isize;
        let dims = ((max_r - min_r) / s + 1, (max_c - min_c) / s + 1);
        let mut buckets = vec![Vec::new(); (dims.0 * dims.1) as usize];
        for &(r, c) in points {
            let (br, bc) = ((r as isize - min_r) / s, (c as isize - min_c) / s);
            buckets[(br * dims.1 + bc) as usize].push((r as f64, c as f64));
        }
        GridIndex {
            cell,
            origin: (min_r, min_c),
            dims,
            buckets,
        }
    }

    fn nearest(&self, r: f64, c: f64) -> f64 {
        let s = self.cell;
        let qr = ((r - self.origin.0 as f64) / s).floor() as isize;
        let qc = ((c - self.origin.1 as f64) / s).floor() as isize;
        let max_ring = [qr, self.dims.0 - 1 - qr, qc, self.dims.1 - 1 - qc]
            .iter()
            .map(|v| v.abs())
            .max()
            .unwrap_or(0)
            + self.dims.0.max(self.dims.1);
        let mut best = f64::INFINITY;
        for k in 0..=max_ring {
            for br in qr - k..=qr + k {
                if br < 0 || br >= self.dims.0 {
                    continue;
                }
                let edge = br == qr - k || br == qr + k;
                let step = if edge { 1 } else { 2 * k.max(1) };
                let mut bc = qc - k;
                while bc <= qc + k {
                    if bc >= 0 && bc < self.dims.1 {
                        for &(pr, pc) in &self.buckets[(br * self.dims.1 + bc) as usize] {
                            best = best.min(((pr - r).powi(2) + (pc - c).powi(2)).sqrt());
                        }
                    }
                    bc += step;
                }
            }
            // Cells beyond ring k lie at least k cell widths away.
            if best <= k as f64 * s {
                break;
            }
        }
        best
    }
}

fn nearest_sum_brute(from: &BTreeSet<(usize, usize)>, to: &BTreeSet<(usize, usize)>) -> f64 {
    from.iter()
        .map(|&(r, c)| {
            to.iter()
                .map(|&(r2, c2)| ((r as f64 - r2 as f64).powi(2) + (c as f64 - c2 as f64).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Sum over `from` of the distance to the nearest pixel of `to`, in pixels.
pub fn nearest_distance_sum(from: &BTreeSet<(usize, usize)>, to: &BTreeSet<(usize, usize)>) -> f64 {
    if from.len() * to.len() <= BRUTE_FORCE_LIMIT {
        return nearest_sum_brute(from, to);
    }
    let index = GridIndex::new(to);
    from.iter().map(|&(r, c)| index.nearest(r as f64, c as f64)).sum()
}

/// Accumulated front distances over a set of images.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MdeAccumulator {
    /// Σ over images of resolution · (Σ_P min_Q + Σ_Q min_P).
    pub distance_sum_m: f64,
    /// Σ over images of |P| + |Q|.
    pub point_count: usize,
    /// Images whose prediction had no front.
    pub empty: usize,
}

impl MdeAccumulator {
    /// Adds one (ground truth `p`, prediction `q`) pair.
    pub fn push(&mut self, p: &FrontSet, q: &FrontSet) -> Result<()> {
        if p.is_empty() {
            return Err(Error::Data("ground-truth front is empty".into()));
        }
        if q.is_empty() {
            self.empty += 1;
            return Ok(());
        }
        if p.resolution_m != q.resolution_m {
            return Err(Error::Data(format!(
                "front resolutions differ: {} vs {}",
                p.resolution_m, q.resolution_m
            )));
        }
        let d = nearest_distance_sum(&p.pixels, &q.pixels) + nearest_distance_sum(&q.pixels, &p.pixels);
        self.distance_sum_m += d * p.resolution_m;
        self.point_count += p.len() + q.len();
        Ok(())
    }

    pub fn merge(&mut self, other: &MdeAccumulator) {
        self.distance_sum_m += other.distance_sum_m;
        self.point_count += other.point_count;
        self.empty += other.empty;
    }

    /// Mean distance error in meters, undefined without a valid pair.
    pub fn mde_m(&self) -> Option<f64> {
        (self.point_count > 0).then(|| self.distance_sum_m / self.point_count as f64)
    }
}

/// Mean distance error over `(ground truth, prediction)` pairs and the
/// count of predictions without a front.
pub fn mde(fronts: &[(FrontSet, FrontSet)]) -> Result<(Option<f64>, usize)> {
    let mut acc = MdeAccumulator::default();
    for (p, q) in fronts {
        acc.push(p, q)?;
    }
    Ok((acc.mde_m(), acc.empty))
}

/// Per-scene evaluation inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub tags: BTreeMap<String, String>,
    pub confusion: Option<ConfusionCounts>,
    pub gt_front: FrontSet,
    pub pred_front: FrontSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub group: String,
    pub scenes: usize,
    pub segmentation: Option<SegmentationMetrics>,
    pub mde_m: Option<f64>,
    pub empty: usize,
}

fn aggregate(group: &str, records: &[&SceneRecord]) -> Result<MetricsReport> {
    let mut conf: Option<ConfusionCounts> = None;
    let mut acc = MdeAccumulator::default();
    for r in records {
        if let Some(c) = &r.confusion {
            conf.get_or_insert_with(ConfusionCounts::default).add(c);
        }
        acc.push(&r.gt_front, &r.pred_front)
            .map_err(|e| Error::Data(format!("scene {}: {e}", r.id)))?;
    }
    Ok(MetricsReport {
        group: group.to_string(),
        scenes: records.len(),
        segmentation: conf.as_ref().map(segmentation_metrics),
        mde_m: acc.mde_m(),
        empty: acc.empty,
    })
}

/// One row per value of `group_by` (sorted), then an `All` row. Pixel counts
/// and front distances are pooled, not averaged per scene.
pub fn grouped_report(records: &[SceneRecord], group_by: Option<&str>) -> Result<Vec<MetricsReport>> {
    let mut rows = Vec::new();
    if let Some(tag) = group_by {
        let mut groups: BTreeMap<&str, Vec<&SceneRecord>> = BTreeMap::new();
        for r in records {
            let v = r
                .tags
                .get(tag)
                .ok_or_else(|| Error::config(format!("scene {} has no tag `{tag}`", r.id)))?;
            groups.entry(v).or_default().push(r);
        }
        for (v, rs) in groups {
            rows.push(aggregate(v, &rs)?);
        }
    }
    rows.push(aggregate("All", &records.iter().collect::<Vec<_>>())?);
    Ok(rows)
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or("NA".to_string(), |x| format!("{x:.digits$}"))
}

pub const CSV_HEADER: &str = "group,scenes,precision,recall,f1,iou,iou_na,iou_rock,iou_glacier,iou_ocean,mde_m,empty";

pub fn report_csv(rows: &[MetricsReport]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let seg = r.segmentation.as_ref();
        let m = seg.map(|s| s.macro_avg).unwrap_or_default();
        let per: Vec<String> = (0..ZONE_CLASSES)
            .map(|k| fmt_opt(seg.and_then(|s| s.per_class[k].iou), 6))
            .collect();
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.group,
            r.scenes,
            fmt_opt(m.precision, 6),
            fmt_opt(m.recall, 6),
            fmt_opt(m.f1, 6),
            fmt_opt(m.iou, 6),
            per.join(","),
            fmt_opt(r.mde_m, 3),
            r.empty
        )
        .expect("string write");
    }
    s
}

/// Aligned plain-text table, percentages for pixel metrics.
pub fn report_table(rows: &[MetricsReport]) -> String {
    let pct = |v: Option<f64>| fmt_opt(v.map(|x| 100.0 * x), 2);
    let header = ["Group", "Scenes", "Precision", "Recall", "F1", "IoU", "MDE (m)", "∅"];
    let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in rows {
        let m = r.segmentation.as_ref().map(|s| s.macro_avg).unwrap_or_default();
        cells.push(vec![
            r.group.clone(),
            r.scenes.to_string(),
            pct(m.precision),
            pct(m.recall),
            pct(m.f1),
            pct(m.iou),
            fmt_opt(r.mde_m, 1),
            r.empty.to_string(),
        ]);
    }
    render_table(&cells)
}

/// Right-aligns every column except the first.
pub fn render_table(cells: &[Vec<String>]) -> String {
    let cols = cells.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| cells.iter().filter_map(|row| row.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1)));
            out.push('\n');
        }
    }
    out
}
