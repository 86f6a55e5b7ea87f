//! COCO-style detection metrics.
//!
//! Matching is greedy in descending score order, class-aware, one ground
//! truth per detection; ground truths outside the active size bucket are
//! ignored (neither positives nor false-positive sources). Precision is
//! integrated over the 101-point recall grid. Classes without ground truth
//! in scope are absent and excluded from means.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::annotations::AnnotationSet;
use crate::error::{Error, Result};

pub const SMALL_MAX_AREA: f64 = 32.0 * 32.0;
pub const MEDIUM_MAX_AREA: f64 = 96.0 * 96.0;
pub const RECALL_POINTS: usize = 101;

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

/// One scored detection, also the predictions-file line format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub score: f64,
}

/// IoU of two `[x, y, w, h]` boxes; 0 when the union is empty.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let ih = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    let inter = if iw > 0.0 && ih > 0.0 { iw * ih } else { 0.0 };
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SizeBucket {
    All,
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub fn contains(self, area: f64) -> bool {
        match self {
            SizeBucket::All => true,
            SizeBucket::Small => area < SMALL_MAX_AREA,
            SizeBucket::Medium => (SMALL_MAX_AREA..=MEDIUM_MAX_AREA).contains(&area),
            SizeBucket::Large => area > MEDIUM_MAX_AREA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalConfig {
    /// Detections kept per image, highest scores first.
    pub max_dets: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_dets: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassResult {
    pub category_id: u64,
    pub n_gt: usize,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub f1: Option<f64>,
    pub n_images: usize,
    pub n_gt: usize,
    pub n_detections: usize,
    pub per_class: Vec<ClassResult>,
}

/// Outcome of one detection after matching.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Mark {
    Tp,
    Fp,
    Ignored,
}

struct Gt {
    bbox: [f64; 4],
    area: f64,
}

/// Ground truths and (score-sorted, capped) detections of one image and class.
struct Cell<'a> {
    gts: Vec<Gt>,
    dets: Vec<&'a Detection>,
}

/// Marks for `cell.dets` at one threshold and bucket; also returns the
/// number of in-scope ground truths.
fn match_cell(cell: &Cell, thr: f64, bucket: SizeBucket) -> (Vec<Mark>, usize) {
    let ignore: Vec<bool> = cell.gts.iter().map(|g| !bucket.contains(g.area)).collect();
    // in-scope ground truths are tried first
    let mut order: Vec<usize> = (0..cell.gts.len()).collect();
    order.sort_by_key(|&i| ignore[i]);
    let mut taken = vec![false; cell.gts.len()];
    let mut marks = Vec::with_capacity(cell.dets.len());
    for d in &cell.dets {
        let mut best: Option<usize> = None;
        let mut best_iou = thr;
        for &g in &order {
            if taken[g] {
                continue;
            }
            if let Some(b) = best {
                if !ignore[b] && ignore[g] {
                    break;
                }
            }
            // ties go to the later candidate, as in the reference COCO matcher
            let v = iou(d.bbox, cell.gts[g].bbox);
            if v < best_iou {
                continue;
            }
            best_iou = v;
            best = Some(g);
        }
        marks.push(match best {
            Some(g) => {
                taken[g] = true;
                if ignore[g] {
                    Mark::Ignored
                } else {
                    Mark::Tp
                }
            }
            None if !bucket.contains(d.bbox[2] * d.bbox[3]) => Mark::Ignored,
            None => Mark::Fp,
        });
    }
    (marks, ignore.iter().filter(|&&i| !i).count())
}

/// 101-point interpolated AP from score-sorted marks. `None` when `npos == 0`.
pub fn interpolated_ap(marks_sorted: &[(f64, bool)], npos: usize) -> Option<f64> {
    if npos == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(marks_sorted.len());
    let mut precision = Vec::with_capacity(marks_sorted.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, is_tp) in marks_sorted {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

struct Prepared<'a> {
    /// category → image cells in ascending image id order.
    per_class: BTreeMap<u64, Vec<Cell<'a>>>,
}

fn prepare<'a>(gt: &AnnotationSet, dets: &'a [Detection], cfg: &EvalConfig) -> Result<Prepared<'a>> {
    let images: BTreeSet<u64> = gt.images.iter().map(|i| i.id).collect();
    let categories: BTreeSet<u64> = gt.categories.iter().map(|c| c.id).collect();
    for d in dets {
        if !images.contains(&d.image_id) {
            return Err(Error::Integrity(format!("detection references missing image_id {}", d.image_id)));
        }
        if !categories.contains(&d.category_id) {
            return Err(Error::Integrity(format!("detection references missing category_id {}", d.category_id)));
        }
        if !d.score.is_finite() || d.bbox.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite detection on image {}", d.image_id)));
        }
    }

    // per-image cap on detections, highest score first (stable)
    let mut by_image: HashMap<u64, Vec<&Detection>> = HashMap::new();
    for d in dets {
        by_image.entry(d.image_id).or_default().push(d);
    }
    let mut kept: HashMap<(u64, u64), Vec<&Detection>> = HashMap::new();
    for (img, mut list) in by_image {
        list.sort_by(|a, b| b.score.total_cmp(&a.score));
        list.truncate(cfg.max_dets);
        for d in list {
            kept.entry((img, d.category_id)).or_default().push(d);
        }
    }
    let mut gts: HashMap<(u64, u64), Vec<Gt>> = HashMap::new();
    for a in &gt.annotations {
        gts.entry((a.image_id, a.category_id)).or_default().push(Gt {
            bbox: a.bbox,
            area: a.bbox[2] * a.bbox[3],
        });
    }

    let mut per_class = BTreeMap::new();
    for &c in &categories {
        let cells = images
            .iter()
            .map(|&i| Cell {
                gts: gts.remove(&(i, c)).unwrap_or_default(),
                dets: kept.remove(&(i, c)).unwrap_or_default(),
            })
            .collect();
        per_class.insert(c, cells);
    }
    Ok(Prepared { per_class })
}

/// AP of one class at one threshold and bucket.
fn class_ap(cells: &[Cell], thr: f64, bucket: SizeBucket) -> Option<f64> {
    let mut pooled: Vec<(f64, bool)> = Vec::new();
    let mut npos = 0;
    for cell in cells {
        let (marks, n) = match_cell(cell, thr, bucket);
        npos += n;
        for (d, m) in cell.dets.iter().zip(marks) {
            if m != Mark::Ignored {
                pooled.push((d.score, m == Mark::Tp));
            }
        }
    }
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    interpolated_ap(&pooled, npos)
}

/// Best F1 over score thresholds at IoU 0.5, all classes pooled.
fn best_f1(prep: &Prepared) -> Option<f64> {
    let mut pooled: Vec<(f64, bool)> = Vec::new();
    let mut npos = 0;
    for cells in prep.per_class.values() {
        for cell in cells {
            let (marks, n) = match_cell(cell, 0.5, SizeBucket::All);
            npos += n;
            pooled.extend(cell.dets.iter().zip(marks).map(|(d, m)| (d.score, m == Mark::Tp)));
        }
    }
    if npos == 0 && pooled.is_empty() {
        return None;
    }
    if npos == 0 || pooled.is_empty() {
        return Some(0.0);
    }
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best = 0.0f64;
    let (mut tp, mut n) = (0usize, 0usize);
    for (i, &(s, is_tp)) in pooled.iter().enumerate() {
        n += 1;
        if is_tp {
            tp += 1;
        }
        // evaluate only once every detection tied at this score is in
        if i + 1 < pooled.len() && pooled[i + 1].0 == s {
            continue;
        }
        let p = tp as f64 / n as f64;
        let r = tp as f64 / npos as f64;
        if p + r > 0.0 {
            best = best.max(2.0 * p * r / (p + r));
        }
    }
    Some(best)
}

pub fn evaluate(gt: &AnnotationSet, dets: &[Detection], cfg: &EvalConfig) -> Result<EvalResult> {
    let prep = prepare(gt, dets, cfg)?;
    let thresholds = iou_thresholds();
    let classes: Vec<(&u64, &Vec<Cell>)> = prep.per_class.iter().collect();

    // [class][bucket][threshold]
    let buckets = [SizeBucket::All, SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];
    let table: Vec<Vec<Vec<Option<f64>>>> = classes
        .par_iter()
        .map(|(_, cells)| {
            buckets
                .iter()
                .map(|&b| thresholds.iter().map(|&t| class_ap(cells, t, b)).collect())
                .collect()
        })
        .collect();

    let mean_over_thresholds = |v: &[Option<f64>]| v[0].map(|_| v.iter().flatten().sum::<f64>() / v.len() as f64);
    let bucket_ap = |b: usize| mean(table.iter().map(|c| mean_over_thresholds(&c[b])));
    let at = |t: usize| mean(table.iter().map(|c| c[0][t]));

    let per_class = classes
        .iter()
        .zip(&table)
        .map(|((&id, cells), row)| ClassResult {
            category_id: id,
            n_gt: cells.iter().map(|c| c.gts.len()).sum(),
            ap: mean_over_thresholds(&row[0]),
            ap50: row[0][0],
            ap75: row[0][5],
        })
        .collect();

    Ok(EvalResult {
        ap: bucket_ap(0),
        ap50: at(0),
        ap75: at(5),
        ap_s: bucket_ap(1),
        ap_m: bucket_ap(2),
        ap_l: bucket_ap(3),
        f1: best_f1(&prep),
        n_images: gt.images.len(),
        n_gt: gt.annotations.len(),
        n_detections: dets.len(),
        per_class,
    })
}

/// Reads a JSON-lines predictions file; blank lines are skipped.
pub fn read_predictions(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            column: e.column(),
            detail: e.to_string(),
        })?;
        out.push(d);
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut s = String::new();
    for d in dets {
        s.push_str(&serde_json::to_string(d).expect("detections serialize"));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Formats an optional metric for CSV output.
pub fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "absent".into(),
    }
}

impl EvalResult {
    /// `metrics.json` and `metrics.csv` (one row of headline metrics) plus
    /// `per_class.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("metrics.json");
        let mut bytes = serde_json::to_vec_pretty(self).expect("metrics serialize");
        bytes.push(b'\n');
        std::fs::write(&json, bytes).map_err(|e| Error::io(&json, e))?;

        let mut csv = String::from("ap,ap50,ap75,ap_s,ap_m,ap_l,f1\n");
        let row: Vec<String> = [self.ap, self.ap50, self.ap75, self.ap_s, self.ap_m, self.ap_l, self.f1]
            .into_iter()
            .map(fmt_metric)
            .collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
        let path = dir.join("metrics.csv");
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;

        let mut pc = String::from("category_id,n_gt,ap,ap50,ap75\n");
        for c in &self.per_class {
            pc.push_str(&format!(
                "{},{},{},{},{}\n",
                c.category_id,
                c.n_gt,
                fmt_metric(c.ap),
                fmt_metric(c.ap50),
                fmt_metric(c.ap75)
            ));
        }
        let path = dir.join("per_class.csv");
        std::fs::write(&path, pc).map_err(|e| Error::io(&path, e))
    }
}
