use freqpriv::data::{Annotation, AnnotationSet, Category, ImageInfo};
use freqpriv::eval::{iou, Detection, EvalResult, MEDIUM_MAX_AREA, SMALL_MAX_AREA};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub gt: AnnotationSet,
    pub dets: Vec<Detection>,
    pub max_dets: usize,
}

fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let w = rng.random_range(8.0..70.0);
    let h = rng.random_range(8.0..70.0);
    [rng.random_range(0.0..60.0), rng.random_range(0.0..60.0), w, h]
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_images = rng.random_range(1..=4u64);
    let n_classes = rng.random_range(1..=3u64);
    let mut gt = AnnotationSet {
        images: (1..=n_images)
            .map(|id| ImageInfo {
                id,
                file_name: format!("{id}.pgm"),
                width: 128,
                height: 128,
            })
            .collect(),
        annotations: Vec::new(),
        categories: (0..n_classes).map(|id| Category { id, name: format!("c{id}") }).collect(),
    };
    let mut dets = Vec::new();
    let mut next_id = 1;
    for img in 1..=n_images {
        for _ in 0..rng.random_range(0..6) {
            let b = random_box(&mut rng);
            let c = rng.random_range(0..n_classes);
            gt.annotations.push(Annotation {
                id: next_id,
                image_id: img,
                category_id: c,
                bbox: b,
            });
            next_id += 1;
            // a jittered copy, sometimes with the wrong class
            if rng.random_bool(0.8) {
                let j = |v: f64, rng: &mut ChaCha8Rng| v + rng.random_range(-6.0..6.0);
                let bbox = [j(b[0], &mut rng), j(b[1], &mut rng), (j(b[2], &mut rng)).max(2.0), (j(b[3], &mut rng)).max(2.0)];
                let category_id = if rng.random_bool(0.85) { c } else { rng.random_range(0..n_classes) };
                dets.push(Detection { image_id: img, category_id, bbox, score: rng.random() });
            }
        }
        for _ in 0..rng.random_range(0..5) {
            dets.push(Detection {
                image_id: img,
                category_id: rng.random_range(0..n_classes),
                bbox: random_box(&mut rng),
                score: rng.random(),
            });
        }
    }
    let max_dets = if rng.random_bool(0.3) { rng.random_range(1..4) } else { 100 };
    Instance { gt, dets, max_dets }
}

#[derive(Clone, Copy)]
enum Range {
    All,
    Small,
    Medium,
    Large,
}

fn in_range(r: Range, area: f64) -> bool {
    match r {
        Range::All => true,
        Range::Small => area < SMALL_MAX_AREA,
        Range::Medium => area >= SMALL_MAX_AREA && area <= MEDIUM_MAX_AREA,
        Range::Large => area > MEDIUM_MAX_AREA,
    }
}

/// Straight-line reimplementation: per image, each detection (by score) takes
/// the best free in-range ground truth, else the best free out-of-range one.
fn oracle_ap(inst: &Instance, class: u64, thr: f64, range: Range) -> Option<f64> {
    let mut marks: Vec<(f64, Option<bool>)> = Vec::new();
    let mut npos = 0;
    for img in &inst.gt.images {
        let mut all: Vec<&Detection> = inst.dets.iter().filter(|d| d.image_id == img.id).collect();
        all.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        all.truncate(inst.max_dets);
        let dets: Vec<&Detection> = all.into_iter().filter(|d| d.category_id == class).collect();
        let gts: Vec<[f64; 4]> = inst
            .gt
            .annotations
            .iter()
            .filter(|a| a.image_id == img.id && a.category_id == class)
            .map(|a| a.bbox)
            .collect();
        let scoped: Vec<bool> = gts.iter().map(|b| in_range(range, b[2] * b[3])).collect();
        npos += scoped.iter().filter(|&&s| s).count();
        let mut used = vec![false; gts.len()];
        for d in dets {
            let pick = |want: bool, used: &[bool]| {
                let mut best: Option<(usize, f64)> = None;
                for (g, b) in gts.iter().enumerate() {
                    let v = iou(d.bbox, *b);
                    if used[g] || scoped[g] != want || v < thr {
                        continue;
                    }
                    if best.is_none_or(|(_, bv)| v >= bv) {
                        best = Some((g, v));
                    }
                }
                best.map(|(g, _)| g)
            };
            let mark = match pick(true, &used).or_else(|| pick(false, &used)) {
                Some(g) => {
                    used[g] = true;
                    if scoped[g] {
                        Some(true)
                    } else {
                        None
                    }
                }
                None if in_range(range, d.bbox[2] * d.bbox[3]) => Some(false),
                None => None,
            };
            marks.push((d.score, mark));
        }
    }
    if npos == 0 {
        return None;
    }
    let mut scored: Vec<(f64, bool)> = marks.into_iter().filter_map(|(s, m)| m.map(|t| (s, t))).collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut pr = Vec::new();
    let mut tp = 0;
    for (k, (_, t)) in scored.iter().enumerate() {
        tp += *t as usize;
        pr.push((tp as f64 / (k + 1) as f64, tp as f64 / npos as f64));
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        sum += pr.iter().filter(|(_, rec)| *rec >= r).map(|(p, _)| *p).fold(0.0, f64::max);
    }
    Some(sum / 101.0)
}

fn mean(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = v.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn oracle(inst: &Instance) -> [Option<f64>; 6] {
    let classes: Vec<u64> = inst.gt.categories.iter().map(|c| c.id).collect();
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let over_thresholds = |c: u64, r: Range| {
        let v: Vec<Option<f64>> = thresholds.iter().map(|&t| oracle_ap(inst, c, t, r)).collect();
        v[0].map(|_| v.iter().flatten().sum::<f64>() / v.len() as f64)
    };
    let bucket = |r: Range| mean(classes.iter().map(|&c| over_thresholds(c, r)));
    [
        bucket(Range::All),
        mean(classes.iter().map(|&c| oracle_ap(inst, c, 0.5, Range::All))),
        mean(classes.iter().map(|&c| oracle_ap(inst, c, thresholds[5], Range::All))),
        bucket(Range::Small),
        bucket(Range::Medium),
        bucket(Range::Large),
    ]
}

pub fn metrics(r: &EvalResult) -> [Option<f64>; 6] {
    [r.ap, r.ap50, r.ap75, r.ap_s, r.ap_m, r.ap_l]
}
