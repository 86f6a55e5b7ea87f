//! Dataset statistics over an [`AnnotationSet`].
//!
//! Variances are population variances; disparity uses the natural log; the
//! top-fraction cut keeps `ceil(fraction · K)` classes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::Serialize;

use super::annotations::AnnotationSet;
use super::raster::Raster;
use crate::error::{Error, Result};

pub const FACE_BUCKETS: usize = 32;

fn population_variance(values: impl Iterator<Item = f64> + Clone) -> (f64, usize) {
    let (mut n, mut sum) = (0usize, 0.0);
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    if n == 0 {
        return (0.0, 0);
    }
    let mean = sum / n as f64;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (ss / n as f64, n)
}

/// Population standard deviation over mean.
pub fn class_cv(counts: &[f64]) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::Undefined("class CV of an empty count vector".into()));
    }
    let mean = counts.iter().sum::<f64>() / counts.len() as f64;
    if !(mean > 0.0) {
        return Err(Error::Undefined("class CV with zero mean count".into()));
    }
    let (var, _) = population_variance(counts.iter().copied());
    Ok(var.sqrt() / mean)
}

/// Share of all instances held by the `ceil(fraction · K)` largest classes.
pub fn top_fraction_concentration(counts: &[f64], fraction: f64) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::Undefined("concentration of an empty count vector".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    let total: f64 = counts.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Undefined("concentration with zero total count".into()));
    }
    let mut sorted = counts.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let take = ((fraction * counts.len() as f64).ceil() as usize).clamp(1, counts.len());
    Ok(sorted[..take].iter().sum::<f64>() / total)
}

/// Box area over image area.
pub fn normalized_object_size(bbox: [f64; 4], width: f64, height: f64) -> Result<f64> {
    let area = width * height;
    if !(area > 0.0) {
        return Err(Error::InvalidArgument(format!("image area {width}x{height} is zero")));
    }
    Ok(bbox[2] * bbox[3] / area)
}

/// Pixel-intensity variance inside the box's enclosing integer window over
/// the whole image's variance. `Ok(None)` when the window is empty.
pub fn relative_contrast(image: &Raster, bbox: [f64; 4]) -> Result<Option<f64>> {
    let (w, h) = (image.width, image.height);
    let all = (0..h).flat_map(|y| (0..w).map(move |x| (x, y)));
    let (global, _) = population_variance(all.map(|(x, y)| image.intensity(x, y)));
    if !(global > 0.0) {
        return Err(Error::Undefined("relative contrast on an image with zero variance".into()));
    }
    let [bx, by, bw, bh] = bbox;
    let x0 = bx.floor().clamp(0.0, w as f64) as usize;
    let x1 = (bx + bw).ceil().clamp(0.0, w as f64) as usize;
    let y0 = by.floor().clamp(0.0, h as f64) as usize;
    let y1 = (by + bh).ceil().clamp(0.0, h as f64) as usize;
    if x1 <= x0 || y1 <= y0 {
        return Ok(None);
    }
    let window = (y0..y1).flat_map(|y| (x0..x1).map(move |x| (x, y)));
    let (local, _) = population_variance(window.map(|(x, y)| image.intensity(x, y)));
    Ok(Some(local / global))
}

/// `ln(max area / min area)`; `None` with fewer than two boxes.
pub fn size_disparity(areas: &[f64]) -> Result<Option<f64>> {
    if areas.len() < 2 {
        return Ok(None);
    }
    let min = areas.iter().copied().fold(f64::INFINITY, f64::min);
    let max = areas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(min > 0.0) {
        return Err(Error::InvalidArgument("size disparity with a zero-area box".into()));
    }
    Ok(Some((max / min).ln()))
}

/// `[min, q25, median, q75, max]` with linear interpolation between order
/// statistics at position `q · (n − 1)`.
pub fn five_number_summary(values: &[f64]) -> Option<[f64; 5]> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let t = pos - lo as f64;
        if lo == hi {
            v[lo]
        } else {
            v[lo] + t * (v[hi] - v[lo])
        }
    };
    Some([v[0], q(0.25), q(0.5), q(0.75), v[v.len() - 1]])
}

pub fn face_bucket_label(i: usize) -> String {
    if i + 1 == FACE_BUCKETS {
        format!("{FACE_BUCKETS}+")
    } else {
        (i + 1).to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassCountRow {
    pub category_id: u64,
    pub name: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolutionRow {
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
    /// height / width
    pub aspect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectRow {
    pub annotation_id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub size_ratio: f64,
    /// Empty when no raster was supplied or the window was empty.
    pub contrast: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DisparityRow {
    pub image_id: u64,
    pub n_boxes: usize,
    pub disparity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleSpreadRow {
    pub category_id: u64,
    pub count: usize,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FaceBucketRow {
    pub bucket: String,
    pub images: usize,
    pub instances: usize,
}

pub fn class_counts(set: &AnnotationSet) -> Vec<ClassCountRow> {
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for a in &set.annotations {
        *counts.entry(a.category_id).or_default() += 1;
    }
    let mut cats = set.categories.clone();
    cats.sort_by_key(|c| c.id);
    cats.into_iter()
        .map(|c| ClassCountRow {
            category_id: c.id,
            count: counts.get(&c.id).copied().unwrap_or(0),
            name: c.name,
        })
        .collect()
}

pub fn resolution_table(set: &AnnotationSet) -> Vec<ResolutionRow> {
    set.images
        .iter()
        .map(|i| ResolutionRow {
            image_id: i.id,
            width: i.width,
            height: i.height,
            aspect: i.height as f64 / i.width as f64,
        })
        .collect()
}

/// Per-object size ratios, with contrast when `rasters` (parallel to
/// `set.images`) are given.
pub fn object_rows(set: &AnnotationSet, rasters: Option<&[Raster]>) -> Result<Vec<ObjectRow>> {
    let index: HashMap<u64, usize> = set.images.iter().enumerate().map(|(i, im)| (im.id, i)).collect();
    set.annotations
        .iter()
        .map(|a| {
            let i = index[&a.image_id];
            let info = &set.images[i];
            let contrast = match rasters {
                Some(r) => relative_contrast(&r[i], a.bbox)
                    .map_err(|e| Error::Undefined(format!("image {}: {e}", info.id)))?,
                None => None,
            };
            Ok(ObjectRow {
                annotation_id: a.id,
                image_id: a.image_id,
                category_id: a.category_id,
                size_ratio: normalized_object_size(a.bbox, info.width as f64, info.height as f64)?,
                contrast,
            })
        })
        .collect()
}

pub fn disparity_rows(set: &AnnotationSet) -> Result<Vec<DisparityRow>> {
    let by_image = set.annotations_by_image();
    let mut out = Vec::new();
    for im in &set.images {
        let areas: Vec<f64> = by_image[&im.id].iter().map(|a| a.bbox[2] * a.bbox[3]).collect();
        if let Some(d) = size_disparity(&areas)? {
            out.push(DisparityRow {
                image_id: im.id,
                n_boxes: areas.len(),
                disparity: d,
            });
        }
    }
    Ok(out)
}

pub fn class_scale_spread(set: &AnnotationSet) -> Result<Vec<ScaleSpreadRow>> {
    let dims: HashMap<u64, (f64, f64)> = set.images.iter().map(|i| (i.id, (i.width as f64, i.height as f64))).collect();
    let mut per: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for a in &set.annotations {
        let (w, h) = dims[&a.image_id];
        per.entry(a.category_id).or_default().push(normalized_object_size(a.bbox, w, h)?);
    }
    Ok(per
        .into_iter()
        .map(|(id, v)| {
            let [min, q25, median, q75, max] = five_number_summary(&v).expect("non-empty");
            ScaleSpreadRow {
                category_id: id,
                count: v.len(),
                min,
                q25,
                median,
                q75,
                max,
            }
        })
        .collect())
}

/// Images and face instances bucketed by faces per image (1..31, 32+).
pub fn face_density_histogram(set: &AnnotationSet, face_ids: &[u64]) -> Vec<FaceBucketRow> {
    let mut per_image: HashMap<u64, usize> = HashMap::new();
    for a in &set.annotations {
        if face_ids.contains(&a.category_id) {
            *per_image.entry(a.image_id).or_default() += 1;
        }
    }
    let mut rows: Vec<FaceBucketRow> = (0..FACE_BUCKETS)
        .map(|i| FaceBucketRow {
            bucket: face_bucket_label(i),
            images: 0,
            instances: 0,
        })
        .collect();
    for &n in per_image.values() {
        let b = n.min(FACE_BUCKETS) - 1;
        rows[b].images += 1;
        rows[b].instances += n;
    }
    rows
}

/// Categories whose name starts with "face".
pub fn default_face_ids(set: &AnnotationSet) -> Vec<u64> {
    set.categories.iter().filter(|c| c.name.starts_with("face")).map(|c| c.id).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub cv: f64,
    pub top20: f64,
    pub n_images: usize,
    pub n_instances: usize,
    pub per_class_counts: BTreeMap<u64, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsReport {
    pub summary: Summary,
    pub class_counts: Vec<ClassCountRow>,
    pub resolution: Vec<ResolutionRow>,
    pub objects: Vec<ObjectRow>,
    pub disparity: Vec<DisparityRow>,
    pub scale_spread: Vec<ScaleSpreadRow>,
    pub face_density: Vec<FaceBucketRow>,
}

impl StatsReport {
    pub fn compute(set: &AnnotationSet, rasters: Option<&[Raster]>, face_ids: &[u64]) -> Result<Self> {
        let class_counts = class_counts(set);
        let counts: Vec<f64> = class_counts.iter().map(|r| r.count as f64).collect();
        let summary = Summary {
            cv: class_cv(&counts)?,
            top20: top_fraction_concentration(&counts, 0.2)?,
            n_images: set.images.len(),
            n_instances: set.annotations.len(),
            per_class_counts: class_counts.iter().map(|r| (r.category_id, r.count)).collect(),
        };
        Ok(Self {
            summary,
            resolution: resolution_table(set),
            objects: object_rows(set, rasters)?,
            disparity: disparity_rows(set)?,
            scale_spread: class_scale_spread(set)?,
            face_density: face_density_histogram(set, face_ids),
            class_counts,
        })
    }

    /// One CSV per statistic family plus `summary.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_csv(&dir.join("class_counts.csv"), &self.class_counts)?;
        write_csv(&dir.join("resolution.csv"), &self.resolution)?;
        write_csv(&dir.join("objects.csv"), &self.objects)?;
        write_csv(&dir.join("disparity.csv"), &self.disparity)?;
        write_csv(&dir.join("scale_spread.csv"), &self.scale_spread)?;
        write_csv(&dir.join("face_density.csv"), &self.face_density)?;
        let path = dir.join("summary.json");
        let mut bytes = serde_json::to_vec_pretty(&self.summary).expect("summary serializes");
        bytes.push(b'\n');
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }
}

/// Serializes `rows` with a header derived from the row type.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("{}: {other:?}", path.display())),
    }
}
