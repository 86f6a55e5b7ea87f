//! Procedural privacy-like scenes: stroke-grid "text" blocks and face-like
//! blobs on smooth, low-contrast backgrounds.
//!
//! Even class ids render as glyph grids, odd ids as blobs. Every image draws
//! from its own ChaCha8 stream (`set_stream(index)`) under the master seed,
//! so any image can be regenerated alone and parallel generation is
//! order-independent.

use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::annotations::{Annotation, AnnotationSet, Category, ImageInfo};
use super::raster::Raster;
use crate::detector::{BBox, Sample};
use crate::error::{Error, Result};
use crate::tensor::{bilinear_resize, FeatureMap};

/// Object area ratio below which an object counts as small.
pub const SMALL_AREA_RATIO: f64 = 0.10;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase")]
pub enum ClassLaw {
    Uniform,
    /// `P(k) ∝ (k + 1)^(−s)`.
    Zipf { s: f64 },
}

impl ClassLaw {
    pub fn weights(&self, k: usize) -> Vec<f64> {
        match *self {
            ClassLaw::Uniform => vec![1.0; k],
            ClassLaw::Zipf { s } => (0..k).map(|i| ((i + 1) as f64).powf(-s)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase")]
pub enum CountLaw {
    /// Poisson draw clipped to `max`.
    Poisson { mean: f64, max: usize },
    Fixed { n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub class_law: ClassLaw,
    pub objects: CountLaw,
    /// Share of objects drawn from `small_area`; the rest use `large_area`.
    pub small_fraction: f64,
    /// Area ratio ranges (object area / image area).
    pub small_area: [f64; 2],
    pub large_area: [f64; 2],
    /// Width / height, sampled log-uniformly.
    pub aspect: [f64; 2],
    /// Object texture variance over background variance.
    pub contrast: [f64; 2],
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            num_classes: 30,
            class_law: ClassLaw::Zipf { s: 1.0 },
            objects: CountLaw::Poisson { mean: 3.0, max: 8 },
            small_fraction: 0.6,
            small_area: [0.01, 0.08],
            large_area: [0.12, 0.30],
            aspect: [0.5, 2.0],
            contrast: [0.5, 2.0],
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && lo <= r[0] && r[0] <= r[1] && r[1] <= hi) {
        return Err(Error::Config(format!("{name} range {r:?} must satisfy {lo} <= a <= b <= {hi}")));
    }
    Ok(())
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::Config("image must be at least 2x2".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.small_fraction) {
            return Err(Error::Config(format!("small_fraction {} outside [0, 1]", self.small_fraction)));
        }
        check_range("small_area", self.small_area, 0.0, 1.0)?;
        check_range("large_area", self.large_area, 0.0, 1.0)?;
        check_range("aspect", self.aspect, f64::MIN_POSITIVE, f64::MAX)?;
        check_range("contrast", self.contrast, f64::MIN_POSITIVE, f64::MAX)?;
        match self.class_law {
            ClassLaw::Zipf { s } if !(s >= 0.0 && s.is_finite()) => {
                return Err(Error::Config(format!("zipf exponent {s} must be >= 0")));
            }
            _ => {}
        }
        if let CountLaw::Poisson { mean, .. } = self.objects {
            if !(mean >= 0.0 && mean.is_finite()) {
                return Err(Error::Config(format!("object mean {mean} must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn category_name(k: usize) -> String {
        if k % 2 == 0 {
            format!("glyph_{k}")
        } else {
            format!("face_{k}")
        }
    }
}

/// One rendered scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Raster,
    pub boxes: Vec<BBox>,
    /// Objects dropped after [`MAX_PLACEMENT_ATTEMPTS`] failed placements.
    pub skipped: usize,
}

/// Stream for image `index` under `seed`.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn background(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (w, h) = (cfg.width, cfg.height);
    let coarse: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0)).collect();
    let coarse = FeatureMap::from_vec(1, 5, 5, coarse).expect("5x5 grid");
    let smooth = bilinear_resize(&coarse, h, w).expect("positive dims");
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let level: f64 = rng.random_range(0.35..0.65);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64 - 0.5;
            let v = (y as f64 + 0.5) / h as f64 - 0.5;
            let grad = 0.2 * (ca * u + sa * v);
            let fine: f64 = rng.random_range(-0.02..0.02);
            out.push(level + grad + 0.06 * smooth.get(0, y, x) + fine);
        }
    }
    out
}

/// Four 3×5 stroke bitmaps owned by a glyph class.
fn glyph_set(class: usize) -> [[bool; 15]; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9_7f4a_7c15 ^ class as u64);
    let mut set = [[false; 15]; 4];
    for g in &mut set {
        for b in g.iter_mut() {
            *b = rng.random_bool(0.55);
        }
        // a vertical stem keeps every glyph stroke-like
        let stem = rng.random_range(0..3);
        for row in 0..5 {
            g[row * 3 + stem] = true;
        }
    }
    set
}

/// Texture in `[-1, 1]` and a coverage mask for an object of class `class`.
fn object_texture(class: usize, w: usize, h: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let mut tex = vec![0.0; w * h];
    let mut mask = vec![true; w * h];
    if class % 2 == 0 {
        let set = glyph_set(class);
        let k = ((w.min(h) as f64 / 12.0).round() as usize).max(1);
        let (cw, ch) = (4 * k, 6 * k);
        let cols = w.div_ceil(cw);
        let rows = h.div_ceil(ch);
        let picks: Vec<usize> = (0..rows * cols).map(|_| rng.random_range(0..4)).collect();
        for y in 0..h {
            for x in 0..w {
                let (lx, ly) = ((x % cw) / k, (y % ch) / k);
                let on = lx < 3 && ly < 5 && set[picks[(y / ch) * cols + x / cw]][ly * 3 + lx];
                tex[y * w + x] = if on { 1.0 } else { -1.0 };
            }
        }
    } else {
        let rings = 1.0 + ((class / 2) % 4) as f64;
        let tilt = ((class / 8) % 2) as f64 * 0.5;
        let (rx, ry) = (w as f64 / 2.0, h as f64 / 2.0);
        for y in 0..h {
            for x in 0..w {
                let u = (x as f64 + 0.5 - rx) / rx;
                let v = (y as f64 + 0.5 - ry) / ry;
                let rho2 = u * u + v * v;
                if rho2 > 1.0 {
                    mask[y * w + x] = false;
                    continue;
                }
                let rho = rho2.sqrt();
                let eyes = [-0.35, 0.35]
                    .iter()
                    .map(|&ex| (-((u - ex).powi(2) + (v + 0.2 + tilt * ex).powi(2)) / 0.02).exp())
                    .sum::<f64>();
                tex[y * w + x] = (0.7 * (std::f64::consts::PI * rings * rho).cos() - 1.2 * eyes).clamp(-1.0, 1.0);
            }
        }
    }
    (tex, mask)
}

fn sample_count(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> usize {
    match cfg.objects {
        CountLaw::Fixed { n } => n,
        CountLaw::Poisson { mean, max } => {
            if mean <= 0.0 {
                0
            } else {
                let n: f64 = Poisson::new(mean).expect("positive mean").sample(rng);
                (n as usize).min(max)
            }
        }
    }
}

/// Renders one scene from `rng`.
pub fn generate_scene(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Scene> {
    cfg.validate()?;
    let (iw, ih) = (cfg.width, cfg.height);
    let mut pix = background(cfg, rng);
    let mean = pix.iter().sum::<f64>() / pix.len() as f64;
    let bg_var = pix.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / pix.len() as f64;
    let classes = WeightedIndex::new(cfg.class_law.weights(cfg.num_classes)).map_err(|e| Error::Config(e.to_string()))?;
    let count = sample_count(cfg, rng);
    let image_area = (iw * ih) as f64;

    // draw every object first, then place the largest first so that the
    // size mix is not skewed by placement failures of big objects
    let mut specs: Vec<(usize, usize, usize)> = (0..count)
        .map(|_| {
            let class = classes.sample(rng);
            let small = rng.random_bool(cfg.small_fraction);
            let [a0, a1] = if small { cfg.small_area } else { cfg.large_area };
            let ratio = if a0 < a1 { rng.random_range(a0..=a1) } else { a0 };
            let log_aspect = if cfg.aspect[0] < cfg.aspect[1] {
                rng.random_range(cfg.aspect[0].ln()..=cfg.aspect[1].ln())
            } else {
                cfg.aspect[0].ln()
            };
            let area = ratio * image_area;
            let w = ((area * log_aspect.exp()).sqrt().round() as usize).clamp(2, iw);
            let h = ((area / log_aspect.exp()).sqrt().round() as usize).clamp(2, ih);
            (class, w, h)
        })
        .collect();
    specs.sort_by_key(|&(_, w, h)| std::cmp::Reverse(w * h));

    let mut boxes: Vec<BBox> = Vec::with_capacity(count);
    let mut skipped = 0;
    for (class, w, h) in specs {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let x = rng.random_range(0..=iw - w);
            let y = rng.random_range(0..=ih - h);
            let cand = BBox::new(x as f64, y as f64, w as f64, h as f64, class);
            if boxes.iter().all(|b| b.intersection(&cand) == 0.0) {
                placed = Some((x, y, cand));
                break;
            }
        }
        let Some((x0, y0, bbox)) = placed else {
            skipped += 1;
            continue;
        };

        let contrast = if cfg.contrast[0] < cfg.contrast[1] {
            rng.random_range(cfg.contrast[0]..=cfg.contrast[1])
        } else {
            cfg.contrast[0]
        };
        let (tex, mask) = object_texture(class, w, h, rng);
        let covered: Vec<f64> = tex.iter().zip(&mask).filter(|(_, &m)| m).map(|(&t, _)| t).collect();
        let t_mean = covered.iter().sum::<f64>() / covered.len() as f64;
        let t_var = covered.iter().map(|t| (t - t_mean).powi(2)).sum::<f64>() / covered.len() as f64;
        let amp = if t_var > 0.0 { (contrast * bg_var / t_var).sqrt() } else { 0.0 };
        let mut local = 0.0;
        for y in 0..h {
            for x in 0..w {
                local += pix[(y0 + y) * iw + x0 + x];
            }
        }
        local /= (w * h) as f64;
        for y in 0..h {
            for x in 0..w {
                if mask[y * w + x] {
                    pix[(y0 + y) * iw + x0 + x] = local + amp * (tex[y * w + x] - t_mean);
                }
            }
        }
        boxes.push(bbox);
    }
    if skipped > 0 {
        log::debug!("scene: {skipped} object(s) skipped after {MAX_PLACEMENT_ATTEMPTS} placement attempts");
    }
    Ok(Scene {
        image: Raster::from_unit(iw, ih, &pix)?,
        boxes,
        skipped,
    })
}

/// Generated images with their annotation set.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SceneConfig,
    pub images: Vec<Raster>,
    pub annotations: AnnotationSet,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SceneConfig,
    pub seed: u64,
    pub n_images: usize,
    pub n_objects: usize,
    pub skipped_objects: usize,
    /// SHA-256 of the exact `annotations.json` bytes.
    pub annotations_sha256: String,
    /// SHA-256 over every image file's bytes, concatenated in id order.
    pub images_sha256: String,
}

pub fn image_file_name(id: u64) -> String {
    format!("images/{id:06}.pgm")
}

pub fn generate_dataset(cfg: &SceneConfig, n_images: usize) -> Result<SynthDataset> {
    cfg.validate()?;
    if n_images == 0 {
        return Err(Error::Config("n_images must be >= 1".into()));
    }
    let scenes: Vec<Scene> = (0..n_images as u64)
        .into_par_iter()
        .map(|i| generate_scene(cfg, &mut scene_rng(cfg.seed, i)))
        .collect::<Result<_>>()?;

    let mut set = AnnotationSet {
        categories: (0..cfg.num_classes)
            .map(|k| Category {
                id: k as u64,
                name: SceneConfig::category_name(k),
            })
            .collect(),
        ..AnnotationSet::default()
    };
    let mut images = Vec::with_capacity(n_images);
    let mut skipped = 0;
    for (i, scene) in scenes.into_iter().enumerate() {
        let id = i as u64;
        set.images.push(ImageInfo {
            id,
            file_name: image_file_name(id),
            width: cfg.width as u32,
            height: cfg.height as u32,
        });
        for b in &scene.boxes {
            set.annotations.push(Annotation {
                id: set.annotations.len() as u64,
                image_id: id,
                category_id: b.class_id as u64,
                bbox: [b.x, b.y, b.w, b.h],
            });
        }
        skipped += scene.skipped;
        images.push(scene.image);
    }
    if skipped > 0 {
        log::warn!("{skipped} object(s) skipped: no free placement after {MAX_PLACEMENT_ATTEMPTS} attempts");
    }
    Ok(SynthDataset {
        config: *cfg,
        images,
        annotations: set,
        skipped,
    })
}

fn images_digest(images: &[Raster]) -> String {
    let mut h = Sha256::new();
    for im in images {
        h.update(im.encode());
    }
    hex::encode(h.finalize())
}

impl SynthDataset {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            config: self.config,
            seed: self.config.seed,
            n_images: self.images.len(),
            n_objects: self.annotations.annotations.len(),
            skipped_objects: self.skipped,
            annotations_sha256: hex::encode(Sha256::digest(self.annotations.to_json_bytes())),
            images_sha256: images_digest(&self.images),
        }
    }

    /// Writes `images/*.pgm`, `annotations.json` and `manifest.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        for (info, im) in self.annotations.images.iter().zip(&self.images) {
            im.write(&dir.join(&info.file_name))?;
        }
        self.annotations.save(&dir.join("annotations.json"))?;
        let manifest = self.manifest();
        let path = dir.join("manifest.json");
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        bytes.push(b'\n');
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    pub fn samples(&self) -> Vec<Sample> {
        self.annotations
            .images
            .iter()
            .zip(&self.images)
            .map(|(info, im)| Sample {
                image: im.to_feature_map(),
                boxes: self.annotations.boxes_for(info.id),
            })
            .collect()
    }
}

/// A dataset directory read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub root: PathBuf,
    pub annotations: AnnotationSet,
    /// Parallel to `annotations.images`.
    pub images: Vec<Raster>,
}

impl LoadedDataset {
    /// Loads `annotations.json` (or the given file) and every referenced image.
    pub fn load(path: &Path) -> Result<Self> {
        let (root, ann_path) = if path.is_dir() {
            (path.to_path_buf(), path.join("annotations.json"))
        } else {
            (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
        };
        let annotations = AnnotationSet::load(&ann_path)?;
        let images = annotations
            .images
            .iter()
            .map(|info| {
                let im = Raster::read(&root.join(&info.file_name))?;
                if (im.width, im.height) != (info.width as usize, info.height as usize) {
                    return Err(Error::Integrity(format!(
                        "image {} is {}x{} on disk but {}x{} in annotations",
                        info.id, im.width, im.height, info.width, info.height
                    )));
                }
                Ok(im)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            root,
            annotations,
            images,
        })
    }

    pub fn samples(&self) -> Vec<Sample> {
        self.annotations
            .images
            .iter()
            .zip(&self.images)
            .map(|(info, im)| Sample {
                image: im.to_feature_map(),
                boxes: self.annotations.boxes_for(info.id),
            })
            .collect()
    }
}
