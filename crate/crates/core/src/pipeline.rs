//! End-to-end commands: synthesis, statistics, training, evaluation and the
//! ablation ladder. Every output directory gets `config.txt` (the resolved
//! configuration, seed included) and `hashes.json` (SHA-256 per artifact).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Variant};
use crate::data::stats::{default_face_ids, StatsReport};
use crate::data::{generate_dataset, AnnotationSet, LoadedDataset, Manifest, SynthDataset};
use crate::detector::{checkpoint, decode, train, DetectorModel, Sample, StepRecord};
use crate::error::{Error, Result};
use crate::eval::{evaluate, read_predictions, write_predictions, Detection, EvalConfig, EvalResult};
use crate::tensor::FeatureMap;

/// Seed offset separating test scenes from training scenes.
const TEST_SEED_OFFSET: u64 = 0x7e57_0000_0000;

pub fn test_seed(seed: u64) -> u64 {
    seed.wrapping_add(TEST_SEED_OFFSET)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Writes `config.txt`, then `hashes.json` covering it and `files`
/// (paths relative to `dir`).
pub fn seal_dir(dir: &Path, cfg: &ExperimentConfig, files: &[&str]) -> Result<()> {
    write_file(&dir.join("config.txt"), cfg.to_text())?;
    let mut hashes = BTreeMap::new();
    for f in std::iter::once(&"config.txt").chain(files) {
        hashes.insert(f.to_string(), sha256_file(&dir.join(f))?);
    }
    let mut bytes = serde_json::to_vec_pretty(&hashes).expect("hash map serializes");
    bytes.push(b'\n');
    write_file(&dir.join("hashes.json"), bytes)
}

/// Detections for every image, class indices mapped back to category ids.
pub fn predict(
    model: &DetectorModel,
    images: &[(u64, FeatureMap)],
    class_ids: &[u64],
    score_threshold: f64,
    max_dets: usize,
) -> Result<Vec<Detection>> {
    if class_ids.len() != model.config.num_classes {
        return Err(Error::Config(format!(
            "model has {} classes, dataset {}",
            model.config.num_classes,
            class_ids.len()
        )));
    }
    let dims = model.config.image_dims();
    let per_image: Vec<Vec<Detection>> = images
        .par_iter()
        .map(|(id, image)| {
            let (head, _) = model.forward(image)?;
            let mut boxes = decode(&head, model.config.num_classes, score_threshold, dims)?;
            boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
            boxes.truncate(max_dets);
            Ok(boxes
                .into_iter()
                .map(|b| Detection {
                    image_id: *id,
                    category_id: class_ids[b.class_id],
                    bbox: [b.x, b.y, b.w, b.h],
                    score: b.score,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Training and test splits.
pub struct Splits {
    pub train: SynthDataset,
    pub test: SynthDataset,
}

pub fn synthesize(cfg: &ExperimentConfig, seed: u64) -> Result<Splits> {
    Ok(Splits {
        train: generate_dataset(&cfg.scene_config(seed), cfg.train_images)?,
        test: generate_dataset(&cfg.scene_config(test_seed(seed)), cfg.test_images)?,
    })
}

/// `out/train` and `out/test` dataset directories.
pub fn cmd_synth(cfg: &ExperimentConfig, out: &Path) -> Result<(Manifest, Manifest)> {
    log::info!("resolved config:\n{}", cfg.to_text());
    let splits = synthesize(cfg, cfg.seed)?;
    let mut manifests = Vec::new();
    for (name, ds) in [("train", &splits.train), ("test", &splits.test)] {
        let dir = out.join(name);
        let m = ds.write(&dir)?;
        seal_dir(&dir, cfg, &["annotations.json", "manifest.json"])?;
        log::info!("{name}: {} images, {} objects, {} skipped", m.n_images, m.n_objects, m.skipped_objects);
        manifests.push(m);
    }
    let test = manifests.pop().expect("two splits");
    let train = manifests.pop().expect("two splits");
    Ok((train, test))
}

/// Statistics for a dataset directory or annotation file. Contrast needs
/// the images; when they cannot be read it is reported absent.
pub fn cmd_stats(data: &Path, out: &Path) -> Result<StatsReport> {
    let (set, rasters) = match LoadedDataset::load(data) {
        Ok(d) => (d.annotations, Some(d.images)),
        Err(Error::Io { .. }) | Err(Error::Image(_)) => {
            let ann = if data.is_dir() { data.join("annotations.json") } else { data.to_path_buf() };
            log::warn!("images unreadable; relative contrast reported absent");
            (AnnotationSet::load(&ann)?, None)
        }
        Err(e) => return Err(e),
    };
    for v in set.violations() {
        log::warn!("annotation {} (image {}): {}", v.annotation_id, v.image_id, v.problem);
    }
    let report = StatsReport::compute(&set, rasters.as_deref(), &default_face_ids(&set))?;
    report.write(out)?;
    Ok(report)
}

#[derive(Serialize)]
struct TraceRow {
    step: usize,
    epoch: usize,
    det: f64,
    freq: f64,
    beta: f64,
    weighted_freq: f64,
    total: f64,
    matched: usize,
}

pub fn write_loss_trace(path: &Path, trace: &[StepRecord]) -> Result<()> {
    let rows: Vec<TraceRow> = trace
        .iter()
        .map(|r| TraceRow {
            step: r.step,
            epoch: r.epoch,
            det: r.det,
            freq: r.freq,
            beta: r.beta,
            weighted_freq: r.beta * r.freq,
            total: r.total,
            matched: r.matched,
        })
        .collect();
    crate::data::stats::write_csv(path, &rows)
}

fn load_or_generate(path: &Option<PathBuf>, cfg: &ExperimentConfig, seed: u64, n: usize) -> Result<(AnnotationSet, Vec<Sample>)> {
    match path {
        Some(p) => {
            let d = LoadedDataset::load(p)?;
            let s = d.samples();
            Ok((d.annotations, s))
        }
        None => {
            let mut c = cfg.clone();
            c.train_images = n;
            let d = generate_dataset(&c.scene_config(seed), n)?;
            let s = d.samples();
            Ok((d.annotations, s))
        }
    }
}

pub struct TrainOutcome {
    pub model: DetectorModel,
    pub trace: Vec<StepRecord>,
}

/// Trains `cfg.variant` on `samples` and writes the checkpoint and loss trace.
pub fn train_into(cfg: &ExperimentConfig, samples: &[Sample], out: &Path) -> Result<TrainOutcome> {
    create_dir(out)?;
    let mut model = DetectorModel::new(cfg.model_config(), cfg.seed)?;
    let trace = train(&mut model, samples, &cfg.train_config(), &cfg.loss_config())?;
    checkpoint::save(&model, &out.join("model.fprv"))?;
    write_loss_trace(&out.join("loss_trace.csv"), &trace)?;
    Ok(TrainOutcome { model, trace })
}

/// Trains on `train_data` (generated from the seed when unset).
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainOutcome> {
    log::info!("resolved config:\n{}", cfg.to_text());
    let (_, samples) = load_or_generate(&cfg.train_data, cfg, cfg.seed, cfg.train_images)?;
    let outcome = train_into(cfg, &samples, out)?;
    seal_dir(out, cfg, &["model.fprv", "loss_trace.csv"])?;
    Ok(outcome)
}

pub enum EvalSource {
    Checkpoint(PathBuf),
    Predictions(PathBuf),
}

fn images_of(set: &AnnotationSet, samples: Vec<Sample>) -> Vec<(u64, FeatureMap)> {
    set.images.iter().map(|i| i.id).zip(samples.into_iter().map(|s| s.image)).collect()
}

/// Scores a checkpoint or a predictions file against `test_data`
/// (generated from the seed when unset).
pub fn cmd_eval(cfg: &ExperimentConfig, source: &EvalSource, out: &Path) -> Result<EvalResult> {
    log::info!("resolved config:\n{}", cfg.to_text());
    create_dir(out)?;
    let eval_cfg = EvalConfig { max_dets: cfg.max_dets };
    let (set, dets) = match source {
        EvalSource::Predictions(p) => {
            let ann = match &cfg.test_data {
                Some(d) if d.is_dir() => d.join("annotations.json"),
                Some(f) => f.clone(),
                None => return Err(Error::Config("evaluating a predictions file needs test_data".into())),
            };
            (AnnotationSet::load(&ann)?, read_predictions(p)?)
        }
        EvalSource::Checkpoint(p) => {
            let model = checkpoint::load(p)?;
            let (set, samples) = load_or_generate(&cfg.test_data, cfg, test_seed(cfg.seed), cfg.test_images)?;
            let dets = predict(&model, &images_of(&set, samples), &set.class_ids(), cfg.score_threshold, cfg.max_dets)?;
            (set, dets)
        }
    };
    write_predictions(&out.join("predictions.jsonl"), &dets)?;
    let result = evaluate(&set, &dets, &eval_cfg)?;
    result.write(out)?;
    seal_dir(out, cfg, &["predictions.jsonl", "metrics.json", "metrics.csv", "per_class.csv"])?;
    Ok(result)
}

/// One `(variant, seed)` cell of the ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: Option<EvalResult>,
    /// Largest `β·L_freq` seen in the loss trace.
    pub max_weighted_freq: f64,
    /// `ok` or the failure reason.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn points(v: Option<f64>) -> Option<f64> {
    v.map(|x| 100.0 * x)
}

impl AblationTable {
    /// Seed mean of one metric over successful cells, in AP points.
    pub fn mean(&self, variant: Variant, metric: fn(&EvalResult) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant)
            .filter_map(|r| r.metrics.as_ref().and_then(metric))
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(100.0 * vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Per-seed rows then one mean row per variant; metrics in AP points.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("absent".to_string(), |x| format!("{x:.3}"));
        let mut s = String::from("variant,seed,ap,ap50,ap75,ap_s,status\n");
        for r in &self.rows {
            let m = r.metrics.as_ref();
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.variant,
                r.seed,
                fmt(points(m.and_then(|m| m.ap))),
                fmt(points(m.and_then(|m| m.ap50))),
                fmt(points(m.and_then(|m| m.ap75))),
                fmt(points(m.and_then(|m| m.ap_s))),
                r.status.replace(',', ";")
            ));
        }
        for v in Variant::ALL {
            let n_ok = self.rows.iter().filter(|r| r.variant == v && r.metrics.is_some()).count();
            let n = self.rows.iter().filter(|r| r.variant == v).count();
            s.push_str(&format!(
                "{v},mean,{},{},{},{},ok {n_ok}/{n}\n",
                fmt(self.mean(v, |m| m.ap)),
                fmt(self.mean(v, |m| m.ap50)),
                fmt(self.mean(v, |m| m.ap75)),
                fmt(self.mean(v, |m| m.ap_s)),
            ));
        }
        s
    }
}

/// Worker count: `FREQPRIV_THREADS` when set, else the machine's parallelism.
pub fn thread_cap() -> usize {
    std::env::var("FREQPRIV_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run_cell(cfg: &ExperimentConfig, train_set: &[Sample], test: &SynthDataset, dir: &Path) -> Result<(EvalResult, f64)> {
    let outcome = train_into(cfg, train_set, dir)?;
    let images = images_of(&test.annotations, test.samples());
    let dets = predict(&outcome.model, &images, &test.annotations.class_ids(), cfg.score_threshold, cfg.max_dets)?;
    let result = evaluate(&test.annotations, &dets, &EvalConfig { max_dets: cfg.max_dets })?;
    result.write(dir)?;
    seal_dir(dir, cfg, &["model.fprv", "loss_trace.csv", "metrics.json", "metrics.csv", "per_class.csv"])?;
    let max_wf = outcome.trace.iter().map(|r| r.beta * r.freq).fold(0.0, f64::max);
    Ok((result, max_wf))
}

/// Trains and evaluates every variant for every seed in `cfg.seeds`.
/// A failing cell is recorded and the rest continue.
pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<AblationTable> {
    log::info!("resolved config:\n{}", cfg.to_text());
    create_dir(out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let splits = pool.install(|| synthesize(cfg, seed))?;
        let data_dir = out.join(format!("data_seed{seed}"));
        create_dir(&data_dir)?;
        for (name, ds) in [("train", &splits.train), ("test", &splits.test)] {
            let mut bytes = serde_json::to_vec_pretty(&ds.manifest()).expect("manifest serializes");
            bytes.push(b'\n');
            write_file(&data_dir.join(format!("{name}_manifest.json")), bytes)?;
        }
        let mut seed_cfg = cfg.clone();
        seed_cfg.seed = seed;
        seal_dir(&data_dir, &seed_cfg, &["train_manifest.json", "test_manifest.json"])?;
        let train_set = splits.train.samples();

        let cells: Vec<AblationRow> = pool.install(|| {
            Variant::ALL
                .par_iter()
                .map(|&variant| {
                    let cell_cfg = seed_cfg.with_variant(variant);
                    let dir = out.join(format!("{variant}_seed{seed}"));
                    let (metrics, max_wf, status) = match run_cell(&cell_cfg, &train_set, &splits.test, &dir) {
                        Ok((m, wf)) => (Some(m), wf, "ok".to_string()),
                        Err(e) => {
                            log::error!("variant {variant} seed {seed} failed: {e}");
                            (None, 0.0, format!("failed: {e}"))
                        }
                    };
                    if let Some(m) = &metrics {
                        log::info!("variant {variant} seed {seed}: AP50 {:?}", m.ap50);
                    }
                    AblationRow {
                        variant,
                        seed,
                        metrics,
                        max_weighted_freq: max_wf,
                        status,
                    }
                })
                .collect()
        });
        rows.extend(cells);
    }
    let table = AblationTable { rows };
    write_file(&out.join("ablation.csv"), table.to_csv())?;
    seal_dir(out, cfg, &["ablation.csv"])?;
    Ok(table)
}
