//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! rejected with their line number. [`ExperimentConfig::to_text`] writes
//! every key, so a resolved file reproduces the run on its own.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{ClassLaw, CountLaw, SceneConfig};
use crate::detector::{LossConfig, ModelConfig, NeckKind, TrainConfig, STRIDE};
use crate::error::{Error, Result};

/// Rungs of the ablation ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Plain detector.
    I,
    /// Frequency branch with the gate held open.
    II,
    /// Learnable spectral gate.
    III,
    /// Gate plus the frequency-consistency loss.
    IV,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::I, Variant::II, Variant::III, Variant::IV];

    pub fn neck(self) -> NeckKind {
        match self {
            Variant::I => NeckKind::None,
            Variant::II => NeckKind::Ungated,
            Variant::III | Variant::IV => NeckKind::Gated,
        }
    }

    pub fn uses_freq_loss(self) -> bool {
        self == Variant::IV
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::I => "I",
            Variant::II => "II",
            Variant::III => "III",
            Variant::IV => "IV",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "I" => Ok(Variant::I),
            "II" => Ok(Variant::II),
            "III" => Ok(Variant::III),
            "IV" => Ok(Variant::IV),
            other => Err(Error::Config(format!("variant must be one of I, II, III, IV, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub image_size: usize,
    pub num_classes: usize,
    pub channels: usize,
    pub beta: f64,
    pub lambda: f64,
    pub roi_size: usize,
    pub gate_init: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub freq_warmup_steps: usize,
    pub grad_clip: f64,
    pub train_images: usize,
    pub test_images: usize,
    pub small_fraction: f64,
    /// `uniform` or `zipf`.
    pub class_law: String,
    pub zipf_s: f64,
    pub objects_mean: f64,
    pub objects_max: usize,
    pub contrast_min: f64,
    pub contrast_max: f64,
    /// Existing datasets; generated from the synthesis keys when unset.
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub variant: Variant,
    /// Seeds swept by the ablation.
    pub seeds: Vec<u64>,
    pub score_threshold: f64,
    pub max_dets: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        Self {
            seed: 0,
            image_size: 64,
            num_classes: 8,
            // wider than the bare model default; fits the ablation time budget
            channels: 16,
            beta: model.beta,
            lambda: model.lambda,
            roi_size: model.roi_size,
            gate_init: model.gate_init,
            lr: train.lr,
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            epochs: train.epochs,
            batch_size: train.batch_size,
            freq_warmup_steps: train.freq_warmup_steps,
            grad_clip: train.grad_clip,
            train_images: 2000,
            test_images: 500,
            small_fraction: 0.6,
            class_law: "uniform".into(),
            zipf_s: 1.0,
            objects_mean: 3.0,
            objects_max: 8,
            contrast_min: 0.5,
            contrast_max: 2.0,
            train_data: None,
            test_data: None,
            variant: Variant::IV,
            seeds: (0..5).collect(),
            score_threshold: 0.001,
            max_dets: 100,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse {value:?}"))
}

fn path_or_none(value: &str) -> Option<PathBuf> {
    if value.is_empty() || value == "none" {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

impl ExperimentConfig {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "image_size" => self.image_size = parse_num(key, value)?,
            "num_classes" => self.num_classes = parse_num(key, value)?,
            "channels" => self.channels = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "roi_size" => self.roi_size = parse_num(key, value)?,
            "gate_init" => self.gate_init = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "freq_warmup_steps" => self.freq_warmup_steps = parse_num(key, value)?,
            "grad_clip" => self.grad_clip = parse_num(key, value)?,
            "train_images" => self.train_images = parse_num(key, value)?,
            "test_images" => self.test_images = parse_num(key, value)?,
            "small_fraction" => self.small_fraction = parse_num(key, value)?,
            "class_law" => self.class_law = value.to_string(),
            "zipf_s" => self.zipf_s = parse_num(key, value)?,
            "objects_mean" => self.objects_mean = parse_num(key, value)?,
            "objects_max" => self.objects_max = parse_num(key, value)?,
            "contrast_min" => self.contrast_min = parse_num(key, value)?,
            "contrast_max" => self.contrast_max = parse_num(key, value)?,
            "train_data" => self.train_data = path_or_none(value),
            "test_data" => self.test_data = path_or_none(value),
            "variant" => self.variant = value.parse().map_err(|e: Error| e.to_string())?,
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "score_threshold" => self.score_threshold = parse_num(key, value)?,
            "max_dets" => self.max_dets = parse_num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parses overrides on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected key = value")))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {line_no}: duplicate key {key:?}")));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {line_no}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        vec![
            ("seed", self.seed.to_string()),
            ("image_size", self.image_size.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("channels", self.channels.to_string()),
            ("beta", self.beta.to_string()),
            ("lambda", self.lambda.to_string()),
            ("roi_size", self.roi_size.to_string()),
            ("gate_init", self.gate_init.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("freq_warmup_steps", self.freq_warmup_steps.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("train_images", self.train_images.to_string()),
            ("test_images", self.test_images.to_string()),
            ("small_fraction", self.small_fraction.to_string()),
            ("class_law", self.class_law.clone()),
            ("zipf_s", self.zipf_s.to_string()),
            ("objects_mean", self.objects_mean.to_string()),
            ("objects_max", self.objects_max.to_string()),
            ("contrast_min", self.contrast_min.to_string()),
            ("contrast_max", self.contrast_max.to_string()),
            ("train_data", path(&self.train_data)),
            ("test_data", path(&self.test_data)),
            ("variant", self.variant.to_string()),
            ("seeds", seeds.join(",")),
            ("score_threshold", self.score_threshold.to_string()),
            ("max_dets", self.max_dets.to_string()),
        ]
    }

    /// Every key with its resolved value, one per line.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % STRIDE != 0 {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of {STRIDE}, got {}",
                self.image_size
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::Config(format!("score_threshold must lie in [0, 1], got {}", self.score_threshold)));
        }
        if self.class_law != "uniform" && self.class_law != "zipf" {
            return Err(Error::Config(format!("class_law must be uniform or zipf, got {:?}", self.class_law)));
        }
        if self.max_dets == 0 {
            return Err(Error::Config("max_dets must be positive".into()));
        }
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.scene_config(0).validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let grid = self.image_size / STRIDE;
        ModelConfig {
            in_channels: 1,
            channels: self.channels,
            num_classes: self.num_classes,
            grid_h: grid,
            grid_w: grid,
            neck: self.variant.neck(),
            gate_init: self.gate_init,
            beta: if self.variant.uses_freq_loss() { self.beta } else { 0.0 },
            lambda: self.lambda,
            roi_size: self.roi_size,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig::from_model(&self.model_config())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            freq_warmup_steps: self.freq_warmup_steps,
            grad_clip: self.grad_clip,
        }
    }

    pub fn scene_config(&self, seed: u64) -> SceneConfig {
        let class_law = match self.class_law.as_str() {
            "zipf" => ClassLaw::Zipf { s: self.zipf_s },
            _ => ClassLaw::Uniform,
        };
        SceneConfig {
            width: self.image_size,
            height: self.image_size,
            num_classes: self.num_classes,
            class_law,
            objects: CountLaw::Poisson {
                mean: self.objects_mean,
                max: self.objects_max,
            },
            small_fraction: self.small_fraction,
            contrast: [self.contrast_min, self.contrast_max],
            seed,
            ..SceneConfig::default()
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }
}
