//! Single-scale anchor-free detector: two strided 3×3 blocks, an optional
//! FDAF neck and a 1×1 prediction head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freq::{FdafBlock, SpectralGate, DEFAULT_GATE_INIT, DEFAULT_LAMBDA};
use crate::tensor::ops::{Conv1x1, Conv3x3s2, Silu};
use crate::tensor::{FeatureMap, NodeId, Tape, Tensor};

/// Total downsampling of the backbone.
pub const STRIDE: usize = 4;
/// Objectness bias at initialization (prior ≈ 0.018).
const OBJECTNESS_PRIOR_LOGIT: f64 = -4.0;

/// What occupies the neck slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NeckKind {
    /// No frequency branch.
    None,
    /// DFT→IDFT branch with the gate pinned open and frozen.
    Ungated,
    /// Learnable spectral gate.
    Gated,
}

impl NeckKind {
    fn code(self) -> f64 {
        match self {
            NeckKind::None => 0.0,
            NeckKind::Ungated => 1.0,
            NeckKind::Gated => 2.0,
        }
    }

    fn from_code(v: f64) -> Option<Self> {
        match v {
            x if x == 0.0 => Some(NeckKind::None),
            x if x == 1.0 => Some(NeckKind::Ungated),
            x if x == 2.0 => Some(NeckKind::Gated),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Feature grid (input resolution divided by [`STRIDE`]).
    pub grid_h: usize,
    pub grid_w: usize,
    pub neck: NeckKind,
    pub gate_init: f64,
    pub beta: f64,
    pub lambda: f64,
    pub roi_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            channels: 8,
            num_classes: 8,
            grid_h: 16,
            grid_w: 16,
            neck: NeckKind::Gated,
            gate_init: DEFAULT_GATE_INIT,
            beta: 0.05,
            lambda: DEFAULT_LAMBDA,
            roi_size: 16,
        }
    }
}

impl ModelConfig {
    pub fn head_channels(&self) -> usize {
        1 + self.num_classes + 4
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.grid_h * STRIDE, self.grid_w * STRIDE)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("channels", self.channels),
            ("num_classes", self.num_classes),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("roi_size", self.roi_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidArgument(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        // the first 3×3 block needs at least a 3×3 input
        if self.grid_h * 2 < 3 || self.grid_w * 2 < 3 {
            return Err(Error::InvalidArgument("feature grid too small".into()));
        }
        Ok(())
    }
}

/// Weight and bias of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: FeatureMap,
    pub bias: FeatureMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub config: ModelConfig,
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub neck: Option<FdafBlock>,
    pub head: ConvLayer,
}

/// Tape handles for one recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub head: NodeId,
    pub neck: NodeId,
    /// Parameter nodes in [`DetectorModel::param_names`] order.
    pub params: Vec<NodeId>,
}

fn uniform(rng: &mut ChaCha8Rng, dims: (usize, usize, usize), bound: f64) -> FeatureMap {
    let (c, h, w) = dims;
    let data = (0..c * h * w).map(|_| rng.random_range(-bound..bound)).collect();
    FeatureMap::from_raw(c, h, w, data)
}

/// Per-channel zero mean and unit variance; constant channels map to zero.
pub fn standardize(image: &FeatureMap) -> FeatureMap {
    let (c, h, w) = image.dims();
    let n = (h * w) as f64;
    let mut out = image.clone();
    for ch in 0..c {
        let plane = image.channel(ch);
        let mean = plane.iter().sum::<f64>() / n;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
        let start = ch * h * w;
        for (o, v) in out.as_mut_slice()[start..start + h * w].iter_mut().zip(plane) {
            *o = (v - mean) * scale;
        }
    }
    out
}

impl DetectorModel {
    /// Seeded initialization: He-uniform backbone, small head weights,
    /// negative objectness bias, identity FDAF.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let conv1 = ConvLayer {
            weight: uniform(&mut rng, (c, config.in_channels, 9), (6.0 / (9 * config.in_channels) as f64).sqrt()),
            bias: FeatureMap::zeros(c, 1, 1),
        };
        let conv2 = ConvLayer {
            weight: uniform(&mut rng, (c, c, 9), (6.0 / (9 * c) as f64).sqrt()),
            bias: FeatureMap::zeros(c, 1, 1),
        };
        let head_c = config.head_channels();
        let mut head_bias = FeatureMap::zeros(head_c, 1, 1);
        head_bias.set(0, 0, 0, OBJECTNESS_PRIOR_LOGIT);
        let head = ConvLayer {
            weight: uniform(&mut rng, (head_c, c, 1), 0.01 * 3f64.sqrt()),
            bias: head_bias,
        };
        let neck = match config.neck {
            NeckKind::None => None,
            NeckKind::Gated => Some(FdafBlock::new(c, config.grid_h, config.grid_w, config.gate_init)),
            NeckKind::Ungated => Some(FdafBlock::from_parts(
                SpectralGate::frozen_open(c, config.grid_h, config.grid_w),
                FeatureMap::zeros(c, 2 * c, 1),
                FeatureMap::zeros(c, 1, 1),
            )?),
        };
        Ok(Self {
            config,
            conv1,
            conv2,
            neck,
            head,
        })
    }

    /// Every parameter set to zero (biases included).
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        for (_, p) in m.params_mut() {
            p.as_mut_slice().fill(0.0);
        }
        Ok(m)
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        let mut names = vec![
            "backbone.conv1.weight",
            "backbone.conv1.bias",
            "backbone.conv2.weight",
            "backbone.conv2.bias",
        ];
        if self.neck.is_some() {
            names.extend(["neck.gate.logits", "neck.fusion.weight", "neck.fusion.bias"]);
        }
        names.extend(["head.weight", "head.bias"]);
        names
    }

    pub fn params(&self) -> Vec<(&'static str, &FeatureMap)> {
        let mut out: Vec<&FeatureMap> = vec![&self.conv1.weight, &self.conv1.bias, &self.conv2.weight, &self.conv2.bias];
        if let Some(n) = &self.neck {
            out.extend([n.gate.logits(), &n.fusion_weight, &n.fusion_bias]);
        }
        out.extend([&self.head.weight, &self.head.bias]);
        self.param_names().into_iter().zip(out).collect()
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut FeatureMap)> {
        let names = self.param_names();
        let mut out: Vec<&mut FeatureMap> = vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
        ];
        if let Some(n) = &mut self.neck {
            let FdafBlock {
                gate,
                fusion_weight,
                fusion_bias,
            } = n;
            out.push(gate.logits_mut());
            out.push(fusion_weight);
            out.push(fusion_bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        names.into_iter().zip(out).collect()
    }

    /// Whether the optimizer may update the named group.
    pub fn is_trainable(&self, name: &str) -> bool {
        match (name, &self.neck) {
            ("neck.gate.logits", Some(n)) => !n.gate.is_frozen(),
            _ => true,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.params().into_iter().map(|(_, p)| Tensor::Real(p.clone())).collect()
    }

    /// Copy of the model with parameters replaced, in `param_names` order.
    pub fn with_tensors(&self, tensors: &[Tensor]) -> Result<Self> {
        let mut m = self.clone();
        let slots = m.params_mut();
        if slots.len() != tensors.len() {
            return Err(Error::shape("DetectorModel::with_tensors", "parameter group count"));
        }
        for ((name, slot), t) in slots.into_iter().zip(tensors) {
            let x = t
                .as_real()
                .filter(|x| x.dims() == slot.dims())
                .ok_or_else(|| Error::shape("DetectorModel::with_tensors", format!("group {name}")))?;
            *slot = x.clone();
        }
        Ok(m)
    }

    fn check_image(&self, image: &FeatureMap) -> Result<()> {
        let (h, w) = self.config.image_dims();
        if image.dims() != (self.config.in_channels, h, w) {
            return Err(Error::shape(
                "detector forward",
                format!(
                    "image {:?}, model expects ({}, {h}, {w})",
                    image.dims(),
                    self.config.in_channels
                ),
            ));
        }
        Ok(())
    }

    /// Records the forward pass on a tape.
    pub fn record(&self, tape: &mut Tape, image: &FeatureMap) -> Result<ForwardNodes> {
        self.check_image(image)?;
        let x = tape.constant(standardize(image));
        let mut params = Vec::new();
        let mut leaf = |tape: &mut Tape, p: &FeatureMap, trainable: bool| {
            let id = if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) };
            params.push(id);
            id
        };
        let w1 = leaf(tape, &self.conv1.weight, true);
        let b1 = leaf(tape, &self.conv1.bias, true);
        let w2 = leaf(tape, &self.conv2.weight, true);
        let b2 = leaf(tape, &self.conv2.bias, true);
        let h1 = tape.apply(Conv3x3s2, &[x, w1, b1])?;
        let a1 = tape.apply(Silu, &[h1])?;
        let h2 = tape.apply(Conv3x3s2, &[a1, w2, b2])?;
        let feat = tape.apply(Silu, &[h2])?;
        let neck = match &self.neck {
            Some(block) => {
                let g = leaf(tape, block.gate.logits(), !block.gate.is_frozen());
                let fw = leaf(tape, &block.fusion_weight, true);
                let fb = leaf(tape, &block.fusion_bias, true);
                block.record_with(tape, feat, g, fw, fb)?
            }
            None => feat,
        };
        let hw = leaf(tape, &self.head.weight, true);
        let hb = leaf(tape, &self.head.bias, true);
        let head = tape.apply(Conv1x1, &[neck, hw, hb])?;
        Ok(ForwardNodes { head, neck, params })
    }

    /// Returns `(raw head map, neck feature map)`.
    pub fn forward(&self, image: &FeatureMap) -> Result<(FeatureMap, FeatureMap)> {
        let mut tape = Tape::new();
        let nodes = self.record(&mut tape, image)?;
        Ok((tape.real(nodes.head).clone(), tape.real(nodes.neck).clone()))
    }

    /// Same network with the neck slot emptied.
    pub fn without_neck(&self) -> Self {
        let mut m = self.clone();
        m.neck = None;
        m.config.neck = NeckKind::None;
        m
    }

    pub(crate) fn meta_values(&self) -> Vec<f64> {
        let c = &self.config;
        vec![
            c.in_channels as f64,
            c.channels as f64,
            c.num_classes as f64,
            c.grid_h as f64,
            c.grid_w as f64,
            c.neck.code(),
            c.gate_init,
            c.beta,
            c.lambda,
            c.roi_size as f64,
        ]
    }

    pub(crate) fn config_from_meta(meta: &[f64]) -> Result<ModelConfig> {
        if meta.len() != 10 {
            return Err(Error::Checkpoint(format!("meta group has {} values, expected 10", meta.len())));
        }
        let count = |v: f64, name: &str| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 && v < 1e9 {
                Ok(v as usize)
            } else {
                Err(Error::Checkpoint(format!("invalid {name} {v}")))
            }
        };
        let config = ModelConfig {
            in_channels: count(meta[0], "in_channels")?,
            channels: count(meta[1], "channels")?,
            num_classes: count(meta[2], "num_classes")?,
            grid_h: count(meta[3], "grid_h")?,
            grid_w: count(meta[4], "grid_w")?,
            neck: NeckKind::from_code(meta[5]).ok_or_else(|| Error::Checkpoint(format!("invalid neck code {}", meta[5])))?,
            gate_init: meta[6],
            beta: meta[7],
            lambda: meta[8],
            roi_size: count(meta[9], "roi_size")?,
        };
        config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(config)
    }
}
