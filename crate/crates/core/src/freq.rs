//! Frequency-domain attention fusion, learnable spectral gating and the
//! radially weighted frequency-consistency loss.
//!
//! The FDAF block maps a feature `I` to
//!
//! ```text
//! Y_spa = Re(IDFT(DFT(I) ⊙ σ(W_gate)))
//! out   = Conv1x1(Concat(I, Y_spa)) + I
//! ```
//!
//! and the consistency loss between predicted crops `P_i` and target crops
//! `T_i` is `(1/N) Σ_i ‖w ⊙ (DFT(P_i) − DFT(T_i))‖²` with `w(r) = 1 + λr`.

use crate::error::{Error, Result};
use crate::tensor::dft::{dft2, idft2, inverse_unnormalized_real};
use crate::tensor::kernels::{add, concat_channels, conv1x1, sigmoid};
use crate::tensor::ops::{gate_spectrum, Add, ApplyGate, ConcatChannels, Conv1x1, Dft2, Idft2, Op};
use crate::tensor::{expect_real, FeatureMap, NodeId, Spectrum, Tape, Tensor};

/// Logit initialization: σ(2) ≈ 0.88, close to pass-through.
pub const DEFAULT_GATE_INIT: f64 = 2.0;
/// Logit used to pin the gate open (σ(40) rounds to 1).
pub const OPEN_GATE_LOGIT: f64 = 40.0;
pub const DEFAULT_LAMBDA: f64 = 2.0;

/// Learnable per-bin soft mask over a `C×H×W` spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralGate {
    logits: FeatureMap,
    frozen: bool,
}

impl SpectralGate {
    pub fn new(channels: usize, height: usize, width: usize, init: f64) -> Self {
        Self {
            logits: FeatureMap::filled(channels, height, width, init),
            frozen: false,
        }
    }

    pub fn from_logits(logits: FeatureMap) -> Result<Self> {
        if !logits.is_finite() {
            return Err(Error::NonFinite { op: "SpectralGate".into() });
        }
        Ok(Self { logits, frozen: false })
    }

    /// Gate pinned at σ≈1 that the optimizer never updates.
    pub fn frozen_open(channels: usize, height: usize, width: usize) -> Self {
        Self {
            logits: FeatureMap::filled(channels, height, width, OPEN_GATE_LOGIT),
            frozen: true,
        }
    }

    pub fn logits(&self) -> &FeatureMap {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut FeatureMap {
        &mut self.logits
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.logits.dims()
    }

    /// `σ(logits)`, elementwise in `(0, 1)`.
    pub fn mask(&self) -> FeatureMap {
        sigmoid(&self.logits)
    }
}

/// Gates a spectrum bin-by-bin: both parts of `F(u,v)` scale by `σ(W(u,v))`.
pub fn apply_gate(f: &Spectrum, gate: &SpectralGate) -> Result<Spectrum> {
    gate_spectrum(f, gate.logits())
}

/// Frequency-domain attention fusion block.
#[derive(Debug, Clone, PartialEq)]
pub struct FdafBlock {
    pub gate: SpectralGate,
    /// `C×2C×1`
    pub fusion_weight: FeatureMap,
    /// `C×1×1`
    pub fusion_bias: FeatureMap,
}

/// Tape handles created by [`FdafBlock::record`].
#[derive(Debug, Clone, Copy)]
pub struct FdafNodes {
    pub gate: NodeId,
    pub fusion_weight: NodeId,
    pub fusion_bias: NodeId,
    pub output: NodeId,
}

impl FdafBlock {
    /// Zero fusion weights: the block starts as an exact identity.
    pub fn new(channels: usize, height: usize, width: usize, gate_init: f64) -> Self {
        Self {
            gate: SpectralGate::new(channels, height, width, gate_init),
            fusion_weight: FeatureMap::zeros(channels, 2 * channels, 1),
            fusion_bias: FeatureMap::zeros(channels, 1, 1),
        }
    }

    pub fn from_parts(gate: SpectralGate, fusion_weight: FeatureMap, fusion_bias: FeatureMap) -> Result<Self> {
        let c = gate.dims().0;
        if fusion_weight.dims() != (c, 2 * c, 1) {
            return Err(Error::shape(
                "FdafBlock",
                format!("fusion weight {:?}, expected ({c}, {}, 1)", fusion_weight.dims(), 2 * c),
            ));
        }
        if fusion_bias.dims() != (c, 1, 1) {
            return Err(Error::shape("FdafBlock", format!("fusion bias {:?}", fusion_bias.dims())));
        }
        Ok(Self {
            gate,
            fusion_weight,
            fusion_bias,
        })
    }

    pub fn channels(&self) -> usize {
        self.gate.dims().0
    }

    fn check_input(&self, i: &FeatureMap) -> Result<()> {
        if i.dims() != self.gate.dims() {
            return Err(Error::shape(
                "fdaf_forward",
                format!("input {:?} vs gate {:?}", i.dims(), self.gate.dims()),
            ));
        }
        Ok(())
    }

    /// Records the block on a tape. The gate logits enter as a constant when
    /// the gate is frozen.
    pub fn record(&self, tape: &mut Tape, input: NodeId) -> Result<FdafNodes> {
        self.check_input(expect_real(tape.value(input), "fdaf_forward")?)?;
        let gate = if self.gate.is_frozen() {
            tape.constant(self.gate.logits().clone())
        } else {
            tape.leaf(self.gate.logits().clone())
        };
        let fusion_weight = tape.leaf(self.fusion_weight.clone());
        let fusion_bias = tape.leaf(self.fusion_bias.clone());
        let output = self.record_with(tape, input, gate, fusion_weight, fusion_bias)?;
        Ok(FdafNodes {
            gate,
            fusion_weight,
            fusion_bias,
            output,
        })
    }

    /// Records the block using caller-provided parameter nodes.
    pub fn record_with(
        &self,
        tape: &mut Tape,
        input: NodeId,
        gate: NodeId,
        fusion_weight: NodeId,
        fusion_bias: NodeId,
    ) -> Result<NodeId> {
        let spec = tape.apply(Dft2, &[input])?;
        let gated = tape.apply(ApplyGate, &[spec, gate])?;
        let y_spa = tape.apply(Idft2, &[gated])?;
        let cat = tape.apply(ConcatChannels, &[input, y_spa])?;
        let mixed = tape.apply(Conv1x1, &[cat, fusion_weight, fusion_bias])?;
        tape.apply(Add, &[mixed, input])
    }
}

/// Tape-free evaluation of the FDAF block.
pub fn fdaf_forward(i: &FeatureMap, block: &FdafBlock) -> Result<FeatureMap> {
    block.check_input(i)?;
    let gated = apply_gate(&dft2(i), &block.gate)?;
    let y_spa = idft2(&gated);
    let cat = concat_channels(i, &y_spa)?;
    let mixed = conv1x1(&cat, &block.fusion_weight, &block.fusion_bias)?;
    add(&mixed, i)
}

/// Static radial frequency weighting `w(u,v) = 1 + λ·r(u,v)`.
///
/// `r` is the wrap-aware distance of bin `(u,v)` from DC,
/// `sqrt(min(u, H−u)² + min(v, W−v)²)`, divided by its grid maximum so that
/// `r ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialWeight {
    height: usize,
    width: usize,
    lambda: f64,
    values: Vec<f64>,
}

impl RadialWeight {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[u * self.width + v]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn radial_weight(height: usize, width: usize, lambda: f64) -> Result<RadialWeight> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!("radial weight grid {height}x{width}")));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let dist: Vec<f64> = (0..height)
        .flat_map(|u| {
            (0..width).map(move |v| {
                let du = u.min(height - u) as f64;
                let dv = v.min(width - v) as f64;
                (du * du + dv * dv).sqrt()
            })
        })
        .collect();
    let max = dist.iter().copied().fold(0.0, f64::max);
    let values = dist
        .iter()
        .map(|&d| {
            let r = if max > 0.0 { d / max } else { 0.0 };
            1.0 + lambda * r
        })
        .collect();
    Ok(RadialWeight {
        height,
        width,
        lambda,
        values,
    })
}

/// Value of the frequency-consistency loss with its pair count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreqConsistency {
    pub loss: f64,
    pub pairs: usize,
    /// Set when no matched targets were supplied; `loss` is then 0.
    pub no_targets: bool,
}

fn check_pairs(p: &[&FeatureMap], t: &[&FeatureMap]) -> Result<(usize, usize, usize)> {
    if p.len() != t.len() {
        return Err(Error::shape(
            "freq_consistency_loss",
            format!("{} predicted crops vs {} target crops", p.len(), t.len()),
        ));
    }
    let dims = p[0].dims();
    for (a, b) in p.iter().zip(t) {
        if a.dims() != dims || b.dims() != dims {
            return Err(Error::shape(
                "freq_consistency_loss",
                format!("crop dims {:?} / {:?}, expected {dims:?}", a.dims(), b.dims()),
            ));
        }
    }
    Ok(dims)
}

fn difference(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x - y).collect();
    FeatureMap::from_raw(a.channels(), a.height(), a.width(), data)
}

/// Spectrum of `P − T` (equal to `DFT(P) − DFT(T)` by linearity).
fn spectral_difference(p: &FeatureMap, t: &FeatureMap) -> Spectrum {
    dft2(&difference(p, t))
}

fn weighted_energy(d: &Spectrum, weight: &RadialWeight) -> f64 {
    let (c, h, w) = d.dims();
    let plane = h * w;
    let mut acc = 0.0;
    for ch in 0..c {
        for k in 0..plane {
            let i = ch * plane + k;
            let wk = weight.values[k];
            let (re, im) = (wk * d.re()[i], wk * d.im()[i]);
            acc += re * re + im * im;
        }
    }
    acc
}

pub fn freq_consistency_loss(p: &[FeatureMap], t: &[FeatureMap], lambda: f64) -> Result<FreqConsistency> {
    if p.is_empty() && t.is_empty() {
        return Ok(FreqConsistency {
            loss: 0.0,
            pairs: 0,
            no_targets: true,
        });
    }
    let pr: Vec<&FeatureMap> = p.iter().collect();
    let tr: Vec<&FeatureMap> = t.iter().collect();
    let (_, h, w) = check_pairs(&pr, &tr)?;
    let weight = radial_weight(h, w, lambda)?;
    let total: f64 = p
        .iter()
        .zip(t)
        .map(|(a, b)| weighted_energy(&spectral_difference(a, b), &weight))
        .sum();
    Ok(FreqConsistency {
        loss: total / p.len() as f64,
        pairs: p.len(),
        no_targets: false,
    })
}

/// Tape operation for the consistency loss.
/// Inputs: `P_1 … P_N, T_1 … T_N` (all `C×S×S`), output: scalar.
#[derive(Debug, Clone)]
pub struct FreqConsistencyOp {
    pub lambda: f64,
}

impl FreqConsistencyOp {
    fn split<'a>(&self, inputs: &[&'a Tensor]) -> Result<(Vec<&'a FeatureMap>, Vec<&'a FeatureMap>)> {
        if inputs.is_empty() || inputs.len() % 2 != 0 {
            return Err(Error::shape("freq_consistency_loss", "expected N predicted and N target crops"));
        }
        let n = inputs.len() / 2;
        let mut p = Vec::with_capacity(n);
        let mut t = Vec::with_capacity(n);
        for (k, x) in inputs.iter().enumerate() {
            let x = expect_real(x, "freq_consistency_loss")?;
            if k < n {
                p.push(x)
            } else {
                t.push(x)
            }
        }
        check_pairs(&p, &t)?;
        Ok((p, t))
    }
}

impl Op for FreqConsistencyOp {
    fn name(&self) -> &'static str {
        "freq_consistency_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (p, t) = self.split(inputs)?;
        let (_, h, w) = p[0].dims();
        let weight = radial_weight(h, w, self.lambda)?;
        let total: f64 = p
            .iter()
            .zip(&t)
            .map(|(a, b)| weighted_energy(&spectral_difference(a, b), &weight))
            .sum();
        Ok(FeatureMap::scalar(total / p.len() as f64).into())
    }

    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, wants: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (p, t) = self.split(inputs)?;
        let n = p.len();
        let g = expect_real(grad, "freq_consistency_loss")?.item();
        let (c, h, w) = p[0].dims();
        let weight = radial_weight(h, w, self.lambda)?;
        let scale = 2.0 * g / n as f64;
        let plane = h * w;
        let mut out: Vec<Option<Tensor>> = vec![None; 2 * n];
        for i in 0..n {
            if !wants[i] && !wants[n + i] {
                continue;
            }
            let mut d = spectral_difference(p[i], t[i]);
            for ch in 0..c {
                for k in 0..plane {
                    let idx = ch * plane + k;
                    let w2 = weight.values[k] * weight.values[k];
                    d.re_mut()[idx] *= scale * w2;
                    d.im_mut()[idx] *= scale * w2;
                }
            }
            let gp = inverse_unnormalized_real(&d);
            if wants[n + i] {
                out[n + i] = Some(gp.scale(-1.0).into());
            }
            if wants[i] {
                out[i] = Some(gp.into());
            }
        }
        Ok(out)
    }
}
