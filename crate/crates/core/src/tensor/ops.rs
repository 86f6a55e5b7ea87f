//! Differentiable operations: a forward map plus its vector-Jacobian product.

use super::dft::{dft2, idft2, inverse_unnormalized_real};
use super::kernels::{
    self, add, concat_channels, conv1x1, conv1x1_backward, conv3x3s2, conv3x3s2_backward,
    resize_axis_plan, sample_bilinear_adjoint, sigmoid_scalar, silu,
    silu_backward,
};
use super::{expect_complex, expect_real, FeatureMap, Spectrum, Tensor};
use crate::error::{Error, Result};

/// A differentiable operation over tape values.
///
/// `vjp` receives the forward inputs, the forward output and the cotangent
/// of the output, and returns one cotangent per input. Entries where
/// `wants[i]` is false may be skipped (`None`).
pub trait Op: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    fn vjp(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        wants: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

fn arity(op: &'static str, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::shape(op, format!("expected {n} inputs, got {}", inputs.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Dft2;

impl Op for Dft2 {
    fn name(&self) -> &'static str {
        "dft2"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("dft2", inputs, 1)?;
        Ok(dft2(expect_real(inputs[0], "dft2")?).into())
    }

    fn vjp(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let g = expect_complex(grad, "dft2")?;
        Ok(vec![Some(inverse_unnormalized_real(g).into())])
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Idft2;

impl Op for Idft2 {
    fn name(&self) -> &'static str {
        "idft2"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("idft2", inputs, 1)?;
        Ok(idft2(expect_complex(inputs[0], "idft2")?).into())
    }

    fn vjp(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let g = expect_real(grad, "idft2")?;
        let (_, h, w) = g.dims();
        let norm = 1.0 / (h * w) as f64;
        let mut f = dft2(g);
        f.re_mut().iter_mut().for_each(|v| *v *= norm);
        f.im_mut().iter_mut().for_each(|v| *v *= norm);
        Ok(vec![Some(f.into())])
    }
}

/// Inputs: `x`, `weight (C_out×C_in×1)`, `bias (C_out×1×1)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Conv1x1;

impl Op for Conv1x1 {
    fn name(&self) -> &'static str {
        "conv1x1"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("conv1x1", inputs, 3)?;
        let x = expect_real(inputs[0], "conv1x1")?;
        let w = expect_real(inputs[1], "conv1x1")?;
        let b = expect_real(inputs[2], "conv1x1")?;
        Ok(conv1x1(x, w, b)?.into())
    }

    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let x = expect_real(inputs[0], "conv1x1")?;
        let w = expect_real(inputs[1], "conv1x1")?;
        let g = expect_real(grad, "conv1x1")?;
        let (gx, gw, gb) = conv1x1_backward(x, w, g);
        Ok(vec![Some(gx.into()), Some(gw.into()), Some(gb.into())])
    }
}

/// Inputs: `x`, `weight (C_out×C_in×9)`, `bias (C_out×1×1)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Conv3x3s2;

impl Op for Conv3x3s2 {
    fn name(&self) -> &'static str {
        "conv3x3s2"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("conv3x3s2", inputs, 3)?;
        let x = expect_real(inputs[0], "conv3x3s2")?;
        let w = expect_real(inputs[1], "conv3x3s2")?;
        let b = expect_real(inputs[2], "conv3x3s2")?;
        Ok(conv3x3s2(x, w, b)?.into())
    }

    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let x = expect_real(inputs[0], "conv3x3s2")?;
        let w = expect_real(inputs[1], "conv3x3s2")?;
        let g = expect_real(grad, "conv3x3s2")?;
        let (gx, gw, gb) = conv3x3s2_backward(x, w, g);
        Ok(vec![Some(gx.into()), Some(gw.into()), Some(gb.into())])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BilinearResize {
    pub out_h: usize,
    pub out_w: usize,
}

impl Op for BilinearResize {
    fn name(&self) -> &'static str {
        "bilinear_resize"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("bilinear_resize", inputs, 1)?;
        let x = expect_real(inputs[0], "bilinear_resize")?;
        Ok(kernels::bilinear_resize(x, self.out_h, self.out_w)?.into())
    }

    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let x = expect_real(inputs[0], "bilinear_resize")?;
        let g = expect_real(grad, "bilinear_resize")?;
        if (self.out_h, self.out_w) == (x.height(), x.width()) {
            return Ok(vec![Some(g.clone().into())]);
        }
        let rows = resize_axis_plan(x.height(), self.out_h);
        let cols = resize_axis_plan(x.width(), self.out_w);
        Ok(vec![Some(sample_bilinear_adjoint(x.dims(), &rows, &cols, g).into())])
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sigmoid;

impl Op for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("sigmoid", inputs, 1)?;
        Ok(kernels::sigmoid(expect_real(inputs[0], "sigmoid")?).into())
    }

    fn vjp(&self, _: &[&Tensor], output: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let s = expect_real(output, "sigmoid")?;
        let g = expect_real(grad, "sigmoid")?;
        let data = s
            .as_slice()
            .iter()
            .zip(g.as_slice())
            .map(|(&s, &g)| g * s * (1.0 - s))
            .collect();
        Ok(vec![Some(
            FeatureMap::from_raw(s.channels(), s.height(), s.width(), data).into(),
        )])
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Silu;

impl Op for Silu {
    fn name(&self) -> &'static str {
        "silu"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("silu", inputs, 1)?;
        Ok(silu(expect_real(inputs[0], "silu")?).into())
    }

    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let x = expect_real(inputs[0], "silu")?;
        let g = expect_real(grad, "silu")?;
        Ok(vec![Some(silu_backward(x, g).into())])
    }
}

/// Concatenates two real maps along the channel axis.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConcatChannels;

impl Op for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("concat_channels", inputs, 2)?;
        let a = expect_real(inputs[0], "concat_channels")?;
        let b = expect_real(inputs[1], "concat_channels")?;
        Ok(concat_channels(a, b)?.into())
    }

    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let a = expect_real(inputs[0], "concat_channels")?;
        let b = expect_real(inputs[1], "concat_channels")?;
        let g = expect_real(grad, "concat_channels")?;
        let split = a.len();
        let ga = FeatureMap::from_raw(a.channels(), a.height(), a.width(), g.as_slice()[..split].to_vec());
        let gb = FeatureMap::from_raw(b.channels(), b.height(), b.width(), g.as_slice()[split..].to_vec());
        Ok(vec![Some(ga.into()), Some(gb.into())])
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Add;

impl Op for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("add", inputs, 2)?;
        let a = expect_real(inputs[0], "add")?;
        let b = expect_real(inputs[1], "add")?;
        Ok(add(a, b)?.into())
    }

    fn vjp(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.clone()), Some(grad.clone())])
    }
}

/// Hadamard product of a spectrum with `σ(logits)`.
/// Inputs: spectrum `F (C×H×W)`, real logits `(C×H×W)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ApplyGate;

impl Op for ApplyGate {
    fn name(&self) -> &'static str {
        "apply_gate"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("apply_gate", inputs, 2)?;
        let f = expect_complex(inputs[0], "apply_gate")?;
        let logits = expect_real(inputs[1], "apply_gate")?;
        Ok(gate_spectrum(f, logits)?.into())
    }

    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, wants: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let f = expect_complex(inputs[0], "apply_gate")?;
        let logits = expect_real(inputs[1], "apply_gate")?;
        let g = expect_complex(grad, "apply_gate")?;
        let (c, h, w) = f.dims();
        let mask: Vec<f64> = logits.as_slice().iter().map(|&t| sigmoid_scalar(t)).collect();
        let gf = if wants.first().copied().unwrap_or(true) {
            let re = g.re().iter().zip(&mask).map(|(a, m)| a * m).collect();
            let im = g.im().iter().zip(&mask).map(|(a, m)| a * m).collect();
            Some(Spectrum::from_raw(c, h, w, re, im).into())
        } else {
            None
        };
        let gl = if wants.get(1).copied().unwrap_or(true) {
            let data = (0..f.len())
                .map(|i| {
                    let m = mask[i];
                    (g.re()[i] * f.re()[i] + g.im()[i] * f.im()[i]) * m * (1.0 - m)
                })
                .collect();
            Some(FeatureMap::from_raw(c, h, w, data).into())
        } else {
            None
        };
        Ok(vec![gf, gl])
    }
}

/// Shared forward kernel for spectral gating.
pub(crate) fn gate_spectrum(f: &Spectrum, logits: &FeatureMap) -> Result<Spectrum> {
    if f.dims() != logits.dims() {
        return Err(Error::shape(
            "apply_gate",
            format!("spectrum {:?} vs gate {:?}", f.dims(), logits.dims()),
        ));
    }
    let (c, h, w) = f.dims();
    let mask: Vec<f64> = logits.as_slice().iter().map(|&t| sigmoid_scalar(t)).collect();
    let re = f.re().iter().zip(&mask).map(|(a, m)| a * m).collect();
    let im = f.im().iter().zip(&mask).map(|(a, m)| a * m).collect();
    Ok(Spectrum::from_raw(c, h, w, re, im))
}

/// Linear combination of scalar (`1×1×1`) inputs: `Σ_k coeffs[k]·x_k`.
#[derive(Debug, Clone)]
pub struct WeightedSum {
    pub coeffs: Vec<f64>,
}

impl Op for WeightedSum {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        if inputs.len() != self.coeffs.len() || inputs.is_empty() {
            return Err(Error::shape("weighted_sum", "coefficient count mismatch"));
        }
        let mut acc: Option<f64> = None;
        for (t, &k) in inputs.iter().zip(&self.coeffs) {
            let x = expect_real(t, "weighted_sum")?;
            if x.len() != 1 {
                return Err(Error::shape("weighted_sum", "inputs must be scalars"));
            }
            let term = if k == 1.0 { x.item() } else { k * x.item() };
            acc = Some(match acc {
                None => term,
                Some(a) => a + term,
            });
        }
        Ok(FeatureMap::scalar(acc.unwrap_or(0.0)).into())
    }

    fn vjp(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let g = expect_real(grad, "weighted_sum")?.item();
        Ok(self
            .coeffs
            .iter()
            .map(|&k| Some(FeatureMap::scalar(k * g).into()))
            .collect())
    }
}
