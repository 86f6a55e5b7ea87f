//! Forward kernels and their adjoints.
//!
//! Convolution weights use the `FeatureMap` layout: a 1×1 kernel is
//! `C_out×C_in×1`, a 3×3 kernel is `C_out×C_in×9` (row-major taps), and a
//! bias is `C_out×1×1`.

use super::FeatureMap;
use crate::error::{Error, Result};

#[inline]
pub fn sigmoid_scalar(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &FeatureMap) -> FeatureMap {
    x.map(sigmoid_scalar)
}

/// `x · σ(x)`.
pub fn silu(x: &FeatureMap) -> FeatureMap {
    x.map(|t| t * sigmoid_scalar(t))
}

pub(crate) fn silu_backward(x: &FeatureMap, grad: &FeatureMap) -> FeatureMap {
    let data = x
        .as_slice()
        .iter()
        .zip(grad.as_slice())
        .map(|(&t, &g)| {
            let s = sigmoid_scalar(t);
            g * (s + t * s * (1.0 - s))
        })
        .collect();
    FeatureMap::from_raw(x.channels(), x.height(), x.width(), data)
}

pub fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape(
            "concat_channels",
            format!("{:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.as_slice());
    data.extend_from_slice(b.as_slice());
    Ok(FeatureMap::from_raw(
        a.channels() + b.channels(),
        a.height(),
        a.width(),
        data,
    ))
}

pub fn add(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    if a.dims() != b.dims() {
        return Err(Error::shape("add", format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x + y)
        .collect();
    Ok(FeatureMap::from_raw(a.channels(), a.height(), a.width(), data))
}

fn check_bias(op: &'static str, bias: &FeatureMap, c_out: usize) -> Result<()> {
    if bias.dims() != (c_out, 1, 1) {
        return Err(Error::shape(
            op,
            format!("bias {:?}, expected ({c_out}, 1, 1)", bias.dims()),
        ));
    }
    Ok(())
}

/// Per-position channel mix: `y[o] = Σ_i W[o,i]·x[i] + b[o]`.
pub fn conv1x1(x: &FeatureMap, weight: &FeatureMap, bias: &FeatureMap) -> Result<FeatureMap> {
    let (c_out, c_in, k) = weight.dims();
    if k != 1 || c_in != x.channels() {
        return Err(Error::shape(
            "conv1x1",
            format!("weight {:?} for input {:?}", weight.dims(), x.dims()),
        ));
    }
    check_bias("conv1x1", bias, c_out)?;
    let p = x.plane();
    let w = weight.as_slice();
    let mut out = vec![0.0; c_out * p];
    for o in 0..c_out {
        let dst = &mut out[o * p..(o + 1) * p];
        for i in 0..c_in {
            let wi = w[o * c_in + i];
            for (d, s) in dst.iter_mut().zip(x.channel(i)) {
                *d += wi * s;
            }
        }
        let b = bias.as_slice()[o];
        for d in dst.iter_mut() {
            *d += b;
        }
    }
    Ok(FeatureMap::from_raw(c_out, x.height(), x.width(), out))
}

pub(crate) fn conv1x1_backward(
    x: &FeatureMap,
    weight: &FeatureMap,
    grad: &FeatureMap,
) -> (FeatureMap, FeatureMap, FeatureMap) {
    let (c_out, c_in, _) = weight.dims();
    let p = x.plane();
    let w = weight.as_slice();
    let mut gx = vec![0.0; c_in * p];
    let mut gw = vec![0.0; c_out * c_in];
    let mut gb = vec![0.0; c_out];
    for o in 0..c_out {
        let g = grad.channel(o);
        gb[o] = g.iter().sum();
        for i in 0..c_in {
            let xi = x.channel(i);
            gw[o * c_in + i] = g.iter().zip(xi).map(|(a, b)| a * b).sum();
            let wi = w[o * c_in + i];
            for (d, s) in gx[i * p..(i + 1) * p].iter_mut().zip(g) {
                *d += wi * s;
            }
        }
    }
    (
        FeatureMap::from_raw(c_in, x.height(), x.width(), gx),
        FeatureMap::from_raw(c_out, c_in, 1, gw),
        FeatureMap::from_raw(c_out, 1, 1, gb),
    )
}

/// Output extent of a stride-2, pad-1, 3-tap axis.
pub fn stride2_extent(n: usize) -> usize {
    n.div_ceil(2)
}

/// 3×3 cross-correlation, stride 2, zero padding 1.
pub fn conv3x3s2(x: &FeatureMap, weight: &FeatureMap, bias: &FeatureMap) -> Result<FeatureMap> {
    let (c_out, c_in, taps) = weight.dims();
    if taps != 9 || c_in != x.channels() {
        return Err(Error::shape(
            "conv3x3s2",
            format!("weight {:?} for input {:?}", weight.dims(), x.dims()),
        ));
    }
    if x.height() < 3 || x.width() < 3 {
        return Err(Error::shape(
            "conv3x3s2",
            format!("input {:?} smaller than the 3x3 kernel", x.dims()),
        ));
    }
    check_bias("conv3x3s2", bias, c_out)?;
    let (h, w) = (x.height(), x.width());
    let (oh, ow) = (stride2_extent(h), stride2_extent(w));
    let wt = weight.as_slice();
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        let dst = &mut out[o * oh * ow..(o + 1) * oh * ow];
        dst.fill(bias.as_slice()[o]);
        for i in 0..c_in {
            let src = x.channel(i);
            for ky in 0..3 {
                for kx in 0..3 {
                    let k = wt[(o * c_in + i) * 9 + ky * 3 + kx];
                    for oy in 0..oh {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                *d += k * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(FeatureMap::from_raw(c_out, oh, ow, out))
}

pub(crate) fn conv3x3s2_backward(
    x: &FeatureMap,
    weight: &FeatureMap,
    grad: &FeatureMap,
) -> (FeatureMap, FeatureMap, FeatureMap) {
    let (c_out, c_in, _) = weight.dims();
    let (h, w) = (x.height(), x.width());
    let (oh, ow) = (grad.height(), grad.width());
    let wt = weight.as_slice();
    let mut gx = vec![0.0; c_in * h * w];
    let mut gw = vec![0.0; c_out * c_in * 9];
    let mut gb = vec![0.0; c_out];
    for o in 0..c_out {
        let g = grad.channel(o);
        gb[o] = g.iter().sum();
        for i in 0..c_in {
            let src = x.channel(i);
            let gsrc = &mut gx[i * h * w..(i + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let widx = (o * c_in + i) * 9 + ky * 3 + kx;
                    let k = wt[widx];
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = iy as usize * w;
                        for ox in 0..ow {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                let gv = g[oy * ow + ox];
                                acc += gv * src[base + ix as usize];
                                gsrc[base + ix as usize] += k * gv;
                            }
                        }
                    }
                    gw[widx] = acc;
                }
            }
        }
    }
    (
        FeatureMap::from_raw(c_in, h, w, gx),
        FeatureMap::from_raw(c_out, c_in, 9, gw),
        FeatureMap::from_raw(c_out, 1, 1, gb),
    )
}

/// One axis of an align-corners-false bilinear sampling plan:
/// `(lower index, upper index, upper weight)` per output position.
pub(crate) type AxisPlan = Vec<(usize, usize, f64)>;

pub(crate) fn resize_axis_plan(n_in: usize, n_out: usize) -> AxisPlan {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Applies separable per-axis plans to every channel of `x`.
pub(crate) fn sample_bilinear(x: &FeatureMap, rows: &AxisPlan, cols: &AxisPlan) -> FeatureMap {
    let (c, _, w) = x.dims();
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = x.channel(ch);
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out[(ch * oh + oy) * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    FeatureMap::from_raw(c, oh, ow, out)
}

/// Adjoint of [`sample_bilinear`]: scatters `grad` back onto the source grid.
pub(crate) fn sample_bilinear_adjoint(
    dims: (usize, usize, usize),
    rows: &AxisPlan,
    cols: &AxisPlan,
    grad: &FeatureMap,
) -> FeatureMap {
    let (c, h, w) = dims;
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let g = grad.as_slice()[(ch * oh + oy) * ow + ox];
                dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * w + x0] += g * fy * (1.0 - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    FeatureMap::from_raw(c, h, w, out)
}

/// Bilinear resampling with half-pixel centers (align-corners = false).
pub fn bilinear_resize(x: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape(
            "bilinear_resize",
            format!("target size {out_h}x{out_w}"),
        ));
    }
    if (out_h, out_w) == (x.height(), x.width()) {
        return Ok(x.clone());
    }
    let rows = resize_axis_plan(x.height(), out_h);
    let cols = resize_axis_plan(x.width(), out_w);
    Ok(sample_bilinear(x, &rows, &cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((sigmoid_scalar(40.0) - 1.0).abs() <= 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let t: f64 = rng.random_range(-30.0..30.0);
            let s = sigmoid_scalar(t) + sigmoid_scalar(-t);
            assert!((s - 1.0).abs() < 1e-15);
            assert!(sigmoid_scalar(t) > 0.0 && sigmoid_scalar(t) < 1.0);
        }
    }

    #[test]
    fn conv1x1_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 3, 4, 5);
        let mut eye = FeatureMap::zeros(3, 3, 1);
        for i in 0..3 {
            eye.set(i, i, 0, 1.0);
        }
        let zb = FeatureMap::zeros(3, 1, 1);
        assert_eq!(conv1x1(&x, &eye, &zb).unwrap(), x);
        let y = conv1x1(&x, &FeatureMap::zeros(3, 3, 1), &zb).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv1x1_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 3, 4, 4);
        let wt = random(&mut rng, 2, 3, 1);
        let b = random(&mut rng, 2, 1, 1);
        let y = conv1x1(&x, &wt, &b).unwrap();
        for o in 0..2 {
            for h in 0..4 {
                for w in 0..4 {
                    let mut acc = b.get(o, 0, 0);
                    for i in 0..3 {
                        acc += wt.get(o, i, 0) * x.get(i, h, w);
                    }
                    assert!((y.get(o, h, w) - acc).abs() < 1e-12);
                }
            }
        }
        assert!(conv1x1(&x, &random(&mut rng, 2, 4, 1), &b).is_err());
        assert!(conv1x1(&x, &wt, &random(&mut rng, 3, 1, 1)).is_err());
    }

    #[test]
    fn conv3x3s2_constant_interior_and_zero() {
        let x = FeatureMap::filled(1, 7, 7, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let wt = random(&mut rng, 1, 1, 9);
        let ws: f64 = wt.as_slice().iter().sum();
        let y = conv3x3s2(&x, &wt, &FeatureMap::zeros(1, 1, 1)).unwrap();
        assert_eq!(y.dims(), (1, 4, 4));
        assert!((y.get(0, 1, 1) - 2.0 * ws).abs() < 1e-12);
        let z = conv3x3s2(&x, &FeatureMap::zeros(1, 1, 9), &FeatureMap::zeros(1, 1, 1)).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
        assert!(conv3x3s2(&x, &FeatureMap::zeros(1, 1, 4), &FeatureMap::zeros(1, 1, 1)).is_err());
    }

    #[test]
    fn conv3x3s2_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, 1, 5, 5);
        let wt = random(&mut rng, 2, 1, 9);
        let b = random(&mut rng, 2, 1, 1);
        let y = conv3x3s2(&x, &wt, &b).unwrap();
        assert_eq!(y.dims(), (2, 3, 3));
        for o in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = b.get(o, 0, 0);
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let iy = 2 * oy as i64 + ky - 1;
                            let ix = 2 * ox as i64 + kx - 1;
                            if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                acc += wt.get(o, 0, (ky * 3 + kx) as usize)
                                    * x.get(0, iy as usize, ix as usize);
                            }
                        }
                    }
                    assert!((y.get(o, oy, ox) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, 2, 3, 5);
        assert_eq!(bilinear_resize(&x, 3, 5).unwrap(), x);
        let c = FeatureMap::filled(1, 3, 3, 1.25);
        for (h, w) in [(1, 1), (7, 2), (5, 9)] {
            let y = bilinear_resize(&c, h, w).unwrap();
            assert!(y.as_slice().iter().all(|&v| (v - 1.25).abs() < 1e-15));
        }
    }

    #[test]
    fn resize_2x2_to_4x4_hand_values() {
        // Source coordinates per output index: -0.25→0, 0.25, 0.75, 1.25→row 1.
        // Along one axis [a, b] becomes [a, 0.75a+0.25b, 0.25a+0.75b, b].
        let x = FeatureMap::from_vec(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap();
        let expected = [
            [0.0, 0.25, 0.75, 1.0],
            [0.5, 0.75, 1.25, 1.5],
            [1.5, 1.75, 2.25, 2.5],
            [2.0, 2.25, 2.75, 3.0],
        ];
        for (r, row) in expected.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                assert!((y.get(0, r, c) - v).abs() < 1e-12, "({r},{c})");
            }
        }
    }
}
