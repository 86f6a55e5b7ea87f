//! Two-dimensional discrete Fourier transform, applied per channel.
//!
//! Forward transform is unnormalized, the inverse carries the `1/(HW)`
//! factor and keeps only the real part of the result:
//!
//! ```text
//! F_c(u,v) = Σ_h Σ_w X_c(h,w) · exp(-j2π(uh/H + vw/W))
//! Y_c(h,w) = Re[ (1/HW) Σ_u Σ_v F_c(u,v) · exp(+j2π(uh/H + vw/W)) ]
//! ```
//!
//! [`dft2_naive`] / [`idft2_naive`] evaluate the double sums literally and
//! act as the reference. [`dft2`] / [`idft2`] factor the same sums into a
//! row pass followed by a column pass, which is exact up to rounding.

use std::f64::consts::PI;

use super::{FeatureMap, Spectrum};

/// `cos(2πk/n)` and `sin(2πk/n)` for `k in 0..n`.
fn twiddles(n: usize) -> (Vec<f64>, Vec<f64>) {
    (0..n)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / n as f64;
            (a.cos(), a.sin())
        })
        .unzip()
}

/// Unnormalized separable transform of one `h×w` complex plane.
/// `sign = -1.0` is the forward kernel, `+1.0` the inverse kernel.
fn transform_plane(
    re: &[f64],
    im: &[f64],
    h: usize,
    w: usize,
    sign: f64,
    out_re: &mut [f64],
    out_im: &mut [f64],
) {
    let (cos_w, sin_w) = twiddles(w);
    let (cos_h, sin_h) = twiddles(h);

    // rows: G(h, v) = Σ_w x(h, w) e^{sign·j2π vw/W}
    let mut g_re = vec![0.0; h * w];
    let mut g_im = vec![0.0; h * w];
    for row in 0..h {
        let xr = &re[row * w..(row + 1) * w];
        let xi = &im[row * w..(row + 1) * w];
        for v in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for col in 0..w {
                let k = (v * col) % w;
                let (c, s) = (cos_w[k], sign * sin_w[k]);
                sr += xr[col] * c - xi[col] * s;
                si += xi[col] * c + xr[col] * s;
            }
            g_re[row * w + v] = sr;
            g_im[row * w + v] = si;
        }
    }

    // columns: F(u, v) = Σ_h G(h, v) e^{sign·j2π uh/H}
    for u in 0..h {
        for v in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for row in 0..h {
                let k = (u * row) % h;
                let (c, s) = (cos_h[k], sign * sin_h[k]);
                let (gr, gi) = (g_re[row * w + v], g_im[row * w + v]);
                sr += gr * c - gi * s;
                si += gi * c + gr * s;
            }
            out_re[u * w + v] = sr;
            out_im[u * w + v] = si;
        }
    }
}

/// Forward 2-D DFT of each channel.
pub fn dft2(x: &FeatureMap) -> Spectrum {
    let (c, h, w) = x.dims();
    let p = h * w;
    let mut re = vec![0.0; c * p];
    let mut im = vec![0.0; c * p];
    let zeros = vec![0.0; p];
    for ch in 0..c {
        transform_plane(
            x.channel(ch),
            &zeros,
            h,
            w,
            -1.0,
            &mut re[ch * p..(ch + 1) * p],
            &mut im[ch * p..(ch + 1) * p],
        );
    }
    Spectrum::from_raw(c, h, w, re, im)
}

/// Real part of the unnormalized inverse transform, without the `1/(HW)`
/// factor. This is the adjoint of [`dft2`].
pub(crate) fn inverse_unnormalized_real(f: &Spectrum) -> FeatureMap {
    let (c, h, w) = f.dims();
    let p = h * w;
    let mut re = vec![0.0; c * p];
    let mut im = vec![0.0; p];
    for ch in 0..c {
        transform_plane(
            &f.re()[ch * p..(ch + 1) * p],
            &f.im()[ch * p..(ch + 1) * p],
            h,
            w,
            1.0,
            &mut re[ch * p..(ch + 1) * p],
            &mut im,
        );
    }
    FeatureMap::from_raw(c, h, w, re)
}

/// Inverse 2-D DFT of each channel, real part only.
pub fn idft2(f: &Spectrum) -> FeatureMap {
    let (_, h, w) = f.dims();
    let norm = 1.0 / (h * w) as f64;
    let mut y = inverse_unnormalized_real(f);
    for v in y.as_mut_slice() {
        *v *= norm;
    }
    y
}

/// Literal evaluation of the forward double sum.
pub fn dft2_naive(x: &FeatureMap) -> Spectrum {
    let (c, h, w) = x.dims();
    let mut out = Spectrum::zeros(c, h, w);
    for ch in 0..c {
        for u in 0..h {
            for v in 0..w {
                let (mut sr, mut si) = (0.0, 0.0);
                for hh in 0..h {
                    for ww in 0..w {
                        let theta = 2.0
                            * PI
                            * ((u * hh) as f64 / h as f64 + (v * ww) as f64 / w as f64);
                        let val = x.get(ch, hh, ww);
                        sr += val * theta.cos();
                        si -= val * theta.sin();
                    }
                }
                out.set(ch, u, v, (sr, si));
            }
        }
    }
    out
}

/// Literal evaluation of the inverse double sum, real part only.
pub fn idft2_naive(f: &Spectrum) -> FeatureMap {
    let (c, h, w) = f.dims();
    let norm = 1.0 / (h * w) as f64;
    let mut out = FeatureMap::zeros(c, h, w);
    for ch in 0..c {
        for hh in 0..h {
            for ww in 0..w {
                let mut acc = 0.0;
                for u in 0..h {
                    for v in 0..w {
                        let theta = 2.0
                            * PI
                            * ((u * hh) as f64 / h as f64 + (v * ww) as f64 / w as f64);
                        let (fr, fi) = f.get(ch, u, v);
                        acc += fr * theta.cos() - fi * theta.sin();
                    }
                }
                out.set(ch, hh, ww, norm * acc);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureMap::from_vec(c, h, w, data).unwrap()
    }

    /// Full complex inverse (both parts), used to check that the real-part
    /// projection loses nothing for Hermitian input.
    fn complex_inverse_oracle(f: &Spectrum) -> (Vec<f64>, Vec<f64>) {
        let (c, h, w) = f.dims();
        let norm = 1.0 / (h * w) as f64;
        let mut re = vec![0.0; c * h * w];
        let mut im = vec![0.0; c * h * w];
        for ch in 0..c {
            for hh in 0..h {
                for ww in 0..w {
                    let (mut ar, mut ai) = (0.0, 0.0);
                    for u in 0..h {
                        for v in 0..w {
                            let t = 2.0
                                * PI
                                * ((u * hh) as f64 / h as f64 + (v * ww) as f64 / w as f64);
                            let (fr, fi) = f.get(ch, u, v);
                            ar += fr * t.cos() - fi * t.sin();
                            ai += fr * t.sin() + fi * t.cos();
                        }
                    }
                    let i = (ch * h + hh) * w + ww;
                    re[i] = norm * ar;
                    im[i] = norm * ai;
                }
            }
        }
        (re, im)
    }

    #[test]
    fn constant_map_is_dc_only() {
        let x = FeatureMap::filled(1, 2, 2, 3.0);
        let f = dft2(&x);
        assert_eq!(f.get(0, 0, 0), (12.0, 0.0));
        for (u, v) in [(0, 1), (1, 0), (1, 1)] {
            let (re, im) = f.get(0, u, v);
            assert!(re.abs() < 1e-15 && im.abs() < 1e-15);
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut x = FeatureMap::zeros(1, 2, 2);
        x.set(0, 0, 0, 1.0);
        let f = dft2(&x);
        for u in 0..2 {
            for v in 0..2 {
                let (re, im) = f.get(0, u, v);
                assert!((re - 1.0).abs() < 1e-15 && im.abs() < 1e-15);
            }
        }
    }

    #[test]
    fn inverse_of_dc() {
        let mut f = Spectrum::zeros(1, 2, 2);
        f.set(0, 0, 0, (4.0, 0.0));
        let y = idft2(&f);
        for v in y.as_slice() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn round_trip_against_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_map(&mut rng, 1, 4, 4);
        let naive = dft2_naive(&x);
        let fast = dft2(&x);
        assert!(naive.max_abs_diff(&fast) < 1e-12);
        assert!(idft2_naive(&naive).max_abs_diff(&x) < 1e-12);
        assert!(idft2(&fast).max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn separable_matches_naive_on_odd_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_map(&mut rng, 2, 3, 5);
        assert!(dft2_naive(&x).max_abs_diff(&dft2(&x)) < 1e-12);
        let f = dft2(&x);
        assert!(idft2_naive(&f).max_abs_diff(&idft2(&f)) < 1e-12);
    }

    #[test]
    fn hermitian_spectrum_inverse_is_real() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random_map(&mut rng, 1, 4, 6);
        let f = dft2(&x);
        let (re, im) = complex_inverse_oracle(&f);
        let y = idft2(&f);
        for (a, b) in y.as_slice().iter().zip(&re) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(im.iter().all(|v| v.abs() < 1e-12));
    }
}
