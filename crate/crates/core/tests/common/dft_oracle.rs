use std::f64::consts::PI;

use freqpriv::tensor::FeatureMap;

/// Direct double sum, written out independently of the library.
pub fn oracle_dft(x: &FeatureMap) -> Vec<(f64, f64)> {
    let (c, h, w) = x.dims();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for u in 0..h {
            for v in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for xx in 0..w {
                        let t = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                        let val = x.get(ch, y, xx);
                        re += val * t.cos();
                        im += val * t.sin();
                    }
                }
                out.push((re, im));
            }
        }
    }
    out
}
