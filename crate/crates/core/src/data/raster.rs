//! 8-bit PGM (P5) / PPM (P6) rasters.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB), interleaved.
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Image(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Image(format!(
                "{} bytes for a {width}x{height}x{channels} raster",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, data)
    }

    /// Quantizes values in `[0, 1]` (clamped) to a gray raster.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        let data = values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Self::gray(width, height, data)
    }

    /// Pixel intensity on the 0–255 scale (channel mean for RGB).
    pub fn intensity(&self, x: usize, y: usize) -> f64 {
        let i = (y * self.width + x) * self.channels;
        if self.channels == 1 {
            self.data[i] as f64
        } else {
            self.data[i..i + 3].iter().map(|&v| v as f64).sum::<f64>() / 3.0
        }
    }

    /// Single-channel map with intensities scaled to `[0, 1]`.
    pub fn to_feature_map(&self) -> FeatureMap {
        let mut out = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(self.intensity(x, y) / 255.0);
            }
        }
        FeatureMap::from_raw(1, self.height, self.width, out)
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut token = |what: &str| -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Image(format!("missing {what} in header")));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let channels = match token("magic")?.as_str() {
            "P5" => 1,
            "P6" => 3,
            m => return Err(Error::Image(format!("unsupported magic {m:?} (expected P5 or P6)"))),
        };
        let mut number = |what: &str| -> Result<usize> {
            let t = token(what)?;
            t.parse().map_err(|_| Error::Image(format!("bad {what} {t:?}")))
        };
        let width = number("width")?;
        let height = number("height")?;
        let maxval = number("maxval")?;
        if maxval != 255 {
            return Err(Error::Image(format!("maxval {maxval} unsupported (8-bit only)")));
        }
        // exactly one whitespace byte separates header and raster
        let start = pos + 1;
        let n = width * height * channels;
        if bytes.len() < start + n {
            return Err(Error::Image(format!("truncated raster: need {n} bytes")));
        }
        Self::new(width, height, channels, bytes[start..start + n].to_vec())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}
