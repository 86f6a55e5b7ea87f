//! Minimal double-precision tensor kernel with explicit vector-Jacobian
//! products.
//!
//! Two value types exist: [`FeatureMap`], a real `C×H×W` block stored
//! row-major per channel, and [`Spectrum`], its complex counterpart with
//! split real/imaginary planes. Parameters (convolution kernels, biases,
//! gate logits) reuse the `FeatureMap` layout so that every differentiable
//! quantity shares one representation.

pub mod dft;
pub mod gradcheck;
pub mod kernels;
pub mod ops;
pub mod tape;

use crate::error::{Error, Result};

pub use dft::{dft2, dft2_naive, idft2, idft2_naive};
pub use gradcheck::{gradcheck, gradcheck_fn, GradcheckReport};
pub use kernels::{bilinear_resize, concat_channels, conv1x1, conv3x3s2, sigmoid, silu};
pub use tape::{Gradients, NodeId, Tape};

/// Real `C×H×W` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(
            channels > 0 && height > 0 && width > 0,
            "feature map dims must be positive"
        );
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, 1, value)
    }

    /// Builds a map from raw values, rejecting wrong lengths and non-finite entries.
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(
                "FeatureMap::from_vec",
                format!("dims must be positive, got {channels}x{height}x{width}"),
            ));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "FeatureMap::from_vec",
                format!(
                    "{} values for {channels}x{height}x{width}",
                    data.len()
                ),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "FeatureMap::from_vec".into(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Like [`from_vec`](Self::from_vec) but only checks the length.
    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.height + h) * self.width + w
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, h: usize, w: usize, value: f64) {
        let i = self.index(c, h, w);
        self.data[i] = value;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn scale(&self, a: f64) -> Self {
        self.map(|v| a * v)
    }

    pub fn dot(&self, other: &FeatureMap) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Single value of a `1×1×1` map.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub(crate) fn add_assign(&mut self, other: &FeatureMap) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Complex `C×H×W` tensor with split real and imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    channels: usize,
    height: usize,
    width: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl Spectrum {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        let n = channels * height * width;
        Self {
            channels,
            height,
            width,
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn from_parts(
        channels: usize,
        height: usize,
        width: usize,
        re: Vec<f64>,
        im: Vec<f64>,
    ) -> Result<Self> {
        let n = channels * height * width;
        if n == 0 || re.len() != n || im.len() != n {
            return Err(Error::shape(
                "Spectrum::from_parts",
                format!(
                    "{}+{} components for {channels}x{height}x{width}",
                    re.len(),
                    im.len()
                ),
            ));
        }
        if re.iter().chain(&im).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "Spectrum::from_parts".into(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            re,
            im,
        })
    }

    pub(crate) fn from_raw(
        channels: usize,
        height: usize,
        width: usize,
        re: Vec<f64>,
        im: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(re.len(), channels * height * width);
        debug_assert_eq!(im.len(), re.len());
        Self {
            channels,
            height,
            width,
            re,
            im,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    #[inline]
    pub fn index(&self, c: usize, u: usize, v: usize) -> usize {
        (c * self.height + u) * self.width + v
    }

    /// `(re, im)` of bin `(u, v)` in channel `c`.
    pub fn get(&self, c: usize, u: usize, v: usize) -> (f64, f64) {
        let i = self.index(c, u, v);
        (self.re[i], self.im[i])
    }

    pub fn set(&mut self, c: usize, u: usize, v: usize, value: (f64, f64)) {
        let i = self.index(c, u, v);
        self.re[i] = value.0;
        self.im[i] = value.1;
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut [f64] {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut [f64] {
        &mut self.im
    }

    pub fn is_finite(&self) -> bool {
        self.re.iter().chain(&self.im).all(|v| v.is_finite())
    }

    /// Squared magnitude per bin.
    pub fn power(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(a, b)| a * a + b * b)
            .collect()
    }

    pub fn max_abs_diff(&self, other: &Spectrum) -> f64 {
        self.re
            .iter()
            .zip(&other.re)
            .chain(self.im.iter().zip(&other.im))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Spectrum) {
        for (a, b) in self.re.iter_mut().zip(&other.re) {
            *a += b;
        }
        for (a, b) in self.im.iter_mut().zip(&other.im) {
            *a += b;
        }
    }
}

/// A value flowing through the tape: real or complex.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Real(FeatureMap),
    Complex(Spectrum),
}

impl Tensor {
    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            Tensor::Real(x) => x.dims(),
            Tensor::Complex(f) => f.dims(),
        }
    }

    /// Number of real scalar components (complex bins count twice).
    pub fn scalar_count(&self) -> usize {
        match self {
            Tensor::Real(x) => x.len(),
            Tensor::Complex(f) => 2 * f.len(),
        }
    }

    pub fn get_flat(&self, i: usize) -> f64 {
        match self {
            Tensor::Real(x) => x.data[i],
            Tensor::Complex(f) => {
                if i < f.len() {
                    f.re[i]
                } else {
                    f.im[i - f.len()]
                }
            }
        }
    }

    pub fn set_flat(&mut self, i: usize, value: f64) {
        match self {
            Tensor::Real(x) => x.data[i] = value,
            Tensor::Complex(f) => {
                let n = f.len();
                if i < n {
                    f.re[i] = value
                } else {
                    f.im[i - n] = value
                }
            }
        }
    }

    pub fn zeros_like(&self) -> Tensor {
        match self {
            Tensor::Real(x) => Tensor::Real(FeatureMap::zeros(x.channels, x.height, x.width)),
            Tensor::Complex(f) => Tensor::Complex(Spectrum::zeros(f.channels, f.height, f.width)),
        }
    }

    /// Real inner product treating complex bins as `(re, im)` pairs.
    pub fn dot(&self, other: &Tensor) -> f64 {
        (0..self.scalar_count())
            .map(|i| self.get_flat(i) * other.get_flat(i))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Tensor::Real(x) => x.is_finite(),
            Tensor::Complex(f) => f.is_finite(),
        }
    }

    pub fn same_layout(&self, other: &Tensor) -> bool {
        matches!(
            (self, other),
            (Tensor::Real(_), Tensor::Real(_)) | (Tensor::Complex(_), Tensor::Complex(_))
        ) && self.dims() == other.dims()
    }

    pub fn as_real(&self) -> Option<&FeatureMap> {
        match self {
            Tensor::Real(x) => Some(x),
            Tensor::Complex(_) => None,
        }
    }

    pub fn as_complex(&self) -> Option<&Spectrum> {
        match self {
            Tensor::Complex(f) => Some(f),
            Tensor::Real(_) => None,
        }
    }

    pub fn into_real(self) -> Option<FeatureMap> {
        match self {
            Tensor::Real(x) => Some(x),
            Tensor::Complex(_) => None,
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        match (self, other) {
            (Tensor::Real(a), Tensor::Real(b)) => a.add_assign(b),
            (Tensor::Complex(a), Tensor::Complex(b)) => a.add_assign(b),
            _ => panic!("gradient layout mismatch"),
        }
    }
}

impl From<FeatureMap> for Tensor {
    fn from(x: FeatureMap) -> Self {
        Tensor::Real(x)
    }
}

impl From<Spectrum> for Tensor {
    fn from(f: Spectrum) -> Self {
        Tensor::Complex(f)
    }
}

pub(crate) fn expect_real<'a>(t: &'a Tensor, op: &'static str) -> Result<&'a FeatureMap> {
    t.as_real()
        .ok_or_else(|| Error::shape(op, "expected a real tensor"))
}

pub(crate) fn expect_complex<'a>(t: &'a Tensor, op: &'static str) -> Result<&'a Spectrum> {
    t.as_complex()
        .ok_or_else(|| Error::shape(op, "expected a complex tensor"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_input() {
        assert!(FeatureMap::from_vec(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(FeatureMap::from_vec(0, 2, 2, vec![]).is_err());
        assert!(FeatureMap::from_vec(1, 1, 2, vec![0.0, f64::NAN]).is_err());
        let x = FeatureMap::from_vec(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(x.get(1, 0, 1), 4.0);
        assert_eq!(x.channel(1), &[3.0, 4.0]);
    }

    #[test]
    fn complex_flat_indexing_covers_both_planes() {
        let mut t = Tensor::Complex(Spectrum::zeros(1, 1, 2));
        assert_eq!(t.scalar_count(), 4);
        t.set_flat(3, 5.0);
        assert_eq!(t.as_complex().unwrap().get(0, 0, 1), (0.0, 5.0));
    }
}
