//! Fixed-size feature crops under a box.

use log::warn;

use super::bbox::BBox;
use crate::error::Result;
use crate::tensor::kernels::{sample_bilinear, sample_bilinear_adjoint, AxisPlan};
use crate::tensor::ops::Op;
use crate::tensor::{expect_real, FeatureMap, Tensor};

/// Sampling plan along one axis for the window `[lo, hi)` in cell units.
///
/// Samples sit at half-pixel positions of the window and are clamped to the
/// window's first/last cell index, which makes integer windows reproduce a
/// plain bilinear resize of the sub-window.
fn axis_plan(lo: f64, hi: f64, extent: usize, size: usize) -> AxisPlan {
    let step = (hi - lo) / size as f64;
    let last = (extent - 1) as f64;
    let upper = (hi - 1.0).max(lo);
    (0..size)
        .map(|j| {
            let s = (lo + (j as f64 + 0.5) * step - 0.5).clamp(lo, upper).clamp(0.0, last);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(extent - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Precomputed crop of a `H×W` feature for one box.
#[derive(Debug, Clone)]
pub struct RoiCropOp {
    rows: AxisPlan,
    cols: AxisPlan,
}

impl RoiCropOp {
    /// `None` when the box has no area on the feature grid.
    /// `stride` maps image pixels to feature cells.
    pub fn new(feature_dims: (usize, usize), bbox: &BBox, stride: (f64, f64), size: usize) -> Option<Self> {
        let (h, w) = feature_dims;
        let (sy, sx) = stride;
        let x0 = (bbox.x / sx).clamp(0.0, w as f64);
        let x1 = (bbox.x1() / sx).clamp(0.0, w as f64);
        let y0 = (bbox.y / sy).clamp(0.0, h as f64);
        let y1 = (bbox.y1() / sy).clamp(0.0, h as f64);
        if !(x1 - x0 > 0.0) || !(y1 - y0 > 0.0) || size == 0 {
            return None;
        }
        Some(Self {
            rows: axis_plan(y0, y1, h, size),
            cols: axis_plan(x0, x1, w, size),
        })
    }

    pub fn crop(&self, feature: &FeatureMap) -> FeatureMap {
        sample_bilinear(feature, &self.rows, &self.cols)
    }
}

impl Op for RoiCropOp {
    fn name(&self) -> &'static str {
        "roi_crop"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(self.crop(expect_real(inputs[0], "roi_crop")?).into())
    }

    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let x = expect_real(inputs[0], "roi_crop")?;
        let g = expect_real(grad, "roi_crop")?;
        Ok(vec![Some(sample_bilinear_adjoint(x.dims(), &self.rows, &self.cols, g).into())])
    }
}

/// Crops `feature` under `bbox` (image pixels) and resamples it to `S×S`.
/// Returns `None`, with a warning, when the box collapses on the grid.
pub fn roi_crop(feature: &FeatureMap, bbox: &BBox, stride: (f64, f64), size: usize) -> Option<FeatureMap> {
    match RoiCropOp::new((feature.height(), feature.width()), bbox, stride, size) {
        Some(op) => Some(op.crop(feature)),
        None => {
            warn!("roi_crop: box {bbox:?} has no area on the feature grid, skipped");
            None
        }
    }
}
