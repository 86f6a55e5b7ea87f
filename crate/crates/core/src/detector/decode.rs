//! Head layout, box coding and decoding.
//!
//! Per cell the head carries `1 + K + 4` channels: objectness logit, `K`
//! class logits, and `(tx, ty, tw, th)`. A cell `(gy, gx)` decodes to
//!
//! ```text
//! cx = (gx + 0.5 + 0.5·tanh(tx)) · stride_x
//! w  = prior · exp(tw),  prior = 4 · stride
//! ```
//!
//! so centers stay inside their cell and sizes are log-scaled.

use super::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::kernels::sigmoid_scalar;
use crate::tensor::FeatureMap;

pub const NMS_IOU: f64 = 0.6;
/// Size prior in units of the stride.
pub const PRIOR_CELLS: f64 = 4.0;
const MAX_LOG_SCALE: f64 = 8.0;
/// Keeps `atanh` targets finite for centers on a cell border.
const OFFSET_LIMIT: f64 = 0.995;

/// Geometry shared by encoding and decoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCoder {
    pub grid_h: usize,
    pub grid_w: usize,
    pub image_h: f64,
    pub image_w: f64,
}

impl BoxCoder {
    pub fn new(grid_h: usize, grid_w: usize, image_h: usize, image_w: usize) -> Self {
        Self {
            grid_h,
            grid_w,
            image_h: image_h as f64,
            image_w: image_w as f64,
        }
    }

    pub fn stride_y(&self) -> f64 {
        self.image_h / self.grid_h as f64
    }

    pub fn stride_x(&self) -> f64 {
        self.image_w / self.grid_w as f64
    }

    /// Regression targets `(tx, ty, tw, th)` for a box owned by cell `(gy, gx)`.
    pub fn encode(&self, b: &BBox, gy: usize, gx: usize) -> [f64; 4] {
        let (sx, sy) = (self.stride_x(), self.stride_y());
        let (cx, cy) = b.center();
        let dx = (2.0 * (cx / sx - gx as f64 - 0.5)).clamp(-OFFSET_LIMIT, OFFSET_LIMIT);
        let dy = (2.0 * (cy / sy - gy as f64 - 0.5)).clamp(-OFFSET_LIMIT, OFFSET_LIMIT);
        [
            dx.atanh(),
            dy.atanh(),
            (b.w / (PRIOR_CELLS * sx)).ln(),
            (b.h / (PRIOR_CELLS * sy)).ln(),
        ]
    }

    /// Box for raw regressands at `(gy, gx)`, clamped to the image.
    pub fn decode(&self, t: [f64; 4], gy: usize, gx: usize) -> BBox {
        let (sx, sy) = (self.stride_x(), self.stride_y());
        let cx = (gx as f64 + 0.5 + 0.5 * t[0].tanh()) * sx;
        let cy = (gy as f64 + 0.5 + 0.5 * t[1].tanh()) * sy;
        let w = PRIOR_CELLS * sx * t[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
        let h = PRIOR_CELLS * sy * t[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, w, h, 0).clamped(self.image_w, self.image_h)
    }
}

/// Channel index helpers for a head with `num_classes` classes.
#[derive(Debug, Clone, Copy)]
pub struct HeadLayout {
    pub num_classes: usize,
}

impl HeadLayout {
    pub const OBJECTNESS: usize = 0;

    pub fn class(&self, k: usize) -> usize {
        1 + k
    }

    pub fn regress(&self, k: usize) -> usize {
        1 + self.num_classes + k
    }

    pub fn channels(&self) -> usize {
        1 + self.num_classes + 4
    }
}

/// Score and box of a single cell, before thresholding.
pub fn decode_cell(head: &FeatureMap, layout: HeadLayout, coder: &BoxCoder, gy: usize, gx: usize) -> BBox {
    let obj = sigmoid_scalar(head.get(HeadLayout::OBJECTNESS, gy, gx));
    let logits: Vec<f64> = (0..layout.num_classes).map(|k| head.get(layout.class(k), gy, gx)).collect();
    let mut best = 0;
    for (k, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = k;
        }
    }
    let m = logits[best];
    let denom: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
    let class_prob = 1.0 / denom;
    let t = [0, 1, 2, 3].map(|k| head.get(layout.regress(k), gy, gx));
    let mut b = coder.decode(t, gy, gx);
    b.class_id = best;
    b.score = obj * class_prob;
    b
}

/// Greedy same-class suppression: boxes are visited by descending score and
/// a box is dropped when it overlaps an already kept box of its class by
/// more than `iou_threshold`.
pub fn nms(mut boxes: Vec<BBox>, iou_threshold: f64) -> Vec<BBox> {
    boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<BBox> = Vec::with_capacity(boxes.len());
    for b in boxes {
        if kept
            .iter()
            .all(|k| k.class_id != b.class_id || k.iou(&b) <= iou_threshold)
        {
            kept.push(b);
        }
    }
    kept
}

/// Decodes every cell whose score exceeds `score_threshold`, then applies NMS.
pub fn decode(head: &FeatureMap, num_classes: usize, score_threshold: f64, image_dims: (usize, usize)) -> Result<Vec<BBox>> {
    if !(0.0..=1.0).contains(&score_threshold) {
        return Err(Error::InvalidArgument(format!("score threshold {score_threshold} outside [0, 1]")));
    }
    let layout = HeadLayout { num_classes };
    if head.channels() != layout.channels() {
        return Err(Error::shape(
            "decode",
            format!("head has {} channels, expected {}", head.channels(), layout.channels()),
        ));
    }
    let coder = BoxCoder::new(head.height(), head.width(), image_dims.0, image_dims.1);
    let mut boxes = Vec::new();
    for gy in 0..head.height() {
        for gx in 0..head.width() {
            let b = decode_cell(head, layout, &coder, gy, gx);
            if b.score > score_threshold && b.is_valid() {
                boxes.push(b);
            }
        }
    }
    Ok(nms(boxes, NMS_IOU))
}
