//! Total objective `L_total = L_det + β·L_freq`.
//!
//! The frequency term compares, for every ground-truth box matched by a
//! decoded prediction (IoU ≥ `match_iou`, highest IoU first), the neck
//! feature cropped under the prediction (`P_i`) against the neck feature
//! cropped under the ground truth (`T_i`). `T_i` is a constant; the matched
//! boxes themselves carry no gradient.

use serde::Serialize;

use super::assign::assign_targets;
use super::bbox::BBox;
use super::decode::decode;
use super::loss::{detection_loss, DetLossTerms, DetectionLossOp};
use super::model::{DetectorModel, ForwardNodes, ModelConfig};
use super::roi::RoiCropOp;
use crate::error::{Error, Result};
use crate::freq::FreqConsistencyOp;
use crate::tensor::ops::WeightedSum;
use crate::tensor::{FeatureMap, NodeId, Tape};

pub const DEFAULT_MATCH_IOU: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossConfig {
    pub beta: f64,
    pub lambda: f64,
    pub roi_size: usize,
    pub match_iou: f64,
}

impl LossConfig {
    pub fn from_model(config: &ModelConfig) -> Self {
        Self {
            beta: config.beta,
            lambda: config.lambda,
            roi_size: config.roi_size,
            match_iou: DEFAULT_MATCH_IOU,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub det: DetLossTerms,
    pub freq: f64,
    pub beta: f64,
    pub total: f64,
    /// Number of matched pairs entering the frequency term.
    pub matched: usize,
}

/// Frozen operands of the frequency term.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqPairs {
    pub predicted: Vec<BBox>,
    pub ground_truth: Vec<BBox>,
    pub targets: Vec<FeatureMap>,
}

/// Greedy one-to-one matching by descending IoU. Returns `(gt, pred)` pairs.
pub fn match_predictions(predictions: &[BBox], gt: &[BBox], min_iou: f64) -> Vec<(usize, usize)> {
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (g, gb) in gt.iter().enumerate() {
        for (p, pb) in predictions.iter().enumerate() {
            let iou = gb.iou(pb);
            if iou >= min_iou {
                cands.push((iou, g, p));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; predictions.len()];
    let mut out = Vec::new();
    for (_, g, p) in cands {
        if !gt_used[g] && !pred_used[p] {
            gt_used[g] = true;
            pred_used[p] = true;
            out.push((g, p));
        }
    }
    out.sort_unstable();
    out
}

fn strides(model: &DetectorModel) -> (f64, f64) {
    let (ih, iw) = model.config.image_dims();
    (ih as f64 / model.config.grid_h as f64, iw as f64 / model.config.grid_w as f64)
}

fn compute_pairs(model: &DetectorModel, head: &FeatureMap, neck: &FeatureMap, gt: &[BBox], cfg: &LossConfig) -> Result<FreqPairs> {
    let dims = model.config.image_dims();
    let preds = decode(head, model.config.num_classes, 0.0, dims)?;
    let stride = strides(model);
    let grid = (neck.height(), neck.width());
    let mut pairs = FreqPairs {
        predicted: Vec::new(),
        ground_truth: Vec::new(),
        targets: Vec::new(),
    };
    for (g, p) in match_predictions(&preds, gt, cfg.match_iou) {
        let (Some(_), Some(target)) = (
            RoiCropOp::new(grid, &preds[p], stride, cfg.roi_size),
            RoiCropOp::new(grid, &gt[g], stride, cfg.roi_size),
        ) else {
            log::warn!("frequency pair for ground truth {g} skipped: box collapses on the feature grid");
            continue;
        };
        pairs.predicted.push(preds[p]);
        pairs.ground_truth.push(gt[g]);
        pairs.targets.push(target.crop(neck));
    }
    Ok(pairs)
}

/// Everything recorded for one image.
pub struct LossGraph {
    pub tape: Tape,
    pub forward: ForwardNodes,
    pub total: NodeId,
    pub breakdown: LossBreakdown,
    pub pairs: FreqPairs,
}

/// Records the full objective. With `fixed` set, the frequency term uses
/// those pairs instead of matching fresh decoded boxes.
pub fn record_objective(
    model: &DetectorModel,
    image: &FeatureMap,
    gt: &[BBox],
    cfg: &LossConfig,
    fixed: Option<&FreqPairs>,
) -> Result<LossGraph> {
    if !(cfg.beta >= 0.0) || !cfg.beta.is_finite() {
        return Err(Error::InvalidArgument(format!("beta must be >= 0, got {}", cfg.beta)));
    }
    let mut tape = Tape::new();
    let forward = model.record(&mut tape, image)?;
    let image_dims = model.config.image_dims();
    let assignment = assign_targets(gt, (model.config.grid_h, model.config.grid_w), image_dims)?;
    let head = tape.real(forward.head).clone();
    let det_terms = detection_loss(&head, &assignment, model.config.num_classes)?;
    let det = tape.apply(
        DetectionLossOp {
            assignment,
            num_classes: model.config.num_classes,
        },
        &[forward.head],
    )?;

    let empty = FreqPairs {
        predicted: Vec::new(),
        ground_truth: Vec::new(),
        targets: Vec::new(),
    };
    let pairs = if cfg.beta > 0.0 {
        match fixed {
            Some(p) => p.clone(),
            None => compute_pairs(model, &head, tape.real(forward.neck), gt, cfg)?,
        }
    } else {
        empty
    };

    let mut freq_value = 0.0;
    let mut total = det;
    if !pairs.predicted.is_empty() {
        let grid = (model.config.grid_h, model.config.grid_w);
        let stride = strides(model);
        let mut inputs = Vec::with_capacity(2 * pairs.predicted.len());
        for b in &pairs.predicted {
            let op = RoiCropOp::new(grid, b, stride, cfg.roi_size)
                .ok_or_else(|| Error::InvalidArgument(format!("predicted box {b:?} collapses on the grid")))?;
            inputs.push(tape.apply(op, &[forward.neck])?);
        }
        for t in &pairs.targets {
            inputs.push(tape.constant(t.clone()));
        }
        let freq = tape.apply(FreqConsistencyOp { lambda: cfg.lambda }, &inputs)?;
        freq_value = tape.real(freq).item();
        total = tape.apply(WeightedSum { coeffs: vec![1.0, cfg.beta] }, &[det, freq])?;
    }

    let total_value = tape.real(total).item();
    let breakdown = LossBreakdown {
        det: det_terms,
        freq: freq_value,
        beta: cfg.beta,
        total: total_value,
        matched: pairs.predicted.len(),
    };
    Ok(LossGraph {
        tape,
        forward,
        total,
        breakdown,
        pairs,
    })
}

/// `L_total` and its term breakdown.
pub fn total_loss(model: &DetectorModel, image: &FeatureMap, gt: &[BBox], cfg: &LossConfig) -> Result<LossBreakdown> {
    Ok(record_objective(model, image, gt, cfg, None)?.breakdown)
}

fn grads_of(model: &DetectorModel, graph: &LossGraph) -> Result<Vec<FeatureMap>> {
    let grads = graph.tape.backward(graph.total)?;
    Ok(model
        .params()
        .iter()
        .zip(&graph.forward.params)
        .map(|((_, p), &id)| grads.real_or_zeros(id, p))
        .collect())
}

/// Loss plus gradients for every parameter group (in `param_names` order).
pub fn total_loss_and_grads(model: &DetectorModel, image: &FeatureMap, gt: &[BBox], cfg: &LossConfig) -> Result<(LossBreakdown, Vec<FeatureMap>)> {
    let graph = record_objective(model, image, gt, cfg, None)?;
    let g = grads_of(model, &graph)?;
    Ok((graph.breakdown, g))
}

/// Same as [`total_loss_and_grads`] with frozen frequency pairs.
pub fn loss_with_pairs(
    model: &DetectorModel,
    image: &FeatureMap,
    gt: &[BBox],
    cfg: &LossConfig,
    pairs: &FreqPairs,
) -> Result<(LossBreakdown, Vec<FeatureMap>)> {
    let graph = record_objective(model, image, gt, cfg, Some(pairs))?;
    let g = grads_of(model, &graph)?;
    Ok((graph.breakdown, g))
}
