//! Detection loss used in the `L_yolo` slot: objectness BCE over all cells,
//! class cross-entropy and smooth-L1 box regression over positive cells.
//! Each term is mean-reduced; the three are summed with unit weights.

use serde::Serialize;

use super::assign::Assignment;
use super::decode::{BoxCoder, HeadLayout};
use crate::error::{Error, Result};
use crate::tensor::kernels::sigmoid_scalar;
use crate::tensor::ops::Op;
use crate::tensor::{expect_real, FeatureMap, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct DetLossTerms {
    pub objectness: f64,
    pub class: f64,
    pub boxes: f64,
    pub total: f64,
    pub positives: usize,
}

fn bce_with_logit(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    d.clamp(-1.0, 1.0)
}

fn check(head: &FeatureMap, assignment: &Assignment, layout: HeadLayout) -> Result<()> {
    if head.dims() != (layout.channels(), assignment.grid_h, assignment.grid_w) {
        return Err(Error::shape(
            "detection_loss",
            format!(
                "head {:?} vs assignment grid {}x{} with {} channels",
                head.dims(),
                assignment.grid_h,
                assignment.grid_w,
                layout.channels()
            ),
        ));
    }
    Ok(())
}

/// Loss terms and, optionally, the gradient with respect to the head map.
fn evaluate(head: &FeatureMap, assignment: &Assignment, layout: HeadLayout, want_grad: bool) -> (DetLossTerms, Option<FeatureMap>) {
    let (gh, gw) = (assignment.grid_h, assignment.grid_w);
    let coder = BoxCoder::new(gh, gw, assignment.image_h, assignment.image_w);
    let cells = (gh * gw) as f64;
    let positives = assignment.num_positives();
    let mut grad = want_grad.then(|| FeatureMap::zeros(head.channels(), gh, gw));

    let mut obj = 0.0;
    for gy in 0..gh {
        for gx in 0..gw {
            let x = head.get(HeadLayout::OBJECTNESS, gy, gx);
            let y = if assignment.get(gy, gx).is_some() { 1.0 } else { 0.0 };
            obj += bce_with_logit(x, y);
            if let Some(g) = grad.as_mut() {
                g.set(HeadLayout::OBJECTNESS, gy, gx, (sigmoid_scalar(x) - y) / cells);
            }
        }
    }
    obj /= cells;

    let (mut cls, mut boxes) = (0.0, 0.0);
    if positives > 0 {
        let p = positives as f64;
        for (gy, gx, b) in assignment.positives() {
            let logits: Vec<f64> = (0..layout.num_classes).map(|k| head.get(layout.class(k), gy, gx)).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
            let lse = m + z.ln();
            cls += lse - logits[b.class_id];

            let target = coder.encode(b, gy, gx);
            let mut diffs = [0.0; 4];
            for (k, d) in diffs.iter_mut().enumerate() {
                *d = head.get(layout.regress(k), gy, gx) - target[k];
                boxes += smooth_l1(*d);
            }

            if let Some(g) = grad.as_mut() {
                for (k, &l) in logits.iter().enumerate() {
                    let soft = (l - lse).exp();
                    let onehot = if k == b.class_id { 1.0 } else { 0.0 };
                    g.set(layout.class(k), gy, gx, (soft - onehot) / p);
                }
                for (k, &d) in diffs.iter().enumerate() {
                    g.set(layout.regress(k), gy, gx, smooth_l1_grad(d) / (4.0 * p));
                }
            }
        }
        cls /= p;
        boxes /= 4.0 * p;
    }
    let terms = DetLossTerms {
        objectness: obj,
        class: cls,
        boxes,
        total: obj + cls + boxes,
        positives,
    };
    (terms, grad)
}

/// Scalar detection loss for a raw head map under a target assignment.
pub fn detection_loss(head: &FeatureMap, assignment: &Assignment, num_classes: usize) -> Result<DetLossTerms> {
    let layout = HeadLayout { num_classes };
    check(head, assignment, layout)?;
    Ok(evaluate(head, assignment, layout, false).0)
}

/// Tape form of [`detection_loss`]; input is the head map.
#[derive(Debug, Clone)]
pub struct DetectionLossOp {
    pub assignment: Assignment,
    pub num_classes: usize,
}

impl Op for DetectionLossOp {
    fn name(&self) -> &'static str {
        "detection_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let head = expect_real(inputs[0], "detection_loss")?;
        let terms = detection_loss(head, &self.assignment, self.num_classes)?;
        Ok(FeatureMap::scalar(terms.total).into())
    }

    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let head = expect_real(inputs[0], "detection_loss")?;
        let g = expect_real(grad, "detection_loss")?.item();
        let layout = HeadLayout {
            num_classes: self.num_classes,
        };
        let (_, dh) = evaluate(head, &self.assignment, layout, true);
        let dh = dh.expect("gradient requested").scale(g);
        Ok(vec![Some(dh.into())])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::assign::assign_targets;
    use crate::detector::bbox::BBox;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const K: usize = 3;

    fn perfect_head(a: &Assignment) -> FeatureMap {
        let layout = HeadLayout { num_classes: K };
        let coder = BoxCoder::new(a.grid_h, a.grid_w, a.image_h, a.image_w);
        let mut head = FeatureMap::filled(layout.channels(), a.grid_h, a.grid_w, 0.0);
        for gy in 0..a.grid_h {
            for gx in 0..a.grid_w {
                head.set(0, gy, gx, -40.0);
            }
        }
        for (gy, gx, b) in a.positives() {
            head.set(0, gy, gx, 40.0);
            for k in 0..K {
                head.set(layout.class(k), gy, gx, if k == b.class_id { 40.0 } else { -40.0 });
            }
            for (k, t) in coder.encode(b, gy, gx).into_iter().enumerate() {
                head.set(layout.regress(k), gy, gx, t);
            }
        }
        head
    }

    #[test]
    fn perfect_logits_near_zero_loss() {
        let gt = [BBox::new(3.0, 4.0, 6.0, 5.0, 2), BBox::new(18.0, 20.0, 9.0, 7.0, 0)];
        let a = assign_targets(&gt, (8, 8), (32, 32)).unwrap();
        let l = detection_loss(&perfect_head(&a), &a, K).unwrap();
        assert!(l.total <= 1e-8, "{l:?}");
    }

    #[test]
    fn empty_gt_negative_logits_near_zero() {
        let a = assign_targets(&[], (8, 8), (32, 32)).unwrap();
        let l = detection_loss(&perfect_head(&a), &a, K).unwrap();
        assert!(l.total <= 1e-8);
        assert_eq!((l.class, l.boxes), (0.0, 0.0));
    }

    /// Straightforward transcription with naive exp/log and explicit loops.
    fn oracle(head: &FeatureMap, gt: &[BBox], grid: usize, img: usize) -> f64 {
        let s = img as f64 / grid as f64;
        let a = assign_targets(gt, (grid, grid), (img, img)).unwrap();
        let mut obj = 0.0;
        let mut cls = 0.0;
        let mut reg = 0.0;
        let mut npos = 0.0;
        for gy in 0..grid {
            for gx in 0..grid {
                let x: f64 = head.get(0, gy, gx);
                let p = 1.0 / (1.0 + (-x).exp());
                match a.get(gy, gx) {
                    Some((_, b)) => {
                        obj += -p.ln();
                        npos += 1.0;
                        let z: f64 = (0..K).map(|k| head.get(1 + k, gy, gx).exp()).sum();
                        cls += -(head.get(1 + b.class_id, gy, gx).exp() / z).ln();
                        let (cx, cy) = b.center();
                        let t = [
                            (2.0 * (cx / s - gx as f64 - 0.5)).atanh(),
                            (2.0 * (cy / s - gy as f64 - 0.5)).atanh(),
                            (b.w / (4.0 * s)).ln(),
                            (b.h / (4.0 * s)).ln(),
                        ];
                        for k in 0..4 {
                            let d: f64 = head.get(1 + K + k, gy, gx) - t[k];
                            reg += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
                        }
                    }
                    None => obj += -(1.0 - p).ln(),
                }
            }
        }
        let mut total = obj / (grid * grid) as f64;
        if npos > 0.0 {
            total += cls / npos + reg / (4.0 * npos);
        }
        total
    }

    #[test]
    fn random_case_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let gt: Vec<BBox> = (0..4)
                .map(|_| {
                    let w = rng.random_range(2.0..10.0);
                    let h = rng.random_range(2.0..10.0);
                    BBox::new(rng.random_range(0.0..32.0 - w), rng.random_range(0.0..32.0 - h), w, h, rng.random_range(0..K))
                })
                .collect();
            let a = assign_targets(&gt, (8, 8), (32, 32)).unwrap();
            let data = (0..(1 + K + 4) * 64).map(|_| rng.random_range(-3.0..3.0)).collect();
            let head = FeatureMap::from_vec(1 + K + 4, 8, 8, data).unwrap();
            let got = detection_loss(&head, &a, K).unwrap().total;
            let want = oracle(&head, &gt, 8, 32);
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn wrong_grid_is_shape_error() {
        let a = assign_targets(&[], (8, 8), (32, 32)).unwrap();
        assert!(detection_loss(&FeatureMap::zeros(1 + K + 4, 4, 4), &a, K).is_err());
    }
}
