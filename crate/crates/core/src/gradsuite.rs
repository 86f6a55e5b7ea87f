//! Finite-difference verification of every differentiable piece.
//!
//! Each op is checked at a seeded random point. The FDAF block and the full
//! training objective are checked end to end on a tiny model, with one row
//! per parameter group.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::objective::record_objective;
use crate::detector::roi::RoiCropOp;
use crate::detector::{assign_targets, loss_with_pairs, BBox, DetectorModel, FreqPairs, LossConfig, ModelConfig, NeckKind};
use crate::detector::loss::DetectionLossOp;
use crate::error::{Error, Result};
use crate::freq::{FdafBlock, FreqConsistencyOp, SpectralGate};
use crate::tensor::ops::{
    Add, ApplyGate, BilinearResize, ConcatChannels, Conv1x1, Conv3x3s2, Dft2, Idft2, Op, Sigmoid, Silu, WeightedSum,
};
use crate::tensor::{gradcheck, gradcheck_fn, FeatureMap, GradcheckReport, Spectrum, Tape, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Name of an op whose VJP is deliberately corrupted (negative control).
    pub corrupt: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteRow {
    pub name: String,
    pub max_rel_error: f64,
    pub components: usize,
    pub passed: bool,
}

impl SuiteRow {
    fn from_report(r: &GradcheckReport, tolerance: f64) -> Self {
        Self {
            name: r.name.clone(),
            max_rel_error: r.max_rel_error,
            components: r.components,
            passed: r.passes(tolerance),
        }
    }
}

/// Wraps an op and skews its cotangents.
struct Corrupted(Box<dyn Op>);

impl Op for Corrupted {
    fn name(&self) -> &'static str {
        self.0.name()
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        self.0.forward(inputs)
    }

    fn vjp(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, wants: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let mut out = self.0.vjp(inputs, output, grad, wants)?;
        if let Some(Some(g)) = out.first_mut() {
            for i in 0..g.scalar_count() {
                g.set_flat(i, 1.01 * g.get_flat(i) + 0.01);
            }
        }
        Ok(out)
    }
}

fn real(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, bound: f64) -> Tensor {
    let data = (0..c * h * w).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::Real(FeatureMap::from_vec(c, h, w, data).expect("sized"))
}

fn complex(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    let n = c * h * w;
    let re = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let im = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::Complex(Spectrum::from_parts(c, h, w, re, im).expect("sized"))
}

fn head_layout_channels(num_classes: usize) -> usize {
    1 + num_classes + 4
}

/// `(op, input point)` for every registered op.
fn op_cases(seed: u64) -> Vec<(Box<dyn Op>, Vec<Tensor>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases: Vec<(Box<dyn Op>, Vec<Tensor>)> = vec![
        (Box::new(Dft2), vec![real(r, 2, 5, 6, 1.0)]),
        (Box::new(Idft2), vec![complex(r, 2, 5, 6)]),
        (
            Box::new(Conv1x1),
            vec![real(r, 3, 4, 5, 1.0), real(r, 2, 3, 1, 1.0), real(r, 2, 1, 1, 1.0)],
        ),
        (
            Box::new(Conv3x3s2),
            vec![real(r, 2, 7, 6, 1.0), real(r, 3, 2, 9, 1.0), real(r, 3, 1, 1, 1.0)],
        ),
        (Box::new(BilinearResize { out_h: 7, out_w: 4 }), vec![real(r, 2, 3, 5, 1.0)]),
        (Box::new(Sigmoid), vec![real(r, 2, 3, 3, 3.0)]),
        (Box::new(Silu), vec![real(r, 2, 3, 3, 3.0)]),
        (Box::new(ConcatChannels), vec![real(r, 2, 3, 4, 1.0), real(r, 1, 3, 4, 1.0)]),
        (Box::new(Add), vec![real(r, 2, 3, 4, 1.0), real(r, 2, 3, 4, 1.0)]),
        (Box::new(ApplyGate), vec![complex(r, 2, 4, 5), real(r, 2, 4, 5, 3.0)]),
        (
            Box::new(WeightedSum { coeffs: vec![1.0, 0.05] }),
            vec![real(r, 1, 1, 1, 5.0), real(r, 1, 1, 1, 5.0)],
        ),
        (
            Box::new(FreqConsistencyOp { lambda: 2.0 }),
            (0..4).map(|_| real(r, 2, 4, 4, 1.0)).collect(),
        ),
    ];

    let roi = RoiCropOp::new((6, 6), &BBox::new(3.3, 2.1, 11.7, 14.6, 0), (4.0, 4.0), 5).expect("box on grid");
    cases.push((Box::new(roi), vec![real(r, 3, 6, 6, 1.0)]));

    let k = 3;
    let gt = [BBox::new(1.5, 2.0, 6.0, 5.0, 0), BBox::new(9.0, 8.5, 5.5, 6.0, 2)];
    let assignment = assign_targets(&gt, (4, 4), (16, 16)).expect("valid boxes");
    cases.push((
        Box::new(DetectionLossOp {
            assignment,
            num_classes: k,
        }),
        vec![real(r, head_layout_channels(k), 4, 4, 1.0)],
    ));
    cases
}

/// Names of the ops the suite checks individually.
pub fn op_names() -> Vec<&'static str> {
    op_cases(0).iter().map(|(op, _)| op.name()).collect()
}

fn check_fdaf(opts: &SuiteOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xfdaf);
    let (c, h, w) = (3, 5, 4);
    let inputs = vec![
        real(&mut rng, c, h, w, 1.0),
        real(&mut rng, c, h, w, 2.0),
        real(&mut rng, c, 2 * c, 1, 0.5),
        real(&mut rng, c, 1, 1, 0.5),
    ];
    let record = |tape: &mut Tape, xs: &[Tensor]| -> Result<_> {
        let ids: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let block = FdafBlock::from_parts(
            SpectralGate::from_logits(xs[1].as_real().expect("real").clone())?,
            xs[2].as_real().expect("real").clone(),
            xs[3].as_real().expect("real").clone(),
        )?;
        let out = block.record_with(tape, ids[0], ids[1], ids[2], ids[3])?;
        Ok((ids, out))
    };
    gradcheck_fn(
        "fdaf_block",
        |xs| {
            let mut tape = Tape::new();
            let (_, out) = record(&mut tape, xs)?;
            Ok(tape.value(out).clone())
        },
        |xs, _, proj| {
            let mut tape = Tape::new();
            let (ids, out) = record(&mut tape, xs)?;
            let grads = tape.backward_from(out, proj.clone())?;
            Ok(ids
                .iter()
                .zip(xs)
                .map(|(&id, x)| grads.get(id).cloned().unwrap_or_else(|| x.zeros_like()))
                .collect())
        },
        &inputs,
        opts.eps,
        opts.seed,
    )
}

/// Tiny detector (C=4, 16×16 input) with every parameter randomized.
pub fn tiny_model(seed: u64) -> Result<DetectorModel> {
    let config = ModelConfig {
        channels: 4,
        num_classes: 3,
        grid_h: 4,
        grid_w: 4,
        neck: NeckKind::Gated,
        roi_size: 4,
        ..ModelConfig::default()
    };
    let mut model = DetectorModel::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for (_, p) in model.params_mut() {
        for v in p.as_mut_slice() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    Ok(model)
}

fn check_total_loss(opts: &SuiteOptions) -> Result<Vec<GradcheckReport>> {
    let model = tiny_model(opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7077);
    let image = FeatureMap::from_vec(1, 16, 16, (0..256).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let gt = vec![BBox::new(1.5, 2.0, 7.0, 6.0, 0), BBox::new(8.5, 7.0, 6.5, 8.0, 2)];
    let cfg = LossConfig::from_model(&model.config);

    let natural = record_objective(&model, &image, &gt, &cfg, None)?.pairs;
    let pairs = if natural.predicted.is_empty() {
        // no decoded box matched: pair each ground truth with a shifted copy
        let (_, neck) = model.forward(&image)?;
        let mut p = FreqPairs {
            predicted: Vec::new(),
            ground_truth: Vec::new(),
            targets: Vec::new(),
        };
        for b in &gt {
            let crop = RoiCropOp::new((4, 4), b, (4.0, 4.0), cfg.roi_size).expect("on grid");
            p.predicted.push(BBox::new(b.x + 0.7, b.y - 0.4, b.w, b.h, b.class_id));
            p.ground_truth.push(*b);
            p.targets.push(crop.crop(&neck));
        }
        p
    } else {
        natural
    };

    let names = model.param_names();
    let report = gradcheck_fn(
        "total_loss",
        |xs| {
            let m = model.with_tensors(xs)?;
            let (b, _) = loss_with_pairs(&m, &image, &gt, &cfg, &pairs)?;
            Ok(Tensor::Real(FeatureMap::scalar(b.total)))
        },
        |xs, _, proj| {
            let m = model.with_tensors(xs)?;
            let (b, g) = loss_with_pairs(&m, &image, &gt, &cfg, &pairs)?;
            if b.matched == 0 || b.freq == 0.0 {
                return Err(Error::InvalidArgument("pipeline check has no frequency term".into()));
            }
            let r = proj.get_flat(0);
            Ok(g.into_iter().map(|x| Tensor::Real(x.scale(r))).collect())
        },
        &model.to_tensors(),
        opts.eps,
        opts.seed,
    )?;
    Ok(names
        .iter()
        .zip(&report.per_input)
        .zip(model.params())
        .map(|((name, &err), (_, p))| GradcheckReport {
            name: format!("total_loss[{name}]"),
            max_rel_error: err,
            per_input: vec![err],
            components: p.len(),
        })
        .collect())
}

/// Runs every check. Rows come back in a fixed order: ops, FDAF block,
/// then the objective per parameter group.
pub fn run(opts: &SuiteOptions) -> Result<Vec<SuiteRow>> {
    let cases = op_cases(opts.seed);
    if let Some(name) = &opts.corrupt {
        if !cases.iter().any(|(op, _)| op.name() == name) {
            return Err(Error::InvalidArgument(format!("unknown op {name:?} to corrupt")));
        }
    }
    let mut rows = Vec::new();
    for (k, (op, inputs)) in cases.into_iter().enumerate() {
        let op: Box<dyn Op> = if opts.corrupt.as_deref() == Some(op.name()) {
            Box::new(Corrupted(op))
        } else {
            op
        };
        let report = gradcheck(op.as_ref(), &inputs, opts.eps, opts.seed.wrapping_add(k as u64))?;
        rows.push(SuiteRow::from_report(&report, opts.tolerance));
    }
    rows.push(SuiteRow::from_report(&check_fdaf(opts)?, opts.tolerance));
    for r in check_total_loss(opts)? {
        rows.push(SuiteRow::from_report(&r, opts.tolerance));
    }
    Ok(rows)
}
