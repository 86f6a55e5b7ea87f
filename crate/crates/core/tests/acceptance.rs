//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line to
//! stderr (uncaptured) and the test fails if any criterion fails.

mod common;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::eval_oracle::{instance, metrics, oracle};
use common::overfit::overfit;
use freqpriv::config::{ExperimentConfig, Variant};
use freqpriv::data::{generate_scene, scene_rng};
use freqpriv::detector::{checkpoint, total_loss};
use freqpriv::eval::{evaluate, Detection, EvalConfig};
use freqpriv::freq::{fdaf_forward, freq_consistency_loss, FdafBlock, SpectralGate};
use freqpriv::gradsuite::{self, SuiteOptions};
use freqpriv::pipeline::{cmd_ablate, cmd_stats, cmd_synth};
use freqpriv::tensor::{dft2, idft2, FeatureMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn spectral_kernel() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut round, mut parseval, mut herm) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let (c, h, w) = (rng.random_range(1..=4), rng.random_range(1..=16), rng.random_range(1..=16));
        let x = random_map(&mut rng, c, h, w);
        let f = dft2(&x);
        round = round.max(idft2(&f).max_abs_diff(&x));

        let energy: f64 = x.as_slice().iter().map(|v| v * v).sum();
        let spec: f64 = f.power().iter().sum::<f64>() / (h * w) as f64;
        parseval = parseval.max((spec - energy).abs() / energy.max(f64::MIN_POSITIVE));

        for ch in 0..c {
            for u in 0..h {
                for v in 0..w {
                    let (a_re, a_im) = f.get(ch, u, v);
                    let (b_re, b_im) = f.get(ch, (h - u) % h, (w - v) % w);
                    herm = herm.max((a_re - b_re).abs()).max((a_im + b_im).abs());
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        round <= 1e-10 && parseval <= 1e-9 && herm <= 1e-10 && secs < 10.0,
        format!("round trip {round:.1e}, Parseval {parseval:.1e}, Hermitian {herm:.1e}, {secs:.2} s"),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let rows = gradsuite::run(&SuiteOptions::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = rows.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let failing: Vec<&str> = rows.iter().filter(|r| !(r.passed && r.max_rel_error <= 1e-4)).map(|r| r.name.as_str()).collect();
    outcome(
        failing.is_empty() && secs < 120.0,
        format!(
            "{} rows, worst {} at {:.1e}, failing {failing:?}, {secs:.1} s",
            rows.len(),
            worst.name,
            worst.max_rel_error
        ),
    )
}

fn mechanism_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut notes = Vec::new();

    let mut identity = true;
    let mut zero_loss = true;
    for _ in 0..50 {
        let (c, h, w) = (rng.random_range(1..=4), rng.random_range(1..=8), rng.random_range(1..=8));
        let i = random_map(&mut rng, c, h, w);
        let mut block = FdafBlock::new(c, h, w, 0.0);
        block.gate = SpectralGate::from_logits(random_map(&mut rng, c, h, w).scale(5.0)).unwrap();
        identity &= fdaf_forward(&i, &block).unwrap() == i;
        let lambda = rng.random_range(0.0..4.0);
        zero_loss &= freq_consistency_loss(&[i.clone()], &[i], lambda).unwrap().loss == 0.0;
    }
    if !identity {
        notes.push("zero-fusion block is not an identity".to_string());
    }
    if !zero_loss {
        notes.push("L(P, P) != 0".to_string());
    }

    let p = FeatureMap::from_vec(1, 1, 2, vec![1.0, -1.0]).unwrap();
    let worked = freq_consistency_loss(&[p], &[FeatureMap::zeros(1, 1, 2)], 1.0).unwrap().loss;
    if (worked - 16.0).abs() > 1e-9 {
        notes.push(format!("worked example gave {worked}"));
    }

    let cfg = ExperimentConfig::default().with_variant(Variant::IV);
    let loss = cfg.loss_config();
    let (mut exact, mut with_pairs) = (loss.beta == 0.05, 0);
    for seed in 0..6 {
        let model = freqpriv::detector::DetectorModel::new(cfg.model_config(), seed).unwrap();
        let scene = generate_scene(&cfg.scene_config(seed), &mut scene_rng(seed, 0)).unwrap();
        let b = total_loss(&model, &scene.image.to_feature_map(), &scene.boxes, &loss).unwrap();
        exact &= b.total == b.det.total + 0.05 * b.freq;
        with_pairs += (b.freq > 0.0) as usize;
    }
    if !exact {
        notes.push("total != det + 0.05 * freq".to_string());
    }
    if with_pairs == 0 {
        notes.push("composition never saw a matched pair".to_string());
    }

    outcome(
        notes.is_empty(),
        if notes.is_empty() {
            format!("identity, zero loss, worked example {worked}, composition over 6 models ({with_pairs} with pairs)")
        } else {
            notes.join("; ")
        },
    )
}

fn statistics_oracle() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let fixture = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/stats3");
    let r = cmd_stats(&fixture, dir.path()).unwrap();
    let mut notes = Vec::new();

    // counts [3, 1, 1, 3]: mean 2, population std 1, top class holds 3 of 8
    if (r.summary.cv, r.summary.top20) != (0.5, 0.375) {
        notes.push(format!("cv {} top20 {}", r.summary.cv, r.summary.top20));
    }
    let sizes: Vec<f64> = r.objects.iter().map(|o| o.size_ratio).collect();
    if sizes != [0.25, 0.5, 0.25, 0.125, 0.25, 0.5, 1.0, 0.125] {
        notes.push(format!("sizes {sizes:?}"));
    }
    let contrast: Vec<Option<f64>> = r.objects.iter().map(|o| o.contrast).collect();
    let want_contrast = [0.0, 0.75, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0].map(Some);
    if contrast != want_contrast {
        notes.push(format!("contrast {contrast:?}"));
    }
    let disparity: Vec<f64> = r.disparity.iter().map(|d| d.disparity).collect();
    if disparity != [2f64.ln(), 4f64.ln(), 8f64.ln()] {
        notes.push(format!("disparity {disparity:?}"));
    }
    let faces: Vec<(&str, usize, usize)> = r
        .face_density
        .iter()
        .filter(|b| b.images > 0)
        .map(|b| (b.bucket.as_str(), b.images, b.instances))
        .collect();
    if faces != [("1", 1, 1), ("3", 1, 3)] {
        notes.push(format!("faces {faces:?}"));
    }

    let skew = [80.0, 5.0, 5.0, 5.0, 5.0];
    let cv = freqpriv::data::stats::class_cv(&skew).unwrap();
    let top = freqpriv::data::stats::top_fraction_concentration(&skew, 0.2).unwrap();
    if (cv - 1.5).abs() > 1e-12 || (top - 0.8).abs() > 1e-12 {
        notes.push(format!("skewed cv {cv} top20 {top}"));
    }
    outcome(
        notes.is_empty(),
        if notes.is_empty() {
            format!("fixture exact; skewed counts cv {cv}, top20 {top}")
        } else {
            notes.join("; ")
        },
    )
}

fn overfit_sanity() -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    let mut slowest: f64 = 0.0;
    for variant in Variant::ALL {
        let start = Instant::now();
        let (first, last, model) = overfit(variant, 0);
        slowest = slowest.max(start.elapsed().as_secs_f64());
        let (_, again, rerun) = overfit(variant, 0);
        let deterministic = again == last && checkpoint::to_bytes(&model) == checkpoint::to_bytes(&rerun);
        let reduced = last < 0.1 * first;
        passed &= reduced && deterministic;
        parts.push(format!(
            "{variant} {first:.3}->{last:.3} ({:.1}%){}",
            100.0 * last / first,
            if deterministic { "" } else { " nondeterministic" }
        ));
    }
    passed &= slowest < 60.0;
    outcome(passed, format!("{}; slowest run {slowest:.1} s", parts.join(", ")))
}

fn ablation_trend() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default();
    let start = Instant::now();
    let table = cmd_ablate(&cfg, dir.path()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let m: Vec<f64> = Variant::ALL.iter().map(|&v| table.mean(v, |r| r.ap50).unwrap_or(f64::NAN)).collect();
    let failed = table.rows.iter().filter(|r| r.metrics.is_none()).count();
    let gain = m[3] - m[0];
    let monotone = m.windows(2).all(|p| p[0] <= p[1]);
    outcome(
        m[3] >= m[0] && gain >= 1.0 && failed == 0 && secs <= 45.0 * 60.0,
        format!(
            "mean AP50 I {:.3} II {:.3} III {:.3} IV {:.3}; IV-I {gain:+.3} points; ordering I<=II<=III<=IV {}; \
             {} seeds, {failed} failed cells, {:.1} min",
            m[0],
            m[1],
            m[2],
            m[3],
            if monotone { "holds" } else { "does not hold" },
            cfg.seeds.len(),
            secs / 60.0
        ),
    )
}

fn evaluator_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut mismatched = 0;
    for seed in 0..50 {
        let inst = instance(seed);
        let got = evaluate(&inst.gt, &inst.dets, &EvalConfig { max_dets: inst.max_dets }).unwrap();
        for (g, w) in metrics(&got).into_iter().zip(oracle(&inst)) {
            match (g, w) {
                (Some(g), Some(w)) => worst = worst.max((g - w).abs()),
                (None, None) => {}
                _ => mismatched += 1,
            }
        }
    }
    let mut perfect = true;
    for seed in 100..120 {
        let inst = instance(seed);
        if inst.gt.annotations.is_empty() {
            continue;
        }
        let dets: Vec<Detection> = inst
            .gt
            .annotations
            .iter()
            .map(|a| Detection {
                image_id: a.image_id,
                category_id: a.category_id,
                bbox: a.bbox,
                score: 0.9,
            })
            .collect();
        let r = evaluate(&inst.gt, &dets, &EvalConfig::default()).unwrap();
        perfect &= r.ap == Some(1.0) && r.f1 == Some(1.0);
    }
    outcome(
        worst <= 1e-12 && mismatched == 0 && perfect,
        format!("50 instances, worst diff {worst:.1e}, {mismatched} presence mismatches, perfect predictions {perfect}"),
    )
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn reproducibility() -> Outcome {
    let cfg = ExperimentConfig::parse(
        "image_size = 32\nnum_classes = 3\nchannels = 4\nroi_size = 4\nepochs = 2\nbatch_size = 4\n\
         train_images = 16\ntest_images = 8\nobjects_mean = 2\nseeds = 0,1\n",
    )
    .unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        cmd_synth(&cfg, &dir.path().join("synth")).unwrap();
        cmd_ablate(&cfg, &dir.path().join("ablate")).unwrap();
    }
    let files = files_under(a.path());
    let mut differing = Vec::new();
    if files != files_under(b.path()) {
        differing.push("file lists".to_string());
    }
    for f in &files {
        if std::fs::read(a.path().join(f)).ok() != std::fs::read(b.path().join(f)).ok() {
            differing.push(f.display().to_string());
        }
    }
    let count = |suffix: &str| files.iter().filter(|f| f.to_string_lossy().ends_with(suffix)).count();
    outcome(
        differing.is_empty() && count(".fprv") == 8,
        format!(
            "{} files compared ({} checkpoints, {} metrics CSVs, {} images); differing {differing:?}",
            files.len(),
            count(".fprv"),
            count("metrics.csv"),
            count(".pgm")
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("spectral kernel", spectral_kernel),
        ("gradient suite", gradient_suite),
        ("mechanism identities", mechanism_identities),
        ("statistics oracle", statistics_oracle),
        ("overfit sanity", overfit_sanity),
        ("ablation trend", ablation_trend),
        ("evaluator equivalence", evaluator_equivalence),
        ("reproducibility", reproducibility),
    ];
    let mut failed = Vec::new();
    for (k, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        let line = format!("[{}] criterion {} {name}: {}\n", if o.passed { "PASS" } else { "FAIL" }, k + 1, o.detail);
        std::io::stderr().write_all(line.as_bytes()).unwrap();
        if !o.passed {
            failed.push(format!("{} {name}", k + 1));
        }
    }
    assert!(failed.is_empty(), "failing criteria: {}", failed.join(", "));
}
