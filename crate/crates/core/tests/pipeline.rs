use std::path::Path;

use freqpriv::config::{ExperimentConfig, Variant};
use freqpriv::detector::checkpoint;
use freqpriv::eval::{write_predictions, Detection};
use freqpriv::pipeline::{cmd_ablate, cmd_eval, cmd_synth, cmd_train, EvalSource};

fn tiny() -> ExperimentConfig {
    ExperimentConfig::parse(
        "image_size = 32\nnum_classes = 3\nchannels = 4\nroi_size = 4\nepochs = 2\nbatch_size = 4\n\
         train_images = 12\ntest_images = 6\nobjects_mean = 2\nseeds = 0,1\n",
    )
    .unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn column(csv: &[u8], name: &str) -> Vec<f64> {
    let text = std::str::from_utf8(csv).unwrap();
    let mut lines = text.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

#[test]
fn synth_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny();
    cmd_synth(&cfg, a.path()).unwrap();
    cmd_synth(&cfg, b.path()).unwrap();
    for f in ["train/annotations.json", "train/manifest.json", "test/annotations.json", "train/images/000003.pgm", "test/hashes.json"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
}

#[test]
fn train_twice_gives_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny().with_variant(Variant::IV);
    cmd_train(&cfg, a.path()).unwrap();
    cmd_train(&cfg, b.path()).unwrap();
    for f in ["model.fprv", "loss_trace.csv", "config.txt", "hashes.json"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
    let other = tempfile::tempdir().unwrap();
    cmd_train(&ExperimentConfig { seed: 9, ..cfg }, other.path()).unwrap();
    assert_ne!(read(&a.path().join("model.fprv")), read(&other.path().join("model.fprv")));
}

#[test]
fn checkpoint_eval_is_reproducible() {
    let work = tempfile::tempdir().unwrap();
    let cfg = tiny();
    cmd_train(&cfg, &work.path().join("run")).unwrap();
    let ckpt = EvalSource::Checkpoint(work.path().join("run/model.fprv"));
    let r1 = cmd_eval(&cfg, &ckpt, &work.path().join("e1")).unwrap();
    let r2 = cmd_eval(&cfg, &ckpt, &work.path().join("e2")).unwrap();
    assert_eq!(r1, r2);
    for f in ["metrics.csv", "metrics.json", "per_class.csv", "predictions.jsonl"] {
        assert_eq!(read(&work.path().join("e1").join(f)), read(&work.path().join("e2").join(f)), "{f}");
    }
}

#[test]
fn ground_truth_as_predictions_scores_one() {
    let work = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cmd_synth(&cfg, work.path()).unwrap();
    let test_dir = work.path().join("test");
    let set = freqpriv::data::AnnotationSet::load(&test_dir.join("annotations.json")).unwrap();
    let dets: Vec<Detection> = set
        .annotations
        .iter()
        .map(|a| Detection {
            image_id: a.image_id,
            category_id: a.category_id,
            bbox: a.bbox,
            score: 0.9,
        })
        .collect();
    let preds = work.path().join("gt.jsonl");
    write_predictions(&preds, &dets).unwrap();
    cfg.test_data = Some(test_dir);
    let r = cmd_eval(&cfg, &EvalSource::Predictions(preds), &work.path().join("eval")).unwrap();
    assert_eq!((r.ap, r.ap50, r.f1), (Some(1.0), Some(1.0), Some(1.0)));
}

#[test]
fn predictions_need_test_data() {
    let work = tempfile::tempdir().unwrap();
    let preds = work.path().join("p.jsonl");
    write_predictions(&preds, &[]).unwrap();
    assert!(cmd_eval(&tiny(), &EvalSource::Predictions(preds), work.path()).is_err());
}

#[test]
fn ablation_table_and_traces() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny();
    let table = cmd_ablate(&cfg, a.path()).unwrap();
    assert_eq!(table.rows.len(), 8);
    assert!(table.rows.iter().all(|r| r.status == "ok"), "{:?}", table.rows);

    let csv = String::from_utf8(read(&a.path().join("ablation.csv"))).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,seed,ap,ap50,ap75,ap_s,status");
    assert_eq!(lines.len(), 1 + 4 * 2 + 4);
    assert!(lines[9..].iter().all(|l| l.contains(",mean,") && l.ends_with("ok 2/2")));

    for seed in [0, 1] {
        for v in Variant::ALL {
            let dir = a.path().join(format!("{v}_seed{seed}"));
            let wf = column(&read(&dir.join("loss_trace.csv")), "weighted_freq");
            if v == Variant::IV {
                assert!(wf.iter().any(|&x| x > 0.0), "IV seed {seed} has no frequency term");
            } else {
                assert!(wf.iter().all(|&x| x == 0.0), "{v} seed {seed} has a frequency term");
            }
            let model = checkpoint::load(&dir.join("model.fprv")).unwrap();
            match v {
                Variant::I => assert!(model.neck.is_none()),
                Variant::II => {
                    let gate = model.neck.as_ref().unwrap().gate.logits();
                    assert!(gate.as_slice().iter().all(|&x| x == 40.0));
                }
                _ => assert!(model.neck.is_some()),
            }
        }
    }

    // rerun: every artifact is byte-identical
    cmd_ablate(&cfg, b.path()).unwrap();
    assert_eq!(read(&a.path().join("ablation.csv")), read(&b.path().join("ablation.csv")));
    assert_eq!(read(&a.path().join("hashes.json")), read(&b.path().join("hashes.json")));
    for f in ["IV_seed1/model.fprv", "IV_seed1/metrics.csv", "II_seed0/loss_trace.csv", "data_seed1/train_manifest.json"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
}
