use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "image_size = 32\nnum_classes = 3\nchannels = 4\nroi_size = 4\nepochs = 1\nbatch_size = 4\n\
                    train_images = 8\ntest_images = 4\nobjects_mean = 2\nseeds = 0\n";

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_freqpriv"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.cfg");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/stats3")
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let out = text(&o);
    assert!(out.contains("total_loss[neck.gate.logits]"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn corrupted_vjp_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--corrupt", "silu"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(text(&o).contains("gradient check failed: silu"), "{}", text(&o));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(run(&["train", "--variant", "V"], dir.path()).status.code(), Some(1));
    assert_eq!(run(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn validation_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "seed = 1\nbeta_typo = 3\n").unwrap();
    let o = run(&["--config", bad.to_str().unwrap(), "train"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("line 2"), "{}", text(&o));

    std::fs::write(&bad, "image_size = 30\n").unwrap();
    assert_eq!(run(&["--config", bad.to_str().unwrap(), "synth"], dir.path()).status.code(), Some(2));

    let o = run(&["stats", dir.path().join("missing").to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stats_on_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["--out", "s", "stats", fixture().to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let out = text(&o);
    assert!(out.contains("cv 0.5  top20 0.375"), "{out}");
    assert!(dir.path().join("s/objects.csv").is_file());
}

#[test]
fn train_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = cfg.to_str().unwrap();
    for out in ["a", "b"] {
        let o = run(&["--config", c, "--variant", "III", "--seed", "4", "--out", out, "train"], dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    }
    let a = std::fs::read(dir.path().join("a/model.fprv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b/model.fprv")).unwrap());
    let resolved = std::fs::read_to_string(dir.path().join("a/config.txt")).unwrap();
    assert!(resolved.contains("variant = III") && resolved.contains("seed = 4"), "{resolved}");

    let o = run(&["--config", c, "--seed", "4", "--out", "e", "eval", "--checkpoint", "a/model.fprv"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(text(&o).contains("AP50"));
    assert!(dir.path().join("e/metrics.csv").is_file());
}

#[test]
fn perfect_predictions_via_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = cfg.to_str().unwrap();
    assert_eq!(run(&["--config", c, "--out", "d", "synth"], dir.path()).status.code(), Some(0));
    let ann: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("d/test/annotations.json")).unwrap()).unwrap();
    let mut lines = String::new();
    for a in ann["annotations"].as_array().unwrap() {
        let det = serde_json::json!({
            "image_id": a["image_id"],
            "category_id": a["category_id"],
            "bbox": a["bbox"],
            "score": 0.5,
        });
        lines.push_str(&format!("{det}\n"));
    }
    std::fs::write(dir.path().join("gt.jsonl"), lines).unwrap();
    let o = run(&["--config", c, "--out", "e", "eval", "--predictions", "gt.jsonl", "--data", "d/test"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let metrics = std::fs::read_to_string(dir.path().join("e/metrics.csv")).unwrap();
    let row: Vec<&str> = metrics.lines().nth(1).unwrap().split(',').collect();
    assert_eq!((row[0], row[1], row[6]), ("1.000000", "1.000000", "1.000000"));
}

#[test]
fn ablate_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = run(&["--config", cfg.to_str().unwrap(), "--out", "abl", "ablate", "--seeds", "2,3"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let csv = std::fs::read_to_string(dir.path().join("abl/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8 + 4);
    assert!(dir.path().join("abl/IV_seed3/loss_trace.csv").is_file());
}
