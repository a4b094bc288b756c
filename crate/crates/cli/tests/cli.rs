//! End-to-end runs of the `strokerig` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use strokerig_core::datakit::write_manifest;
use rand::SeedableRng;
use strokerig_core::align::synthetic::{biped, random_rotation};
use strokerig_core::align::Aligner;
use strokerig_core::json::{skeleton_from_str, skeleton_to_string, Mode};
use strokerig_model::toy;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_strokerig"))
        .current_dir(dir)
        .env_remove("STROKERIG_CONFIG")
        .env_remove("STROKERIG_VAE")
        .env_remove("STROKERIG_DIT")
        .arg("--config")
        .arg(fixture())
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn dataset(dir: &Path, n: usize) -> PathBuf {
    let p = dir.join("data.jsonl");
    write_manifest(fs::File::create(&p).unwrap(), &toy::dataset(n, 5)).unwrap();
    p
}

/// Trains both models into `dir/models`.
fn train(dir: &Path) {
    dataset(dir, 6);
    ok(dir, &["train-vae", "data.jsonl", "models"]);
    ok(dir, &["train-dit", "data.jsonl", "models", "--vae", "models/vae.ckpt"]);
}

#[test]
fn unknown_config_key_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.toml");
    fs::write(&cfg, "version = 1\n[dit]\nwidht = 4\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_strokerig")).arg("--config").arg(&cfg).arg("--print-config").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("widht"));
}

#[test]
fn print_config_round_trips() {
    let d = tempfile::tempdir().unwrap();
    let text = ok(d.path(), &["--print-config"]);
    let again = d.path().join("echo.toml");
    fs::write(&again, &text).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_strokerig")).arg("--config").arg(&again).arg("--print-config").output().unwrap();
    assert_eq!(String::from_utf8(o.stdout).unwrap(), text);
}

#[test]
fn train_dit_without_vae_is_a_validation_error() {
    let d = tempfile::tempdir().unwrap();
    dataset(d.path(), 3);
    let o = run(d.path(), &["train-dit", "data.jsonl", "out", "--vae", "missing/vae.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("missing/vae.ckpt") && err.contains("train-vae"), "{err}");
    assert!(!d.path().join("out").exists());
}

#[test]
fn bad_stroke_exits_2() {
    let d = tempfile::tempdir().unwrap();
    train(d.path());
    fs::write(d.path().join("s.json"), r#"{"joints2d": [[0,0],[0,1]], "edges": [[0,5]]}"#).unwrap();
    let o = run(d.path(), &["sample", "--stroke", "s.json"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_subcommand_and_inputs_exit_2() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run(d.path(), &[]).status.code(), Some(2));
    assert_eq!(run(d.path(), &["filter", "nope.jsonl", "out.jsonl"]).status.code(), Some(2));
    assert_eq!(run(d.path(), &["eval", "--pred", "p"]).status.code(), Some(2));
}

#[test]
fn align_writes_the_canonical_skeleton_and_its_frame() {
    let d = tempfile::tempdir().unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let g = biped(&mut rng, false, 0.0);
    let g = g.rotated_about(&random_rotation(&mut rng), [0.0; 3]);
    fs::write(d.path().join("in.json"), skeleton_to_string(&g)).unwrap();
    ok(d.path(), &["align", "in.json", "out.json"]);
    let (expected, _) = Aligner::default().align(&g).unwrap();
    assert_eq!(fs::read_to_string(d.path().join("out.json")).unwrap().trim_end(), skeleton_to_string(&expected));
    let frame: Value = serde_json::from_str(&fs::read_to_string(d.path().join("out.json.frames.json")).unwrap()).unwrap();
    assert!(frame.is_object());
    assert!(d.path().join("out.json.manifest.json").is_file());
}

#[test]
fn full_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    train(dir);
    for f in ["models/vae.ckpt", "models/dit.ckpt", "models/vae_loss.csv", "models/dit_loss.csv", "models/train-vae.manifest.json", "models/train-dit.manifest.json"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let curve = fs::read_to_string(dir.join("models/dit_loss.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("step,loss"));
    assert_eq!(curve.lines().count(), 31);
    let man: Value = serde_json::from_str(&fs::read_to_string(dir.join("models/train-dit.manifest.json")).unwrap()).unwrap();
    assert_eq!(man["command"], "train-dit");
    assert_eq!(man["seed"], man["config"]["dit_train"]["seed"]);
    assert_eq!(man["inputs"].as_array().unwrap().len(), 2);
    assert_eq!(man["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert!(man["config"]["dit"]["width"] == 8);

    ok(dir, &["filter", "data.jsonl", "kept.jsonl"]);
    assert!(dir.join("kept.jsonl.stats.json").is_file());

    ok(dir, &["simulate-strokes", "kept.jsonl", "sim", "--per-record", "2"]);
    let mut strokes: Vec<_> = fs::read_dir(dir.join("sim/strokes")).unwrap().map(|e| e.unwrap().path()).collect();
    strokes.sort();
    assert_eq!(strokes.len(), 12);

    // Topology passes through; the skeleton is printed on stdout.
    fs::write(dir.join("s.json"), r#"{"joints2d": [[0,0.8],[0,0.2],[-0.4,-0.6],[0.4,-0.6],[0.5,0.3]], "edges": [[0,1],[1,2],[1,3],[1,4]]}"#).unwrap();
    let out = ok(dir, &["sample", "--stroke", "s.json", "--text", "a fox", "--seed", "7", "--vae", "models/vae.ckpt", "--dit", "models/dit.ckpt"]);
    let g = skeleton_from_str(&out, Mode::Strict).unwrap();
    assert_eq!(g.len(), 5);
    assert_eq!(g.edge_pairs(), vec![(0, 1), (1, 2), (1, 3), (1, 4)]);
    // Checkpoints default to models/ beside the working directory.
    assert_eq!(ok(dir, &["sample", "--stroke", "s.json", "--text", "a fox", "--seed", "7"]), out);
    assert_ne!(ok(dir, &["sample", "--stroke", "s.json", "--text", "a fox", "--seed", "8"]), out);

    // Directory evaluation: prediction identical to ground truth scores zero.
    fs::create_dir_all(dir.join("p")).unwrap();
    fs::create_dir_all(dir.join("g")).unwrap();
    fs::write(dir.join("p/a.json"), &out).unwrap();
    fs::write(dir.join("g/a.json"), &out).unwrap();
    let rep: Value = serde_json::from_str(&ok(dir, &["eval", "--pred", "p", "--gt", "g"])).unwrap();
    assert_eq!(rep["overall"]["cd_j2j"], 0.0);
    assert!(rep["per_category"].is_object());

    ok(dir, &["eval", "--manifest", "data.jsonl", "--out", "ev"]);
    let ev: Value = serde_json::from_str(&fs::read_to_string(dir.join("ev/report.json")).unwrap()).unwrap();
    let drop = ev["joint_drop"].as_array().unwrap();
    assert_eq!(drop.len(), 3);
    assert_eq!(drop[0]["overall"], ev["overall"]);
    assert_eq!(fs::read_to_string(dir.join("ev/joint_drop.csv")).unwrap().lines().count(), 4);

    ok(dir, &["build-pairs", "data.jsonl", "pairs.jsonl"]);
    let stats: Value = serde_json::from_str(&fs::read_to_string(dir.join("pairs.jsonl.stats.json")).unwrap()).unwrap();
    assert_eq!(stats["conditions"], 6);
    assert!(stats["pairs"].as_u64().unwrap() >= 1);

    ok(dir, &["dpo-finetune", "pairs.jsonl", "tuned", "--heldout", "data.jsonl"]);
    let dpo: Value = serde_json::from_str(&fs::read_to_string(dir.join("tuned/report.json")).unwrap()).unwrap();
    assert_eq!(dpo["heldout"], 6);
    assert!(dir.join("tuned/dit.ckpt").is_file());

    let summary: Value = serde_json::from_str(&ok(dir, &["report", "models", "ev", "tuned"])).unwrap();
    let runs = summary["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 4);
    assert!(runs.iter().any(|r| r["command"] == "dpo-finetune" && r["reports"]["report.json"]["heldout"] == 6));
    assert!(runs.iter().any(|r| r["final_rows"]["dit_loss.csv"]["step"] == 29.0));
}

#[test]
fn identical_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        train(d);
        ok(d, &["eval", "--manifest", "data.jsonl", "--out", "ev"]);
    }
    for f in ["models/vae.ckpt", "models/dit.ckpt", "models/dit_loss.csv", "models/train-dit.manifest.json", "ev/report.json", "ev/eval.manifest.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
    // A different seed changes the checkpoint.
    ok(b.path(), &["--seed", "4", "train-vae", "data.jsonl", "other"]);
    assert_ne!(fs::read(a.path().join("models/vae.ckpt")).unwrap(), fs::read(b.path().join("other/vae.ckpt")).unwrap());
}
