use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::json;

use pvseg_core::datamodel::{save_image, save_mask};
use pvseg_core::{DatasetManifest, ImagePatch, ManifestEntry, MaskPatch, Split};

fn pvseg(args: &[&str]) -> i32 {
    let mut full = vec!["pvseg"];
    full.extend_from_slice(args);
    pvseg_cli::run(full)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn fake_manifest(positives: usize, negatives: usize) -> DatasetManifest {
    let entries = (0..positives + negatives)
        .map(|i| ManifestEntry {
            image: format!("images/{i:05}.png"),
            mask: format!("masks/{i:05}.png"),
            has_pv: i < positives,
            split: Split::Unassigned,
        })
        .collect();
    DatasetManifest { entries }
}

const TINY: &str = r#"{
  "backbone_channels": [8, 8, 8, 8],
  "embed_dim": 8,
  "encoder_layers": 1,
  "encoder_heads": 2,
  "encoder_ffn_dim": 8,
  "num_queries": 4,
  "decoder_heads": 2,
  "decoder_ffn_dim": 8,
  "batch_size": 2,
  "epochs": 2,
  "max_steps": 3
}"#;

/// Synthesizes a small split dataset and trains the tiny model on it.
fn trained_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    assert_eq!(pvseg(&["synth", "--count", "10", "--image-size", "32", "--out", s(&data)]), 0);
    let manifest = data.join("manifest.jsonl");
    assert_eq!(pvseg(&["split", "--manifest", s(&manifest)]), 0);
    let cfg = dir.join("run.json");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.join("run");
    assert_eq!(
        pvseg(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&run)]),
        0
    );
    (manifest, run)
}

#[test]
fn synth_writes_pairs_and_valid_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    assert_eq!(pvseg(&["synth", "--count", "10", "--image-size", "32", "--out", s(&out)]), 0);
    assert_eq!(std::fs::read_dir(out.join("images")).unwrap().count(), 10);
    assert_eq!(std::fs::read_dir(out.join("masks")).unwrap().count(), 10);
    let text = std::fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 10);
    let m = DatasetManifest::read_jsonl(&out.join("manifest.jsonl")).unwrap();
    m.validate(&out).unwrap();
    assert!(out.join("synth_config.json").exists());
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(pvseg(&["synth", "--count", "6", "--image-size", "32", "--seed", "9", "--out", s(out)]), 0);
    }
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn split_hundred_entries_sixty_twenty_twenty() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("m.jsonl");
    fake_manifest(50, 50).write_jsonl(&input).unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    assert_eq!(pvseg(&["split", "--manifest", s(&input), "--out", s(&a), "--seed", "4"]), 0);
    assert_eq!(pvseg(&["split", "--manifest", s(&input), "--out", s(&b), "--seed", "4"]), 0);
    let m = DatasetManifest::read_jsonl(&a).unwrap();
    assert_eq!(
        [m.count(Split::Train), m.count(Split::Val), m.count(Split::Test)],
        [60, 20, 20]
    );
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(dir.path().join("split_config.json").exists());
}

#[test]
fn split_unstratified_counts() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("m.jsonl");
    fake_manifest(13, 87).write_jsonl(&input).unwrap();
    assert_eq!(pvseg(&["split", "--manifest", s(&input), "--no-stratify"]), 0);
    let m = DatasetManifest::read_jsonl(&input).unwrap();
    assert_eq!(
        [m.count(Split::Train), m.count(Split::Val), m.count(Split::Test)],
        [60, 20, 20]
    );
}

#[test]
fn tile_large_raster_into_four_patches() {
    let dir = tempfile::tempdir().unwrap();
    let mut image = ImagePatch::filled(800, 800, [0.5, 0.5, 0.5]);
    let mut mask = MaskPatch::empty(800, 800);
    for y in 500..520 {
        for x in 100..130 {
            mask.set(x, y, 1);
            image.set_pixel(x, y, [0.1, 0.1, 0.3]);
        }
    }
    let (ip, mp) = (dir.path().join("big.png"), dir.path().join("big_mask.png"));
    save_image(&ip, &image).unwrap();
    save_mask(&mp, &mask).unwrap();
    let out = dir.path().join("tiles");
    assert_eq!(pvseg(&["tile", "--image", s(&ip), "--mask", s(&mp), "--out", s(&out)]), 0);
    let m = DatasetManifest::read_jsonl(&out.join("manifest.jsonl")).unwrap();
    assert_eq!(m.entries.len(), 4);
    assert_eq!(m.entries.iter().filter(|e| e.has_pv).count(), 1);
    m.validate(&out).unwrap();
}

#[test]
fn train_eval_predict_round() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, run) = trained_fixture(dir.path());
    for f in ["config.json", "last.ckpt", "best.ckpt", "history.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }

    // the emitted config alone reproduces the run
    let again = dir.path().join("again");
    let resolved = run.join("config.json");
    assert_eq!(pvseg(&["train", "--config", s(&resolved), "--out", s(&again)]), 0);
    assert_eq!(std::fs::read(run.join("last.ckpt")).unwrap(), std::fs::read(again.join("last.ckpt")).unwrap());

    let eval = dir.path().join("eval");
    let ckpt = run.join("last.ckpt");
    assert_eq!(
        pvseg(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--split", "val", "--out", s(&eval)]),
        0
    );
    let csv = std::fs::read_to_string(eval.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("image,iou,f1_score,accuracy,tp,tn,fp,fn"));
    let micro: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(micro.len(), 8);
    assert_eq!(micro[0], "micro");
    let counts: u64 = micro[4..].iter().map(|v| v.parse::<u64>().unwrap()).sum();
    assert_eq!(counts, 2 * 32 * 32);

    let pred = dir.path().join("pred");
    let img = manifest.parent().unwrap().join("images/00000.png");
    assert_eq!(
        pvseg(&["predict", "--checkpoint", s(&ckpt), "--image", s(&img), "--out", s(&pred), "--steps"]),
        0
    );
    let mask = image::open(pred.join("mask.png")).unwrap();
    assert_eq!(mask.color(), image::ColorType::L8);
    assert!(mask.to_luma8().pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
    let overlay = image::open(pred.join("overlay.png")).unwrap();
    assert_eq!(overlay.color(), image::ColorType::Rgba8);
    assert_eq!((overlay.width(), overlay.height()), (32, 32));
    for i in 0..5 {
        assert!(pred.join(format!("steps/step_{i}.png")).exists());
    }
    assert!(pred.join("predict_config.json").exists());
}

#[test]
fn flags_override_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = trained_fixture(dir.path());
    let cfg = dir.path().join("run.json");
    let out = dir.path().join("override");
    assert_eq!(
        pvseg(&[
            "train", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&out),
            "--max-steps", "1", "--set", "lr=0.0005",
        ]),
        0
    );
    let resolved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["max_steps"], json!(1));
    assert_eq!(resolved["lr"], json!(0.0005));
    assert_eq!(resolved["num_queries"], json!(4));
}

#[test]
fn checkpoint_version_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, run) = trained_fixture(dir.path());
    let mut bytes = std::fs::read(run.join("last.ckpt")).unwrap();
    bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    let out = dir.path().join("eval");
    assert_eq!(
        pvseg(&["eval", "--checkpoint", s(&bad), "--manifest", s(&manifest), "--out", s(&out)]),
        2
    );
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"lr": 0.001, "learning_rate": 0.1}"#).unwrap();
    assert_eq!(pvseg(&["train", "--config", s(&cfg), "--manifest", "m.jsonl"]), 1);
    assert_eq!(pvseg(&["train", "--config", s(&cfg), "--set", "config_version=2"]), 1);
}

#[test]
fn exit_codes_of_the_binary() {
    let bin = env!("CARGO_BIN_EXE_pvseg");
    let code = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&[]), Some(1));
    assert_eq!(code(&["synth", "--count", "x", "--out", "o"]), Some(1));
    assert_eq!(code(&["split", "--manifest", "/nonexistent/manifest.jsonl"]), Some(2));
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_pvseg"))
        .args(["synth", "--count", "2", "--image-size", "32", "--out", "relative/data"])
        .current_dir(dir.path())
        .env(pvseg_cli::OUT_ENV, dir.path().join("root"))
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    assert!(dir.path().join("root/relative/data/manifest.jsonl").exists());
    assert!(!dir.path().join("relative").exists());
}
