use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_partwarp"))
}

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).arg("--config").arg(tiny_config()).env_remove("PARTWARP_DATA_ROOT").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// A dataset and a checkpoint trained on it, shared by the inference tests.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    checkpoint: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        ok(&["synth-data", "--seed", "1", "--out", data.to_str().unwrap()]);
        let run_dir = root.join("run");
        ok(&["train", "--seed", "7", "--data", data.to_str().unwrap(), "--out", run_dir.to_str().unwrap()]);
        Fixture { _dir: dir, root, data, checkpoint: run_dir.join("last.safetensors") }
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn frame(f: &Fixture, id: usize, pose: usize) -> String {
    format!("{}/id{id:03}/f{pose:02}", f.data.display())
}

#[test]
fn training_twice_gives_identical_metrics() {
    let f = fixture();
    let again = f.root.join("again");
    ok(&["train", "--seed", "7", "--data", s(&f.data), "--out", s(&again)]);
    let a = std::fs::read(f.root.join("run/metrics.csv")).unwrap();
    let b = std::fs::read(again.join("metrics.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 5, "header plus 4 steps");
    let m = manifest(&again);
    assert_eq!(m["command"], "train");
    assert_eq!(m["seed"], 7);
    let copied = std::fs::read_to_string(again.join("config.toml")).unwrap();
    assert!(copied.contains("seed = 7"));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let f = fixture();
    let split = f.root.join("split");
    ok(&["train", "--seed", "7", "--data", s(&f.data), "--out", s(&split), "--steps", "2"]);
    ok(&[
        "train",
        "--seed",
        "7",
        "--data",
        s(&f.data),
        "--out",
        s(&split),
        "--resume",
        s(&split.join("last.safetensors")),
    ]);
    let a = std::fs::read(f.root.join("run/metrics.csv")).unwrap();
    let b = std::fs::read(split.join("metrics.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn overrides_take_precedence_over_the_file() {
    let f = fixture();
    let out = f.root.join("short");
    ok(&["train", "--data", s(&f.data), "--out", s(&out), "--set", "train.steps=1", "--set", "train.checkpoint_every=0"]);
    let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(!out.join("ckpt_000002.safetensors").exists());
}

#[test]
fn data_root_comes_from_the_environment() {
    let f = fixture();
    let out = f.root.join("env");
    let status = bin()
        .args(["train", "--out", s(&out), "--steps", "1", "--config"])
        .arg(tiny_config())
        .env("PARTWARP_DATA_ROOT", &f.data)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let m = manifest(&out);
    assert_eq!(m["inputs"]["data"], s(&f.data));
}

#[test]
fn parts_manifest_lists_group_tiles() {
    let f = fixture();
    let out = f.root.join("parts");
    ok(&["parts", "--checkpoint", s(&f.checkpoint), "--pose", &frame(f, 0, 0), "--group", "head", "--n", "4", "--out", s(&out)]);
    let m = manifest(&out);
    let tiles = m["tiles"].as_array().unwrap();
    assert_eq!(tiles.len(), 4);
    assert!(tiles.iter().all(|t| t["group"] == "head" && t["mode"] == "parts"));
    for t in tiles {
        assert!(out.join(t["file"].as_str().unwrap()).exists());
    }
    assert!(out.join("parts.png").exists());
}

#[test]
fn eval_over_two_seeds_reports_positive_diversity() {
    let f = fixture();
    let pose = frame(f, 0, 1);
    let (a, b) = (f.root.join("seed1"), f.root.join("seed2"));
    ok(&["sample", "--checkpoint", s(&f.checkpoint), "--pose", &pose, "--n", "2", "--seed", "1", "--out", s(&a)]);
    ok(&["sample", "--checkpoint", s(&f.checkpoint), "--pose", &pose, "--n", "2", "--seed", "2", "--out", s(&b)]);
    let out = f.root.join("eval_samples");
    ok(&["eval", "--samples", s(&a), "--samples", s(&b), "--out", s(&out)]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["diversity"]["mean"].as_f64().unwrap() > 0.0);
    assert_eq!(report["samples_per_pose"][0], 4);
}

#[test]
fn sampling_is_reproducible_from_seed() {
    let f = fixture();
    let pose = frame(f, 1, 0);
    let (a, b) = (f.root.join("rep_a"), f.root.join("rep_b"));
    for d in [&a, &b] {
        ok(&["sample", "--checkpoint", s(&f.checkpoint), "--pose", &pose, "--seed", "5", "--out", s(d)]);
    }
    assert_eq!(std::fs::read(a.join("sample.png")).unwrap(), std::fs::read(b.join("sample.png")).unwrap());
}

#[test]
fn every_inference_mode_writes_its_outputs() {
    let f = fixture();
    let ck = s(&f.checkpoint);
    let dir = |n: &str| f.root.join(n);
    ok(&["transfer", "--checkpoint", ck, "--source", &frame(f, 0, 0), "--target", &frame(f, 1, 1), "--target", &frame(f, 2, 2), "--out", s(&dir("transfer"))]);
    assert_eq!(manifest(&dir("transfer"))["tiles"].as_array().unwrap().len(), 2);
    ok(&[
        "garment",
        "--checkpoint",
        ck,
        "--body",
        &frame(f, 0, 0),
        "--garment",
        &frame(f, 1, 0),
        "--group",
        "upper_body",
        "--pose",
        &frame(f, 2, 1),
        "--out",
        s(&dir("garment")),
    ]);
    assert!(dir("garment").join("garment_000.png").exists());
    ok(&["interp", "--checkpoint", ck, "--first", &frame(f, 0, 0), "--second", &frame(f, 1, 0), "--pose", &frame(f, 2, 1), "--steps", "3", "--out", s(&dir("interp"))]);
    let tiles = manifest(&dir("interp"))["tiles"].clone();
    let ts: Vec<f64> = tiles.as_array().unwrap().iter().map(|t| t["t"].as_f64().unwrap()).collect();
    assert_eq!(ts, vec![0.0, 0.5, 1.0]);
    ok(&["extract-texture", "--frame", &frame(f, 0, 0), "--out", s(&dir("atlas"))]);
    assert!(dir("atlas").join("atlas.png").exists() && dir("atlas").join("atlas.mask.png").exists());
    ok(&["eval", "--checkpoint", ck, "--data", s(&f.data), "--out", s(&dir("eval"))]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir("eval").join("report.json")).unwrap()).unwrap();
    assert!(report["diversity"]["mean"].as_f64().unwrap() > 0.0);
    assert!(dir("eval").join("diversity.csv").exists());
}

fn error_class(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr).trim().to_string();
    assert_eq!(err.lines().count(), 1, "{err}");
    err.strip_prefix("error[").and_then(|r| r.split_once(']')).map(|(c, _)| c.to_string()).unwrap_or(err)
}

#[test]
fn failures_report_one_line_error_classes() {
    let f = fixture();
    let pose = frame(f, 0, 0);
    let bad = f.root.join("bad");
    let missing = f.root.join("nothing.safetensors");
    let out = run(&["sample", "--checkpoint", s(&missing), "--pose", &pose, "--out", s(&bad)]);
    assert_eq!(error_class(&out), "missing-checkpoint");
    let out = run(&["parts", "--checkpoint", s(&f.checkpoint), "--pose", &pose, "--group", "hat", "--out", s(&bad)]);
    assert_eq!(error_class(&out), "invalid-part-group");
    let out = run(&["sample", "--checkpoint", s(&f.checkpoint), "--pose", &pose, "--out", s(&bad), "--set", "net.latent_dim=3"]);
    assert_eq!(error_class(&out), "config-mismatch");
    let out = run(&["train", "--out", s(&bad)]);
    assert_eq!(error_class(&out), "invalid-config");
}
