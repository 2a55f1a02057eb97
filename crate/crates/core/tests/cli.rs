mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use xmodal::data::{load_image, parse_manifest};
use xmodal::linalg::Matrix;
use xmodal::trainer::{Checkpoint, FeatureLayer, FeatureSet, Params, ToyModel, TrainConfig};
use xmodal::{ImageBuffer, Label, Modality};

fn xmodal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmodal")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn analyze_dct_constant_image() {
    let dir = tempfile::tempdir().unwrap();
    let m = common::write_dataset(dir.path(), &[ImageBuffer::filled(32, 32, 3, 0.5)]);
    let out = dir.path().join("r");
    let o = xmodal(&["analyze", "dct", "--manifest", p(&m), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = json(&out.join("dct.summary.json"));
    assert_eq!(s["zero_fraction"], 1.0);
    assert!(out.join("dct.csv").exists());
    assert!(out.join("run.json").exists());
}

#[test]
fn unreadable_manifest_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let o = xmodal(&["analyze", "rapsd", "--manifest", p(&missing), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.jsonl"));
}

#[test]
fn limit_caps_samples() {
    let dir = tempfile::tempdir().unwrap();
    let imgs: Vec<_> = (0..100).map(|s| common::structured_image(16, 16, 1, s)).collect();
    let m = common::write_dataset(dir.path(), &imgs);
    let out = dir.path().join("r");
    let o = xmodal(&[
        "analyze",
        "luma",
        "--manifest",
        p(&m),
        "--out",
        p(&out),
        "--limit",
        "10",
    ]);
    assert!(o.status.success());
    let s = json(&out.join("luma.summary.json"));
    assert_eq!(s["n_records"], 10);
    assert_eq!(s["n_used"], 10);
    assert_eq!(s["n_pixels"], 10 * 256);
}

#[test]
fn partial_failures_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let m = common::write_dataset(
        dir.path(),
        &[
            common::structured_image(32, 32, 3, 1),
            common::structured_image(32, 32, 3, 2),
        ],
    );
    fs::remove_file(dir.path().join("img_001.ppm")).unwrap();
    let out = dir.path().join("r");
    let o = xmodal(&["analyze", "rapsd", "--manifest", p(&m), "--out", p(&out)]);
    assert!(o.status.success());
    let s = json(&out.join("rapsd.summary.json"));
    assert_eq!(s["n_failed"], 1);
    assert_eq!(s["failures"][0]["id"], "s001");
}

#[test]
fn degrade_near_identity_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let imgs: Vec<_> = (0..6)
        .map(|s| common::structured_image(24, 20, 1 + 2 * (s as usize % 2), s))
        .collect();
    let m = common::write_dataset(dir.path(), &imgs);
    let chain = dir.path().join("chain.json");
    fs::write(&chain, r#"{"steps": [{"op": "jpeg_sim", "quality": 100}]}"#).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = xmodal(&[
            "degrade",
            "--manifest",
            p(&m),
            "--chain",
            p(&chain),
            "--out",
            p(&out),
            "--seed",
            "7",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("a");
    let b = run("b");
    let ma = parse_manifest(a.join("manifest.jsonl")).unwrap();
    assert_eq!(ma.len(), 6);
    for (r, orig) in ma.records.iter().zip(&imgs) {
        let img = load_image(ma.resolve(r)).unwrap();
        // colour pixels pick up one extra code from the chroma round trip
        let codes = if orig.channels() == 1 { 1.0 } else { 2.0 };
        assert!(img.max_abs_diff(orig) <= codes / 255.0 + 1e-12);
        let rel = Path::new(&r.path);
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap());
    }
}

#[test]
fn degrade_rejects_unknown_step() {
    let dir = tempfile::tempdir().unwrap();
    let m = common::write_dataset(dir.path(), &[common::structured_image(16, 16, 1, 0)]);
    let chain = dir.path().join("chain.json");
    fs::write(&chain, r#"{"steps": [{"op": "sharpen", "amount": 2}]}"#).unwrap();
    let o = xmodal(&[
        "degrade",
        "--manifest",
        p(&m),
        "--chain",
        p(&chain),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sharpen"));
}

fn small_train_config(dir: &Path, lambda: f64) -> std::path::PathBuf {
    let cfg = format!(
        r#"{{"data": {{"kind": "synthetic", "spec": {{"train": {{"real_image": 40, "fake_image": 40, "real_video": 40, "fake_video": 40}},
            "val": {{"real_image": 15, "fake_image": 15, "real_video": 15, "fake_video": 15}},
            "test": {{"real_image": 15, "fake_image": 15, "real_video": 15, "fake_video": 15}}}}}},
            "train": {{"epochs": 25, "batch_size": 32, "lambda": {lambda}, "early_stopping": {{"patience": 3}}}}}}"#
    );
    let path = dir.join(format!("train_{lambda}.json"));
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn train_outputs_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_train_config(dir.path(), 0.05);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = xmodal(&["train", "--config", p(&cfg), "--out", p(&out), "--seed", "3"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("a");
    let b = run("b");
    for f in ["checkpoint.json", "history.csv", "train.jsonl", "train.summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(
        fs::read(a.join("run.json")).unwrap(),
        fs::read(b.join("run.json")).unwrap()
    );
    let ck = Checkpoint::load(&a.join("checkpoint.json")).unwrap();
    let hist = fs::read_to_string(a.join("history.csv")).unwrap();
    let val: Vec<f64> = hist
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(4).unwrap().parse().unwrap())
        .collect();
    assert!(val.iter().all(|&v| val[ck.best_epoch] <= v));
    assert_eq!(ck.config.seed, 3);
}

#[test]
fn train_without_contrastive_term_logs_zero_cm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_train_config(dir.path(), 0.0);
    let out = dir.path().join("o");
    assert!(xmodal(&["train", "--config", p(&cfg), "--out", p(&out)])
        .status
        .success());
    let hist = fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(hist.lines().skip(1).all(|l| l.split(',').nth(2) == Some("0")));
}

#[test]
fn train_divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"epochs": 5, "optimizer": {"lr": 1e300}}}"#).unwrap();
    let o = xmodal(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"batch_size": 1}}"#).unwrap();
    let o = xmodal(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

/// logit = x₀ exactly: one ReLU unit passes x₀ + 100, the bias removes 100.
fn identity_checkpoint(dir: &Path) -> std::path::PathBuf {
    let mut params = Params::zeros(2, 2, 2);
    params.w1 = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
    params.b1 = vec![100.0, 0.0];
    params.wc = vec![1.0, 0.0];
    params.bc = -100.0;
    let model = ToyModel {
        params,
        feature_layer: FeatureLayer::Projection,
    };
    let path = dir.join("ck.json");
    Checkpoint::new(model, TrainConfig::default(), 0).save(&path).unwrap();
    path
}

fn write_features(path: &Path, rows: &[(&str, f64, Label, &str)]) {
    let mut text = String::new();
    for (id, x, label, subset) in rows {
        let l = if *label == Label::Fake { "fake" } else { "real" };
        text.push_str(&format!(
            r#"{{"id":"{id}","feature":[{x},0.0],"label":"{l}","modality":"image","subset":"{subset}"}}"#
        ));
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

#[test]
fn evaluate_aggregation_split() {
    let dir = tempfile::tempdir().unwrap();
    let ck = identity_checkpoint(dir.path());
    let ids: Vec<String> = (0..1010).map(|i| format!("x{i}")).collect();
    let rows: Vec<(&str, f64, Label, &str)> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            if i < 10 {
                (id.as_str(), 3.0, Label::Fake, "a")
            } else {
                (id.as_str(), 3.0, Label::Real, "b")
            }
        })
        .collect();
    let feats = dir.path().join("f.jsonl");
    write_features(&feats, &rows);
    for (agg, name) in [("overall", "o"), ("subset-mean", "s")] {
        let out = dir.path().join(name);
        let o = xmodal(&[
            "evaluate",
            "--checkpoint",
            p(&ck),
            "--features",
            p(&feats),
            "--aggregation",
            agg,
            "--out",
            p(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let r = json(&out.join("report.json"));
        assert_eq!(r["mean_over_subsets"]["acc"], 0.5);
        assert!((r["overall_pooled"]["acc"].as_f64().unwrap() - 0.0099).abs() < 1e-4);
        assert_eq!(r["headline"], agg);
    }
}

#[test]
fn evaluate_single_frames_match_direct_scores() {
    let dir = tempfile::tempdir().unwrap();
    let ck = identity_checkpoint(dir.path());
    let feats = dir.path().join("f.jsonl");
    write_features(
        &feats,
        &[
            ("a", 0.7, Label::Fake, "s"),
            ("b", -1.2, Label::Real, "s"),
            ("c", 0.1, Label::Real, "s"),
        ],
    );
    let out = dir.path().join("o");
    assert!(xmodal(&[
        "evaluate",
        "--checkpoint",
        p(&ck),
        "--features",
        p(&feats),
        "--frames",
        "1",
        "--out",
        p(&out)
    ])
    .status
    .success());
    let scores = fs::read_to_string(out.join("scores.csv")).unwrap();
    for (line, x) in scores.lines().skip(1).zip([0.7f64, -1.2, 0.1]) {
        let s: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!((s - xmodal::cmsupcon::sigmoid(x)).abs() < 1e-12);
    }
}

#[test]
fn evaluate_groups_video_frames() {
    let dir = tempfile::tempdir().unwrap();
    let ck = identity_checkpoint(dir.path());
    let feats = dir.path().join("f.jsonl");
    write_features(
        &feats,
        &[
            ("v#0", 0.2, Label::Fake, "s"),
            ("v#1", 0.4, Label::Fake, "s"),
            ("w", -2.0, Label::Real, "s"),
        ],
    );
    let out = dir.path().join("o");
    assert!(xmodal(&[
        "evaluate",
        "--checkpoint",
        p(&ck),
        "--features",
        p(&feats),
        "--frames",
        "2",
        "--out",
        p(&out)
    ])
    .status
    .success());
    let scores = fs::read_to_string(out.join("scores.csv")).unwrap();
    let first: Vec<&str> = scores.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(first[0], "v");
    assert_eq!(first[1], "2");
    assert!((first[2].parse::<f64>().unwrap() - xmodal::cmsupcon::sigmoid(0.3)).abs() < 1e-12);
}

#[test]
fn evaluate_converged_separable_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sep.json");
    fs::write(
        &cfg,
        r#"{"data": {"kind": "synthetic", "spec": {"real_mean": [-3.0, 0.0], "fake_mean": [3.0, 0.0], "std": [0.5, 1.0],
            "video_shift": [0.0, 0.0], "shortcut": null,
            "train": {"real_image": 25, "fake_image": 25, "real_video": 25, "fake_video": 25}}},
            "train": {"epochs": 200, "batch_size": 16, "lambda": 0.0, "early_stopping": null, "optimizer": {"lr": 0.01}}}"#,
    )
    .unwrap();
    let out = dir.path().join("t");
    assert!(xmodal(&["train", "--config", p(&cfg), "--out", p(&out)])
        .status
        .success());
    let ev = dir.path().join("e");
    let o = xmodal(&[
        "evaluate",
        "--checkpoint",
        p(&out.join("checkpoint.json")),
        "--features",
        p(&out.join("train.jsonl")),
        "--out",
        p(&ev),
    ]);
    assert!(o.status.success());
    assert_eq!(json(&ev.join("report.json"))["overall_pooled"]["acc"], 1.0);
    let set = FeatureSet::load(&out.join("train.jsonl")).unwrap();
    assert_eq!(set.only(Modality::Video).len(), 50);
}

#[test]
fn unloadable_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck.json");
    fs::write(&ck, "{ not json").unwrap();
    let feats = dir.path().join("f.jsonl");
    write_features(&feats, &[("a", 0.7, Label::Fake, "s")]);
    let o = xmodal(&[
        "evaluate",
        "--checkpoint",
        p(&ck),
        "--features",
        p(&feats),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn version_prints() {
    let o = xmodal(&["version"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("xmodal "));
}
