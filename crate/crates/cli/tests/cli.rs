use std::path::Path;
use std::process::Command;

use mvs_core::backbone::{BackboneConfig, StageConfig};
use mvs_core::config::RunConfig;

fn mvs(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_mvs")).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(out.status.success(), "mvs {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(text: &str) -> serde_json::Value {
    serde_json::from_str(text).unwrap()
}

#[test]
fn ground_truth_round_trip_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    mvs(&["gen-data", "--out", s(&data), "--scenes", "1", "--height", "48", "--width", "60"]);
    let scene = data.join("scene_000");
    let gt = scene.join("depths_gt");

    let report = json(&mvs(&["eval-depth", "--pred", s(&gt), "--gt", s(&gt), "--thresholds", "0.01,0.1", "--json"]));
    assert_eq!(report["mean_abs_error"], 0.0);
    assert_eq!(report["depth_thresholds"][0][1], 1.0);

    let cloud = dir.path().join("gt.ply");
    mvs(&["fuse", "--scene", s(&scene), "--depths", s(&gt), "--out", s(&cloud)]);
    let report = json(&mvs(&["eval-cloud", "--pred", s(&cloud), "--ref", s(&cloud), "--json"]));
    assert_eq!(report["cloud"]["overall"], 0.0);
    let table = mvs(&["eval-cloud", "--pred", s(&cloud), "--ref", s(&cloud)]);
    assert!(table.contains("overall"));
}

#[test]
fn train_infer_fuse_and_render() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    mvs(&["gen-data", "--out", s(&data), "--scenes", "1", "--height", "32", "--width", "40"]);
    let mut cfg = RunConfig::default();
    cfg.data.root = data.clone();
    cfg.output = dir.path().join("run");
    cfg.backbone = BackboneConfig {
        stages: vec![
            StageConfig { hypotheses: 8, channels: 4, range_scale: 1.0, loss_weight: 0.5 },
            StageConfig { hypotheses: 4, channels: 4, range_scale: 0.25, loss_weight: 1.0 },
        ],
        encoder_channels: 4,
        regularizer_channels: 4,
        regularizer_levels: 2,
        inverse_depth: false,
    };
    cfg.renderer.rays = 32;
    cfg.renderer.samples = 8;
    cfg.renderer.hidden = 16;
    cfg.renderer.layers = 2;
    cfg.renderer.volume_channels = 4;
    cfg.train.epochs = 1;
    cfg.train.iters_per_epoch = 1;
    let config = dir.path().join("run.toml");
    std::fs::write(&config, cfg.to_toml().unwrap()).unwrap();
    mvs(&["train", "--config", s(&config), "--seed", "3"]);
    let ck = cfg.output.join("checkpoints").join("epoch_001.json");
    assert!(ck.exists() && cfg.output.join("metrics.jsonl").exists());
    let saved = RunConfig::from_toml_str(&std::fs::read_to_string(cfg.output.join("config.toml")).unwrap()).unwrap();
    assert_eq!(saved.train.seed, 3);

    let scene = data.join("scene_000");
    let pred = dir.path().join("pred");
    mvs(&["infer", "--checkpoint", s(&ck), "--scene", s(&scene), "--out", s(&pred), "--views", "3"]);
    for v in 0..5 {
        assert!(pred.join("depths").join(format!("{v:08}.pfm")).exists());
        assert!(pred.join("confidence").join(format!("{v:08}.pfm")).exists());
    }
    let report = json(&mvs(&["eval-depth", "--pred", s(&pred), "--gt", s(&scene.join("depths_gt")), "--json"]));
    assert!(report["mean_abs_error"].as_f64().unwrap().is_finite());
    mvs(&["fuse", "--scene", s(&scene), "--depths", s(&pred), "--out", s(&dir.path().join("pred.ply")), "--conf", "0.01", "--ascii"]);

    let debug = dir.path().join("debug");
    mvs(&["render-debug", "--checkpoint", s(&ck), "--scene", s(&scene), "--view", "1", "--out", s(&debug)]);
    for f in ["synthesized.png", "rendered_depth.png", "backbone_depth.png", "side_by_side.png"] {
        assert!(debug.join(f).exists(), "{f}");
    }
}

#[test]
fn bad_input_fails_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_mvs")).args(["infer", "--checkpoint", "/nonexistent.json", "--scene", "/nonexistent", "--out", "/tmp/x"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));
}
