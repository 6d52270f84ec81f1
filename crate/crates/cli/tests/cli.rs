use std::path::Path;
use std::process::{Command, Output};

use graspkit::data::{load_image, parse_scene_jsonl};
use graspkit::eval::{PredGrasp, PredictionRecord};
use graspkit::geom::GraspRect;

fn graspkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graspkit"))
        .args(args)
        .env_remove("GRASPKIT_TRAIN_SCENES")
        .env_remove("GRASPKIT_OUT_DIR")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = graspkit(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, count: usize, objects: usize) {
    ok(&[
        "synth", "--seed", "7", "-n", &count.to_string(), "--objects", &objects.to_string(),
        "--size", "64", "-o", p(dir),
    ]);
}

fn gt_as_predictions(scenes: &Path) -> Vec<PredictionRecord> {
    std::fs::read_to_string(scenes)
        .unwrap()
        .lines()
        .enumerate()
        .map(|(i, l)| {
            let s = parse_scene_jsonl(l, i + 1, 3).unwrap();
            PredictionRecord {
                source_id: s.source_id,
                grasps: s.grasps.iter().map(|g| PredGrasp::from(&g.with_confidence(0.9))).collect(),
            }
        })
        .collect()
}

fn write_preds(path: &Path, recs: &[PredictionRecord]) {
    let text: String = recs.iter().map(|r| r.to_json_line() + "\n").collect();
    std::fs::write(path, text).unwrap();
}

#[test]
fn synth_writes_images_and_scene_list() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 3, 2);
    let list = std::fs::read_to_string(dir.path().join("scenes.jsonl")).unwrap();
    assert_eq!(list.lines().count(), 3);
    for (i, l) in list.lines().enumerate() {
        let s = parse_scene_jsonl(l, i + 1, 3).unwrap();
        assert_eq!(s.grasps.len(), 2);
        let img = load_image(&dir.path().join(&s.image_path)).unwrap();
        assert_eq!(img.shape(), &[3, 64, 64]);
    }
}

#[test]
fn ground_truth_scores_perfectly_in_any_order() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 6, 3);
    let scenes = dir.path().join("scenes.jsonl");
    let mut preds = gt_as_predictions(&scenes);
    let a = dir.path().join("a.jsonl");
    write_preds(&a, &preds);
    preds.reverse();
    preds.swap(1, 4);
    let b = dir.path().join("b.jsonl");
    write_preds(&b, &preds);

    for mode in ["single", "multi"] {
        let ja = dir.path().join(format!("{mode}-a.json"));
        let jb = dir.path().join(format!("{mode}-b.json"));
        let table = ok(&["eval", "-g", p(&scenes), "-p", p(&a), "--mode", mode, "--json", p(&ja)]);
        assert!(table.contains("100.00%"), "{table}");
        ok(&["eval", "-g", p(&scenes), "-p", p(&b), "--mode", mode, "--json", p(&jb)]);
        assert_eq!(std::fs::read(&ja).unwrap(), std::fs::read(&jb).unwrap());
    }
}

#[test]
fn three_of_four_top1_hits() {
    let dir = tempfile::tempdir().unwrap();
    let at = |theta: f64| GraspRect::new(50.0, 50.0, 40.0, 20.0, theta).unwrap();
    let mut scenes = String::new();
    let mut preds = Vec::new();
    for k in 0..4 {
        scenes.push_str(&format!(
            r#"{{"image_path":"s{k}.png","source_id":"s{k}","grasps":[{{"x":50,"y":50,"w":40,"h":20,"theta":30,"category":0}}]}}"#
        ));
        scenes.push('\n');
        // the last scene's best guess is rotated well past the angle tolerance
        let top = if k == 3 { at(80.0) } else { at(35.0) };
        let decoy = at(120.0);
        preds.push(PredictionRecord {
            source_id: format!("s{k}"),
            grasps: vec![PredGrasp::from(&decoy.with_confidence(0.2)), PredGrasp::from(&top.with_confidence(0.8))],
        });
    }
    let sp = dir.path().join("scenes.jsonl");
    std::fs::write(&sp, scenes).unwrap();
    let pp = dir.path().join("p.jsonl");
    write_preds(&pp, &preds);
    let table = ok(&["eval", "-g", p(&sp), "-p", p(&pp), "--mode", "single"]);
    assert!(table.contains("75.00%"), "{table}");
}

#[test]
fn train_predict_render_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 2, 1);
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{
  "model": {
    "encoder": {"image_size": 32, "patch_size": 4, "embed_dim": 8, "depths": [1, 1, 1, 1],
                "num_heads": [1, 1, 2, 2], "window_size": 4},
    "decoder": {"fused_channels": 8, "head_channels": 8}
  },
  "train": {"epochs": 1, "batch_size": 2, "out_dir": "run"},
  "data": {"train_scenes": "data/scenes.jsonl"}
}"#,
    )
    .unwrap();
    let summary = ok(&["train", "-c", p(&cfg)]);
    assert!(summary.contains("1 steps"), "{summary}");
    let run = dir.path().join("run");
    for f in ["metrics.csv", "best.ckpt", "final.ckpt", "config.json"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let scenes = data.join("scenes.jsonl");
    let preds = dir.path().join("preds.jsonl");
    let out = graspkit(&["predict", "-c", p(&cfg), "-w", p(&run.join("final.ckpt")), "-i", p(&scenes), "-o", p(&preds)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ms per scene"));
    assert_eq!(std::fs::read_to_string(&preds).unwrap().lines().count(), 2);
    ok(&["eval", "-g", p(&scenes), "-p", p(&preds), "--mode", "multi"]);

    let plain = dir.path().join("plain.png");
    ok(&["render", "-s", p(&scenes), "--no-labels", "-o", p(&plain)]);
    let first = parse_scene_jsonl(std::fs::read_to_string(&scenes).unwrap().lines().next().unwrap(), 1, 3).unwrap();
    assert_eq!(load_image(&plain).unwrap(), load_image(&data.join(&first.image_path)).unwrap());

    let drawn = dir.path().join("drawn.ppm");
    ok(&[
        "render", "-s", p(&scenes), "--id", &first.source_id, "-p", p(&preds), "--heatmap", "-c", p(&cfg), "-w",
        p(&run.join("final.ckpt")), "--color-by", "category", "-o", p(&drawn),
    ]);
    assert_ne!(load_image(&drawn).unwrap(), load_image(&plain).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(graspkit(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(graspkit(&["eval", "-g", "x"]).status.code(), Some(1));
    assert_eq!(graspkit(&["--help"]).status.code(), Some(0));

    let missing = dir.path().join("nope.jsonl");
    let out = graspkit(&["eval", "-g", p(&missing), "-p", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("nope.jsonl"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"lr": -1}}"#).unwrap();
    assert_eq!(graspkit(&["train", "-c", p(&bad)]).status.code(), Some(1));

    // prediction for a scene that is not in the ground truth
    synth(dir.path(), 1, 1);
    let scenes = dir.path().join("scenes.jsonl");
    let mut preds = gt_as_predictions(&scenes);
    preds.push(PredictionRecord {
        source_id: "stray".into(),
        grasps: vec![],
    });
    let pp = dir.path().join("p.jsonl");
    write_preds(&pp, &preds);
    assert_eq!(graspkit(&["eval", "-g", p(&scenes), "-p", p(&pp)]).status.code(), Some(2));
}

#[test]
fn shipped_config_loads_as_the_micro_model() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/micro.json");
    let cfg = graspkit::pipeline::RunConfig::load(&path).unwrap();
    assert_eq!(cfg.model, graspkit::pipeline::ModelConfig::micro());
}
