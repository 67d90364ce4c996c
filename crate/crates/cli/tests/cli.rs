use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tdd_cli::synth::{render, MotionTruth, SynthConfig};
use tdd_core::flow::{estimate_flow, FlowParams};
use tdd_core::trajectory::{extract_trajectories, TrackerConfig};

const TDD: &str = env!("CARGO_BIN_EXE_tdd");

fn desk() -> Value {
    serde_json::from_str(include_str!("../../../configs/desk.json")).unwrap()
}

/// Writes `cfg` (with `dataset` and `work_dir` under `dir`) and returns its path.
fn config(dir: &Path, name: &str, mut cfg: Value, synth: Value) -> PathBuf {
    cfg["dataset"] = "data".into();
    cfg["work_dir"] = format!("work_{name}").into();
    for (k, v) in synth.as_object().unwrap() {
        cfg["synth"][k] = v.clone();
    }
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn small(dir: &Path, name: &str) -> PathBuf {
    config(dir, name, desk(), json!({ "per_class": 6, "splits": 2 }))
}

fn tdd(cfg: &Path, args: &[&str]) -> Output {
    Command::new(TDD).args(args).arg("--config").arg(cfg).output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(out: Output, code: i32, needle: &str) {
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(code), "{err}");
    assert!(err.contains(needle), "expected \"{needle}\" in: {err}");
}

#[test]
fn synth_cardinality_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "a", desk(), json!({ "per_class": 10 }));
    ok(tdd(&cfg, &["synth"]));
    ok(tdd(&cfg, &["synth", "--out", dir.path().join("again").to_str().unwrap()]));
    let index: Value = serde_json::from_slice(&fs::read(dir.path().join("data/dataset.json")).unwrap()).unwrap();
    let splits: Value = serde_json::from_slice(&fs::read(dir.path().join("data/splits.json")).unwrap()).unwrap();
    assert_eq!(index["videos"].as_array().unwrap().len(), 30);
    assert_eq!(splits.as_array().unwrap().len(), 3);
    for entry in fs::read_dir(dir.path().join("data/videos")).unwrap() {
        let p = entry.unwrap().path();
        let twin = dir.path().join("again/videos").join(p.file_name().unwrap());
        assert_eq!(fs::read(&p).unwrap(), fs::read(twin).unwrap(), "{}", p.display());
    }
    assert_eq!(
        fs::read(dir.path().join("data/splits.json")).unwrap(),
        fs::read(dir.path().join("again/splits.json")).unwrap()
    );
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad_class = config(dir.path(), "c", desk(), json!({ "classes": ["translate", "spin"] }));
    fails(tdd(&bad_class, &["synth"]), 2, "unknown class name \"spin\"");
    fails(tdd(&dir.path().join("nope.json"), &["synth"]), 2, "nope.json");

    let mut cfg = desk();
    cfg["spatial_net"] = "broken.json".into();
    fs::write(dir.path().join("broken.json"), "{ \"layers\": 3 }").unwrap();
    let broken = config(dir.path(), "n", cfg, json!({ "per_class": 2, "splits": 2 }));
    ok(tdd(&broken, &["synth"]));
    ok(tdd(&broken, &["trajectories"]));
    fails(tdd(&broken, &["featmaps"]), 2, "NetSpec parse failure");

    let mut cfg = desk();
    cfg["pca_dim"] = 0.into();
    let zero = config(dir.path(), "z", cfg, json!({}));
    fails(tdd(&zero, &["synth"]), 2, "pca_dim");
}

#[test]
fn missing_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "m");
    fails(tdd(&cfg, &["trajectories"]), 3, "dataset.json");
    ok(tdd(&cfg, &["synth"]));
    fails(tdd(&cfg, &["trajectories", "--video", "nobody"]), 2, "unknown video id");
    fs::remove_file(dir.path().join("data/videos/zoom_002.raw")).unwrap();
    fails(tdd(&cfg, &["trajectories"]), 3, "zoom_002");
}

#[test]
fn overlapping_split_is_leakage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "l");
    ok(tdd(&cfg, &["synth"]));
    let path = dir.path().join("data/splits.json");
    let mut splits: Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    let leaked = splits[1]["test"][0].clone();
    splits[1]["train"].as_array_mut().unwrap().push(leaked);
    fs::write(&path, serde_json::to_vec(&splits).unwrap()).unwrap();
    ok(tdd(&cfg, &["run", "--video", "rotate_000"]));
    fails(tdd(&cfg, &["run"]), 3, "split leakage");
}

#[test]
fn smoke_split_memorizes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "s", desk(), json!({ "per_class": 6, "splits": 1, "smoke": true }));
    ok(tdd(&cfg, &["synth"]));
    let out = ok(tdd(&cfg, &["run"]));
    let report: Value = serde_json::from_slice(&fs::read(dir.path().join("work_s/eval/report.json")).unwrap()).unwrap();
    let acc = report["mean_accuracy"].as_f64().unwrap();
    assert!(acc >= 0.99, "{out}");
    let csv = fs::read_to_string(dir.path().join("work_s/eval/report.csv")).unwrap();
    assert!(csv.starts_with("split_id,class,n_test,n_correct,accuracy\n"));
    assert_eq!(csv.lines().count(), 1 + 3 + 1 + 1);
}

#[test]
fn stages_report_cache_hits_and_missing_maps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "k");
    ok(tdd(&cfg, &["synth"]));
    let first = ok(tdd(&cfg, &["run", "--video", "translate_001"]));
    assert!(first.contains("pool: computed 1, cached 0"), "{first}");
    let tdd_file = dir.path().join("work_k/tdd/translate_001.tdd");
    let bytes = fs::read(&tdd_file).unwrap();
    let again = ok(tdd(&cfg, &["pool", "--video", "translate_001"]));
    assert_eq!(again.trim(), "pool: computed 0, cached 1");

    // removing the cache key forces a recompute with identical output
    fs::remove_file(dir.path().join("work_k/tdd/translate_001.tdd.key")).unwrap();
    assert!(ok(tdd(&cfg, &["pool", "--video", "translate_001"])).contains("computed 1"));
    assert_eq!(fs::read(&tdd_file).unwrap(), bytes);

    fs::remove_file(dir.path().join("work_k/maps/translate_001_temporal_conv4_1.4142.tdt")).unwrap();
    fails(tdd(&cfg, &["pool", "--video", "translate_001"]), 3, "layer conv4 at scale 1.4142");
}

#[test]
fn external_maps_are_ingested_or_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let base = small(dir.path(), "base");
    ok(tdd(&base, &["synth"]));
    ok(tdd(&base, &["run", "--video", "zoom_003"]));
    let ext = dir.path().join("ext");
    fs::create_dir(&ext).unwrap();
    let name = "zoom_003_spatial_conv5_1.0000.tdt";
    fs::copy(dir.path().join("work_base/maps").join(name), ext.join(name)).unwrap();

    let mut cfg = desk();
    cfg["external_maps"] = "ext".into();
    let with_ext = config(dir.path(), "ext", cfg, json!({ "per_class": 6, "splits": 2 }));
    ok(tdd(&with_ext, &["run", "--video", "zoom_003"]));
    assert_eq!(
        fs::read(dir.path().join("work_ext/tdd/zoom_003.tdd")).unwrap(),
        fs::read(dir.path().join("work_base/tdd/zoom_003.tdd")).unwrap()
    );

    // a map of another scale has the wrong size
    fs::copy(
        dir.path().join("work_base/maps/zoom_003_spatial_conv5_0.7071.tdt"),
        ext.join(name),
    )
    .unwrap();
    fails(tdd(&with_ext, &["featmaps", "--video", "zoom_003"]), 3, "external map");
}

#[test]
fn translate_trajectories_follow_ground_truth() {
    let cfg = SynthConfig::default();
    let desk_cfg = desk();
    let tracker: TrackerConfig = serde_json::from_value(desk_cfg["tracker"].clone()).unwrap();
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let angle = (seed as f32 - 1.5) * 0.3;
        let truth = MotionTruth::Translate {
            dx: 2.0 * angle.cos(),
            dy: 2.0 * angle.sin(),
        };
        let video = render(&truth, &cfg, &mut rng).unwrap();
        let gray = video.to_gray().unwrap();
        let flows: Vec<_> = gray
            .frames()
            .windows(2)
            .map(|w| estimate_flow(&w[0], &w[1], &FlowParams::default()).unwrap())
            .collect();
        let set = extract_trajectories(&video, &flows, &tracker).unwrap();
        assert!(!set.is_empty());
        let (mut sx, mut sy) = (0f32, 0f32);
        for t in &set.trajectories {
            let (a, b) = (t.points[0], t.points[t.len() - 1]);
            sx += b.x - a.x;
            sy += b.y - a.y;
        }
        let err = (sy.atan2(sx) - angle).abs().to_degrees();
        assert!(err < 15.0, "seed {seed}: {err:.1} degrees off");
    }
}
