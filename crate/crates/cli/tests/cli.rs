use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/expert_comparison.csv");

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paintransfer")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn err(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

const TINY: &str = r#"
[model]
kind = "clstm2"
channels_per_block = [2, 2, 2, 2]
kernel_size = 3
input_hw = [32, 32]

[train]
max_epochs = 1
early_stop_patience = 1
batch_size = 4

[transfer]
n_repeats = 1

[explain]
stream = "flow"
max_clips = 2

[synth]
domain_id = "TINY"
subject_prefix = "t"
n_subjects = 3
videos_per_subject = 2
frames_per_video = 20
frame_hw = [32, 32]
clip_length = 10
burst_fraction = 1.0
contrast = 40.0
noise_std = 4.0
brightness = 120.0
tint = [0.0, 0.0, 0.0]
subject_jitter = 15.0
fps = 2.0
seed = 1

[synth.signal]
patch_size = 10
period = 4.0
"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn report_on_expert_comparison_fixture() {
    let out = ok(&["report", FIXTURE]);
    assert!(out.contains("macro F1 76.0"), "{out}");
    assert!(out.contains("tp 10 fn 3 fp 3 tn 9"), "{out}");
}

#[test]
fn unknown_config_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let msg = err(&["synth", "--config", &s(&cfg), "--kind", "dense", "--out", &s(&dir.path().join("o"))]);
    assert!(msg.contains("unknown field `learning_rate`"), "{msg}");
    assert!(!dir.path().join("o").exists());
}

#[test]
fn missing_inputs_give_actionable_messages() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(&dir.path().join("o"));
    let msg = err(&["train-cv", "--manifest", &s(&dir.path().join("none.csv")), "--out", &out]);
    assert!(msg.contains("synth") && msg.contains("prepare-frames"), "{msg}");
    let msg = err(&["train-cv", "--out", &out]);
    assert!(msg.contains("--manifest"), "{msg}");
    let msg = err(&["transfer", "--source", &s(dir.path()), "--target", "x.csv", "--out", &out]);
    assert!(msg.contains("train-full"), "{msg}");

    // A dataset without flow images points at compute-flow.
    let data = dir.path().join("data");
    ok(&["synth", "--config", &s(&tiny_config(dir.path())), "--out", &s(&data)]);
    let msg = err(&["train-cv", "--config", &s(&dir.path().join("tiny.toml")), "--manifest", &s(&data.join("manifest.csv")), "--out", &out]);
    assert!(msg.contains("compute-flow"), "{msg}");
    let msg = err(&["train-full", "--config", &s(&dir.path().join("tiny.toml")), "--manifest", &s(&data.join("manifest.csv")), "--out", &out]);
    assert!(msg.contains("compute-flow"), "{msg}");
}

#[test]
fn prepare_frames_subsamples_and_resizes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("synth");
    // Synthetic frames at 2 fps serve as a 4 fps source recording.
    ok(&["synth", "--config", &s(&tiny_config(dir.path())), "--out", &s(&data)]);
    let listing = dir.path().join("listing.csv");
    std::fs::write(
        &listing,
        "video_id,subject_id,domain_id,phase,raw_score,source_dir,source_fps\n\
         a,s1,REAL,post_induction,4,synth/tiny_t00_v00,4\n\
         b,s1,REAL,baseline,0,synth/tiny_t00_v01,4\n",
    )
    .unwrap();
    let cfg = dir.path().join("prep.toml");
    std::fs::write(&cfg, "[data]\nframe_hw = [16, 24]\n").unwrap();
    let out = dir.path().join("frames");
    ok(&["prepare-frames", "--config", &s(&cfg), "--listing", &s(&listing), "--out", &s(&out)]);
    let manifest = std::fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert!(manifest.contains("a,s1,REAL,post_induction,4,a,10,2"), "{manifest}");
    assert!(manifest.contains("b,s1,REAL,baseline,0,b,10,2"), "{manifest}");
    let img = image::open(out.join("a/000009.png")).unwrap();
    assert_eq!((img.width(), img.height()), (24, 16));
    assert!(!out.join("a/000010.png").exists());
    assert!(out.join("run.json").is_file() && out.join("config.toml").is_file());
}

#[test]
fn rater_analysis_writes_threshold_table() {
    let dir = tempfile::tempdir().unwrap();
    let ratings = dir.path().join("ratings.csv");
    let labels = dir.path().join("labels.csv");
    std::fs::write(&ratings, "rater_id,clip_id,rating\nr1,c1,0\nr1,c2,3\nr2,c1,1\nr2,c2,0\n").unwrap();
    std::fs::write(&labels, "clip_id,label\nc1,0\nc2,1\n").unwrap();
    let out = dir.path().join("raters");
    let table = ok(&["rater-analysis", "--ratings", &s(&ratings), "--labels", &s(&labels), "--thresholds", "0,1", "--out", &s(&out)]);
    assert!(table.starts_with("Threshold"), "{table}");
    let rows: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("thresholds.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    // Threshold 0: r1 gets both clips right, r2 neither.
    assert_eq!(rows[0]["total"]["mean"].as_f64().unwrap(), 50.0);
    assert!(ok(&["report", &s(&out)]).contains("Threshold"));
}

#[test]
fn pipeline_from_synth_to_explain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = s(&tiny_config(dir.path()));
    let p = |x: &str| s(&dir.path().join(x));
    ok(&["synth", "--config", &cfg, "--out", &p("dense")]);
    ok(&["compute-flow", "--config", &cfg, "--manifest", &p("dense/manifest.csv"), "--out", &p("flow_run")]);
    ok(&["synth", "--kind", "sparse", "--seed", "2", "--with-flow", "--out", &p("sparse")]);

    let msg = err(&["train-full", "--config", &cfg, "--manifest", &p("dense/manifest.csv"), "--out", &p("full")]);
    assert!(msg.contains("--epochs"), "{msg}");
    ok(&["train-full", "--config", &cfg, "--manifest", &p("dense/manifest.csv"), "--epochs", "1", "--out", &p("full")]);
    assert!(dir.path().join("full/checkpoint.bin").is_file());

    let msg = err(&["transfer", "--config", &cfg, "--source", &p("full"), "--target", &p("dense/manifest.csv"), "--out", &p("same")]);
    assert!(msg.contains("same domain"), "{msg}");

    let table = ok(&["transfer", "--config", &cfg, "--source", &p("full"), "--target", &p("sparse/manifest.csv"), "--out", &p("zs")]);
    assert!(table.contains("TINY -> SYNTH_SPARSE"), "{table}");
    let result: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("zs/transfer_result.json")).unwrap()).unwrap();
    assert_eq!(result["mode"], "zero_shot");
    assert_eq!(result["per_subject"].as_object().unwrap().len(), 7);

    let table = ok(&["mil-eval", "--config", &cfg, "--predictions", &p("zs/predictions.csv"), "--manifest", &p("sparse/manifest.csv"), "--out", &p("mil")]);
    assert!(table.contains("top 5%") && table.contains("top 1%"), "{table}");

    ok(&["finetune", "--config", &cfg, "--source", &p("full/checkpoint.bin"), "--target", &p("sparse/manifest.csv"), "--out", &p("ft")]);
    let result: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("ft/transfer_result.json")).unwrap()).unwrap();
    assert_eq!(result["mode"], "finetune");
    assert!(dir.path().join("ft/repeat_0/s00/history.csv").is_file());

    ok(&[
        "explain",
        "--config",
        &cfg,
        "--checkpoint",
        &p("full"),
        "--manifest",
        &p("dense/manifest.csv"),
        "--clip",
        "tiny_t00_v00:10",
        "--out",
        &p("cam"),
    ]);
    let clip_dir = dir.path().join("cam/overlays/tiny_t00_v00_000010");
    for i in 0..10 {
        assert!(clip_dir.join(format!("frame_{i}.png")).is_file());
    }
    assert!(clip_dir.join("clip.gif").is_file());
    let sal: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("cam/saliency.json")).unwrap()).unwrap();
    assert_eq!(sal[0]["max_per_step"].as_array().unwrap().len(), 10);
    assert!(sal[0]["in_mask_mean"].is_number());
    let msg = err(&["explain", "--config", &cfg, "--checkpoint", &p("full"), "--manifest", &p("dense/manifest.csv"), "--clip", "tiny_t00_v00:15", "--out", &p("cam2")]);
    assert!(msg.contains("runs past"), "{msg}");

    let report = ok(&["report", &s(dir.path())]);
    assert!(report.contains("zero-shot") && report.contains("finetune") && report.contains("top 5%"), "{report}");
}
