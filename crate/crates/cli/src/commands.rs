use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use paintransfer::data::{assemble_batch, compute_normalization, ClipSource};
use paintransfer::explain::{grad_cam, render_overlays};
use paintransfer::flow::precompute_flow_stream;
use paintransfer::frames::{self, prepare_video_frames, read_source_listing};
use paintransfer::manifest::{load_manifest, resolve_frame_dir, save_manifest};
use paintransfer::metrics::{rater_threshold_analysis, read_clip_labels, read_ratings, RaterMatrix, ThresholdRow};
use paintransfer::mil::{evaluate_video_level, read_predictions, write_predictions, VideoLevelRow};
use paintransfer::model::{load_checkpoint, save_checkpoint, Model, ModelConfig, Regime};
use paintransfer::report;
use paintransfer::sampling::{write_clips, Stream};
use paintransfer::synth::{generate_dataset, SynthConfig, MANIFEST_FILE};
use paintransfer::training::{
    mean_best_epoch, predict_clips, run_cv, scaled_epochs, train_full_dataset, write_history, CvOutcome, ExperimentResult, ModelInit,
};
use paintransfer::transfer::{finetune_head, model_fingerprint, target_clips, zero_shot_transfer, TransferMode, TransferResult};
use paintransfer::types::{exclude_unresponsive_subjects, BinaryLabel, Clip, DatasetManifest};

use crate::config::Config;
use crate::run::{hash_dataset, hash_file, hash_tree, InputRecord, RunDir};
use crate::DomainKind;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CV_SUMMARY_FILE: &str = "cv_summary.json";

fn load_config(path: Option<PathBuf>) -> Result<Config> {
    match path {
        Some(p) => Config::load(&p),
        None => Ok(Config::default()),
    }
}

fn input(role: impl Into<String>, hash: String) -> InputRecord {
    InputRecord { role: role.into(), hash }
}

struct Dataset {
    manifest_path: PathBuf,
    manifest: DatasetManifest,
    root: PathBuf,
}

/// The manifest named on the command line, or else the config's. Frame
/// directories resolve against `data.root` for the config's manifest and
/// against the manifest's own directory otherwise.
fn load_dataset(cfg: &Config, manifest: Option<&Path>) -> Result<Dataset> {
    let (path, root) = match manifest {
        Some(p) => (p.to_path_buf(), None),
        None => (
            cfg.data
                .manifest
                .clone()
                .context("no manifest given: pass --manifest or set data.manifest in the config")?,
            cfg.data.root.clone(),
        ),
    };
    ensure!(
        path.is_file(),
        "manifest {} does not exist; create one with `synth` or `prepare-frames`",
        path.display()
    );
    let mut m = load_manifest(&path)?;
    if cfg.data.exclude_unresponsive {
        m = exclude_unresponsive_subjects(&m);
    }
    let root = root.unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
    Ok(Dataset {
        manifest_path: path,
        manifest: m,
        root,
    })
}

fn require_flow(ds: &Dataset, cfg: &Config) -> Result<()> {
    if !matches!(cfg.model, ModelConfig::Clstm2(_)) {
        return Ok(());
    }
    for r in ds.manifest.records() {
        let p = frames::flow_path(&resolve_frame_dir(&ds.root, r), 0);
        ensure!(
            p.is_file(),
            "flow images for video {} are missing ({}); run `compute-flow` on this manifest first",
            r.video_id,
            p.display()
        );
    }
    Ok(())
}

fn dataset_input(role: &str, ds: &Dataset, include_flow: bool) -> Result<InputRecord> {
    Ok(input(role, hash_dataset(&ds.manifest_path, &ds.manifest, &ds.root, include_flow)?))
}

fn resolve_checkpoint(p: &Path) -> Result<PathBuf> {
    let path = if p.is_dir() { p.join(CHECKPOINT_FILE) } else { p.to_path_buf() };
    ensure!(path.is_file(), "no checkpoint at {}; produce one with `train-full`", path.display());
    Ok(path)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("cannot open {}", path.display()))
}

pub fn prepare_frames(config: Option<PathBuf>, listing: Option<PathBuf>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let listing = listing
        .or_else(|| cfg.data.source_listing.clone())
        .context("no source listing: pass --listing or set data.source_listing")?;
    let mut videos = read_source_listing(open(&listing)?, &listing.display().to_string())?;
    let base = listing.parent().unwrap_or(Path::new("."));
    let mut inputs = vec![input("listing", hash_file(&listing)?)];
    for v in &mut videos {
        if v.source_dir.is_relative() {
            v.source_dir = base.join(&v.source_dir);
        }
        inputs.push(input(format!("source {}", v.video_id), hash_tree(&v.source_dir)?));
    }
    let _run = RunDir::create(out, "prepare-frames", &cfg, &inputs)?;
    let records = videos
        .iter()
        .map(|v| {
            let r = prepare_video_frames(v, out, cfg.data.fps, cfg.data.frame_hw)?;
            log::info!("{}: {} frames", r.video_id, r.n_frames);
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(records)?;
    save_manifest(&manifest, out.join(MANIFEST_FILE))?;
    log::info!("wrote {} videos to {}", manifest.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct FlowSummary {
    n_images: usize,
    n_videos: usize,
}

pub fn compute_flow(config: Option<PathBuf>, manifest: Option<PathBuf>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = load_dataset(&cfg, manifest.as_deref())?;
    let run = RunDir::create(out, "compute-flow", &cfg, &[dataset_input("dataset", &ds, false)?])?;
    let n = precompute_flow_stream(&ds.manifest, &ds.root, &cfg.flow.horn_schunck, cfg.flow.encoding()?)?;
    run.write_json(
        "flow_summary.json",
        &FlowSummary {
            n_images: n,
            n_videos: ds.manifest.len(),
        },
    )?;
    log::info!("wrote {n} flow images");
    Ok(())
}

pub fn synth(config: Option<PathBuf>, kind: Option<DomainKind>, seed: Option<u64>, with_flow: bool, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    let mut sc = match (&cfg.synth, kind) {
        (Some(s), None) => s.clone(),
        (Some(_), Some(_)) => bail!("give either --kind or a [synth] section, not both"),
        (None, Some(DomainKind::Dense)) => SynthConfig::dense(cfg.train.seed),
        (None, Some(DomainKind::Sparse)) => SynthConfig::sparse(cfg.train.seed),
        (None, None) => bail!("pass --kind dense|sparse or add a [synth] section to the config"),
    };
    if let Some(s) = seed {
        sc.seed = s;
    }
    cfg.synth = Some(sc.clone());
    let _run = RunDir::create(out, "synth", &cfg, &[])?;
    let manifest = generate_dataset(&sc, out)?;
    log::info!("generated {} videos of {} subjects", manifest.len(), manifest.subjects().len());
    if with_flow {
        let n = precompute_flow_stream(&manifest, out, &cfg.flow.horn_schunck, cfg.flow.encoding()?)?;
        log::info!("wrote {n} flow images");
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CvSummary {
    domain_id: String,
    n_subjects: usize,
    /// Training subjects per fold (all but the test and validation subject).
    n_train_subjects: usize,
    mean_best_epoch: usize,
    n_repeats: usize,
}

#[derive(Serialize)]
struct FoldFile<'a> {
    record: &'a paintransfer::training::FoldRecord,
    fold: &'a paintransfer::training::FoldSpec,
}

fn write_cv_outputs(run: &RunDir, manifest: &DatasetManifest, cv: &CvOutcome, n_repeats: usize) -> Result<()> {
    run.write_json("result.json", &cv.result)?;
    let mut by_repeat: BTreeMap<usize, Vec<paintransfer::types::ClipPrediction>> = BTreeMap::new();
    for f in &cv.folds {
        let dir = format!("repeat_{}/{}", f.record.repeat, f.record.test_subject);
        run.write_json(
            &format!("{dir}/fold.json"),
            &FoldFile {
                record: &f.record,
                fold: &f.fold,
            },
        )?;
        write_history(&f.history, run.create_file(&format!("{dir}/history.csv"))?)?;
        write_clips(&f.train_clips, run.create_file(&format!("{dir}/train_clips.csv"))?)?;
        write_clips(&f.val_clips, run.create_file(&format!("{dir}/val_clips.csv"))?)?;
        run.write_json(&format!("{dir}/normalization.json"), &f.normalization)?;
        write_predictions(&f.predictions, run.create_file(&format!("{dir}/predictions.csv"))?)?;
        by_repeat.entry(f.record.repeat).or_default().extend(f.predictions.iter().cloned());
    }
    for (r, preds) in &by_repeat {
        write_predictions(preds, run.create_file(&format!("repeat_{r}/predictions.csv"))?)?;
    }
    let n_train = cv.folds.first().map(|f| f.fold.train_subjects.len()).unwrap_or(0);
    run.write_json(
        CV_SUMMARY_FILE,
        &CvSummary {
            domain_id: manifest.domain_id().to_string(),
            n_subjects: manifest.subjects().len(),
            n_train_subjects: n_train,
            mean_best_epoch: mean_best_epoch(&cv.result.folds),
            n_repeats,
        },
    )?;
    Ok(())
}

fn print_and_save(run: &RunDir, table: &str) -> Result<()> {
    print!("{table}");
    run.write_text("table.txt", table)?;
    Ok(())
}

pub fn train_cv(config: Option<PathBuf>, manifest: Option<PathBuf>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = load_dataset(&cfg, manifest.as_deref())?;
    require_flow(&ds, &cfg)?;
    let run = RunDir::create(out, "train-cv", &cfg, &[dataset_input("dataset", &ds, true)?])?;
    let source = ClipSource::new(&ds.manifest, &ds.root, cfg.flow_channels())?;
    let cv = run_cv(
        &ds.manifest,
        &source,
        ModelInit::Fresh(&cfg.model),
        &cfg.train_config(),
        Regime::Full,
        cfg.train.n_repeats,
    )?;
    write_cv_outputs(&run, &ds.manifest, &cv, cfg.train.n_repeats)?;
    print_and_save(&run, &report::render_experiment_table(&[(ds.manifest.domain_id().to_string(), cv.result.clone())]))
}

#[derive(Serialize)]
struct FullTraining {
    domain_id: String,
    epochs: usize,
    epochs_from: String,
    n_parameters: usize,
}

pub fn train_full(config: Option<PathBuf>, manifest: Option<PathBuf>, epochs: Option<usize>, cv_run: Option<PathBuf>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = load_dataset(&cfg, manifest.as_deref())?;
    require_flow(&ds, &cfg)?;
    let mut inputs = vec![dataset_input("dataset", &ds, true)?];
    let (epochs, epochs_from) = match (epochs, &cv_run, cfg.train.full_epochs) {
        (Some(e), _, _) => (e, "command line".to_string()),
        (None, Some(dir), _) => {
            let path = dir.join(CV_SUMMARY_FILE);
            inputs.push(input("cv_summary", hash_file(&path)?));
            let s: CvSummary = serde_json::from_reader(open(&path)?).with_context(|| format!("bad {}", path.display()))?;
            let e = scaled_epochs(s.mean_best_epoch, s.n_train_subjects, ds.manifest.subjects().len())?;
            (
                e,
                format!(
                    "best epoch {} x {} / {} training subjects",
                    s.mean_best_epoch,
                    ds.manifest.subjects().len(),
                    s.n_train_subjects
                ),
            )
        }
        (None, None, Some(e)) => (e, "train.full_epochs".to_string()),
        (None, None, None) => bail!("pass --epochs, --cv-run or set train.full_epochs"),
    };
    let run = RunDir::create(out, "train-full", &cfg, &inputs)?;
    let source = ClipSource::new(&ds.manifest, &ds.root, cfg.flow_channels())?;
    log::info!("training on all {} subjects for {epochs} epochs ({epochs_from})", ds.manifest.subjects().len());
    let ck = train_full_dataset(&ds.manifest, &source, ModelInit::Fresh(&cfg.model), epochs, &cfg.train_config(), Regime::Full)?;
    save_checkpoint(&ck, run.file(CHECKPOINT_FILE))?;
    run.write_json(
        "full_training.json",
        &FullTraining {
            domain_id: ds.manifest.domain_id().to_string(),
            epochs,
            epochs_from,
            n_parameters: ck.model.count_parameters(),
        },
    )?;
    Ok(())
}

pub fn transfer(config: Option<PathBuf>, source: &Path, target: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let ck_path = resolve_checkpoint(source)?;
    let ck = load_checkpoint(&ck_path)?;
    let ds = load_dataset(&cfg, Some(target))?;
    require_flow(&ds, &cfg)?;
    let run = RunDir::create(
        out,
        "transfer",
        &cfg,
        &[input("source_checkpoint", hash_file(&ck_path)?), dataset_input("target", &ds, true)?],
    )?;
    let clips = ClipSource::new(&ds.manifest, &ds.root, cfg.flow_channels())?;
    let before = model_fingerprint(&ck.model);
    let zs = zero_shot_transfer(&ck, &ds.manifest, &clips, &cfg.zero_shot_config())?;
    ensure!(model_fingerprint(&ck.model) == before, "zero-shot evaluation modified the model");
    let result = TransferResult::new(&ck, &ds.manifest, TransferMode::ZeroShot, &zs.macro_f1);
    result.write(run.file("transfer_result.json"))?;
    run.write_json("per_subject.json", &zs.per_subject)?;
    run.write_json("normalization.json", &zs.normalization)?;
    write_predictions(&zs.predictions, run.create_file("predictions.csv")?)?;
    print_and_save(&run, &report::render_transfer_table(&[result]))
}

pub fn finetune(config: Option<PathBuf>, source: &Path, target: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let ck_path = resolve_checkpoint(source)?;
    let ck = load_checkpoint(&ck_path)?;
    let ds = load_dataset(&cfg, Some(target))?;
    require_flow(&ds, &cfg)?;
    let run = RunDir::create(
        out,
        "finetune",
        &cfg,
        &[input("source_checkpoint", hash_file(&ck_path)?), dataset_input("target", &ds, true)?],
    )?;
    let clips = ClipSource::new(&ds.manifest, &ds.root, cfg.flow_channels())?;
    let cv = finetune_head(&ck, &ds.manifest, &clips, &cfg.train_config(), cfg.transfer.n_repeats)?;
    write_cv_outputs(&run, &ds.manifest, &cv, cfg.transfer.n_repeats)?;
    let result = TransferResult::new(&ck, &ds.manifest, TransferMode::Finetune, &cv.result.macro_f1);
    result.write(run.file("transfer_result.json"))?;
    print_and_save(&run, &report::render_transfer_table(&[result]))
}

pub fn mil_eval(config: Option<PathBuf>, predictions: &Path, manifest: Option<PathBuf>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = load_dataset(&cfg, manifest.as_deref())?;
    let run = RunDir::create(
        out,
        "mil-eval",
        &cfg,
        &[input("predictions", hash_file(predictions)?), input("manifest", hash_file(&ds.manifest_path)?)],
    )?;
    let preds = read_predictions(open(predictions)?, &predictions.display().to_string(), cfg.data.clip_length)?;
    let labels = ds.manifest.labels()?;
    let ks: Vec<Option<f64>> = std::iter::once(None).chain(cfg.mil.k_fractions.iter().map(|&k| Some(k))).collect();
    let rows: Vec<VideoLevelRow> = evaluate_video_level(&preds, &labels, &ks)?;
    run.write_json("video_level.json", &rows)?;
    print_and_save(&run, &report::render_video_level_table(&rows))
}

pub fn rater_analysis(config: Option<PathBuf>, ratings: &Path, labels: &Path, thresholds: &[u8], out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let run = RunDir::create(
        out,
        "rater-analysis",
        &cfg,
        &[input("ratings", hash_file(ratings)?), input("labels", hash_file(labels)?)],
    )?;
    let rows = read_ratings(open(ratings)?, &ratings.display().to_string())?;
    let labels = read_clip_labels(open(labels)?, &labels.display().to_string())?;
    let m = RaterMatrix::from_long(&rows, &labels)?;
    let table: Vec<ThresholdRow> = thresholds.iter().map(|&t| rater_threshold_analysis(&m, t)).collect();
    run.write_json("thresholds.json", &table)?;
    print_and_save(&run, &report::render_threshold_table(&table))
}

#[derive(Serialize)]
struct SaliencySummary {
    clip_id: String,
    confidence: Option<f64>,
    /// Per timestep maximum of the map at layer resolution.
    max_per_step: Vec<f64>,
    /// Mean saliency inside and outside the ground-truth mask, when the
    /// dataset has masks.
    in_mask_mean: Option<f64>,
    out_mask_mean: Option<f64>,
    files: Vec<String>,
}

fn parse_clip(spec: &str, manifest: &DatasetManifest, len: usize) -> Result<Clip> {
    let (vid, start) = spec.rsplit_once(':').with_context(|| format!("clip {spec:?} is not <video_id>:<start_frame>"))?;
    let rec = manifest.get(vid).with_context(|| format!("video {vid} is not in the manifest"))?;
    let start: usize = start.parse().with_context(|| format!("bad start frame in {spec:?}"))?;
    ensure!(start + len <= rec.n_frames, "clip {spec} runs past the {} frames of {vid}", rec.n_frames);
    Ok(Clip {
        video_id: vid.to_string(),
        start_frame: start,
        length: len,
        label: rec.label()?,
        is_resampled: false,
    })
}

fn mask_means(ds: &Dataset, clip: &Clip, maps: &[paintransfer::explain::SaliencyMap]) -> Result<Option<(f64, f64)>> {
    let rec = ds.manifest.get(&clip.video_id).expect("clip video in manifest");
    let dir = resolve_frame_dir(&ds.root, rec);
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (t, m) in maps.iter().enumerate() {
        let p = frames::mask_path(&dir, clip.start_frame + t);
        if !p.is_file() {
            return Ok(None);
        }
        let (_, _, mask) = frames::read_gray(&p)?;
        ensure!(mask.len() == m.data.len(), "mask {} does not match the map size", p.display());
        for (v, &k) in m.data.iter().zip(&mask) {
            if k > 0 {
                si += v;
                ni += 1;
            } else {
                so += v;
                no += 1;
            }
        }
    }
    Ok((ni > 0 && no > 0).then(|| (si / ni as f64, so / no as f64)))
}

pub fn explain(config: Option<PathBuf>, checkpoint: &Path, manifest: Option<PathBuf>, clip_specs: &[String], out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let ck_path = resolve_checkpoint(checkpoint)?;
    let ck = load_checkpoint(&ck_path)?;
    ensure!(
        matches!(ck.model, Model::Clstm2(_)),
        "Grad-CAM needs the recurrent two-stream model; this checkpoint holds a backbone-head model"
    );
    let ds = load_dataset(&cfg, manifest.as_deref())?;
    require_flow(&ds, &cfg)?;
    let run = RunDir::create(
        out,
        "explain",
        &cfg,
        &[input("checkpoint", hash_file(&ck_path)?), dataset_input("dataset", &ds, true)?],
    )?;
    let source = ClipSource::new(&ds.manifest, &ds.root, cfg.flow_channels())?;
    let len = cfg.data.clip_length;
    let all: Vec<Clip> = target_clips(&ds.manifest, len, cfg.data.clip_stride)?.into_values().flatten().collect();
    let norm = match &ck.normalization {
        Some(n) => n.clone(),
        None => compute_normalization(&source, &all)?,
    };
    let class = cfg.explain.class;
    let chosen: Vec<(Clip, Option<f64>)> = if clip_specs.is_empty() {
        let preds = predict_clips(&ck.model, &source, &ds.manifest, &all, &norm, cfg.train.eval_batch_size)?;
        let target = BinaryLabel::from_index(class)?;
        let mut hits: Vec<_> = preds.into_iter().filter(|p| p.clip.label == target && p.predicted == target).collect();
        hits.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.clip.clip_id().cmp(&b.clip.clip_id())));
        hits.into_iter().take(cfg.explain.max_clips).map(|p| (p.clip, Some(p.confidence))).collect()
    } else {
        clip_specs
            .iter()
            .map(|s| Ok((parse_clip(s, &ds.manifest, len)?, None)))
            .collect::<Result<_>>()?
    };
    ensure!(!chosen.is_empty(), "no clips to explain");
    let mut summaries = Vec::new();
    for (clip, confidence) in chosen {
        let input = assemble_batch(&source, &[&clip], &norm, &[false])?;
        let cam = grad_cam(&ck.model, &input, cfg.explain.stream, class)?;
        let maps = &cam.upsampled[0];
        let frames_of = |stream: Stream| -> Result<Vec<frames::RgbFrame>> {
            (clip.start_frame..clip.end_frame())
                .map(|i| Ok((*source.frame(&clip.video_id, i, stream)?).clone()))
                .collect()
        };
        let files = render_overlays(
            &clip.clip_id(),
            &frames_of(Stream::Rgb)?,
            &frames_of(Stream::Flow)?,
            maps,
            &run.file("overlays"),
            &cfg.explain.style,
        )?;
        let means = mask_means(&ds, &clip, maps)?;
        summaries.push(SaliencySummary {
            clip_id: clip.clip_id(),
            confidence,
            max_per_step: cam.raw[0].iter().map(|m| m.max()).collect(),
            in_mask_mean: means.map(|m| m.0),
            out_mask_mean: means.map(|m| m.1),
            files: files
                .iter()
                .map(|f| f.strip_prefix(&run.path).unwrap_or(f).to_string_lossy().into_owned())
                .collect(),
        });
        log::info!("{}: {} overlays", clip.clip_id(), files.len());
    }
    run.write_json("saliency.json", &summaries)?;
    Ok(())
}

fn report_dir(dir: &Path, n_raters: usize, out: &mut String) -> Result<bool> {
    let mut found = false;
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let read_json = |f: &str| -> Option<Result<String>> {
        let p = dir.join(f);
        p.is_file().then(|| std::fs::read_to_string(&p).with_context(|| format!("cannot read {}", p.display())))
    };
    if let Some(text) = read_json("transfer_result.json") {
        let r: TransferResult = serde_json::from_str(&text?)?;
        out.push_str(&format!("== {} ==\n{}", dir.display(), report::render_transfer_table(&[r])));
        found = true;
    } else if let Some(text) = read_json("result.json") {
        let r: ExperimentResult = serde_json::from_str(&text?)?;
        out.push_str(&format!("== {} ==\n{}", dir.display(), report::render_experiment_table(&[(name, r)])));
        found = true;
    }
    if let Some(text) = read_json("video_level.json") {
        let rows: Vec<VideoLevelRow> = serde_json::from_str(&text?)?;
        out.push_str(&format!("== {} ==\n{}", dir.display(), report::render_video_level_table(&rows)));
        found = true;
    }
    if let Some(text) = read_json("thresholds.json") {
        let rows: Vec<ThresholdRow> = serde_json::from_str(&text?)?;
        out.push_str(&format!("== {} ==\n{}", dir.display(), report::render_threshold_table(&rows)));
        found = true;
    }
    if !found {
        let mut children: Vec<PathBuf> = std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        children.sort();
        for c in children {
            if c.is_dir() {
                found |= report_dir(&c, n_raters, out)?;
            } else if c.extension().is_some_and(|e| e == "csv") && is_clip_comparison(&c) {
                report_file(&c, n_raters, out)?;
                found = true;
            }
        }
    }
    Ok(found)
}

fn is_clip_comparison(path: &Path) -> bool {
    std::fs::read_to_string(path)
        .map(|t| t.lines().next().is_some_and(|h| h.trim() == "clip,label,avg_rating,n_correct,pred,conf"))
        .unwrap_or(false)
}

fn report_file(path: &Path, n_raters: usize, out: &mut String) -> Result<()> {
    let rows = report::read_clip_comparison(open(path)?, &path.display().to_string())?;
    let s = report::summarize_clip_comparison(&rows, n_raters)?;
    out.push_str(&format!("== {} ==\n{}", path.display(), report::render_clip_comparison(&s, n_raters)));
    Ok(())
}

pub fn report(paths: &[PathBuf], n_raters: usize) -> Result<()> {
    ensure!(!paths.is_empty(), "give at least one run directory or CSV file");
    let mut out = String::new();
    for p in paths {
        if p.is_file() {
            report_file(p, n_raters, &mut out)?;
        } else if p.is_dir() {
            ensure!(report_dir(p, n_raters, &mut out)?, "no result files under {}", p.display());
        } else {
            bail!("{} does not exist", p.display());
        }
    }
    print!("{out}");
    Ok(())
}
