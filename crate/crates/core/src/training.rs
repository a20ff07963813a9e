//! Supervised training, leave-one-subject-out cross-validation and
//! full-dataset training.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{assemble_batch, compute_normalization, ClipSource, NormalizationStats};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_runs, confusion, Aggregate, F1Scores, RunEntry};
use crate::model::{Checkpoint, Model, ModelConfig, Provenance, Regime};
use crate::optim::{Adam, OptimizerSpec};
use crate::sampling::extract_clips;
use crate::types::{BinaryLabel, Clip, ClipPrediction, DatasetManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub flip_prob: f64,
    pub seed: u64,
    pub optimizer: OptimizerSpec,
    pub clip_length: usize,
    pub clip_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 200,
            early_stop_patience: 50,
            batch_size: 2,
            eval_batch_size: 8,
            flip_prob: 0.5,
            seed: 0,
            optimizer: OptimizerSpec::default(),
            clip_length: 10,
            clip_stride: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.early_stop_patience > self.max_epochs {
            return Err(Error::Config(format!(
                "early_stop_patience {} exceeds max_epochs {}",
                self.early_stop_patience, self.max_epochs
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.clip_length == 0 || self.clip_stride == 0 {
            return Err(Error::Config("batch sizes and clip geometry must be positive".into()));
        }
        self.optimizer.validate()
    }
}

/// SplitMix64 mixing of a base seed with a path of integers.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub test_subject: String,
    pub val_subject: String,
    pub train_subjects: BTreeSet<String>,
}

/// One fold per subject. Subjects are shuffled into a circle with `seed`;
/// each test subject's validation subject is its successor on that circle.
/// Folds are listed in sorted test-subject order.
pub fn make_loso_folds(subjects: &BTreeSet<String>, seed: u64) -> Result<Vec<FoldSpec>> {
    if subjects.len() < 3 {
        return Err(Error::Validation(format!(
            "leave-one-subject-out needs at least 3 subjects, got {}",
            subjects.len()
        )));
    }
    let mut circle: Vec<String> = subjects.iter().cloned().collect();
    circle.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = circle.len();
    let mut folds: Vec<FoldSpec> = (0..n)
        .map(|i| {
            let test = circle[i].clone();
            let val = circle[(i + 1) % n].clone();
            let train = subjects.iter().filter(|s| **s != test && **s != val).cloned().collect();
            FoldSpec {
                test_subject: test,
                val_subject: val,
                train_subjects: train,
            }
        })
        .collect();
    folds.sort_by(|a, b| a.test_subject.cmp(&b.test_subject));
    Ok(folds)
}

/// `floor(best_epoch * n_full / n_cv)`.
pub fn scaled_epochs(best_epoch_cv: usize, n_train_cv: usize, n_train_full: usize) -> Result<usize> {
    if best_epoch_cv == 0 || n_train_cv == 0 || n_train_full == 0 {
        return Err(Error::Validation("scaled_epochs needs positive counts".into()));
    }
    Ok(best_epoch_cv * n_train_full / n_train_cv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    pub val_accuracy: f64,
}

pub fn write_history<W: Write>(history: &[EpochRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "train_loss", "val_f1", "val_accuracy"])
        .map_err(|e| Error::Validation(e.to_string()))?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            h.train_loss.to_string(),
            h.val_f1.to_string(),
            h.val_accuracy.to_string(),
        ])
        .map_err(|e| Error::Validation(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Validation(e.to_string()))
}

pub struct TrainOutcome {
    /// State at the best validation epoch, or the final state without validation.
    pub model: Model,
    /// 0 when no epoch improved on the initial state or no epochs ran.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

fn subject_of(manifest: &DatasetManifest, video_id: &str) -> Result<String> {
    manifest
        .get(video_id)
        .map(|r| r.subject_id.clone())
        .ok_or_else(|| Error::Validation(format!("video {video_id} not in manifest")))
}

/// Inference over `clips` in batches of `batch_size`, in clip order.
pub fn predict_clips(
    model: &Model,
    source: &ClipSource,
    manifest: &DatasetManifest,
    clips: &[Clip],
    norm: &NormalizationStats,
    batch_size: usize,
) -> Result<Vec<ClipPrediction>> {
    let pain = BinaryLabel::Pain.index();
    let n = model.n_classes();
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(batch_size.max(1)) {
        let refs: Vec<&Clip> = chunk.iter().collect();
        let input = assemble_batch(source, &refs, norm, &vec![false; chunk.len()])?;
        let probs = model.predict_proba(&input)?;
        for (i, clip) in chunk.iter().enumerate() {
            let p = probs[i * n + pain].clamp(0.0, 1.0);
            out.push(ClipPrediction::from_prob_pain(clip.clone(), subject_of(manifest, &clip.video_id)?, p)?);
        }
    }
    Ok(out)
}

pub fn score_predictions(preds: &[ClipPrediction]) -> Result<(F1Scores, f64)> {
    let p: Vec<BinaryLabel> = preds.iter().map(|c| c.predicted).collect();
    let l: Vec<BinaryLabel> = preds.iter().map(|c| c.clip.label).collect();
    let cm = confusion(&p, &l)?;
    if cm.total() == 0 {
        return Err(Error::Validation("no predictions to score".into()));
    }
    Ok((cm.f1(), cm.accuracy()))
}

/// Everything a training run needs besides the model.
pub struct TrainData<'a> {
    pub source: &'a ClipSource,
    pub manifest: &'a DatasetManifest,
    pub norm: &'a NormalizationStats,
}

/// Trains on `train_clips`. With validation clips, keeps the state of the
/// epoch with the best validation macro F1 (earliest on ties) and stops
/// after `early_stop_patience` epochs without improvement. Without
/// validation clips, runs exactly `max_epochs` epochs and returns the final
/// state.
pub fn train_supervised(
    mut model: Model,
    data: &TrainData<'_>,
    train_clips: &[Clip],
    val_clips: &[Clip],
    cfg: &TrainConfig,
    regime: Regime,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    for label in [BinaryLabel::NoPain, BinaryLabel::Pain] {
        if !train_clips.iter().any(|c| c.label == label) {
            return Err(Error::Validation(format!("training set has no clip of class {label}")));
        }
    }
    let head: Vec<std::ops::Range<usize>> = model.head_ids().iter().map(|&id| model.params().spec(id).range()).collect();
    let mut opt = Adam::new(cfg.optimizer.clone(), model.params().len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x7472_6169_6e]));
    let validate = !val_clips.is_empty();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_clips.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let clips: Vec<&Clip> = idx.iter().map(|&i| &train_clips[i]).collect();
            let flips: Vec<bool> = clips.iter().map(|_| rng.random::<f64>() < cfg.flip_prob).collect();
            let labels: Vec<usize> = clips.iter().map(|c| c.label.index()).collect();
            let input = assemble_batch(data.source, &clips, data.norm, &flips)?;
            let step = model.train_step(&input, &labels, regime)?;
            if regime == Regime::HeadOnly {
                let mut grads = step.grads.clone();
                for r in &head {
                    grads[r.clone()].fill(0.0);
                }
                if grads.iter().any(|g| *g != 0.0) {
                    return Err(Error::Validation("a frozen parameter received a gradient".into()));
                }
            }
            opt.step(model.params_mut().data_mut(), &step.grads);
            loss_sum += step.loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches.max(1) as f64;
        let (val_f1, val_accuracy) = if validate {
            let preds = predict_clips(&model, data.source, data.manifest, val_clips, data.norm, cfg.eval_batch_size)?;
            let (f1, acc) = score_predictions(&preds)?;
            (f1.macro_f1, acc)
        } else {
            (f64::NAN, f64::NAN)
        };
        log::info!("epoch {epoch}: train_loss {train_loss:.4} val_f1 {val_f1:.2}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_f1,
            val_accuracy,
        });
        if validate {
            if best.as_ref().is_none_or(|(f, _, _)| val_f1 > *f) {
                best = Some((val_f1, epoch, model.clone()));
            }
            let best_epoch = best.as_ref().map_or(0, |b| b.1);
            if epoch - best_epoch >= cfg.early_stop_patience {
                break;
            }
        }
    }
    Ok(match best {
        Some((_, best_epoch, m)) => TrainOutcome {
            model: m,
            best_epoch,
            history,
        },
        None => TrainOutcome {
            best_epoch: if validate { 0 } else { history.len() },
            model,
            history,
        },
    })
}

/// Starting point of each fold's model.
#[derive(Clone, Copy)]
pub enum ModelInit<'a> {
    Fresh(&'a ModelConfig),
    Pretrained(&'a Model),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub repeat: usize,
    pub test_subject: String,
    pub val_subject: String,
    pub best_epoch: usize,
    pub f1: F1Scores,
    pub accuracy: f64,
    pub n_train_clips: usize,
    pub n_val_clips: usize,
    pub n_test_clips: usize,
}

pub struct FoldOutcome {
    pub record: FoldRecord,
    pub fold: FoldSpec,
    pub history: Vec<EpochRecord>,
    pub normalization: NormalizationStats,
    pub predictions: Vec<ClipPrediction>,
    pub train_clips: Vec<Clip>,
    pub val_clips: Vec<Clip>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub macro_f1: Aggregate,
    pub accuracy: Aggregate,
    pub folds: Vec<FoldRecord>,
}

pub struct CvOutcome {
    pub result: ExperimentResult,
    pub folds: Vec<FoldOutcome>,
}

fn split_set(s: &str) -> BTreeSet<String> {
    [s.to_string()].into()
}

fn check_no_leak(manifest: &DatasetManifest, fold: &FoldSpec, clips: &[Clip]) -> Result<()> {
    for c in clips {
        if subject_of(manifest, &c.video_id)? == fold.test_subject {
            return Err(Error::Validation(format!(
                "clip {} of test subject {} leaked into training data",
                c.clip_id(),
                fold.test_subject
            )));
        }
    }
    Ok(())
}

fn run_fold(
    manifest: &DatasetManifest,
    source: &ClipSource,
    init: ModelInit<'_>,
    cfg: &TrainConfig,
    regime: Regime,
    repeat: usize,
    fold_index: usize,
    fold: &FoldSpec,
    repeat_seed: u64,
) -> Result<FoldOutcome> {
    let (len, stride) = (cfg.clip_length, cfg.clip_stride);
    let train = extract_clips(manifest, &fold.train_subjects, len, stride)?.clips;
    let val = extract_clips(manifest, &split_set(&fold.val_subject), len, stride)?.clips;
    let test = extract_clips(manifest, &split_set(&fold.test_subject), len, stride)?.clips;
    check_no_leak(manifest, fold, &train)?;
    check_no_leak(manifest, fold, &val)?;
    let norm = compute_normalization(source, &train)?;
    let fold_seed = derive_seed(repeat_seed, &[fold_index as u64]);
    let model = match init {
        ModelInit::Fresh(c) => Model::new(c, derive_seed(fold_seed, &[1]))?,
        ModelInit::Pretrained(m) => m.clone(),
    };
    let fold_cfg = TrainConfig {
        seed: derive_seed(fold_seed, &[2]),
        ..cfg.clone()
    };
    let data = TrainData {
        source,
        manifest,
        norm: &norm,
    };
    let outcome = train_supervised(model, &data, &train, &val, &fold_cfg, regime)?;
    let predictions = predict_clips(&outcome.model, source, manifest, &test, &norm, cfg.eval_batch_size)?;
    let (f1, accuracy) = score_predictions(&predictions)?;
    log::info!(
        "repeat {repeat} fold {}: test {} val {} best epoch {} macro F1 {:.1}",
        fold_index,
        fold.test_subject,
        fold.val_subject,
        outcome.best_epoch,
        f1.macro_f1
    );
    Ok(FoldOutcome {
        record: FoldRecord {
            repeat,
            test_subject: fold.test_subject.clone(),
            val_subject: fold.val_subject.clone(),
            best_epoch: outcome.best_epoch,
            f1,
            accuracy,
            n_train_clips: train.len(),
            n_val_clips: val.len(),
            n_test_clips: test.len(),
        },
        fold: fold.clone(),
        history: outcome.history,
        normalization: norm,
        predictions,
        train_clips: train,
        val_clips: val,
    })
}

/// Repeated leave-one-subject-out cross-validation. Repeat `r` uses seed
/// `derive_seed(cfg.seed, [r])` for its folds, initialisation and
/// augmentation. Folds run in parallel; results are in (repeat, fold) order.
pub fn run_cv(
    manifest: &DatasetManifest,
    source: &ClipSource,
    init: ModelInit<'_>,
    cfg: &TrainConfig,
    regime: Regime,
    n_repeats: usize,
) -> Result<CvOutcome> {
    cfg.validate()?;
    if n_repeats == 0 {
        return Err(Error::Config("n_repeats must be at least 1".into()));
    }
    let mut jobs = Vec::new();
    for repeat in 0..n_repeats {
        let repeat_seed = derive_seed(cfg.seed, &[repeat as u64]);
        for (i, fold) in make_loso_folds(manifest.subjects(), repeat_seed)?.into_iter().enumerate() {
            jobs.push((repeat, i, fold, repeat_seed));
        }
    }
    let folds: Vec<FoldOutcome> = jobs
        .par_iter()
        .map(|(repeat, i, fold, seed)| run_fold(manifest, source, init, cfg, regime, *repeat, *i, fold, *seed))
        .collect::<Result<_>>()?;
    let result = summarize_folds(folds.iter().map(|f| &f.record))?;
    Ok(CvOutcome { result, folds })
}

pub fn summarize_folds<'a>(records: impl Iterator<Item = &'a FoldRecord>) -> Result<ExperimentResult> {
    let records: Vec<FoldRecord> = records.cloned().collect();
    let entries = |f: &dyn Fn(&FoldRecord) -> f64| -> Vec<RunEntry> {
        records
            .iter()
            .map(|r| RunEntry {
                repeat: r.repeat,
                subject: r.test_subject.clone(),
                value: f(r),
            })
            .collect()
    };
    Ok(ExperimentResult {
        macro_f1: aggregate_runs(&entries(&|r| r.f1.macro_f1))?,
        accuracy: aggregate_runs(&entries(&|r| r.accuracy))?,
        folds: records,
    })
}

/// Trains on every subject for exactly `epochs` epochs, without validation.
pub fn train_full_dataset(
    manifest: &DatasetManifest,
    source: &ClipSource,
    init: ModelInit<'_>,
    epochs: usize,
    cfg: &TrainConfig,
    regime: Regime,
) -> Result<Checkpoint> {
    let clips = extract_clips(manifest, manifest.subjects(), cfg.clip_length, cfg.clip_stride)?.clips;
    let norm = compute_normalization(source, &clips)?;
    let model = match init {
        ModelInit::Fresh(c) => Model::new(c, derive_seed(cfg.seed, &[1]))?,
        ModelInit::Pretrained(m) => m.clone(),
    };
    let run_cfg = TrainConfig {
        max_epochs: epochs,
        early_stop_patience: 0,
        seed: derive_seed(cfg.seed, &[2]),
        ..cfg.clone()
    };
    let data = TrainData {
        source,
        manifest,
        norm: &norm,
    };
    let outcome = if epochs == 0 {
        TrainOutcome {
            model,
            best_epoch: 0,
            history: Vec::new(),
        }
    } else {
        train_supervised(model, &data, &clips, &[], &run_cfg, regime)?
    };
    Ok(Checkpoint {
        model: outcome.model,
        provenance: Provenance {
            domain_id: Some(manifest.domain_id().to_string()),
            epochs: Some(epochs),
            seed: Some(cfg.seed),
            note: None,
        },
        normalization: Some(norm),
    })
}

/// Mean best epoch over folds, rounded down, for use with [`scaled_epochs`].
pub fn mean_best_epoch(records: &[FoldRecord]) -> usize {
    if records.is_empty() {
        return 0;
    }
    records.iter().map(|r| r.best_epoch).sum::<usize>() / records.len()
}

/// Test-subject predictions grouped by subject.
pub fn predictions_by_subject(preds: &[ClipPrediction]) -> BTreeMap<String, Vec<ClipPrediction>> {
    let mut out: BTreeMap<String, Vec<ClipPrediction>> = BTreeMap::new();
    for p in preds {
        out.entry(p.subject_id.clone()).or_default().push(p.clone());
    }
    out
}
