//! Evaluating a model trained on one domain against another, either as is
//! or after re-fitting its classification head.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{compute_normalization, ClipSource, NormalizationStats};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_runs, Aggregate, F1Scores, RunEntry};
use crate::model::checkpoint::Checkpoint;
use crate::model::{Model, Regime};
use crate::sampling::extract_clips;
use crate::training::{predict_clips, run_cv, score_predictions, CvOutcome, ModelInit, TrainConfig};
use crate::types::{Clip, ClipPrediction, DatasetManifest};

/// Where zero-shot inputs get their standardisation statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationSource {
    /// Unlabelled statistics of all target clips.
    #[default]
    Target,
    /// The statistics stored with the source checkpoint.
    Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    ZeroShot,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeroShotConfig {
    pub clip_length: usize,
    pub clip_stride: usize,
    pub eval_batch_size: usize,
    pub normalization: NormalizationSource,
}

impl Default for ZeroShotConfig {
    fn default() -> Self {
        ZeroShotConfig {
            clip_length: 10,
            clip_stride: 10,
            eval_batch_size: 8,
            normalization: NormalizationSource::Target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub f1: F1Scores,
    pub accuracy: f64,
    pub n_clips: usize,
}

pub struct ZeroShotOutcome {
    pub predictions: Vec<ClipPrediction>,
    pub per_subject: BTreeMap<String, SubjectScore>,
    /// Per-subject macro F1 aggregated as a single repeat.
    pub macro_f1: Aggregate,
    pub normalization: NormalizationStats,
}

/// SHA-256 over every parameter and buffer value.
pub fn model_fingerprint(model: &Model) -> String {
    let mut h = Sha256::new();
    for v in model.params().data() {
        h.update(v.to_le_bytes());
    }
    if let Some(b) = model.buffers() {
        for v in b.data() {
            h.update(v.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

fn refuse_same_domain(source: &Checkpoint, target: &DatasetManifest) -> Result<()> {
    match source.provenance.domain_id.as_deref() {
        Some(d) if d == target.domain_id() => Err(Error::Validation(format!(
            "source model was trained on domain {d}; transferring to the same domain would leak test data"
        ))),
        Some(_) => Ok(()),
        None => Err(Error::Validation("source checkpoint does not record its training domain".into())),
    }
}

/// Clips of every target subject, each subject extracted (and resampled) on
/// its own as it would be as a test subject.
pub fn target_clips(target: &DatasetManifest, clip_length: usize, clip_stride: usize) -> Result<BTreeMap<String, Vec<Clip>>> {
    target
        .subjects()
        .iter()
        .map(|s| Ok((s.clone(), extract_clips(target, &[s.clone()].into(), clip_length, clip_stride)?.clips)))
        .collect()
}

pub fn zero_shot_transfer(source: &Checkpoint, target: &DatasetManifest, clips: &ClipSource, cfg: &ZeroShotConfig) -> Result<ZeroShotOutcome> {
    refuse_same_domain(source, target)?;
    let by_subject = target_clips(target, cfg.clip_length, cfg.clip_stride)?;
    let all: Vec<Clip> = by_subject.values().flatten().cloned().collect();
    let norm = match cfg.normalization {
        NormalizationSource::Target => compute_normalization(clips, &all)?,
        NormalizationSource::Source => source
            .normalization
            .clone()
            .ok_or_else(|| Error::Validation("source checkpoint has no normalization statistics".into()))?,
    };
    let mut predictions = Vec::with_capacity(all.len());
    let mut per_subject = BTreeMap::new();
    let mut entries = Vec::new();
    for (subject, subject_clips) in &by_subject {
        let preds = predict_clips(&source.model, clips, target, subject_clips, &norm, cfg.eval_batch_size)?;
        let (f1, accuracy) = score_predictions(&preds)?;
        log::info!("zero-shot {subject}: macro F1 {:.1}", f1.macro_f1);
        entries.push(RunEntry {
            repeat: 0,
            subject: subject.clone(),
            value: f1.macro_f1,
        });
        per_subject.insert(
            subject.clone(),
            SubjectScore {
                f1,
                accuracy,
                n_clips: preds.len(),
            },
        );
        predictions.extend(preds);
    }
    Ok(ZeroShotOutcome {
        predictions,
        per_subject,
        macro_f1: aggregate_runs(&entries)?,
        normalization: norm,
    })
}

/// Leave-one-subject-out on the target with only the head trainable. Every
/// fold starts from the source weights.
pub fn finetune_head(source: &Checkpoint, target: &DatasetManifest, clips: &ClipSource, cfg: &TrainConfig, n_repeats: usize) -> Result<CvOutcome> {
    refuse_same_domain(source, target)?;
    let outcome = run_cv(target, clips, ModelInit::Pretrained(&source.model), cfg, Regime::HeadOnly, n_repeats)?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub source_domain: String,
    pub target_domain: String,
    pub mode: TransferMode,
    pub per_subject: BTreeMap<String, crate::metrics::MeanStd>,
    pub global: crate::metrics::MeanStd,
    pub repeats: usize,
}

impl TransferResult {
    pub fn new(source: &Checkpoint, target: &DatasetManifest, mode: TransferMode, macro_f1: &Aggregate) -> Self {
        TransferResult {
            source_domain: source.provenance.domain_id.clone().unwrap_or_default(),
            target_domain: target.domain_id().to_string(),
            mode,
            per_subject: macro_f1.per_subject.clone(),
            global: macro_f1.global,
            repeats: macro_f1.n_repeats,
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        crate::frames::ensure_parent(path)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Validation(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
