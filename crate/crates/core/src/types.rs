//! Shared data model: video records, manifests, clips and clip predictions.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Recording phase of a video relative to pain induction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PreInduction,
    PostInduction,
    Baseline,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::PreInduction => "pre_induction",
            Phase::PostInduction => "post_induction",
            Phase::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pre_induction" => Ok(Phase::PreInduction),
            "post_induction" => Ok(Phase::PostInduction),
            "baseline" => Ok(Phase::Baseline),
            other => Err(format!("unknown phase {other:?}")),
        }
    }
}

/// Binary pain label. Pain is the positive class everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryLabel {
    NoPain = 0,
    Pain = 1,
}

impl BinaryLabel {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(BinaryLabel::NoPain),
            1 => Ok(BinaryLabel::Pain),
            other => Err(Error::Validation(format!("label index {other} is not 0 or 1"))),
        }
    }

    pub fn from_bool(pain: bool) -> Self {
        if pain {
            BinaryLabel::Pain
        } else {
            BinaryLabel::NoPain
        }
    }

    pub fn is_pain(self) -> bool {
        self == BinaryLabel::Pain
    }

    pub fn other(self) -> Self {
        match self {
            BinaryLabel::NoPain => BinaryLabel::Pain,
            BinaryLabel::Pain => BinaryLabel::NoPain,
        }
    }
}

impl fmt::Display for BinaryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// One labelled multi-minute video whose frames have been extracted to disk.
///
/// `raw_score` holds the averaged composite pain score (0-39 scale). Domains
/// with an on/off induction label encode the flag as `raw_score = 1` in the
/// `post_induction` phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub subject_id: String,
    pub domain_id: String,
    pub phase: Phase,
    pub raw_score: f64,
    pub frame_dir: PathBuf,
    pub n_frames: usize,
    pub fps_extracted: f64,
}

impl VideoRecord {
    pub fn validate(&self) -> Result<()> {
        if self.video_id.is_empty() {
            return Err(Error::Validation("empty video_id".into()));
        }
        if self.subject_id.is_empty() {
            return Err(Error::Validation(format!("{}: empty subject_id", self.video_id)));
        }
        if !(self.raw_score.is_finite() && self.raw_score >= 0.0) {
            return Err(Error::Validation(format!(
                "{}: raw_score must be a non-negative number, got {}",
                self.video_id, self.raw_score
            )));
        }
        if self.n_frames == 0 {
            return Err(Error::Validation(format!("{}: n_frames must be >= 1", self.video_id)));
        }
        if !(self.fps_extracted.is_finite() && self.fps_extracted > 0.0) {
            return Err(Error::Validation(format!(
                "{}: fps_extracted must be positive, got {}",
                self.video_id, self.fps_extracted
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> Result<BinaryLabel> {
        binarize_label(self)
    }
}

/// Any score above zero after induction counts as pain; baseline and
/// pre-induction recordings are never pain.
pub fn binarize_label(record: &VideoRecord) -> Result<BinaryLabel> {
    if !(record.raw_score.is_finite() && record.raw_score >= 0.0) {
        return Err(Error::Validation(format!(
            "{}: raw_score must be a non-negative number, got {}",
            record.video_id, record.raw_score
        )));
    }
    Ok(BinaryLabel::from_bool(
        record.phase == Phase::PostInduction && record.raw_score > 0.0,
    ))
}

/// An ordered set of video records, keyed by `video_id`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    records: Vec<VideoRecord>,
    subjects: BTreeSet<String>,
    domain_id: String,
}

impl DatasetManifest {
    pub fn new(records: Vec<VideoRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            r.validate()?;
            if !seen.insert(r.video_id.as_str()) {
                return Err(Error::Validation(format!("duplicate video_id {:?}", r.video_id)));
            }
        }
        let subjects = records.iter().map(|r| r.subject_id.clone()).collect();
        let domains: BTreeSet<&str> = records.iter().map(|r| r.domain_id.as_str()).collect();
        let domain_id = domains.into_iter().collect::<Vec<_>>().join("+");
        Ok(DatasetManifest {
            records,
            subjects,
            domain_id,
        })
    }

    pub fn records(&self) -> &[VideoRecord] {
        &self.records
    }

    pub fn subjects(&self) -> &BTreeSet<String> {
        &self.subjects
    }

    /// Domain of the manifest; merged manifests join their domains with `+`.
    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, video_id: &str) -> Option<&VideoRecord> {
        self.records.iter().find(|r| r.video_id == video_id)
    }

    /// Records whose subject is in `subjects`, manifest order preserved.
    pub fn filter_subjects<'a, I>(&self, subjects: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a String>,
    {
        let keep: HashSet<&String> = subjects.into_iter().collect();
        Self::new(
            self.records
                .iter()
                .filter(|r| keep.contains(&r.subject_id))
                .cloned()
                .collect(),
        )
    }

    pub fn merge(&self, other: &DatasetManifest) -> Result<Self> {
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        Self::new(records)
    }

    /// Video-level labels keyed by video id.
    pub fn labels(&self) -> Result<BTreeMap<String, BinaryLabel>> {
        self.records
            .iter()
            .map(|r| Ok((r.video_id.clone(), binarize_label(r)?)))
            .collect()
    }
}

/// Drops every subject with no post-induction score above zero. Subjects
/// without any post-induction record are kept.
pub fn exclude_unresponsive_subjects(manifest: &DatasetManifest) -> DatasetManifest {
    let mut has_post: BTreeSet<&str> = BTreeSet::new();
    let mut responsive: BTreeSet<&str> = BTreeSet::new();
    for r in manifest.records() {
        if r.phase == Phase::PostInduction {
            has_post.insert(&r.subject_id);
            if r.raw_score > 0.0 {
                responsive.insert(&r.subject_id);
            }
        }
    }
    let records = manifest
        .records()
        .iter()
        .filter(|r| !has_post.contains(r.subject_id.as_str()) || responsive.contains(r.subject_id.as_str()))
        .cloned()
        .collect();
    DatasetManifest::new(records).expect("subset of a valid manifest is valid")
}

/// A fixed-length window of a video. The label is inherited from the video.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Clip {
    pub video_id: String,
    pub start_frame: usize,
    pub length: usize,
    pub label: BinaryLabel,
    pub is_resampled: bool,
}

impl Clip {
    pub fn end_frame(&self) -> usize {
        self.start_frame + self.length
    }

    /// `<video_id>_<start_frame:06>`, unique within a clip list.
    pub fn clip_id(&self) -> String {
        format!("{}_{:06}", self.video_id, self.start_frame)
    }
}

/// Class probabilities of one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipPrediction {
    pub clip: Clip,
    pub subject_id: String,
    pub prob_pain: f64,
    pub prob_no_pain: f64,
    pub predicted: BinaryLabel,
    pub confidence: f64,
}

impl ClipPrediction {
    /// Builds a prediction from the pain probability; argmax ties go to pain.
    pub fn from_prob_pain(clip: Clip, subject_id: impl Into<String>, prob_pain: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&prob_pain) {
            return Err(Error::Validation(format!("prob_pain {prob_pain} outside [0, 1]")));
        }
        let prob_no_pain = 1.0 - prob_pain;
        Ok(ClipPrediction {
            clip,
            subject_id: subject_id.into(),
            prob_pain,
            prob_no_pain,
            predicted: BinaryLabel::from_bool(prob_pain >= prob_no_pain),
            confidence: prob_pain.max(prob_no_pain),
        })
    }

    pub fn label(&self) -> BinaryLabel {
        self.clip.label
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(id: &str, subject: &str, phase: Phase, score: f64) -> VideoRecord {
        VideoRecord {
            video_id: id.into(),
            subject_id: subject.into(),
            domain_id: "EOPJ".into(),
            phase,
            raw_score: score,
            frame_dir: PathBuf::from(id),
            n_frames: 100,
            fps_extracted: 2.0,
        }
    }

    #[test]
    fn weak_post_induction_score_is_pain() {
        let r = record("v", "s", Phase::PostInduction, 0.33);
        assert_eq!(binarize_label(&r).unwrap(), BinaryLabel::Pain);
        let r = record("v", "s", Phase::PostInduction, 10.0);
        assert_eq!(binarize_label(&r).unwrap(), BinaryLabel::Pain);
    }

    #[test]
    fn zero_score_and_baseline_are_no_pain() {
        let r = record("v", "s", Phase::PostInduction, 0.0);
        assert_eq!(binarize_label(&r).unwrap(), BinaryLabel::NoPain);
        let r = record("v", "s", Phase::Baseline, 5.0);
        assert_eq!(binarize_label(&r).unwrap(), BinaryLabel::NoPain);
        let r = record("v", "s", Phase::PreInduction, 3.0);
        assert_eq!(binarize_label(&r).unwrap(), BinaryLabel::NoPain);
    }

    #[test]
    fn negative_score_rejected() {
        let r = record("v", "s", Phase::PostInduction, -1.0);
        assert!(matches!(binarize_label(&r), Err(Error::Validation(_))));
        assert!(DatasetManifest::new(vec![r]).is_err());
    }

    #[test]
    fn unresponsive_subject_removed() {
        let m = DatasetManifest::new(vec![
            record("a1", "a", Phase::Baseline, 0.0),
            record("a2", "a", Phase::PostInduction, 0.0),
            record("a3", "a", Phase::PostInduction, 0.0),
            record("b1", "b", Phase::Baseline, 0.0),
            record("b2", "b", Phase::PostInduction, 0.0),
            record("b3", "b", Phase::PostInduction, 0.5),
        ])
        .unwrap();
        let out = exclude_unresponsive_subjects(&m);
        assert_eq!(out.subjects().iter().collect::<Vec<_>>(), vec!["b"]);
        assert_eq!(out.len(), 3);
        // original untouched
        assert_eq!(m.len(), 6);
        assert_eq!(exclude_unresponsive_subjects(&out), out);
    }

    #[test]
    fn empty_manifest_stays_empty() {
        let m = DatasetManifest::new(vec![]).unwrap();
        assert!(exclude_unresponsive_subjects(&m).is_empty());
    }

    #[test]
    fn duplicate_video_id_rejected() {
        let err = DatasetManifest::new(vec![
            record("a", "s", Phase::Baseline, 0.0),
            record("a", "t", Phase::Baseline, 0.0),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn prediction_invariants() {
        let clip = Clip {
            video_id: "v".into(),
            start_frame: 0,
            length: 10,
            label: BinaryLabel::Pain,
            is_resampled: false,
        };
        let p = ClipPrediction::from_prob_pain(clip.clone(), "s", 0.3).unwrap();
        assert_eq!(p.predicted, BinaryLabel::NoPain);
        assert!((p.confidence - 0.7).abs() < 1e-12);
        assert!((p.prob_pain + p.prob_no_pain - 1.0).abs() < 1e-12);
        assert!(ClipPrediction::from_prob_pain(clip, "s", 1.2).is_err());
    }
}
