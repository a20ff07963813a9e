//! Classification metrics, repeated-run aggregation and rater analysis.
//!
//! Pain is the positive class; F1 values are percentages.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::BinaryLabel;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_lengths(preds: &[BinaryLabel], labels: &[BinaryLabel]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Validation("no predictions to score".into()));
    }
    Ok(())
}

pub fn confusion(preds: &[BinaryLabel], labels: &[BinaryLabel]) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut m = ConfusionMatrix::default();
    for (p, l) in preds.iter().zip(labels) {
        match (p.is_pain(), l.is_pain()) {
            (true, true) => m.tp += 1,
            (true, false) => m.fp += 1,
            (false, false) => m.tn += 1,
            (false, true) => m.fn_ += 1,
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub no_pain: f64,
    pub pain: f64,
    pub macro_f1: f64,
}

/// F1 of one class in percent from its true positives, false positives and
/// false negatives; zero divisions contribute 0.
pub fn class_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    if precision + recall > 0.0 {
        100.0 * 2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

impl ConfusionMatrix {
    pub fn f1(&self) -> F1Scores {
        if self.tp + self.fp + self.fn_ == 0 {
            log::warn!("pain class absent from predictions and labels; its F1 counts as 0");
        }
        if self.tn + self.fn_ + self.fp == 0 {
            log::warn!("no-pain class absent from predictions and labels; its F1 counts as 0");
        }
        let pain = class_f1(self.tp, self.fp, self.fn_);
        let no_pain = class_f1(self.tn, self.fn_, self.fp);
        F1Scores {
            no_pain,
            pain,
            macro_f1: (pain + no_pain) / 2.0,
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            100.0 * (self.tp + self.tn) as f64 / self.total() as f64
        }
    }
}

pub fn macro_f1(preds: &[BinaryLabel], labels: &[BinaryLabel]) -> Result<F1Scores> {
    check_lengths(preds, labels)?;
    Ok(confusion(preds, labels)?.f1())
}

pub fn accuracy(preds: &[BinaryLabel], labels: &[BinaryLabel]) -> Result<f64> {
    check_lengths(preds, labels)?;
    Ok(confusion(preds, labels)?.accuracy())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd::default();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

/// One score from one subject in one repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub repeat: usize,
    pub subject: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Mean over repeats of the per-repeat mean over subjects; the std is
    /// the mean over subjects of their across-repeat std.
    pub global: MeanStd,
    pub per_subject: BTreeMap<String, MeanStd>,
    pub n_repeats: usize,
}

pub fn aggregate_runs(entries: &[RunEntry]) -> Result<Aggregate> {
    if entries.is_empty() {
        return Err(Error::Validation("nothing to aggregate".into()));
    }
    let mut by_repeat: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut by_subject: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for e in entries {
        by_repeat.entry(e.repeat).or_default().push(e.value);
        by_subject.entry(e.subject.clone()).or_default().push(e.value);
    }
    let repeat_means: Vec<f64> = by_repeat.values().map(|v| mean_std(v).mean).collect();
    let per_subject: BTreeMap<String, MeanStd> = by_subject.iter().map(|(s, v)| (s.clone(), mean_std(v))).collect();
    let std = per_subject.values().map(|m| m.std).sum::<f64>() / per_subject.len() as f64;
    Ok(Aggregate {
        global: MeanStd {
            mean: mean_std(&repeat_means).mean,
            std,
        },
        per_subject,
        n_repeats: by_repeat.len(),
    })
}

/// Expert ratings on a 0..=10 scale: `ratings[r][c]` is rater `r` on clip `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct RaterMatrix {
    rater_ids: Vec<String>,
    clip_ids: Vec<String>,
    ratings: Vec<Vec<u8>>,
    labels: Vec<BinaryLabel>,
}

pub const MAX_RATING: u8 = 10;

impl RaterMatrix {
    pub fn new(rater_ids: Vec<String>, clip_ids: Vec<String>, ratings: Vec<Vec<u8>>, labels: Vec<BinaryLabel>) -> Result<Self> {
        if ratings.len() != rater_ids.len() || labels.len() != clip_ids.len() {
            return Err(Error::Validation("rater matrix dimensions disagree".into()));
        }
        for (r, row) in ratings.iter().enumerate() {
            if row.len() != clip_ids.len() {
                return Err(Error::Validation(format!("rater {} has {} ratings, expected {}", rater_ids[r], row.len(), clip_ids.len())));
            }
            if let Some(v) = row.iter().find(|&&v| v > MAX_RATING) {
                return Err(Error::Validation(format!("rating {v} outside 0..={MAX_RATING}")));
            }
        }
        Ok(RaterMatrix {
            rater_ids,
            clip_ids,
            ratings,
            labels,
        })
    }

    /// Builds the matrix from long-format rows; every rater must rate every
    /// labelled clip exactly once.
    pub fn from_long(rows: &[RatingRow], labels: &BTreeMap<String, BinaryLabel>) -> Result<Self> {
        let clip_ids: Vec<String> = labels.keys().cloned().collect();
        let col: BTreeMap<&str, usize> = clip_ids.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let mut per_rater: BTreeMap<String, Vec<Option<u8>>> = BTreeMap::new();
        for row in rows {
            let c = *col
                .get(row.clip_id.as_str())
                .ok_or_else(|| Error::Validation(format!("clip {} has no label", row.clip_id)))?;
            let slot = &mut per_rater.entry(row.rater_id.clone()).or_insert_with(|| vec![None; clip_ids.len()])[c];
            if slot.replace(row.rating).is_some() {
                return Err(Error::Validation(format!("rater {} rated clip {} twice", row.rater_id, row.clip_id)));
            }
        }
        let mut rater_ids = Vec::new();
        let mut ratings = Vec::new();
        for (r, vals) in per_rater {
            let row: Option<Vec<u8>> = vals.into_iter().collect();
            ratings.push(row.ok_or_else(|| Error::Validation(format!("rater {r} did not rate every clip")))?);
            rater_ids.push(r);
        }
        RaterMatrix::new(rater_ids, clip_ids, ratings, labels.values().copied().collect())
    }

    pub fn n_raters(&self) -> usize {
        self.ratings.len()
    }

    pub fn labels(&self) -> &[BinaryLabel] {
        &self.labels
    }

    pub fn ratings(&self) -> &[Vec<u8>] {
        &self.ratings
    }

    pub fn rater_ids(&self) -> &[String] {
        &self.rater_ids
    }

    pub fn clip_ids(&self) -> &[String] {
        &self.clip_ids
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: u8,
    pub no_pain: MeanStd,
    pub pain: MeanStd,
    pub total: MeanStd,
}

/// Per-rater accuracies when a rating above `threshold` means pain, as mean
/// and std across raters.
pub fn rater_threshold_analysis(raters: &RaterMatrix, threshold: u8) -> ThresholdRow {
    let mut pain = Vec::new();
    let mut no_pain = Vec::new();
    let mut total = Vec::new();
    for row in &raters.ratings {
        let (mut pc, mut pn, mut nc, mut nn) = (0usize, 0usize, 0usize, 0usize);
        for (&r, l) in row.iter().zip(&raters.labels) {
            if l.is_pain() {
                pn += 1;
                pc += usize::from(r > threshold);
            } else {
                nn += 1;
                nc += usize::from(r <= threshold);
            }
        }
        let pct = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
        pain.push(pct(pc, pn));
        no_pain.push(pct(nc, nn));
        total.push(pct(pc + nc, pn + nn));
    }
    ThresholdRow {
        threshold,
        no_pain: mean_std(&no_pain),
        pain: mean_std(&pain),
        total: mean_std(&total),
    }
}

/// Class-wise and total accuracy from per-clip counts of correct raters.
/// Returns `(no_pain, pain, total)` in percent.
pub fn accuracy_from_correct_counts(correct: &[usize], labels: &[BinaryLabel], n_raters: usize) -> Result<(f64, f64, f64)> {
    if correct.len() != labels.len() || n_raters == 0 {
        return Err(Error::Validation("one count per clip and at least one rater required".into()));
    }
    if correct.iter().any(|&c| c > n_raters) {
        return Err(Error::Validation(format!("a clip has more than {n_raters} correct raters")));
    }
    let (mut pc, mut pn, mut nc, mut nn) = (0usize, 0usize, 0usize, 0usize);
    for (&c, l) in correct.iter().zip(labels) {
        if l.is_pain() {
            pc += c;
            pn += n_raters;
        } else {
            nc += c;
            nn += n_raters;
        }
    }
    let pct = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
    Ok((pct(nc, nn), pct(pc, pn), pct(pc + nc, pn + nn)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRow {
    pub rater_id: String,
    pub clip_id: String,
    pub rating: u8,
}

pub fn read_ratings<R: Read>(reader: R, source: &str) -> Result<Vec<RatingRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(source, 1, e))?.clone();
    for col in ["rater_id", "clip_id", "rating"] {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Parse {
                path: source.into(),
                line: 1,
                msg: format!("missing column {col}"),
            });
        }
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<RatingRow>().enumerate() {
        let row = rec.map_err(|e| parse_err(source, i + 2, e))?;
        if row.rating > MAX_RATING {
            return Err(Error::Parse {
                path: source.into(),
                line: i + 2,
                msg: format!("rating {} outside 0..={MAX_RATING}", row.rating),
            });
        }
        out.push(row);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct ClipLabelRow {
    clip_id: String,
    label: usize,
}

/// Reads `clip_id,label` rows (label 0 or 1).
pub fn read_clip_labels<R: Read>(reader: R, source: &str) -> Result<BTreeMap<String, BinaryLabel>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = BTreeMap::new();
    for (i, rec) in rdr.deserialize::<ClipLabelRow>().enumerate() {
        let row = rec.map_err(|e| parse_err(source, i + 2, e))?;
        let label = BinaryLabel::from_index(row.label).map_err(|e| Error::Parse {
            path: source.into(),
            line: i + 2,
            msg: e.to_string(),
        })?;
        if out.insert(row.clip_id.clone(), label).is_some() {
            return Err(Error::Parse {
                path: source.into(),
                line: i + 2,
                msg: format!("duplicate clip {}", row.clip_id),
            });
        }
    }
    Ok(out)
}

fn parse_err(source: &str, line: usize, e: csv::Error) -> Error {
    Error::Parse {
        path: source.into(),
        line,
        msg: e.to_string(),
    }
}

pub fn write_ratings<W: Write>(rows: &[RatingRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Validation(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Validation(e.to_string()))?;
    Ok(())
}

/// Renders a 2x2 confusion matrix as a heatmap: rows are true labels
/// (pain, no pain), columns predictions; darker blue means more clips.
pub fn render_confusion_heatmap(cm: &ConfusionMatrix, cell_px: u32, path: &Path) -> Result<()> {
    let counts = [[cm.tp, cm.fn_], [cm.fp, cm.tn]];
    let max = counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let size = 2 * cell_px;
    let mut img = image::RgbImage::new(size, size);
    for (y, row) in counts.iter().enumerate() {
        for (x, &n) in row.iter().enumerate() {
            let s = n as f64 / max;
            let px = image::Rgb([
                (247.0 - s * 239.0).round() as u8,
                (251.0 - s * 203.0).round() as u8,
                (255.0 - s * 148.0).round() as u8,
            ]);
            for yy in 0..cell_px {
                for xx in 0..cell_px {
                    let border = yy == 0 || xx == 0 || yy == cell_px - 1 || xx == cell_px - 1;
                    img.put_pixel(
                        x as u32 * cell_px + xx,
                        y as u32 * cell_px + yy,
                        if border { image::Rgb([60, 60, 60]) } else { px },
                    );
                }
            }
        }
    }
    crate::frames::ensure_parent(path)?;
    img.save(path).map_err(|e| Error::image(path, e))
}
