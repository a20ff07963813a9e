//! Video-level decisions from the most confident clip predictions.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{macro_f1, mean_std, F1Scores};
use crate::types::{BinaryLabel, Clip, ClipPrediction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    /// Larger summed confidence wins a vote tie; an exact tie goes to pain.
    ConfidenceThenPain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MilConfig {
    pub k_fraction: f64,
    pub tie_rule: TieRule,
}

impl MilConfig {
    pub fn new(k_fraction: f64) -> Result<Self> {
        let cfg = MilConfig {
            k_fraction,
            tie_rule: TieRule::ConfidenceThenPain,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return Err(Error::Config(format!("k_fraction {} outside (0, 1]", self.k_fraction)));
        }
        Ok(())
    }

    /// `ceil(k * n)`, at least one.
    pub fn n_selected(&self, n_clips: usize) -> usize {
        ((self.k_fraction * n_clips as f64).ceil() as usize).clamp(1, n_clips.max(1))
    }
}

/// The selected clips: highest confidence first, earlier start on ties.
pub fn select_top<'a>(preds: &'a [ClipPrediction], cfg: &MilConfig) -> Result<Vec<&'a ClipPrediction>> {
    cfg.validate()?;
    if preds.is_empty() {
        return Err(Error::Validation("MIL filter needs at least one clip prediction".into()));
    }
    let mut order: Vec<&ClipPrediction> = preds.iter().collect();
    order.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.clip.start_frame.cmp(&b.clip.start_frame))
            .then(a.clip.video_id.cmp(&b.clip.video_id))
    });
    order.truncate(cfg.n_selected(preds.len()));
    Ok(order)
}

/// Video label from the clip predictions of one video.
pub fn mil_filter(preds: &[ClipPrediction], cfg: &MilConfig) -> Result<BinaryLabel> {
    let selected = select_top(preds, cfg)?;
    let mut votes = [0usize; 2];
    let mut conf = [0.0f64; 2];
    for p in &selected {
        votes[p.predicted.index()] += 1;
        conf[p.predicted.index()] += p.confidence;
    }
    let (np, p) = (BinaryLabel::NoPain.index(), BinaryLabel::Pain.index());
    Ok(match votes[p].cmp(&votes[np]) {
        std::cmp::Ordering::Greater => BinaryLabel::Pain,
        std::cmp::Ordering::Less => BinaryLabel::NoPain,
        std::cmp::Ordering::Equal => BinaryLabel::from_bool(conf[p] >= conf[np]),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoDecision {
    pub video_id: String,
    pub subject_id: String,
    pub label: BinaryLabel,
    pub predicted: BinaryLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoLevelRow {
    /// `None` = majority over all clips.
    pub k_fraction: Option<f64>,
    pub per_subject: BTreeMap<String, F1Scores>,
    /// Mean over subjects of the per-subject macro F1 and its std.
    pub mean_macro_f1: f64,
    pub std_macro_f1: f64,
    /// Macro F1 of all video decisions pooled.
    pub pooled: F1Scores,
    pub decisions: Vec<VideoDecision>,
}

pub fn group_by_video(preds: &[ClipPrediction]) -> BTreeMap<String, Vec<ClipPrediction>> {
    let mut out: BTreeMap<String, Vec<ClipPrediction>> = BTreeMap::new();
    for p in preds {
        out.entry(p.clip.video_id.clone()).or_default().push(p.clone());
    }
    out
}

pub fn video_decisions(preds: &[ClipPrediction], labels: &BTreeMap<String, BinaryLabel>, cfg: &MilConfig) -> Result<Vec<VideoDecision>> {
    group_by_video(preds)
        .into_iter()
        .map(|(vid, clips)| {
            let label = *labels
                .get(&vid)
                .ok_or_else(|| Error::Validation(format!("video {vid} has no label")))?;
            Ok(VideoDecision {
                subject_id: clips[0].subject_id.clone(),
                predicted: mil_filter(&clips, cfg)?,
                video_id: vid,
                label,
            })
        })
        .collect()
}

/// Video-level F1 per subject for each filter in `ks` (`None` = no filter).
pub fn evaluate_video_level(
    preds: &[ClipPrediction],
    labels: &BTreeMap<String, BinaryLabel>,
    ks: &[Option<f64>],
) -> Result<Vec<VideoLevelRow>> {
    ks.iter()
        .map(|&k| {
            let cfg = MilConfig::new(k.unwrap_or(1.0))?;
            let decisions = video_decisions(preds, labels, &cfg)?;
            let mut by_subject: BTreeMap<String, (Vec<BinaryLabel>, Vec<BinaryLabel>)> = BTreeMap::new();
            for d in &decisions {
                let e = by_subject.entry(d.subject_id.clone()).or_default();
                e.0.push(d.predicted);
                e.1.push(d.label);
            }
            let per_subject: BTreeMap<String, F1Scores> = by_subject
                .iter()
                .map(|(s, (p, l))| Ok((s.clone(), macro_f1(p, l)?)))
                .collect::<Result<_>>()?;
            let ms = mean_std(&per_subject.values().map(|f| f.macro_f1).collect::<Vec<_>>());
            let all_p: Vec<BinaryLabel> = decisions.iter().map(|d| d.predicted).collect();
            let all_l: Vec<BinaryLabel> = decisions.iter().map(|d| d.label).collect();
            Ok(VideoLevelRow {
                k_fraction: k,
                per_subject,
                mean_macro_f1: ms.mean,
                std_macro_f1: ms.std,
                pooled: macro_f1(&all_p, &all_l)?,
                decisions,
            })
        })
        .collect()
}

pub const PREDICTION_COLUMNS: [&str; 7] = ["video_id", "subject_id", "start_frame", "prob_pain", "confidence", "predicted", "label"];

pub fn write_predictions<W: Write>(preds: &[ClipPrediction], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::Validation(e.to_string());
    w.write_record(PREDICTION_COLUMNS).map_err(err)?;
    for p in preds {
        w.write_record([
            p.clip.video_id.clone(),
            p.subject_id.clone(),
            p.clip.start_frame.to_string(),
            p.prob_pain.to_string(),
            p.confidence.to_string(),
            p.predicted.index().to_string(),
            p.clip.label.index().to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::Validation(e.to_string()))
}

#[derive(Deserialize)]
struct PredictionRow {
    video_id: String,
    subject_id: String,
    start_frame: usize,
    prob_pain: f64,
    confidence: f64,
    predicted: usize,
    label: usize,
}

/// Reads `predictions.csv`. Clip length is not stored and is supplied by the
/// caller; `is_resampled` is not stored and reads as false.
pub fn read_predictions<R: Read>(reader: R, source: &str, clip_length: usize) -> Result<Vec<ClipPrediction>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let perr = |line: usize, msg: String| Error::Parse {
        path: source.into(),
        line,
        msg,
    };
    let headers = rdr.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    for col in PREDICTION_COLUMNS {
        if !headers.iter().any(|h| h == col) {
            return Err(perr(1, format!("missing column {col}")));
        }
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<PredictionRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| perr(line, e.to_string()))?;
        let clip = Clip {
            video_id: row.video_id,
            start_frame: row.start_frame,
            length: clip_length,
            label: BinaryLabel::from_index(row.label).map_err(|e| perr(line, e.to_string()))?,
            is_resampled: false,
        };
        let p = ClipPrediction::from_prob_pain(clip, row.subject_id, row.prob_pain).map_err(|e| perr(line, e.to_string()))?;
        if p.predicted.index() != row.predicted || (p.confidence - row.confidence).abs() > 1e-9 {
            return Err(perr(line, "predicted/confidence disagree with prob_pain".into()));
        }
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pred(start: usize, prob_pain: f64) -> ClipPrediction {
        ClipPrediction::from_prob_pain(
            Clip {
                video_id: "v".into(),
                start_frame: start,
                length: 10,
                label: BinaryLabel::Pain,
                is_resampled: false,
            },
            "s",
            prob_pain,
        )
        .unwrap()
    }

    #[test]
    fn worked_example_selects_two_pain_clips() {
        let preds = vec![pred(0, 0.99), pred(10, 0.98), pred(20, 0.03), pred(30, 0.40), pred(40, 0.45)];
        let cfg = MilConfig::new(0.4).unwrap();
        assert_eq!(select_top(&preds, &cfg).unwrap().len(), 2);
        assert_eq!(mil_filter(&preds, &cfg).unwrap(), BinaryLabel::Pain);
    }

    #[test]
    fn five_percent_of_hundred_is_five() {
        assert_eq!(MilConfig::new(0.05).unwrap().n_selected(100), 5);
        assert_eq!(MilConfig::new(0.01).unwrap().n_selected(20), 1);
    }

    #[test]
    fn unanimous_pain_for_any_k() {
        let preds: Vec<_> = (0..7).map(|i| pred(i * 10, 0.6 + 0.05 * i as f64)).collect();
        for k in [0.01, 0.3, 1.0] {
            assert_eq!(mil_filter(&preds, &MilConfig::new(k).unwrap()).unwrap(), BinaryLabel::Pain);
        }
    }

    #[test]
    fn vote_ties_use_confidence_then_pain() {
        let cfg = MilConfig::new(1.0).unwrap();
        assert_eq!(mil_filter(&[pred(0, 0.9), pred(10, 0.05)], &cfg).unwrap(), BinaryLabel::NoPain);
        assert_eq!(mil_filter(&[pred(0, 0.8), pred(10, 0.2)], &cfg).unwrap(), BinaryLabel::Pain);
    }

    #[test]
    fn empty_input_and_bad_k_rejected() {
        assert!(mil_filter(&[], &MilConfig::new(0.5).unwrap()).is_err());
        assert!(MilConfig::new(0.0).is_err());
        assert!(MilConfig::new(1.5).is_err());
    }

    #[test]
    fn predictions_csv_round_trip() {
        let preds = vec![pred(0, 0.25), pred(10, 0.875)];
        let mut buf = Vec::new();
        write_predictions(&preds, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("video_id,subject_id,start_frame,prob_pain,confidence,predicted,label\n"));
        assert_eq!(read_predictions(buf.as_slice(), "mem", 10).unwrap(), preds);
    }

    proptest! {
        #[test]
        fn permutation_invariant_and_monotone(
            probs in proptest::collection::vec(0.0f64..=1.0, 1..40),
            seed in any::<u64>(),
        ) {
            let preds: Vec<_> = probs.iter().enumerate().map(|(i, &p)| pred(i * 10, (p * 20.0).round() / 20.0)).collect();
            let mut shuffled = preds.clone();
            let mut s = seed;
            for i in (1..shuffled.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (s >> 33) as usize % (i + 1));
            }
            let mut prev: Option<Vec<usize>> = None;
            for k in [0.01, 0.05, 0.2, 0.5, 1.0] {
                let cfg = MilConfig::new(k).unwrap();
                prop_assert_eq!(mil_filter(&preds, &cfg).unwrap(), mil_filter(&shuffled, &cfg).unwrap());
                let sel: Vec<usize> = select_top(&preds, &cfg).unwrap().iter().map(|p| p.clip.start_frame).collect();
                if let Some(p) = &prev {
                    prop_assert!(p.iter().all(|s| sel.contains(s)));
                }
                prev = Some(sel);
            }
        }
    }
}
