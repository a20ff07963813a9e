//! Plain-text tables of experiment results.

use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{accuracy_from_correct_counts, confusion, ConfusionMatrix, F1Scores, MeanStd, ThresholdRow};
use crate::mil::VideoLevelRow;
use crate::training::ExperimentResult;
use crate::transfer::TransferResult;
use crate::types::BinaryLabel;

fn pm(m: &MeanStd) -> String {
    format!("{:.1} ± {:.1}", m.mean, m.std)
}

/// One row of the expert/model comparison on a fixed clip set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipComparisonRow {
    pub clip: String,
    pub label: u8,
    pub avg_rating: f64,
    /// Raters whose rating agreed with the label at threshold 0.
    pub n_correct: usize,
    pub pred: u8,
    pub conf: f64,
}

pub fn read_clip_comparison<R: Read>(reader: R, source: &str) -> Result<Vec<ClipComparisonRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for (i, r) in rdr.deserialize::<ClipComparisonRow>().enumerate() {
        let row = r.map_err(|e| Error::Parse {
            path: source.into(),
            line: i + 2,
            msg: e.to_string(),
        })?;
        if row.label > 1 || row.pred > 1 {
            return Err(Error::Parse {
                path: source.into(),
                line: i + 2,
                msg: "label and pred must be 0 or 1".into(),
            });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Validation(format!("{source} has no rows")));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipComparisonSummary {
    pub confusion: ConfusionMatrix,
    pub model_f1: F1Scores,
    pub model_accuracy: f64,
    /// Expert accuracies (no pain, pain, total) in percent at threshold 0.
    pub expert_accuracy: (f64, f64, f64),
}

pub fn summarize_clip_comparison(rows: &[ClipComparisonRow], n_raters: usize) -> Result<ClipComparisonSummary> {
    let labels: Vec<BinaryLabel> = rows.iter().map(|r| BinaryLabel::from_bool(r.label == 1)).collect();
    let preds: Vec<BinaryLabel> = rows.iter().map(|r| BinaryLabel::from_bool(r.pred == 1)).collect();
    let correct: Vec<usize> = rows.iter().map(|r| r.n_correct).collect();
    let cm = confusion(&preds, &labels)?;
    Ok(ClipComparisonSummary {
        confusion: cm,
        model_f1: cm.f1(),
        model_accuracy: cm.accuracy(),
        expert_accuracy: accuracy_from_correct_counts(&correct, &labels, n_raters)?,
    })
}

pub fn render_clip_comparison(s: &ClipComparisonSummary, n_raters: usize) -> String {
    let mut out = String::new();
    let cm = &s.confusion;
    let _ = writeln!(out, "Model vs labels on {} clips", cm.total());
    let _ = writeln!(out, "  confusion: tp {} fn {} fp {} tn {}", cm.tp, cm.fn_, cm.fp, cm.tn);
    let _ = writeln!(out, "  {:<10} {:>8} {:>8} {:>8}", "", "No pain", "Pain", "Total");
    let _ = writeln!(
        out,
        "  {:<10} {:>8.1} {:>8.1} {:>8.1}",
        "model F1", s.model_f1.no_pain, s.model_f1.pain, s.model_f1.macro_f1
    );
    let (np, p, t) = s.expert_accuracy;
    let _ = writeln!(out, "  {:<10} {:>8.1} {:>8.1} {:>8.1}   ({n_raters} raters, threshold 0)", "rater acc", np, p, t);
    let _ = writeln!(out, "macro F1 {:.1}", s.model_f1.macro_f1);
    out
}

/// Per-subject mean ± std and the global row of one or more experiments.
pub fn render_experiment_table(named: &[(String, ExperimentResult)]) -> String {
    let mut subjects: Vec<String> = named
        .iter()
        .flat_map(|(_, r)| r.macro_f1.per_subject.keys().cloned())
        .collect();
    subjects.sort();
    subjects.dedup();
    let mut out = String::new();
    let _ = write!(out, "{:<16}", "Model");
    for s in &subjects {
        let _ = write!(out, " {s:>14}");
    }
    let _ = writeln!(out, " {:>14}", "Global");
    for (name, r) in named {
        let _ = write!(out, "{name:<16}");
        for s in &subjects {
            let cell = r.macro_f1.per_subject.get(s).map(pm).unwrap_or_else(|| "-".into());
            let _ = write!(out, " {cell:>14}");
        }
        let _ = writeln!(out, " {:>14}", pm(&r.macro_f1.global));
    }
    out
}

pub fn render_transfer_table(results: &[TransferResult]) -> String {
    let mut subjects: Vec<String> = results.iter().flat_map(|r| r.per_subject.keys().cloned()).collect();
    subjects.sort();
    subjects.dedup();
    let mut out = String::new();
    let _ = write!(out, "{:<24} {:<10}", "Source -> target", "Mode");
    for s in &subjects {
        let _ = write!(out, " {s:>14}");
    }
    let _ = writeln!(out, " {:>14} {:>7}", "Global", "Repeats");
    for r in results {
        let mode = match r.mode {
            crate::transfer::TransferMode::ZeroShot => "zero-shot",
            crate::transfer::TransferMode::Finetune => "finetune",
        };
        let _ = write!(out, "{:<24} {mode:<10}", format!("{} -> {}", r.source_domain, r.target_domain));
        for s in &subjects {
            let cell = r.per_subject.get(s).map(pm).unwrap_or_else(|| "-".into());
            let _ = write!(out, " {cell:>14}");
        }
        let _ = writeln!(out, " {:>14} {:>7}", pm(&r.global), r.repeats);
    }
    out
}

pub fn render_video_level_table(rows: &[VideoLevelRow]) -> String {
    let subjects: Vec<String> = rows.first().map(|r| r.per_subject.keys().cloned().collect()).unwrap_or_default();
    let mut out = String::new();
    let _ = write!(out, "{:<10}", "Filter");
    for s in &subjects {
        let _ = write!(out, " {s:>10}");
    }
    let _ = writeln!(out, " {:>14} {:>8}", "Mean", "Pooled");
    for r in rows {
        let name = match r.k_fraction {
            None => "none".to_string(),
            Some(k) => format!("top {}%", (k * 100.0 * 1000.0).round() / 1000.0),
        };
        let _ = write!(out, "{name:<10}");
        for s in &subjects {
            let cell = r.per_subject.get(s).map(|f| format!("{:.1}", f.macro_f1)).unwrap_or_else(|| "-".into());
            let _ = write!(out, " {cell:>10}");
        }
        let _ = writeln!(
            out,
            " {:>14} {:>8.1}",
            pm(&MeanStd {
                mean: r.mean_macro_f1,
                std: r.std_macro_f1
            }),
            r.pooled.macro_f1
        );
    }
    out
}

pub fn render_threshold_table(rows: &[ThresholdRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>14} {:>14} {:>14}", "Threshold", "No pain", "Pain", "Total");
    for r in rows {
        let _ = writeln!(out, "{:<10} {:>14} {:>14} {:>14}", r.threshold, pm(&r.no_pain), pm(&r.pain), pm(&r.total));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_comparison_reads_and_scores() {
        let csv = "clip,label,avg_rating,n_correct,pred,conf\n1,1,2.0,3,1,0.9\n2,0,0.5,2,0,0.8\n3,0,1.0,1,1,0.6\n";
        let rows = read_clip_comparison(csv.as_bytes(), "mem").unwrap();
        let s = summarize_clip_comparison(&rows, 3).unwrap();
        assert_eq!((s.confusion.tp, s.confusion.fp, s.confusion.tn, s.confusion.fn_), (1, 1, 1, 0));
        // Experts: pain 3/3, no pain (2 + 1)/6.
        assert!((s.expert_accuracy.1 - 100.0).abs() < 1e-9);
        assert!((s.expert_accuracy.0 - 50.0).abs() < 1e-9);
        assert!(render_clip_comparison(&s, 3).contains("macro F1"));
    }

    #[test]
    fn bad_label_rejected() {
        let csv = "clip,label,avg_rating,n_correct,pred,conf\n1,2,2.0,3,1,0.9\n";
        assert!(read_clip_comparison(csv.as_bytes(), "mem").is_err());
    }
}
