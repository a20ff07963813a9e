//! Video-to-clip windowing and minor-class resampling.
//!
//! Base clips are back-to-back windows starting at frame 0. To even out the
//! classes, the minor class of a split is topped up with windows that start
//! half a window later, so they overlap the base windows as little as
//! possible. Each minor-class video contributes at most
//! `floor(|n_minor - n_major| / M)` extra windows, `M` being the number of
//! minor-class videos in the split.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames;
use crate::types::{binarize_label, BinaryLabel, Clip, DatasetManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub length: usize,
    pub stride: usize,
    pub t_start: usize,
}

impl WindowPlan {
    pub fn new(length: usize, stride: usize, t_start: usize) -> Result<Self> {
        if length == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "window length and stride must be >= 1 (got {length}, {stride})"
            )));
        }
        if t_start >= length {
            return Err(Error::Config(format!(
                "t_start {t_start} must be smaller than the window length {length}"
            )));
        }
        Ok(WindowPlan {
            length,
            stride,
            t_start,
        })
    }

    pub fn base(length: usize, stride: usize) -> Result<Self> {
        Self::new(length, stride, 0)
    }

    /// Offset plan starting at `length / 2`; the length must be even.
    pub fn offset(length: usize, stride: usize) -> Result<Self> {
        if length % 2 != 0 {
            return Err(Error::Config(format!(
                "resampling needs an even window length, got {length}"
            )));
        }
        Self::new(length, stride, length / 2)
    }

    /// Every start `t_start + k * stride` whose window fits in `n_frames`.
    pub fn starts(&self, n_frames: usize) -> Vec<usize> {
        (0..)
            .map(|k| self.t_start + k * self.stride)
            .take_while(|s| s + self.length <= n_frames)
            .collect()
    }
}

impl Default for WindowPlan {
    /// 10-frame windows, back to back (5 s at 2 fps).
    fn default() -> Self {
        WindowPlan {
            length: 10,
            stride: 10,
            t_start: 0,
        }
    }
}

/// Back-to-back windows from frame 0; trailing partial windows are dropped.
pub fn plan_base_windows(n_frames: usize, length: usize, stride: usize) -> Result<Vec<usize>> {
    Ok(WindowPlan::base(length, stride)?.starts(n_frames))
}

/// Windows offset by half a window from the base grid.
pub fn plan_resample_windows(n_frames: usize, length: usize, stride: usize) -> Result<Vec<usize>> {
    Ok(WindowPlan::offset(length, stride)?.starts(n_frames))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResamplePlan {
    pub n_minor: usize,
    pub n_major: usize,
    pub n_resample: usize,
    pub per_video_quota: usize,
    pub n_minor_videos: usize,
}

pub fn build_resample_plan(n_minor: usize, n_major: usize, n_minor_videos: usize) -> Result<ResamplePlan> {
    if n_minor_videos == 0 {
        return Err(Error::Validation("resampling needs at least one video (M >= 1)".into()));
    }
    let n_resample = n_minor.abs_diff(n_major);
    Ok(ResamplePlan {
        n_minor,
        n_major,
        n_resample,
        per_video_quota: n_resample / n_minor_videos,
        n_minor_videos,
    })
}

/// Clips of one split plus the resampling that was applied to it.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitClips {
    pub clips: Vec<Clip>,
    pub minor_class: Option<BinaryLabel>,
    pub plan: Option<ResamplePlan>,
}

impl SplitClips {
    pub fn count(&self, label: BinaryLabel) -> usize {
        self.clips.iter().filter(|c| c.label == label).count()
    }
}

/// Extracts the clips of every video whose subject is in `split`.
///
/// Per video (manifest order) the base windows come first, followed by the
/// offset windows granted to it by the resampling quota. Videos shorter than
/// one window contribute nothing.
pub fn extract_clips(manifest: &DatasetManifest, split: &BTreeSet<String>, length: usize, stride: usize) -> Result<SplitClips> {
    let base = WindowPlan::base(length, stride)?;
    let videos: Vec<_> = manifest
        .records()
        .iter()
        .filter(|r| split.contains(&r.subject_id))
        .map(|r| Ok((r, binarize_label(r)?)))
        .collect::<Result<_>>()?;

    let mut base_starts = Vec::with_capacity(videos.len());
    let mut counts = [0usize; 2];
    for (r, label) in &videos {
        let starts = base.starts(r.n_frames);
        counts[label.index()] += starts.len();
        base_starts.push(starts);
    }

    let minor = match counts[0].cmp(&counts[1]) {
        std::cmp::Ordering::Less => Some(BinaryLabel::NoPain),
        std::cmp::Ordering::Greater => Some(BinaryLabel::Pain),
        std::cmp::Ordering::Equal => None,
    };
    let plan = match minor {
        Some(m) => {
            let n_minor_videos = videos.iter().filter(|(_, l)| *l == m).count();
            if n_minor_videos == 0 {
                None
            } else {
                Some(build_resample_plan(
                    counts[m.index()],
                    counts[m.other().index()],
                    n_minor_videos,
                )?)
            }
        }
        None => None,
    };
    let offset = if plan.is_some_and(|p| p.per_video_quota > 0) {
        Some(WindowPlan::offset(length, stride)?)
    } else {
        None
    };

    let mut clips = Vec::new();
    for ((r, label), starts) in videos.iter().zip(base_starts) {
        let make = |start_frame: usize, is_resampled: bool| Clip {
            video_id: r.video_id.clone(),
            start_frame,
            length,
            label: *label,
            is_resampled,
        };
        clips.extend(starts.into_iter().map(|s| make(s, false)));
        if let (Some(off), Some(p)) = (&offset, &plan) {
            if Some(*label) == minor {
                clips.extend(
                    off.starts(r.n_frames)
                        .into_iter()
                        .take(p.per_video_quota)
                        .map(|s| make(s, true)),
                );
            }
        }
    }
    Ok(SplitClips {
        clips,
        minor_class: minor,
        plan,
    })
}

pub const CLIP_COLUMNS: [&str; 5] = ["video_id", "start_frame", "length", "label", "is_resampled"];

pub fn write_clips<W: Write>(clips: &[Clip], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Validation(format!("clip csv: {e}"));
    wtr.write_record(CLIP_COLUMNS).map_err(csv_err)?;
    for c in clips {
        wtr.write_record([
            c.video_id.clone(),
            c.start_frame.to_string(),
            c.length.to_string(),
            c.label.index().to_string(),
            c.is_resampled.to_string(),
        ])
        .map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| Error::io("<clips>", e))
}

pub fn read_clips<R: Read>(reader: R, source: &str) -> Result<Vec<Clip>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let perr = |line: usize, msg: String| Error::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let headers = rdr.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != CLIP_COLUMNS {
        return Err(perr(1, format!("expected header {}", CLIP_COLUMNS.join(","))));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| perr(0, e.to_string()))?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let num = |i: usize| -> Result<usize> {
            row[i].parse().map_err(|_| perr(line, format!("bad integer {:?}", &row[i])))
        };
        out.push(Clip {
            video_id: row[0].to_string(),
            start_frame: num(1)?,
            length: num(2)?,
            label: BinaryLabel::from_index(num(3)?).map_err(|e| perr(line, e.to_string()))?,
            is_resampled: row[4]
                .parse()
                .map_err(|_| perr(line, format!("bad boolean {:?}", &row[4])))?,
        });
    }
    Ok(out)
}

/// Input stream of the two-stream model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Rgb,
    Flow,
}

/// Loads a clip as `(length, H, W, C)`.
///
/// RGB values stay on the raw 0-255 scale (standardisation happens in
/// training); flow images are scaled to [0, 1] and truncated to
/// `flow_channels` channels.
pub fn load_clip_frames(frame_dir: &Path, clip: &Clip, stream: Stream, flow_channels: usize) -> Result<Array4<f64>> {
    let mut frames = Vec::with_capacity(clip.length);
    for i in clip.start_frame..clip.end_frame() {
        let path = match stream {
            Stream::Rgb => frames::frame_path(frame_dir, i),
            Stream::Flow => frames::flow_path(frame_dir, i),
        };
        frames.push(frames::read_rgb(&path)?);
    }
    let (h, w) = (frames[0].height, frames[0].width);
    let c = match stream {
        Stream::Rgb => 3,
        Stream::Flow => flow_channels,
    };
    let mut out = Array4::<f64>::zeros((clip.length, h, w, c));
    for (t, f) in frames.iter().enumerate() {
        if f.width != w || f.height != h {
            return Err(Error::Shape(format!(
                "{} frame {} is {}x{}, expected {}x{}",
                clip.video_id,
                clip.start_frame + t,
                f.width,
                f.height,
                w,
                h
            )));
        }
        for y in 0..h {
            for x in 0..w {
                let px = f.pixel(x, y);
                for ch in 0..c {
                    out[[t, y, x, ch]] = match stream {
                        Stream::Rgb => px[ch] as f64,
                        Stream::Flow => px[ch] as f64 / 255.0,
                    };
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Phase, VideoRecord};
    use std::path::PathBuf;

    /// Independent enumeration: every s in 0..n with s % stride == t_start % stride
    /// (s >= t_start) whose window fits.
    fn enumerate_starts(n: usize, len: usize, stride: usize, t_start: usize) -> Vec<usize> {
        (0..n).filter(|&s| s >= t_start && (s - t_start) % stride == 0 && s + len <= n).collect()
    }

    #[test]
    fn base_windows_match_enumeration() {
        assert_eq!(plan_base_windows(10, 10, 10).unwrap(), vec![0]);
        assert_eq!(plan_base_windows(30, 10, 10).unwrap(), enumerate_starts(30, 10, 10, 0));
        assert_eq!(plan_base_windows(30, 10, 10).unwrap(), vec![0, 10, 20]);
        assert_eq!(plan_base_windows(29, 10, 10).unwrap(), vec![0, 10]);
        assert!(plan_base_windows(0, 10, 10).unwrap().is_empty());
    }

    #[test]
    fn offset_windows() {
        assert_eq!(WindowPlan::offset(10, 10).unwrap().t_start, 5);
        assert_eq!(plan_resample_windows(30, 10, 10).unwrap(), vec![5, 15]);
        assert_eq!(plan_resample_windows(30, 10, 10).unwrap(), enumerate_starts(30, 10, 10, 5));
        assert!(plan_resample_windows(14, 10, 10).unwrap().is_empty());
        assert!(matches!(plan_resample_windows(30, 9, 9), Err(Error::Config(_))));
    }

    #[test]
    fn resample_plan_arithmetic() {
        let p = build_resample_plan(10, 4, 3).unwrap();
        assert_eq!((p.n_resample, p.per_video_quota), (6, 2));
        let p = build_resample_plan(4, 4, 5).unwrap();
        assert_eq!((p.n_resample, p.per_video_quota), (0, 0));
        assert!(build_resample_plan(1, 2, 0).is_err());
    }

    fn rec(id: &str, subject: &str, pain: bool, n: usize) -> VideoRecord {
        VideoRecord {
            video_id: id.into(),
            subject_id: subject.into(),
            domain_id: "T".into(),
            phase: if pain { Phase::PostInduction } else { Phase::Baseline },
            raw_score: if pain { 1.0 } else { 0.0 },
            frame_dir: PathBuf::from(id),
            n_frames: n,
            fps_extracted: 2.0,
        }
    }

    fn all(m: &DatasetManifest) -> BTreeSet<String> {
        m.subjects().clone()
    }

    #[test]
    fn single_minor_video_gets_offset_windows_after_base() {
        // 3 pain clips vs 5 no-pain clips: quota = 2 for the single pain video.
        let m = DatasetManifest::new(vec![rec("p", "s", true, 30), rec("n", "s", false, 50)]).unwrap();
        let out = extract_clips(&m, &all(&m), 10, 10).unwrap();
        let pain_starts: Vec<_> = out.clips.iter().filter(|c| c.video_id == "p").map(|c| c.start_frame).collect();
        assert_eq!(pain_starts, vec![0, 10, 20, 5, 15]);
        assert_eq!(out.count(BinaryLabel::Pain), out.count(BinaryLabel::NoPain));
        assert_eq!(out.minor_class, Some(BinaryLabel::Pain));
    }

    #[test]
    fn balanced_split_has_no_resampled_clips() {
        let m = DatasetManifest::new(vec![rec("p", "s", true, 40), rec("n", "s", false, 40)]).unwrap();
        let out = extract_clips(&m, &all(&m), 10, 10).unwrap();
        assert!(out.clips.iter().all(|c| !c.is_resampled));
        assert_eq!(out.clips.len(), 8);
    }

    #[test]
    fn short_video_contributes_nothing_and_split_filters() {
        let m = DatasetManifest::new(vec![
            rec("p", "a", true, 7),
            rec("n", "a", false, 20),
            rec("x", "b", true, 100),
        ])
        .unwrap();
        let split: BTreeSet<String> = ["a".to_string()].into();
        let out = extract_clips(&m, &split, 10, 10).unwrap();
        assert!(out.clips.iter().all(|c| c.video_id == "n"));
        assert_eq!(out.clips.len(), 2);
    }

    #[test]
    fn quota_beyond_available_windows_emits_what_exists() {
        // 1 pain clip vs 10 no-pain: quota 9, but the 12-frame video has no offset window.
        let m = DatasetManifest::new(vec![rec("p", "s", true, 12), rec("n", "s", false, 100)]).unwrap();
        let out = extract_clips(&m, &all(&m), 10, 10).unwrap();
        assert_eq!(out.plan.unwrap().per_video_quota, 9);
        assert_eq!(out.count(BinaryLabel::Pain), 1);
    }

    #[test]
    fn clip_csv_round_trip() {
        let m = DatasetManifest::new(vec![rec("p", "s", true, 30), rec("n", "s", false, 50)]).unwrap();
        let clips = extract_clips(&m, &all(&m), 10, 10).unwrap().clips;
        let mut buf = Vec::new();
        write_clips(&clips, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("video_id,start_frame,length,label,is_resampled\n"));
        assert_eq!(read_clips(buf.as_slice(), "mem").unwrap(), clips);
    }

    #[test]
    fn load_clip_shape_follows_frames() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..12 {
            let mut f = frames::RgbFrame::new(32, 32);
            f.set_pixel(0, 0, [i as u8, 0, 255]);
            frames::write_rgb_png(&frames::frame_path(dir.path(), i), &f).unwrap();
        }
        let clip = Clip {
            video_id: "v".into(),
            start_frame: 2,
            length: 10,
            label: BinaryLabel::Pain,
            is_resampled: false,
        };
        let a = load_clip_frames(dir.path(), &clip, Stream::Rgb, 3).unwrap();
        assert_eq!(a.shape(), &[10, 32, 32, 3]);
        assert_eq!(a[[0, 0, 0, 0]], 2.0);
        assert_eq!(a[[9, 0, 0, 2]], 255.0);

        let late = Clip { start_frame: 5, ..clip };
        let err = load_clip_frames(dir.path(), &late, Stream::Rgb, 3).unwrap_err();
        assert!(err.to_string().contains("000012.png"), "{err}");
    }
}
