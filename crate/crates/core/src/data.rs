//! Clip loading, standardisation and batch assembly.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{self, RgbFrame};
use crate::manifest::resolve_frame_dir;
use crate::model::ClipInput;
use crate::nn::Fmap;
use crate::sampling::Stream;
use crate::types::{Clip, DatasetManifest};

pub const STD_FLOOR: f64 = 1e-6;

/// Per-channel RGB mean and standard deviation on the 0..255 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub rgb_mean: Vec<f64>,
    pub rgb_std: Vec<f64>,
}

impl NormalizationStats {
    pub fn validate(&self) -> Result<()> {
        if self.rgb_mean.len() != self.rgb_std.len() || self.rgb_mean.is_empty() {
            return Err(Error::Validation("normalization mean and std lengths differ".into()));
        }
        if self.rgb_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Validation("normalization std must be positive".into()));
        }
        Ok(())
    }

    pub fn identity(channels: usize) -> Self {
        NormalizationStats {
            rgb_mean: vec![0.0; channels],
            rgb_std: vec![1.0; channels],
        }
    }
}

type FrameKey = (String, Stream);

/// Reads frames for the videos of a manifest, caching decoded 8-bit images.
pub struct ClipSource {
    frame_dirs: HashMap<String, PathBuf>,
    n_frames: HashMap<String, usize>,
    flow_channels: usize,
    cache: Mutex<HashMap<FrameKey, Vec<Option<Arc<RgbFrame>>>>>,
}

impl ClipSource {
    pub fn new(manifest: &DatasetManifest, root: &Path, flow_channels: usize) -> Result<Self> {
        if !(1..=3).contains(&flow_channels) {
            return Err(Error::Config(format!("flow_channels must be 1..=3, got {flow_channels}")));
        }
        let mut frame_dirs = HashMap::new();
        let mut n_frames = HashMap::new();
        for r in manifest.records() {
            frame_dirs.insert(r.video_id.clone(), resolve_frame_dir(root, r));
            n_frames.insert(r.video_id.clone(), r.n_frames);
        }
        Ok(ClipSource {
            frame_dirs,
            n_frames,
            flow_channels,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn flow_channels(&self) -> usize {
        self.flow_channels
    }

    pub fn frame_dir(&self, video_id: &str) -> Result<&Path> {
        self.frame_dirs
            .get(video_id)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::Validation(format!("video {video_id} is not in the manifest")))
    }

    pub fn frame(&self, video_id: &str, index: usize, stream: Stream) -> Result<Arc<RgbFrame>> {
        let n = *self
            .n_frames
            .get(video_id)
            .ok_or_else(|| Error::Validation(format!("video {video_id} is not in the manifest")))?;
        if index >= n {
            return Err(Error::Validation(format!("frame {index} beyond the {n} frames of {video_id}")));
        }
        let key = (video_id.to_string(), stream);
        if let Some(f) = self.cache.lock().expect("cache lock").get(&key).and_then(|v| v[index].clone()) {
            return Ok(f);
        }
        let dir = self.frame_dir(video_id)?;
        let path = match stream {
            Stream::Rgb => frames::frame_path(dir, index),
            Stream::Flow => frames::flow_path(dir, index),
        };
        let frame = Arc::new(frames::read_rgb(&path)?);
        let mut cache = self.cache.lock().expect("cache lock");
        let slot = cache.entry(key).or_insert_with(|| vec![None; n]);
        slot[index] = Some(frame.clone());
        Ok(frame)
    }

    fn clip_frames(&self, clip: &Clip, stream: Stream) -> Result<Vec<Arc<RgbFrame>>> {
        (clip.start_frame..clip.end_frame()).map(|i| self.frame(&clip.video_id, i, stream)).collect()
    }
}

/// Per-channel mean and population std of the RGB frames of `clips`.
/// Frames shared by overlapping clips count once per clip.
pub fn compute_normalization(source: &ClipSource, clips: &[Clip]) -> Result<NormalizationStats> {
    if clips.is_empty() {
        return Err(Error::Validation("cannot compute normalization on an empty training set".into()));
    }
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut count = 0usize;
    for clip in clips {
        for f in source.clip_frames(clip, Stream::Rgb)? {
            for px in f.data.chunks_exact(3) {
                for c in 0..3 {
                    let v = px[c] as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += f.width * f.height;
        }
    }
    let n = count as f64;
    let mut mean = vec![0.0; 3];
    let mut std = vec![0.0; 3];
    for c in 0..3 {
        mean[c] = sum[c] / n;
        let var = (sq[c] / n - mean[c] * mean[c]).max(0.0);
        std[c] = var.sqrt();
        if std[c] < STD_FLOOR {
            log::warn!("RGB channel {c} is constant on the training set; std floored to {STD_FLOOR}");
            std[c] = STD_FLOOR;
        }
    }
    Ok(NormalizationStats { rgb_mean: mean, rgb_std: std })
}

/// Builds a batch. RGB is standardised with `norm`; flow is scaled to
/// `[0, 1]`. `flips[i]` mirrors every frame of clip `i` in both streams.
pub fn assemble_batch(source: &ClipSource, clips: &[&Clip], norm: &NormalizationStats, flips: &[bool]) -> Result<ClipInput> {
    norm.validate()?;
    if clips.is_empty() || flips.len() != clips.len() {
        return Err(Error::Shape("batch needs one flip flag per clip".into()));
    }
    let t_len = clips[0].length;
    if clips.iter().any(|c| c.length != t_len) {
        return Err(Error::Shape("clips in a batch must share a length".into()));
    }
    let b = clips.len();
    let fc = source.flow_channels;
    let mut rgb_frames = Vec::with_capacity(b);
    let mut flow_frames = Vec::with_capacity(b);
    for clip in clips {
        rgb_frames.push(source.clip_frames(clip, Stream::Rgb)?);
        flow_frames.push(source.clip_frames(clip, Stream::Flow)?);
    }
    let (h, w) = (rgb_frames[0][0].height, rgb_frames[0][0].width);
    for frames in rgb_frames.iter().chain(&flow_frames) {
        if frames.iter().any(|f| (f.height, f.width) != (h, w)) {
            return Err(Error::Shape(format!("frames in a batch must all be {w}x{h}")));
        }
    }
    let fill = |frames: &[Vec<Arc<RgbFrame>>], c_out: usize, map: &dyn Fn(usize, u8) -> f64| -> Vec<Fmap> {
        (0..t_len)
            .map(|t| {
                let mut m = Fmap::zeros(c_out, b, h, w);
                for (bi, clip_frames) in frames.iter().enumerate() {
                    let f = &clip_frames[t];
                    for y in 0..h {
                        for x in 0..w {
                            let sx = if flips[bi] { w - 1 - x } else { x };
                            let px = f.pixel(sx, y);
                            for c in 0..c_out {
                                let i = m.idx(c, bi, y, x);
                                m.data[i] = map(c, px[c]);
                            }
                        }
                    }
                }
                m
            })
            .collect()
    };
    let rgb = fill(&rgb_frames, 3, &|c, v| (v as f64 - norm.rgb_mean[c]) / norm.rgb_std[c]);
    let flow = fill(&flow_frames, fc, &|_, v| v as f64 / 255.0);
    Ok(ClipInput { rgb, flow })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::write_rgb_png;
    use crate::sampling::load_clip_frames;
    use crate::types::{BinaryLabel, Phase, VideoRecord};

    fn fixture(dir: &Path, value: impl Fn(usize, usize, usize) -> [u8; 3]) -> DatasetManifest {
        let rec = VideoRecord {
            video_id: "v".into(),
            subject_id: "s".into(),
            domain_id: "D".into(),
            phase: Phase::Baseline,
            raw_score: 0.0,
            frame_dir: PathBuf::from("v"),
            n_frames: 4,
            fps_extracted: 2.0,
        };
        for i in 0..4 {
            let mut f = RgbFrame::new(4, 2);
            for y in 0..2 {
                for x in 0..4 {
                    f.set_pixel(x, y, value(i, y, x));
                }
            }
            write_rgb_png(&frames::frame_path(&dir.join("v"), i), &f).unwrap();
            write_rgb_png(&frames::flow_path(&dir.join("v"), i), &f).unwrap();
        }
        DatasetManifest::new(vec![rec]).unwrap()
    }

    fn clip(start: usize) -> Clip {
        Clip {
            video_id: "v".into(),
            start_frame: start,
            length: 2,
            label: BinaryLabel::NoPain,
            is_resampled: false,
        }
    }

    #[test]
    fn standardised_training_set_has_zero_mean() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), |i, y, x| [(i * 30 + x * 7) as u8, (y * 90) as u8, (x * 50 + 3) as u8]);
        let src = ClipSource::new(&m, dir.path(), 3).unwrap();
        let clips = vec![clip(0), clip(1), clip(2)];
        let stats = compute_normalization(&src, &clips).unwrap();
        let refs: Vec<&Clip> = clips.iter().collect();
        let batch = assemble_batch(&src, &refs, &stats, &[false; 3]).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = batch.rgb.iter().flat_map(|f| f.channel(c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_frames_floor_the_std() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), |_, _, _| [128, 128, 128]);
        let src = ClipSource::new(&m, dir.path(), 3).unwrap();
        let stats = compute_normalization(&src, &[clip(0)]).unwrap();
        assert_eq!(stats.rgb_mean, vec![128.0; 3]);
        assert_eq!(stats.rgb_std, vec![STD_FLOOR; 3]);
    }

    #[test]
    fn batch_matches_clip_loader_and_flip_mirrors_both_streams() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), |i, y, x| [(i + 10 * x) as u8, (y + 40) as u8, (x * x) as u8]);
        let src = ClipSource::new(&m, dir.path(), 2).unwrap();
        let c = clip(1);
        let norm = NormalizationStats::identity(3);
        let plain = assemble_batch(&src, &[&c], &norm, &[false]).unwrap();
        let rgb = load_clip_frames(&dir.path().join("v"), &c, Stream::Rgb, 2).unwrap();
        let flow = load_clip_frames(&dir.path().join("v"), &c, Stream::Flow, 2).unwrap();
        for t in 0..2 {
            for y in 0..2 {
                for x in 0..4 {
                    for ch in 0..3 {
                        assert_eq!(plain.rgb[t].at(ch, 0, y, x), rgb[[t, y, x, ch]]);
                    }
                    for ch in 0..2 {
                        assert_eq!(plain.flow[t].at(ch, 0, y, x), flow[[t, y, x, ch]]);
                    }
                }
            }
        }
        let flipped = assemble_batch(&src, &[&c], &norm, &[true]).unwrap();
        for t in 0..2 {
            assert_eq!(flipped.rgb[t].at(0, 0, 1, 0), plain.rgb[t].at(0, 0, 1, 3));
            assert_eq!(flipped.flow[t].at(1, 0, 0, 1), plain.flow[t].at(1, 0, 0, 2));
        }
    }
}
