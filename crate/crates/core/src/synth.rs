//! Synthetic two-domain video generator.
//!
//! Every subject has a static random-phase sinusoidal texture. In positive
//! videos a square patch of that texture oscillates in phase during burst
//! windows; a single frame of the patch has the same value distribution as
//! the background, so the signal is only visible across frames.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{self, RgbFrame};
use crate::manifest::{resolve_frame_dir, save_manifest};
use crate::training::derive_seed;
use crate::types::{Clip, DatasetManifest, Phase, VideoRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSpec {
    pub patch_size: usize,
    /// Oscillation period in frames.
    pub period: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub domain_id: String,
    pub subject_prefix: String,
    pub n_subjects: usize,
    /// Alternating positive / negative, starting with positive.
    pub videos_per_subject: usize,
    pub frames_per_video: usize,
    pub frame_hw: (usize, usize),
    /// Window length of the burst grid; bursts cover whole windows.
    pub clip_length: usize,
    pub burst_fraction: f64,
    pub signal: SignalSpec,
    /// Amplitude of the texture, and so of the oscillating patch.
    pub contrast: f64,
    pub noise_std: f64,
    pub brightness: f64,
    pub tint: [f64; 3],
    /// Per-subject brightness offsets are uniform in `±subject_jitter`.
    pub subject_jitter: f64,
    pub fps: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Clean domain where positive videos show the signal throughout.
    pub fn dense(seed: u64) -> Self {
        SynthConfig {
            domain_id: "SYNTH_DENSE".into(),
            subject_prefix: "d".into(),
            n_subjects: 6,
            videos_per_subject: 2,
            frames_per_video: 200,
            frame_hw: (32, 32),
            clip_length: 10,
            burst_fraction: 1.0,
            signal: SignalSpec {
                patch_size: 10,
                period: 4.0,
            },
            contrast: 40.0,
            noise_std: 4.0,
            brightness: 120.0,
            tint: [0.0, 0.0, 0.0],
            subject_jitter: 15.0,
            fps: 2.0,
            seed,
        }
    }

    /// Shifted, noisier domain where the signal appears in few windows.
    pub fn sparse(seed: u64) -> Self {
        SynthConfig {
            domain_id: "SYNTH_SPARSE".into(),
            subject_prefix: "s".into(),
            n_subjects: 7,
            burst_fraction: 0.15,
            noise_std: 6.0,
            brightness: 95.0,
            tint: [12.0, -4.0, -10.0],
            ..SynthConfig::dense(seed)
        }
    }

    pub fn n_clips(&self) -> usize {
        self.frames_per_video / self.clip_length
    }

    pub fn n_burst_windows(&self) -> usize {
        (self.burst_fraction * self.n_clips() as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.frame_hw;
        if self.n_subjects == 0 || self.videos_per_subject == 0 || self.frames_per_video == 0 || h == 0 || w == 0 || self.clip_length == 0 {
            return Err(Error::Config("synthetic counts and sizes must be positive".into()));
        }
        if self.signal.patch_size == 0 || self.signal.patch_size > h || self.signal.patch_size > w {
            return Err(Error::Config(format!(
                "patch of {} px does not fit a {w}x{h} frame",
                self.signal.patch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.burst_fraction) {
            return Err(Error::Config("burst_fraction must be in [0, 1]".into()));
        }
        if !(self.signal.period > 0.0) || !(self.fps > 0.0) || self.noise_std < 0.0 || self.contrast < 0.0 {
            return Err(Error::Config("period and fps must be positive, noise and contrast non-negative".into()));
        }
        Ok(())
    }
}

/// Ground truth of one generated video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoTruth {
    pub positive: bool,
    /// Top-left corner `(x, y)` of the patch.
    pub patch_origin: (usize, usize),
    pub patch_size: usize,
    /// Start frames of the burst windows.
    pub burst_starts: Vec<usize>,
}

pub const TRUTH_FILE: &str = "synth_truth.json";
pub const MANIFEST_FILE: &str = "manifest.csv";

struct SubjectStyle {
    phase: Vec<f64>,
    brightness: f64,
}

fn subject_style(cfg: &SynthConfig, subject: usize) -> SubjectStyle {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, subject as u64]));
    let (h, w) = cfg.frame_hw;
    SubjectStyle {
        phase: (0..h * w).map(|_| rng.random_range(0.0..2.0 * PI)).collect(),
        brightness: cfg.brightness + rng.random_range(-1.0..=1.0) * cfg.subject_jitter,
    }
}

fn render_video(cfg: &SynthConfig, style: &SubjectStyle, subject: usize, video: usize, dir: &Path) -> Result<VideoTruth> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2, subject as u64, video as u64]));
    let (h, w) = cfg.frame_hw;
    let p = cfg.signal.patch_size;
    let positive = video % 2 == 0;
    let origin = (rng.random_range(0..=w - p), rng.random_range(0..=h - p));
    let mut windows: Vec<usize> = (0..cfg.n_clips()).collect();
    let n_burst = if positive { cfg.n_burst_windows() } else { 0 };
    // Partial Fisher-Yates: the first n_burst entries are a uniform sample.
    for i in 0..n_burst {
        let j = rng.random_range(i..windows.len());
        windows.swap(i, j);
    }
    let mut burst_starts: Vec<usize> = windows[..n_burst].iter().map(|k| k * cfg.clip_length).collect();
    burst_starts.sort_unstable();
    let mut signal = vec![false; cfg.frames_per_video];
    for &s in &burst_starts {
        for f in signal.iter_mut().skip(s).take(cfg.clip_length) {
            *f = true;
        }
    }
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-12)).expect("valid normal");
    let in_patch = |x: usize, y: usize| x >= origin.0 && x < origin.0 + p && y >= origin.1 && y < origin.1 + p;
    for (t, &on) in signal.iter().enumerate() {
        let shift = if on { 2.0 * PI * t as f64 / cfg.signal.period } else { 0.0 };
        let mut frame = RgbFrame::new(w, h);
        let mut mask = vec![0u8; w * h];
        for y in 0..h {
            for x in 0..w {
                let patch = on && in_patch(x, y);
                let phase = style.phase[y * w + x] + if patch { shift } else { 0.0 };
                let base = style.brightness + cfg.contrast * phase.sin();
                let mut px = [0u8; 3];
                for (c, v) in px.iter_mut().enumerate() {
                    let n = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    *v = (base + cfg.tint[c] + n).round().clamp(0.0, 255.0) as u8;
                }
                frame.set_pixel(x, y, px);
                if patch {
                    mask[y * w + x] = 255;
                }
            }
        }
        frames::write_rgb_png(&frames::frame_path(dir, t), &frame)?;
        frames::write_gray_png(&frames::mask_path(dir, t), w, h, &mask)?;
    }
    Ok(VideoTruth {
        positive,
        patch_origin: origin,
        patch_size: p,
        burst_starts,
    })
}

/// Writes frames, burst masks, `manifest.csv` and `synth_truth.json` under
/// `out_dir` and returns the manifest. Frame directories are relative to
/// `out_dir`.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for s in 0..cfg.n_subjects {
        for v in 0..cfg.videos_per_subject {
            jobs.push((s, v));
        }
    }
    let styles: Vec<SubjectStyle> = (0..cfg.n_subjects).map(|s| subject_style(cfg, s)).collect();
    let video_id = |s: usize, v: usize| format!("{}_{}{s:02}_v{v:02}", cfg.domain_id.to_lowercase(), cfg.subject_prefix);
    let truths: Vec<VideoTruth> = jobs
        .par_iter()
        .map(|&(s, v)| render_video(cfg, &styles[s], s, v, &out_dir.join(video_id(s, v))))
        .collect::<Result<_>>()?;
    let mut records = Vec::new();
    let mut truth_map = BTreeMap::new();
    for (&(s, v), truth) in jobs.iter().zip(truths) {
        let id = video_id(s, v);
        records.push(VideoRecord {
            video_id: id.clone(),
            subject_id: format!("{}{s:02}", cfg.subject_prefix),
            domain_id: cfg.domain_id.clone(),
            phase: if truth.positive { Phase::PostInduction } else { Phase::Baseline },
            raw_score: if truth.positive { 3.0 } else { 0.0 },
            frame_dir: PathBuf::from(&id),
            n_frames: cfg.frames_per_video,
            fps_extracted: cfg.fps,
        });
        truth_map.insert(id, truth);
    }
    let manifest = DatasetManifest::new(records)?;
    save_manifest(&manifest, out_dir.join(MANIFEST_FILE))?;
    let truth_path = out_dir.join(TRUTH_FILE);
    std::fs::write(&truth_path, serde_json::to_string_pretty(&truth_map)? + "\n").map_err(|e| Error::io(&truth_path, e))?;
    Ok(manifest)
}

pub fn load_truth(dir: &Path) -> Result<BTreeMap<String, VideoTruth>> {
    let path = dir.join(TRUTH_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Per-frame signal presence of a video, read from its masks.
pub fn signal_frames(root: &Path, record: &VideoRecord) -> Result<Vec<bool>> {
    let dir = resolve_frame_dir(root, record);
    (0..record.n_frames)
        .map(|i| Ok(frames::read_gray(&frames::mask_path(&dir, i))?.2.iter().any(|&v| v > 0)))
        .collect()
}

/// True signal presence per clip: at least half of the clip's frames carry
/// the signal.
pub fn oracle_clip_labels(root: &Path, manifest: &DatasetManifest, clips: &[Clip]) -> Result<Vec<bool>> {
    let mut cache: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    clips
        .iter()
        .map(|c| {
            if !cache.contains_key(&c.video_id) {
                let rec = manifest
                    .get(&c.video_id)
                    .ok_or_else(|| Error::Validation(format!("video {} not in manifest", c.video_id)))?;
                cache.insert(c.video_id.clone(), signal_frames(root, rec)?);
            }
            let frames = &cache[&c.video_id];
            if c.end_frame() > frames.len() {
                return Err(Error::Validation(format!("clip {} exceeds its video", c.clip_id())));
            }
            let n = frames[c.start_frame..c.end_frame()].iter().filter(|&&b| b).count();
            Ok(2 * n >= c.length)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::extract_clips;

    fn small(seed: u64, rho: f64) -> SynthConfig {
        SynthConfig {
            n_subjects: 2,
            frames_per_video: 200,
            frame_hw: (16, 16),
            signal: SignalSpec {
                patch_size: 6,
                period: 4.0,
            },
            burst_fraction: rho,
            ..SynthConfig::dense(seed)
        }
    }

    #[test]
    fn burst_counts_follow_rounding() {
        assert_eq!(SynthConfig::sparse(0).n_burst_windows(), 3);
        let c = SynthConfig {
            frames_per_video: 30,
            ..SynthConfig::dense(0)
        };
        assert_eq!(c.n_burst_windows(), 3);
    }

    #[test]
    fn oracle_labels_match_construction() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(3, 0.15);
        let m = generate_dataset(&cfg, dir.path()).unwrap();
        let clips = extract_clips(&m, m.subjects(), 10, 10).unwrap().clips;
        let base: Vec<Clip> = clips.into_iter().filter(|c| !c.is_resampled).collect();
        let oracle = oracle_clip_labels(dir.path(), &m, &base).unwrap();
        let truth = load_truth(dir.path()).unwrap();
        for (vid, t) in &truth {
            let n: usize = base.iter().zip(&oracle).filter(|(c, o)| &c.video_id == vid && **o).count();
            if t.positive {
                assert_eq!(n, 3);
            } else {
                assert_eq!(n, 0);
            }
        }
        let dense_dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small(3, 1.0), dense_dir.path()).unwrap();
        let clips = extract_clips(&m, m.subjects(), 10, 10).unwrap().clips;
        let oracle = oracle_clip_labels(dense_dir.path(), &m, &clips).unwrap();
        for (c, o) in clips.iter().zip(oracle) {
            assert_eq!(o, c.label.is_pain());
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            frames_per_video: 20,
            ..small(9, 0.5)
        };
        generate_dataset(&cfg, a.path()).unwrap();
        generate_dataset(&cfg, b.path()).unwrap();
        for entry in walk(a.path()) {
            let rel = entry.strip_prefix(a.path()).unwrap();
            assert_eq!(std::fs::read(&entry).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{rel:?}");
        }
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out.sort();
        out
    }

    #[test]
    fn oversized_patch_rejected() {
        let cfg = SynthConfig {
            signal: SignalSpec {
                patch_size: 40,
                period: 4.0,
            },
            ..SynthConfig::dense(0)
        };
        assert!(matches!(generate_dataset(&cfg, Path::new("/nonexistent")), Err(Error::Config(_))));
    }

    #[test]
    fn patch_pixels_share_background_statistics_in_single_frames() {
        // Noise-free frames: the patch values are sin of uniformly random
        // phases, just like the background.
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            noise_std: 0.0,
            frame_hw: (64, 64),
            signal: SignalSpec {
                patch_size: 32,
                period: 4.0,
            },
            n_subjects: 1,
            videos_per_subject: 1,
            frames_per_video: 10,
            ..SynthConfig::dense(5)
        };
        generate_dataset(&cfg, dir.path()).unwrap();
        let truth = load_truth(dir.path()).unwrap();
        let (vid, t) = truth.iter().next().unwrap();
        let f = frames::read_rgb(&frames::frame_path(&dir.path().join(vid), 1)).unwrap();
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for y in 0..64 {
            for x in 0..64 {
                let v = f.pixel(x, y)[0] as f64;
                let (ox, oy) = t.patch_origin;
                if x >= ox && x < ox + 32 && y >= oy && y < oy + 32 {
                    inside.push(v);
                } else {
                    outside.push(v);
                }
            }
        }
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
        };
        let (mi, si) = stats(&inside);
        let (mo, so) = stats(&outside);
        assert!((mi - mo).abs() < 3.0, "means {mi} vs {mo}");
        assert!((si - so).abs() < 3.0, "stds {si} vs {so}");
    }
}
