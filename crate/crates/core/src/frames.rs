//! Frame file layout and 8-bit image I/O.
//!
//! ```text
//! <frame_dir>/<index:06>.png        RGB frames (".jpg" also accepted on read)
//! <frame_dir>/flow/<index:06>.png   encoded optical flow
//! <frame_dir>/masks/<index:06>.png  synthetic ground-truth signal masks
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};

pub const FLOW_SUBDIR: &str = "flow";
pub const MASK_SUBDIR: &str = "masks";

pub fn frame_path(frame_dir: &Path, index: usize) -> PathBuf {
    frame_dir.join(format!("{index:06}.png"))
}

pub fn flow_path(frame_dir: &Path, index: usize) -> PathBuf {
    frame_dir.join(FLOW_SUBDIR).join(format!("{index:06}.png"))
}

pub fn mask_path(frame_dir: &Path, index: usize) -> PathBuf {
    frame_dir.join(MASK_SUBDIR).join(format!("{index:06}.png"))
}

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbFrame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbFrame {
    pub fn new(width: usize, height: usize) -> Self {
        RgbFrame {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, px: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    /// ITU-R 601 luma in [0, 255].
    pub fn to_gray(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }
}

/// Reads an RGB frame; a missing `.png` falls back to `.jpg` with the same stem.
pub fn read_rgb(path: &Path) -> Result<RgbFrame> {
    let path = if !path.exists() && path.extension().is_some_and(|e| e == "png") {
        let jpg = path.with_extension("jpg");
        if jpg.exists() {
            jpg
        } else {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "frame file not found"),
            ));
        }
    } else {
        path.to_path_buf()
    };
    let img = image::open(&path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(&path, io),
        other => Error::image(&path, other),
    })?;
    let img = img.to_rgb8();
    Ok(RgbFrame {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw(),
    })
}

pub fn write_rgb_png(path: &Path, frame: &RgbFrame) -> Result<()> {
    ensure_parent(path)?;
    let img: RgbImage =
        ImageBuffer::<Rgb<u8>, _>::from_raw(frame.width as u32, frame.height as u32, frame.data.clone())
            .ok_or_else(|| Error::Shape(format!("{}: buffer does not match size", path.display())))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}

pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::image(path, other),
    })?;
    let img = img.to_luma8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let img = GrayImage::from_raw(width as u32, height as u32, data.to_vec())
        .ok_or_else(|| Error::Shape(format!("{}: buffer does not match size", path.display())))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}

/// A video given as a directory of image files at `source_fps`, sorted by
/// file name.
#[derive(Debug, Clone, PartialEq, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceVideo {
    pub video_id: String,
    pub subject_id: String,
    pub domain_id: String,
    pub phase: crate::types::Phase,
    pub raw_score: f64,
    pub source_dir: PathBuf,
    pub source_fps: f64,
}

pub fn read_source_listing<R: std::io::Read>(reader: R, source: &str) -> Result<Vec<SourceVideo>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize::<SourceVideo>()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::Parse {
                path: source.into(),
                line: i + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Source indices kept when resampling `n_source` frames from `source_fps`
/// to `target_fps`: frame `k` of the output is the source frame at or just
/// before time `k / target_fps`.
pub fn subsample_indices(n_source: usize, source_fps: f64, target_fps: f64) -> Result<Vec<usize>> {
    if !(source_fps > 0.0 && target_fps > 0.0) {
        return Err(Error::Validation("frame rates must be positive".into()));
    }
    let duration = n_source as f64 / source_fps;
    let n_out = (duration * target_fps - 1e-9).ceil().max(0.0) as usize;
    Ok((0..n_out)
        .map(|k| ((k as f64 * source_fps / target_fps + 1e-9).floor() as usize).min(n_source - 1))
        .collect())
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Writes the subsampled, resized frames of `video` to
/// `<out_root>/<video_id>/` and returns its manifest record (frame
/// directory relative to `out_root`).
pub fn prepare_video_frames(video: &SourceVideo, out_root: &Path, target_fps: f64, hw: (usize, usize)) -> Result<crate::types::VideoRecord> {
    let mut files: Vec<PathBuf> = fs::read_dir(&video.source_dir)
        .map_err(|e| Error::io(&video.source_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Validation(format!(
            "{}: no image files for video {}",
            video.source_dir.display(),
            video.video_id
        )));
    }
    let keep = subsample_indices(files.len(), video.source_fps, target_fps)?;
    let dir = out_root.join(&video.video_id);
    for (k, &i) in keep.iter().enumerate() {
        let src = read_rgb(&files[i])?;
        let img = RgbImage::from_raw(src.width as u32, src.height as u32, src.data).expect("decoded buffer matches size");
        let resized = image::imageops::resize(&img, hw.1 as u32, hw.0 as u32, image::imageops::FilterType::Triangle);
        let frame = RgbFrame {
            width: hw.1,
            height: hw.0,
            data: resized.into_raw(),
        };
        write_rgb_png(&frame_path(&dir, k), &frame)?;
    }
    let record = crate::types::VideoRecord {
        video_id: video.video_id.clone(),
        subject_id: video.subject_id.clone(),
        domain_id: video.domain_id.clone(),
        phase: video.phase,
        raw_score: video.raw_score,
        frame_dir: PathBuf::from(&video.video_id),
        n_frames: keep.len(),
        fps_extracted: target_fps,
    };
    record.validate()?;
    Ok(record)
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_zero_padded() {
        let p = frame_path(Path::new("v1"), 7);
        assert_eq!(p, PathBuf::from("v1/000007.png"));
        assert_eq!(flow_path(Path::new("v1"), 12), PathBuf::from("v1/flow/000012.png"));
    }

    #[test]
    fn png_round_trip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = RgbFrame::new(4, 3);
        f.set_pixel(1, 2, [10, 20, 30]);
        let p = frame_path(dir.path(), 0);
        write_rgb_png(&p, &f).unwrap();
        assert_eq!(read_rgb(&p).unwrap(), f);

        let missing = frame_path(dir.path(), 1);
        let err = read_rgb(&missing).unwrap_err();
        assert!(err.to_string().contains("000001.png"), "{err}");
    }

    #[test]
    fn thirty_fps_to_two_keeps_every_fifteenth() {
        assert_eq!(subsample_indices(60, 30.0, 2.0).unwrap(), vec![0, 15, 30, 45]);
        assert_eq!(subsample_indices(61, 30.0, 2.0).unwrap(), vec![0, 15, 30, 45, 60]);
        assert_eq!(subsample_indices(3, 1.0, 2.0).unwrap(), vec![0, 0, 1, 1, 2, 2]);
        assert!(subsample_indices(3, 0.0, 2.0).is_err());
    }

    #[test]
    fn prepare_resizes_and_subsamples() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("raw");
        for i in 0..8 {
            let mut f = RgbFrame::new(8, 6);
            f.data.fill(i as u8 * 10);
            write_rgb_png(&src.join(format!("img_{i:03}.png")), &f).unwrap();
        }
        let video = SourceVideo {
            video_id: "v1".into(),
            subject_id: "s1".into(),
            domain_id: "D".into(),
            phase: crate::types::Phase::Baseline,
            raw_score: 0.0,
            source_dir: src,
            source_fps: 4.0,
        };
        let out = dir.path().join("frames");
        let rec = prepare_video_frames(&video, &out, 2.0, (4, 4)).unwrap();
        assert_eq!(rec.n_frames, 4);
        let f = read_rgb(&frame_path(&out.join("v1"), 3)).unwrap();
        assert_eq!((f.width, f.height), (4, 4));
        assert!(f.data.iter().all(|&v| v == 60));
    }
}
