//! Dense optical flow (Horn-Schunck) and its 8-bit image encoding.
//!
//! Flow images hold `u`, `v` and the flow magnitude in the R, G and B
//! channels. Displacements are clipped to `±clip_range` and mapped affinely
//! onto 0..=255, so zero motion is stored as 128. The magnitude channel maps
//! `[0, clip_range]` onto 0..=255. With `channels = 2` the blue channel is
//! written as zero and ignored by the loader.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{self, RgbFrame};
use crate::manifest::resolve_frame_dir;
use crate::types::{DatasetManifest, VideoRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    /// Horizontal displacement, pixels per frame, row-major.
    pub u: Vec<f64>,
    /// Vertical displacement, pixels per frame, row-major.
    pub v: Vec<f64>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HornSchunckParams {
    /// Smoothness weight (alpha), in intensity units of the 0-255 scale.
    pub regularization: f64,
    pub iterations: usize,
}

impl Default for HornSchunckParams {
    fn default() -> Self {
        HornSchunckParams {
            regularization: 10.0,
            iterations: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowEncoding {
    pub clip_range: f64,
    pub channels: usize,
}

impl FlowEncoding {
    pub fn new(clip_range: f64, channels: usize) -> Result<Self> {
        if !(clip_range.is_finite() && clip_range > 0.0) {
            return Err(Error::Config(format!("clip_range must be positive, got {clip_range}")));
        }
        if !(channels == 2 || channels == 3) {
            return Err(Error::Config(format!("flow channels must be 2 or 3, got {channels}")));
        }
        Ok(FlowEncoding { clip_range, channels })
    }

    /// 8 px/frame at 224 pixels width, scaled with the frame width.
    pub fn for_frame_width(width: usize) -> Self {
        FlowEncoding {
            clip_range: 8.0 * width as f64 / 224.0,
            channels: 3,
        }
    }
}

/// Horn-Schunck flow between two RGB frames (converted to luma).
pub fn estimate_flow(frame_t: &RgbFrame, frame_t1: &RgbFrame, params: &HornSchunckParams) -> Result<FlowField> {
    if frame_t.width != frame_t1.width || frame_t.height != frame_t1.height {
        return Err(Error::Shape(format!(
            "flow frames differ in size: {}x{} vs {}x{}",
            frame_t.width, frame_t.height, frame_t1.width, frame_t1.height
        )));
    }
    estimate_flow_gray(
        &frame_t.to_gray(),
        &frame_t1.to_gray(),
        frame_t.width,
        frame_t.height,
        params,
    )
}

/// Horn-Schunck on row-major grayscale images.
///
/// Spatial derivatives are central differences of the two-frame average,
/// the temporal derivative is the frame difference, and borders replicate.
/// Runs a fixed number of Jacobi sweeps from a zero field.
pub fn estimate_flow_gray(
    g0: &[f64],
    g1: &[f64],
    width: usize,
    height: usize,
    params: &HornSchunckParams,
) -> Result<FlowField> {
    let n = width * height;
    if g0.len() != n || g1.len() != n {
        return Err(Error::Shape(format!(
            "grayscale buffers have {} and {} pixels, expected {n}",
            g0.len(),
            g1.len()
        )));
    }
    if n == 0 {
        return Ok(FlowField::zeros(width, height));
    }
    let at = |x: isize, y: isize| -> usize {
        let x = x.clamp(0, width as isize - 1) as usize;
        let y = y.clamp(0, height as isize - 1) as usize;
        y * width + x
    };
    let avg: Vec<f64> = g0.iter().zip(g1).map(|(a, b)| 0.5 * (a + b)).collect();
    let mut ix = vec![0.0; n];
    let mut iy = vec![0.0; n];
    let mut it = vec![0.0; n];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let i = at(x, y);
            ix[i] = 0.5 * (avg[at(x + 1, y)] - avg[at(x - 1, y)]);
            iy[i] = 0.5 * (avg[at(x, y + 1)] - avg[at(x, y - 1)]);
            it[i] = g1[i] - g0[i];
        }
    }
    let alpha2 = params.regularization * params.regularization;
    let denom: Vec<f64> = ix.iter().zip(&iy).map(|(a, b)| alpha2 + a * a + b * b).collect();

    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut u_bar = vec![0.0; n];
    let mut v_bar = vec![0.0; n];
    for _ in 0..params.iterations {
        neighbour_average(&u, width, height, &mut u_bar);
        neighbour_average(&v, width, height, &mut v_bar);
        for i in 0..n {
            if denom[i] == 0.0 {
                u[i] = u_bar[i];
                v[i] = v_bar[i];
                continue;
            }
            let t = (ix[i] * u_bar[i] + iy[i] * v_bar[i] + it[i]) / denom[i];
            u[i] = u_bar[i] - ix[i] * t;
            v[i] = v_bar[i] - iy[i] * t;
        }
    }
    Ok(FlowField { width, height, u, v })
}

/// Horn-Schunck neighbourhood mean: 1/6 for edge neighbours, 1/12 for corners.
fn neighbour_average(src: &[f64], width: usize, height: usize, dst: &mut [f64]) {
    let at = |x: isize, y: isize| -> f64 {
        let x = x.clamp(0, width as isize - 1) as usize;
        let y = y.clamp(0, height as isize - 1) as usize;
        src[y * width + x]
    };
    for y in 0..height as isize {
        for x in 0..width as isize {
            let edges = at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1);
            let corners = at(x - 1, y - 1) + at(x + 1, y - 1) + at(x - 1, y + 1) + at(x + 1, y + 1);
            dst[y as usize * width + x as usize] = edges / 6.0 + corners / 12.0;
        }
    }
}

/// Maps a displacement onto 0..=255 (0 -> 128, +clip -> 255, -clip -> 0).
pub fn quantize_displacement(d: f64, clip_range: f64) -> u8 {
    let d = d.clamp(-clip_range, clip_range);
    ((d / clip_range + 1.0) * 0.5 * 255.0).round() as u8
}

pub fn dequantize_displacement(q: u8, clip_range: f64) -> f64 {
    (q as f64 / 255.0 * 2.0 - 1.0) * clip_range
}

pub fn quantize_magnitude(m: f64, clip_range: f64) -> u8 {
    (m.clamp(0.0, clip_range) / clip_range * 255.0).round() as u8
}

pub fn encode_flow(field: &FlowField, enc: &FlowEncoding) -> RgbFrame {
    let mut out = RgbFrame::new(field.width, field.height);
    for (i, px) in out.data.chunks_exact_mut(3).enumerate() {
        let (u, v) = (field.u[i], field.v[i]);
        px[0] = quantize_displacement(u, enc.clip_range);
        px[1] = quantize_displacement(v, enc.clip_range);
        px[2] = if enc.channels == 3 {
            quantize_magnitude(u.hypot(v), enc.clip_range)
        } else {
            0
        };
    }
    out
}

/// Recovers displacements (pixels/frame) from an encoded flow image.
pub fn decode_flow(img: &RgbFrame, enc: &FlowEncoding) -> FlowField {
    let mut f = FlowField::zeros(img.width, img.height);
    for (i, px) in img.data.chunks_exact(3).enumerate() {
        f.u[i] = dequantize_displacement(px[0], enc.clip_range);
        f.v[i] = dequantize_displacement(px[1], enc.clip_range);
    }
    f
}

/// Model-input scaling of a stored flow value: 0..=255 onto [0, 1].
pub fn unit_scale(q: u8) -> f64 {
    q as f64 / 255.0
}

/// Written next to the flow images as `flow/params.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSidecar {
    pub algorithm: String,
    pub iterations: usize,
    pub regularization: f64,
    pub clip_range: f64,
    pub channels: usize,
}

pub const SIDECAR_NAME: &str = "params.json";

/// Computes flow images for every video: image `i` holds the flow from frame
/// `i` to `i + 1`; the last frame repeats the previous flow so both streams
/// have `n_frames` images. Single-frame videos get a zero field.
pub fn precompute_flow_stream(
    manifest: &DatasetManifest,
    root: &Path,
    params: &HornSchunckParams,
    enc: Option<FlowEncoding>,
) -> Result<usize> {
    let counts: Vec<usize> = manifest
        .records()
        .par_iter()
        .map(|record| flow_for_video(record, root, params, enc))
        .collect::<Result<_>>()?;
    Ok(counts.iter().sum())
}

fn flow_for_video(record: &VideoRecord, root: &Path, params: &HornSchunckParams, enc: Option<FlowEncoding>) -> Result<usize> {
    let mut written = 0;
    let dir = resolve_frame_dir(root, record);
    let mut prev = frames::read_rgb(&frames::frame_path(&dir, 0))?;
    let enc = enc.unwrap_or_else(|| FlowEncoding::for_frame_width(prev.width));
    let mut last: Option<RgbFrame> = None;
    if record.n_frames == 1 {
        last = Some(encode_flow(&FlowField::zeros(prev.width, prev.height), &enc));
    }
    for i in 0..record.n_frames {
        if i + 1 < record.n_frames {
            let next = frames::read_rgb(&frames::frame_path(&dir, i + 1))?;
            let field = estimate_flow(&prev, &next, params)?;
            last = Some(encode_flow(&field, &enc));
            prev = next;
        }
        let img = last.as_ref().expect("at least one flow field");
        frames::write_rgb_png(&frames::flow_path(&dir, i), img)?;
        written += 1;
    }
    let sidecar = FlowSidecar {
        algorithm: "horn_schunck".into(),
        iterations: params.iterations,
        regularization: params.regularization,
        clip_range: enc.clip_range,
        channels: enc.channels,
    };
    let path = dir.join(frames::FLOW_SUBDIR).join(SIDECAR_NAME);
    fs::write(&path, serde_json::to_string_pretty(&sidecar)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(written)
}

pub fn read_sidecar(frame_dir: &Path) -> Result<FlowSidecar> {
    let path = frame_dir.join(frames::FLOW_SUBDIR).join(SIDECAR_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pattern(w: usize, h: usize, shift: usize) -> Vec<f64> {
        let mut g = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let xs = (x + w - shift) % w;
                let fx = 2.0 * std::f64::consts::PI * xs as f64 / w as f64;
                let fy = 2.0 * std::f64::consts::PI * y as f64 / h as f64;
                g[y * w + x] = 128.0 + 50.0 * (2.0 * fx).sin() + 30.0 * (3.0 * fx).cos() + 40.0 * (2.0 * fy).sin();
            }
        }
        g
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let g = pattern(32, 32, 0);
        let f = estimate_flow_gray(&g, &g, 32, 32, &HornSchunckParams::default()).unwrap();
        assert!(f.u.iter().chain(&f.v).all(|d| d.abs() < 1e-6));
    }

    #[test]
    fn constant_frames_give_zero_flow() {
        let a = vec![90.0; 64];
        let b = vec![90.0; 64];
        let f = estimate_flow_gray(&a, &b, 8, 8, &HornSchunckParams::default()).unwrap();
        assert!(f.u.iter().chain(&f.v).all(|d| *d == 0.0));
    }

    #[test]
    fn one_pixel_translation_recovered() {
        let (w, h) = (64, 64);
        let g0 = pattern(w, h, 0);
        let g1 = pattern(w, h, 1);
        let params = HornSchunckParams {
            regularization: 10.0,
            iterations: 300,
        };
        let f = estimate_flow_gray(&g0, &g1, w, h, &params).unwrap();
        let (mut su, mut sv, mut n) = (0.0, 0.0, 0.0);
        for y in 8..h - 8 {
            for x in 8..w - 8 {
                su += f.u[y * w + x];
                sv += f.v[y * w + x];
                n += 1.0;
            }
        }
        let (mu, mv) = (su / n, sv / n);
        assert!((mu - 1.0).abs() < 0.3, "mean u = {mu}");
        assert!(mv.abs() < 0.1, "mean v = {mv}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = RgbFrame::new(4, 4);
        let b = RgbFrame::new(5, 4);
        assert!(matches!(
            estimate_flow(&a, &b, &HornSchunckParams::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn encoding_endpoints() {
        assert_eq!(quantize_displacement(0.0, 8.0), 128);
        assert!((unit_scale(128) - 0.50196).abs() < 1e-4);
        assert_eq!(quantize_displacement(8.0, 8.0), 255);
        assert_eq!(unit_scale(255), 1.0);
        assert_eq!(quantize_displacement(-100.0, 8.0), 0);
        assert!(FlowEncoding::new(0.0, 3).is_err());
        assert!(FlowEncoding::new(1.0, 4).is_err());
        assert!((FlowEncoding::for_frame_width(224).clip_range - 8.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn quantisation_error_bounded(d in -20.0f64..20.0, clip in 0.5f64..16.0) {
            let back = dequantize_displacement(quantize_displacement(d, clip), clip);
            let clipped = d.clamp(-clip, clip);
            prop_assert!((back - clipped).abs() <= clip / 255.0 + 1e-12);
        }

        #[test]
        fn quantisation_is_monotone(a in -10.0f64..10.0, b in -10.0f64..10.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_displacement(lo, 4.0) <= quantize_displacement(hi, 4.0));
        }
    }
}
