//! Grad-CAM saliency for the recurrent model and overlay rendering.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, RgbImage, RgbaImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::RgbFrame;
use crate::model::{ClipInput, Model};
use crate::nn::Fmap;
use crate::sampling::Stream;

/// Non-negative map of shape `height x width`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl SaliencyMap {
    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// Bilinear resize with pixel centres aligned (edge samples clamped).
    pub fn upsample(&self, height: usize, width: usize) -> SaliencyMap {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let coord = |o: usize, s: f64, n: usize| {
            let c = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = c.floor() as usize;
            (i0, (i0 + 1).min(n - 1), c - i0 as f64)
        };
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            let (y0, y1, fy) = coord(y, sy, self.height);
            for x in 0..width {
                let (x0, x1, fx) = coord(x, sx, self.width);
                let v = |yy: usize, xx: usize| self.data[yy * self.width + xx];
                let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
        SaliencyMap { height, width, data }
    }
}

/// Maps for one clip of a batch from activations and gradients of one layer.
fn cam(acts: &Fmap, grads: &Fmap, b: usize) -> SaliencyMap {
    let (h, w) = (acts.h, acts.w);
    let plane = h * w;
    let mut data = vec![0.0; plane];
    for c in 0..acts.c {
        let off = acts.idx(c, b, 0, 0);
        let weight = grads.data[off..off + plane].iter().sum::<f64>() / plane as f64;
        for (d, a) in data.iter_mut().zip(&acts.data[off..off + plane]) {
            *d += weight * a;
        }
    }
    for d in &mut data {
        *d = d.max(0.0);
    }
    SaliencyMap { height: h, width: w, data }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCam {
    /// `[clip][timestep]` at the layer's own resolution.
    pub raw: Vec<Vec<SaliencyMap>>,
    /// Same maps resized to the input frame size.
    pub upsampled: Vec<Vec<SaliencyMap>>,
}

/// Grad-CAM on the last recurrent block of `stream`, for class `class`.
pub fn grad_cam(model: &Model, input: &ClipInput, stream: Stream, class: usize) -> Result<GradCam> {
    let Model::Clstm2(m) = model else {
        return Err(Error::Validation(
            "Grad-CAM needs a model with stored spatial activations; the backbone-head model has none".into(),
        ));
    };
    let (acts, grads) = m.last_block_activations(input, stream, class)?;
    let (h, w) = m.config().input_hw;
    let batch = input.batch();
    let raw: Vec<Vec<SaliencyMap>> = (0..batch)
        .map(|b| acts.iter().zip(&grads).map(|(a, g)| cam(a, g, b)).collect())
        .collect();
    let upsampled = raw.iter().map(|clip| clip.iter().map(|m| m.upsample(h, w)).collect()).collect();
    Ok(GradCam { raw, upsampled })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlayStyle {
    /// Peak blend weight of the colormap over the frame.
    pub alpha: f64,
    /// Milliseconds per GIF frame.
    pub gif_delay_ms: u32,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        OverlayStyle {
            alpha: 0.6,
            gif_delay_ms: 500,
        }
    }
}

/// Jet colormap for `v` in [0, 1].
pub fn jet(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |offset: f64| ((1.5 - (4.0 * v - offset).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Frame with the colormapped map blended in. Each pixel's blend weight is
/// `alpha * map / scale`, so a zero map leaves the frame untouched.
pub fn overlay(frame: &RgbFrame, map: &SaliencyMap, scale: f64, alpha: f64) -> Result<RgbFrame> {
    if map.height != frame.height || map.width != frame.width {
        return Err(Error::Validation(format!(
            "saliency map {}x{} does not match frame {}x{}",
            map.height, map.width, frame.height, frame.width
        )));
    }
    let mut out = frame.clone();
    for y in 0..frame.height {
        for x in 0..frame.width {
            let s = if scale > 0.0 { map.data[y * map.width + x] / scale } else { 0.0 };
            if s <= 0.0 {
                continue;
            }
            let a = alpha * s.min(1.0);
            let c = jet(s);
            let p = frame.pixel(x, y);
            let mix = |i: usize| ((1.0 - a) * p[i] as f64 + a * c[i] as f64).round().clamp(0.0, 255.0) as u8;
            out.set_pixel(x, y, [mix(0), mix(1), mix(2)]);
        }
    }
    Ok(out)
}

fn to_image(f: &RgbFrame) -> RgbImage {
    RgbImage::from_raw(f.width as u32, f.height as u32, f.data.clone()).expect("frame buffer matches its size")
}

/// RGB, flow and overlay side by side.
pub fn triptych(rgb: &RgbFrame, flow: &RgbFrame, map: &SaliencyMap, scale: f64, alpha: f64) -> Result<RgbImage> {
    let over = overlay(rgb, map, scale, alpha)?;
    let (w, h) = (rgb.width as u32, rgb.height as u32);
    let mut out = RgbImage::new(3 * w, h);
    for (i, f) in [rgb, flow, &over].into_iter().enumerate() {
        if f.width != rgb.width || f.height != rgb.height {
            return Err(Error::Validation("RGB and flow frames differ in size".into()));
        }
        image::imageops::replace(&mut out, &to_image(f), i as i64 * w as i64, 0);
    }
    Ok(out)
}

/// Writes `<out_dir>/<clip_id>/frame_<i>.png` for every timestep plus
/// `<out_dir>/<clip_id>/clip.gif`. Maps are scaled by their maximum over the
/// clip. Returns the PNG paths.
pub fn render_overlays(
    clip_id: &str,
    rgb: &[RgbFrame],
    flow: &[RgbFrame],
    maps: &[SaliencyMap],
    out_dir: &Path,
    style: &OverlayStyle,
) -> Result<Vec<PathBuf>> {
    if rgb.len() != maps.len() || flow.len() != maps.len() {
        return Err(Error::Validation(format!(
            "{} RGB frames, {} flow frames and {} maps",
            rgb.len(),
            flow.len(),
            maps.len()
        )));
    }
    let dir = out_dir.join(clip_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let scale = maps.iter().map(SaliencyMap::max).fold(0.0, f64::max);
    let panels: Vec<RgbImage> = (0..maps.len())
        .into_par_iter()
        .map(|i| triptych(&rgb[i], &flow[i], &maps[i], scale, style.alpha))
        .collect::<Result<_>>()?;
    let mut paths = Vec::with_capacity(panels.len());
    for (i, p) in panels.iter().enumerate() {
        let path = dir.join(format!("frame_{i}.png"));
        p.save(&path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        paths.push(path);
    }
    let gif_path = dir.join("clip.gif");
    let file = File::create(&gif_path).map_err(|e| Error::io(&gif_path, e))?;
    let mut enc = GifEncoder::new_with_speed(BufWriter::new(file), 10);
    let gif_err = |e: image::ImageError| Error::Validation(format!("{}: {e}", gif_path.display()));
    enc.set_repeat(Repeat::Infinite).map_err(gif_err)?;
    for p in &panels {
        let rgba = RgbaImage::from_fn(p.width(), p.height(), |x, y| {
            let [r, g, b] = p.get_pixel(x, y).0;
            image::Rgba([r, g, b, 255])
        });
        enc.encode_frame(Frame::from_parts(rgba, 0, 0, Delay::from_numer_denom_ms(style.gif_delay_ms, 1)))
            .map_err(gif_err)?;
    }
    Ok(paths)
}
