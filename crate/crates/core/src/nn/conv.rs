//! Stride-1 "same" 2-D convolution via im2col + GEMM.
//!
//! Several input maps can be passed as `parts`; they are treated as one map
//! concatenated along channels. The weight is `cout x K` row-major with
//! `K = sum(c_p) * k * k`, columns ordered (part, channel, ky, kx).

use rayon::prelude::*;

use super::fmap::Fmap;
use crate::error::{Error, Result};

/// Target im2col buffer size per chunk, in values.
const CHUNK_VALUES: usize = 1 << 18;

#[derive(Debug, Clone, Copy)]
struct Segment {
    off: usize,
    b: usize,
    y: usize,
    x0: usize,
    len: usize,
}

fn segments(n0: usize, n1: usize, h: usize, w: usize) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut n = n0;
    while n < n1 {
        let x0 = n % w;
        let y = (n / w) % h;
        let b = n / (w * h);
        let len = (w - x0).min(n1 - n);
        out.push(Segment {
            off: n - n0,
            b,
            y,
            x0,
            len,
        });
        n += len;
    }
    out
}

/// Valid `j` range of a segment for horizontal tap offset `dx`.
#[inline]
fn valid_range(seg: &Segment, dx: isize, w: usize) -> (usize, usize) {
    let lo = (-dx - seg.x0 as isize).max(0) as usize;
    let hi = (w as isize - dx - seg.x0 as isize).clamp(0, seg.len as isize) as usize;
    (lo.min(hi), hi)
}

fn im2col_chunk(parts: &[&Fmap], k: usize, segs: &[Segment], nc: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let mut row = 0;
    for part in parts {
        let (h, w) = (part.h, part.w);
        for ci in 0..part.c {
            let chan = part.channel(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut cols[row * nc..(row + 1) * nc];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for s in segs {
                        let seg = &mut dst[s.off..s.off + s.len];
                        let sy = s.y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            seg.fill(0.0);
                            continue;
                        }
                        let src_row = &chan[(s.b * h + sy as usize) * w..(s.b * h + sy as usize + 1) * w];
                        let (lo, hi) = valid_range(s, dx, w);
                        seg[..lo].fill(0.0);
                        seg[hi..].fill(0.0);
                        if hi > lo {
                            let sx0 = (s.x0 as isize + lo as isize + dx) as usize;
                            seg[lo..hi].copy_from_slice(&src_row[sx0..sx0 + (hi - lo)]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds the `K x nc` column gradient back onto the parts that want it.
fn col2im_chunk(dparts: &mut [Option<&mut Fmap>], channels: &[usize], k: usize, segs: &[Segment], nc: usize, dcols: &[f64]) {
    let pad = (k / 2) as isize;
    let mut row = 0;
    for (p, cp) in channels.iter().enumerate() {
        let Some(dpart) = dparts[p].as_deref_mut() else {
            row += cp * k * k;
            continue;
        };
        let (h, w) = (dpart.h, dpart.w);
        let plane = dpart.plane();
        for ci in 0..*cp {
            let chan = &mut dpart.data[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let src = &dcols[row * nc..(row + 1) * nc];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for s in segs {
                        let sy = s.y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let (lo, hi) = valid_range(s, dx, w);
                        if hi <= lo {
                            continue;
                        }
                        let base = (s.b * h + sy as usize) * w;
                        let sx0 = (s.x0 as isize + lo as isize + dx) as usize;
                        let dst = &mut chan[base + sx0..base + sx0 + (hi - lo)];
                        for (d, v) in dst.iter_mut().zip(&src[s.off + lo..s.off + hi]) {
                            *d += v;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `C = A * B + beta * C` on strided row/column-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, cs: usize, rows: usize, cols: usize| (rows - 1) * r + (cols.max(1) - 1) * cs;
    if k > 0 {
        assert!(last(rsa, csa, m, k) < a.len(), "gemm: A out of bounds");
        assert!(last(rsb, csb, k, n) < b.len(), "gemm: B out of bounds");
    }
    assert!(last(rsc, csc, m, n) < c.len(), "gemm: C out of bounds");
    // SAFETY: the asserts above bound every element the kernel touches, and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn check_parts(parts: &[&Fmap], k: usize) -> Result<(usize, usize)> {
    if k % 2 == 0 {
        return Err(Error::Config(format!("same-padding convolution needs an odd kernel, got {k}")));
    }
    let first = parts.first().ok_or_else(|| Error::Shape("convolution without input".into()))?;
    for p in parts {
        if (p.b, p.h, p.w) != (first.b, first.h, first.w) {
            return Err(Error::Shape(format!(
                "convolution parts disagree: {}x{}x{} vs {}x{}x{}",
                p.b, p.h, p.w, first.b, first.h, first.w
            )));
        }
    }
    let k_total = parts.iter().map(|p| p.c).sum::<usize>() * k * k;
    Ok((k_total, first.plane()))
}

fn chunk_len(k_total: usize, n: usize) -> usize {
    (CHUNK_VALUES / k_total.max(1)).max(256).min(n.max(1))
}

/// Returns the `cout x N` pre-activation, `N = b * h * w`.
pub fn conv2d_same(parts: &[&Fmap], weight: &[f64], bias: &[f64], cout: usize, k: usize) -> Result<Vec<f64>> {
    let (k_total, n) = check_parts(parts, k)?;
    if weight.len() != cout * k_total || bias.len() != cout {
        return Err(Error::Shape(format!(
            "conv weight has {} values and bias {}, expected {}x{} and {cout}",
            weight.len(),
            bias.len(),
            cout,
            k_total
        )));
    }
    let (h, w) = (parts[0].h, parts[0].w);
    let step = chunk_len(k_total, n);
    let starts: Vec<usize> = (0..n).step_by(step).collect();
    let blocks: Vec<(usize, usize, Vec<f64>)> = starts
        .par_iter()
        .map(|&n0| {
            let n1 = (n0 + step).min(n);
            let nc = n1 - n0;
            let segs = segments(n0, n1, h, w);
            let mut cols = vec![0.0; k_total * nc];
            im2col_chunk(parts, k, &segs, nc, &mut cols);
            let mut out = vec![0.0; cout * nc];
            gemm(cout, k_total, nc, weight, k_total, 1, &cols, nc, 1, 0.0, &mut out, nc, 1);
            (n0, nc, out)
        })
        .collect();
    let mut out = vec![0.0; cout * n];
    for (n0, nc, block) in blocks {
        for r in 0..cout {
            out[r * n + n0..r * n + n0 + nc].copy_from_slice(&block[r * nc..(r + 1) * nc]);
        }
    }
    for (r, b) in bias.iter().enumerate() {
        for v in &mut out[r * n..(r + 1) * n] {
            *v += b;
        }
    }
    Ok(out)
}

/// Accumulates weight/bias gradients and, for each `Some` entry of
/// `dparts`, the input gradient of that part.
pub fn conv2d_same_backward(
    parts: &[&Fmap],
    weight: &[f64],
    cout: usize,
    k: usize,
    dz: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    dparts: &mut [Option<&mut Fmap>],
) -> Result<()> {
    let (k_total, n) = check_parts(parts, k)?;
    if dz.len() != cout * n || dweight.len() != cout * k_total || dbias.len() != cout || dparts.len() != parts.len() {
        return Err(Error::Shape("conv backward buffers do not match the forward shapes".into()));
    }
    let (h, w) = (parts[0].h, parts[0].w);
    let channels: Vec<usize> = parts.iter().map(|p| p.c).collect();
    let want_input = dparts.iter().any(|d| d.is_some());
    let step = chunk_len(k_total, n);
    let mut cols = vec![0.0; k_total * step];
    let mut dcols = if want_input { vec![0.0; k_total * step] } else { Vec::new() };
    for n0 in (0..n).step_by(step) {
        let n1 = (n0 + step).min(n);
        let nc = n1 - n0;
        let segs = segments(n0, n1, h, w);
        im2col_chunk(parts, k, &segs, nc, &mut cols[..k_total * nc]);
        gemm(cout, nc, k_total, &dz[n0..], n, 1, &cols, 1, nc, 1.0, dweight, k_total, 1);
        if want_input {
            gemm(k_total, cout, nc, weight, 1, k_total, &dz[n0..], n, 1, 0.0, &mut dcols[..k_total * nc], nc, 1);
            col2im_chunk(dparts, &channels, k, &segs, nc, &dcols[..k_total * nc]);
        }
    }
    for (r, db) in dbias.iter_mut().enumerate() {
        *db += dz[r * n..(r + 1) * n].iter().sum::<f64>();
    }
    Ok(())
}
