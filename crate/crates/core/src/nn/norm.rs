//! Batch normalisation over a sequence of maps, per channel across
//! time, batch and space.

use super::fmap::Fmap;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of the current batch.
    Batch,
    /// Stored running statistics; the layer is an affine map.
    Running,
}

#[derive(Debug, Clone)]
pub struct NormCache {
    pub mode: NormMode,
    pub xhat: Vec<Fmap>,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance, the value folded into running stats.
    pub batch_var_unbiased: Vec<f64>,
}

pub fn batch_norm_forward(
    xs: &[Fmap],
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    mode: NormMode,
) -> Result<(Vec<Fmap>, NormCache)> {
    let first = xs.first().ok_or_else(|| Error::Shape("empty sequence".into()))?;
    let c = first.c;
    if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(Error::Shape(format!("batch norm over {c} channels got mismatched statistics")));
    }
    let plane = first.plane();
    let count = (plane * xs.len()) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let mut unbiased = vec![0.0; c];
    match mode {
        NormMode::Batch => {
            for ch in 0..c {
                let s: f64 = xs.iter().map(|x| x.channel(ch).iter().sum::<f64>()).sum();
                let m = s / count;
                let ss: f64 = xs.iter().map(|x| x.channel(ch).iter().map(|v| (v - m) * (v - m)).sum::<f64>()).sum();
                mean[ch] = m;
                var[ch] = ss / count;
                unbiased[ch] = if count > 1.0 { ss / (count - 1.0) } else { 0.0 };
            }
        }
        NormMode::Running => {
            mean.copy_from_slice(running_mean);
            var.copy_from_slice(running_var);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Vec::with_capacity(xs.len());
    let mut ys = Vec::with_capacity(xs.len());
    for x in xs {
        let mut xh = x.zeros_like();
        let mut y = x.zeros_like();
        for ch in 0..c {
            let r = ch * plane..(ch + 1) * plane;
            for ((o, yy), v) in xh.data[r.clone()].iter_mut().zip(&mut y.data[r.clone()]).zip(&x.data[r]) {
                *o = (v - mean[ch]) * inv_std[ch];
                *yy = gamma[ch] * *o + beta[ch];
            }
        }
        xhat.push(xh);
        ys.push(y);
    }
    Ok((
        ys,
        NormCache {
            mode,
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var_unbiased: unbiased,
        },
    ))
}

/// Exponential moving update of the running statistics from a batch pass.
pub fn update_running(cache: &NormCache, running_mean: &mut [f64], running_var: &mut [f64], momentum: f64) {
    if cache.mode != NormMode::Batch {
        return;
    }
    for ch in 0..running_mean.len() {
        running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * cache.batch_mean[ch];
        running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * cache.batch_var_unbiased[ch];
    }
}

/// Accumulates `dgamma`/`dbeta` and returns the input gradients.
pub fn batch_norm_backward(
    dys: &[Fmap],
    cache: &NormCache,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<Fmap> {
    let c = gamma.len();
    let plane = dys[0].plane();
    let count = (plane * dys.len()) as f64;
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for (dy, xh) in dys.iter().zip(&cache.xhat) {
        for ch in 0..c {
            let r = ch * plane..(ch + 1) * plane;
            for (g, h) in dy.data[r.clone()].iter().zip(&xh.data[r]) {
                sum_dy[ch] += g;
                sum_dy_xhat[ch] += g * h;
            }
        }
    }
    for ch in 0..c {
        dgamma[ch] += sum_dy_xhat[ch];
        dbeta[ch] += sum_dy[ch];
    }
    dys.iter()
        .zip(&cache.xhat)
        .map(|(dy, xh)| {
            let mut dx = dy.zeros_like();
            for ch in 0..c {
                let r = ch * plane..(ch + 1) * plane;
                let scale = gamma[ch] * cache.inv_std[ch];
                let out = &mut dx.data[r.clone()];
                match cache.mode {
                    NormMode::Running => {
                        for (o, g) in out.iter_mut().zip(&dy.data[r]) {
                            *o = scale * g;
                        }
                    }
                    NormMode::Batch => {
                        let (m1, m2) = (sum_dy[ch] / count, sum_dy_xhat[ch] / count);
                        for ((o, g), h) in out.iter_mut().zip(&dy.data[r.clone()]).zip(&xh.data[r]) {
                            *o = scale * (g - m1 - h * m2);
                        }
                    }
                }
            }
            dx
        })
        .collect()
}
