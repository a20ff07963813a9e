//! Convolutional LSTM cell without peepholes.
//!
//! Gate pre-activations come from one convolution over `[x_t; h_{t-1}]`.
//! The weight is `4*hidden x (cin + hidden) * k * k`, rows grouped by gate
//! in the order input, forget, cell, output.

use super::conv::{conv2d_same, conv2d_same_backward};
use super::fmap::Fmap;
use crate::error::{Error, Result};

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Everything one step produces; the activated gates are kept for backward.
#[derive(Debug, Clone)]
pub struct CellStep {
    /// Activated gates, `4*hidden x N`, order i, f, g, o.
    pub gates: Vec<f64>,
    pub c: Fmap,
    pub h: Fmap,
}

fn check_step(x: &Fmap, h_prev: &Fmap, c_prev: &Fmap, weight: &[f64], bias: &[f64], hidden: usize, k: usize) -> Result<()> {
    if h_prev.c != hidden || !h_prev.same_shape(c_prev) {
        return Err(Error::Shape(format!(
            "cell state has {} / {} channels, expected {hidden}",
            h_prev.c, c_prev.c
        )));
    }
    if (x.b, x.h, x.w) != (h_prev.b, h_prev.h, h_prev.w) {
        return Err(Error::Shape("cell input and state differ in batch or spatial size".into()));
    }
    let expected = 4 * hidden * (x.c + hidden) * k * k;
    if weight.len() != expected || bias.len() != 4 * hidden {
        return Err(Error::Shape(format!(
            "cell weight has {} values for {} input channels, expected {expected}",
            weight.len(),
            x.c
        )));
    }
    Ok(())
}

pub fn convlstm_cell_step(
    x: &Fmap,
    h_prev: &Fmap,
    c_prev: &Fmap,
    weight: &[f64],
    bias: &[f64],
    hidden: usize,
    k: usize,
) -> Result<CellStep> {
    check_step(x, h_prev, c_prev, weight, bias, hidden, k)?;
    let mut gates = conv2d_same(&[x, h_prev], weight, bias, 4 * hidden, k)?;
    let hn = hidden * x.plane();
    let (ifo_i, rest) = gates.split_at_mut(hn);
    let (ifo_f, rest) = rest.split_at_mut(hn);
    let (g, o) = rest.split_at_mut(hn);
    let mut c = c_prev.zeros_like();
    let mut h = c_prev.zeros_like();
    for j in 0..hn {
        let i = sigmoid(ifo_i[j]);
        let f = sigmoid(ifo_f[j]);
        let gg = g[j].tanh();
        let oo = sigmoid(o[j]);
        ifo_i[j] = i;
        ifo_f[j] = f;
        g[j] = gg;
        o[j] = oo;
        let cj = f * c_prev.data[j] + i * gg;
        c.data[j] = cj;
        h.data[j] = oo * cj.tanh();
    }
    Ok(CellStep { gates, c, h })
}

/// Gradients of one step. `dh` and `dc` are the total upstream gradients
/// w.r.t. this step's `h` and `c`; `dh_prev`/`dc_prev` are overwritten.
#[allow(clippy::too_many_arguments)]
pub fn convlstm_cell_step_backward(
    x: &Fmap,
    h_prev: &Fmap,
    c_prev: &Fmap,
    step: &CellStep,
    weight: &[f64],
    hidden: usize,
    k: usize,
    dh: &Fmap,
    dc: &Fmap,
    dweight: &mut [f64],
    dbias: &mut [f64],
    dx: Option<&mut Fmap>,
    dh_prev: &mut Fmap,
    dc_prev: &mut Fmap,
) -> Result<()> {
    let hn = hidden * x.plane();
    if dh.data.len() != hn || dc.data.len() != hn || step.gates.len() != 4 * hn {
        return Err(Error::Shape("cell backward buffers do not match the step".into()));
    }
    let gates = &step.gates;
    let mut dz = vec![0.0; 4 * hn];
    for j in 0..hn {
        let (i, f, g, o) = (gates[j], gates[hn + j], gates[2 * hn + j], gates[3 * hn + j]);
        let tc = step.c.data[j].tanh();
        let dct = dc.data[j] + dh.data[j] * o * (1.0 - tc * tc);
        dz[j] = dct * g * i * (1.0 - i);
        dz[hn + j] = dct * c_prev.data[j] * f * (1.0 - f);
        dz[2 * hn + j] = dct * i * (1.0 - g * g);
        dz[3 * hn + j] = dh.data[j] * tc * o * (1.0 - o);
        dc_prev.data[j] = dct * f;
    }
    dh_prev.data.fill(0.0);
    let mut dparts: [Option<&mut Fmap>; 2] = [dx, Some(dh_prev)];
    conv2d_same_backward(&[x, h_prev], weight, 4 * hidden, k, &dz, dweight, dbias, &mut dparts)
}

/// Runs the cell over a sequence from zero initial state.
pub fn convlstm_forward_seq(xs: &[Fmap], weight: &[f64], bias: &[f64], hidden: usize, k: usize) -> Result<Vec<CellStep>> {
    let first = xs.first().ok_or_else(|| Error::Shape("empty sequence".into()))?;
    let zero = Fmap::zeros(hidden, first.b, first.h, first.w);
    let mut steps: Vec<CellStep> = Vec::with_capacity(xs.len());
    for x in xs {
        let step = match steps.last() {
            Some(prev) => convlstm_cell_step(x, &prev.h, &prev.c, weight, bias, hidden, k)?,
            None => convlstm_cell_step(x, &zero, &zero, weight, bias, hidden, k)?,
        };
        steps.push(step);
    }
    Ok(steps)
}

/// Forward pass that only keeps hidden states, for inference.
pub fn convlstm_infer_seq(xs: &[Fmap], weight: &[f64], bias: &[f64], hidden: usize, k: usize) -> Result<Vec<Fmap>> {
    let first = xs.first().ok_or_else(|| Error::Shape("empty sequence".into()))?;
    let mut h = Fmap::zeros(hidden, first.b, first.h, first.w);
    let mut c = h.clone();
    let mut hs = Vec::with_capacity(xs.len());
    for x in xs {
        let step = convlstm_cell_step(x, &h, &c, weight, bias, hidden, k)?;
        h = step.h;
        c = step.c;
        hs.push(h.clone());
    }
    Ok(hs)
}

pub struct SeqGrads {
    /// Input gradients per timestep, when requested.
    pub dxs: Option<Vec<Fmap>>,
    /// Total gradient w.r.t. each hidden state, including the recurrent path.
    pub dh_total: Vec<Fmap>,
}

/// Backpropagation through time. `dhs[t]` is the gradient arriving at `h_t`
/// from layers above.
#[allow(clippy::too_many_arguments)]
pub fn convlstm_backward_seq(
    xs: &[Fmap],
    steps: &[CellStep],
    weight: &[f64],
    hidden: usize,
    k: usize,
    dhs: &[Fmap],
    dweight: &mut [f64],
    dbias: &mut [f64],
    need_dx: bool,
) -> Result<SeqGrads> {
    if xs.len() != steps.len() || dhs.len() != steps.len() || xs.is_empty() {
        return Err(Error::Shape("sequence lengths disagree in backward".into()));
    }
    let t_len = xs.len();
    let zero = steps[0].h.zeros_like();
    let mut dh_next = zero.clone();
    let mut dc_next = zero.clone();
    let mut dxs: Vec<Fmap> = if need_dx { xs.iter().map(Fmap::zeros_like).collect() } else { Vec::new() };
    let mut dh_total = vec![zero.clone(); t_len];
    let mut dh_prev = zero.clone();
    let mut dc_prev = zero.clone();
    for t in (0..t_len).rev() {
        let mut dh = dhs[t].clone();
        dh.add_assign(&dh_next);
        let (h_prev, c_prev) = if t > 0 { (&steps[t - 1].h, &steps[t - 1].c) } else { (&zero, &zero) };
        let dx = if need_dx { Some(&mut dxs[t]) } else { None };
        convlstm_cell_step_backward(
            &xs[t],
            h_prev,
            c_prev,
            &steps[t],
            weight,
            hidden,
            k,
            &dh,
            &dc_next,
            dweight,
            dbias,
            dx,
            &mut dh_prev,
            &mut dc_prev,
        )?;
        dh_total[t] = dh;
        std::mem::swap(&mut dh_next, &mut dh_prev);
        std::mem::swap(&mut dc_next, &mut dc_prev);
    }
    Ok(SeqGrads {
        dxs: need_dx.then_some(dxs),
        dh_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-s..s)).collect()
    }

    #[test]
    fn zero_weights_give_half_gates_and_zero_state() {
        let x = Fmap::from_vec(2, 1, 3, 3, vec![0.7; 18]);
        let z = Fmap::zeros(3, 1, 3, 3);
        let step = convlstm_cell_step(&x, &z, &z, &vec![0.0; 4 * 3 * 5 * 9], &[0.0; 12], 3, 3).unwrap();
        let hn = 27;
        assert!(step.gates[..hn].iter().all(|&v| v == 0.5));
        assert!(step.gates[hn..2 * hn].iter().all(|&v| v == 0.5));
        assert!(step.gates[3 * hn..].iter().all(|&v| v == 0.5));
        assert!(step.c.data.iter().all(|&v| v == 0.0));
        assert!(step.h.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_cell_equals_scalar_lstm() {
        // Independent scalar LSTM with separate input and recurrent weights.
        fn scalar(x: f64, h: f64, c: f64, wx: [f64; 4], wh: [f64; 4], b: [f64; 4]) -> (f64, f64) {
            let s = |z: f64| 1.0 / (1.0 + (-z).exp());
            let i = s(wx[0] * x + wh[0] * h + b[0]);
            let f = s(wx[1] * x + wh[1] * h + b[1]);
            let g = (wx[2] * x + wh[2] * h + b[2]).tanh();
            let o = s(wx[3] * x + wh[3] * h + b[3]);
            let c2 = f * c + i * g;
            (o * c2.tanh(), c2)
        }
        let wx = [0.3, -0.5, 0.8, 0.1];
        let wh = [-0.2, 0.4, 0.6, -0.9];
        let b = [0.05, 1.0, -0.1, 0.2];
        let mut weight = vec![0.0; 8];
        for g in 0..4 {
            weight[2 * g] = wx[g];
            weight[2 * g + 1] = wh[g];
        }
        let (mut h, mut c) = (0.0, 0.0);
        let (mut hf, mut cf) = (Fmap::zeros(1, 1, 1, 1), Fmap::zeros(1, 1, 1, 1));
        for x in [0.5, -1.2, 2.0] {
            (h, c) = scalar(x, h, c, wx, wh, b);
            let xf = Fmap::from_vec(1, 1, 1, 1, vec![x]);
            let step = convlstm_cell_step(&xf, &hf, &cf, &weight, &b, 1, 1).unwrap();
            hf = step.h;
            cf = step.c;
            assert!((hf.data[0] - h).abs() < 1e-6);
            assert!((cf.data[0] - c).abs() < 1e-6);
        }
    }

    #[test]
    fn same_padding_preserves_spatial_size() {
        let x = Fmap::zeros(3, 1, 32, 32);
        let z = Fmap::zeros(2, 1, 32, 32);
        let step = convlstm_cell_step(&x, &z, &z, &vec![0.01; 4 * 2 * 5 * 9], &[0.0; 8], 2, 3).unwrap();
        assert_eq!((step.h.h, step.h.w), (32, 32));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Fmap::zeros(3, 1, 4, 4);
        let z = Fmap::zeros(2, 1, 4, 4);
        assert!(convlstm_cell_step(&x, &z, &z, &vec![0.0; 4 * 2 * 4 * 9], &[0.0; 8], 2, 3).is_err());
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (cin, hidden, k, t_len) = (2, 2, 3, 3);
        let xs: Vec<Fmap> = (0..t_len).map(|_| Fmap::from_vec(cin, 2, 3, 4, rand_vec(&mut rng, cin * 24, 1.0))).collect();
        let weight = rand_vec(&mut rng, 4 * hidden * (cin + hidden) * k * k, 0.5);
        let bias = rand_vec(&mut rng, 4 * hidden, 0.5);
        let ups: Vec<Vec<f64>> = (0..t_len).map(|_| rand_vec(&mut rng, hidden * 24, 1.0)).collect();
        let loss = |xs: &[Fmap], w: &[f64], b: &[f64]| -> f64 {
            let steps = convlstm_forward_seq(xs, w, b, hidden, k).unwrap();
            steps.iter().zip(&ups).map(|(s, u)| s.h.data.iter().zip(u).map(|(a, b)| a * b).sum::<f64>()).sum()
        };
        let steps = convlstm_forward_seq(&xs, &weight, &bias, hidden, k).unwrap();
        let dhs: Vec<Fmap> = ups.iter().map(|u| Fmap::from_vec(hidden, 2, 3, 4, u.clone())).collect();
        let mut dw = vec![0.0; weight.len()];
        let mut db = vec![0.0; bias.len()];
        let grads = convlstm_backward_seq(&xs, &steps, &weight, hidden, k, &dhs, &mut dw, &mut db, true).unwrap();
        let dxs = grads.dxs.unwrap();
        let eps = 1e-6;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        for i in (0..weight.len()).step_by(7) {
            let (mut p, mut m) = (weight.clone(), weight.clone());
            p[i] += eps;
            m[i] -= eps;
            let fd = (loss(&xs, &p, &bias) - loss(&xs, &m, &bias)) / (2.0 * eps);
            assert!(rel(dw[i], fd) < 1e-4, "weight {i}: {} vs {fd}", dw[i]);
        }
        for i in 0..bias.len() {
            let (mut p, mut m) = (bias.clone(), bias.clone());
            p[i] += eps;
            m[i] -= eps;
            let fd = (loss(&xs, &weight, &p) - loss(&xs, &weight, &m)) / (2.0 * eps);
            assert!(rel(db[i], fd) < 1e-4, "bias {i}");
        }
        for t in 0..t_len {
            for i in (0..xs[t].data.len()).step_by(5) {
                let (mut p, mut m) = (xs.to_vec(), xs.to_vec());
                p[t].data[i] += eps;
                m[t].data[i] -= eps;
                let fd = (loss(&p, &weight, &bias) - loss(&m, &weight, &bias)) / (2.0 * eps);
                assert!(rel(dxs[t].data[i], fd) < 1e-4, "input t={t} i={i}");
            }
        }
    }

    #[test]
    fn inference_matches_training_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<Fmap> = (0..4).map(|_| Fmap::from_vec(1, 1, 4, 4, rand_vec(&mut rng, 16, 1.0))).collect();
        let weight = rand_vec(&mut rng, 4 * 2 * 3 * 9, 0.5);
        let bias = rand_vec(&mut rng, 8, 0.5);
        let a = convlstm_forward_seq(&xs, &weight, &bias, 2, 3).unwrap();
        let b = convlstm_infer_seq(&xs, &weight, &bias, 2, 3).unwrap();
        for (s, h) in a.iter().zip(&b) {
            assert_eq!(&s.h, h);
        }
    }
}
