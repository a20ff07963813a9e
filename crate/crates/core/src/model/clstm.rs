use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{softmax_rows, ClipInput};
use crate::error::{Error, Result};
use crate::nn::cell::{convlstm_backward_seq, convlstm_forward_seq, convlstm_infer_seq, CellStep};
use crate::nn::norm::{batch_norm_backward, batch_norm_forward, update_running, NormCache, BN_MOMENTUM};
use crate::nn::pool::{maxpool2, maxpool2_backward};
use crate::nn::{Fmap, NormMode, ParamId, ParamStore};
use crate::sampling::Stream;

pub const N_BLOCKS: usize = 4;
pub const POOL_FACTOR: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Clstm2Config {
    pub n_blocks: usize,
    pub channels_per_block: Vec<usize>,
    pub kernel_size: usize,
    pub pool_factor: usize,
    pub input_hw: (usize, usize),
    pub seq_len: usize,
    pub n_classes: usize,
    pub rgb_channels: usize,
    pub flow_channels: usize,
}

impl Default for Clstm2Config {
    fn default() -> Self {
        Clstm2Config {
            n_blocks: N_BLOCKS,
            channels_per_block: vec![32; N_BLOCKS],
            kernel_size: 5,
            pool_factor: POOL_FACTOR,
            input_hw: (224, 224),
            seq_len: 10,
            n_classes: 2,
            rgb_channels: 3,
            flow_channels: 3,
        }
    }
}

impl Clstm2Config {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks != N_BLOCKS || self.channels_per_block.len() != N_BLOCKS {
            return Err(Error::Config(format!(
                "the classifier has exactly {N_BLOCKS} blocks, got n_blocks={} with {} channel counts",
                self.n_blocks,
                self.channels_per_block.len()
            )));
        }
        if self.pool_factor != POOL_FACTOR {
            return Err(Error::Config(format!("pool_factor must be {POOL_FACTOR}")));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        let div = POOL_FACTOR.pow(N_BLOCKS as u32);
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!("input {h}x{w} is not divisible by {div}")));
        }
        if self.channels_per_block.contains(&0) || self.seq_len == 0 || self.n_classes < 2 {
            return Err(Error::Config("channels, seq_len and n_classes must be positive".into()));
        }
        if self.rgb_channels == 0 || self.flow_channels == 0 {
            return Err(Error::Config("stream channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size of each stream's final map.
    pub fn fused_hw(&self) -> (usize, usize) {
        let div = POOL_FACTOR.pow(N_BLOCKS as u32);
        (self.input_hw.0 / div, self.input_hw.1 / div)
    }

    pub fn feature_dim(&self) -> usize {
        let (h, w) = self.fused_hw();
        self.channels_per_block[N_BLOCKS - 1] * h * w
    }

    fn stream_channels(&self, stream: Stream) -> usize {
        match stream {
            Stream::Rgb => self.rgb_channels,
            Stream::Flow => self.flow_channels,
        }
    }
}

pub fn stream_prefix(stream: Stream) -> &'static str {
    match stream {
        Stream::Rgb => "rgb",
        Stream::Flow => "flow",
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
    cin: usize,
    hidden: usize,
}

/// The two-stream ConvLSTM classifier.
#[derive(Debug, Clone)]
pub struct Clstm2 {
    config: Clstm2Config,
    params: ParamStore,
    buffers: ParamStore,
    blocks: [Vec<BlockIds>; 2],
    head_weight: ParamId,
    head_bias: ParamId,
}

fn layout(config: &Clstm2Config, rng: &mut ChaCha8Rng) -> (ParamStore, ParamStore) {
    let k = config.kernel_size;
    let mut params = ParamStore::new();
    let mut buffers = ParamStore::new();
    for stream in [Stream::Rgb, Stream::Flow] {
        let p = stream_prefix(stream);
        let mut cin = config.stream_channels(stream);
        for (b, &hid) in config.channels_per_block.iter().enumerate() {
            let fan_in = (cin + hid) * k * k;
            let fan_out = 4 * hid * k * k;
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.add(format!("{p}.block{b}.weight"), &[4 * hid, cin + hid, k, k], || rng.random_range(-limit..limit));
            let mut j = 0;
            params.add(format!("{p}.block{b}.bias"), &[4 * hid], || {
                let forget = j / hid == 1;
                j += 1;
                if forget {
                    1.0
                } else {
                    0.0
                }
            });
            params.add(format!("{p}.block{b}.bn.gamma"), &[hid], || 1.0);
            params.add(format!("{p}.block{b}.bn.beta"), &[hid], || 0.0);
            buffers.add(format!("{p}.block{b}.bn.running_mean"), &[hid], || 0.0);
            buffers.add(format!("{p}.block{b}.bn.running_var"), &[hid], || 1.0);
            cin = hid;
        }
    }
    let f = config.feature_dim();
    let limit = (6.0 / (f + config.n_classes) as f64).sqrt();
    params.add("head.weight", &[config.n_classes, f], || rng.random_range(-limit..limit));
    params.add("head.bias", &[config.n_classes], || 0.0);
    (params, buffers)
}

struct BlockCache {
    xs: Vec<Fmap>,
    steps: Vec<CellStep>,
    args: Vec<Vec<usize>>,
    bn: NormCache,
}

pub struct StreamPass {
    blocks: Vec<BlockCache>,
    last: Fmap,
}

/// Cached forward pass of a batch.
pub struct ForwardPass {
    rgb: StreamPass,
    flow: StreamPass,
    features: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub batch: usize,
}

impl ForwardPass {
    /// A stream's final map at the last timestep, just before fusion.
    pub fn pre_fusion(&self, stream: Stream) -> &Fmap {
        match stream {
            Stream::Rgb => &self.rgb.last,
            Stream::Flow => &self.flow.last,
        }
    }
}

impl Clstm2 {
    pub fn new(config: Clstm2Config, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, buffers) = layout(&config, &mut rng);
        Self::from_parts(config, params, buffers)
    }

    pub fn from_parts(config: Clstm2Config, params: ParamStore, buffers: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (p_ref, b_ref) = layout(&config, &mut rng);
        if p_ref.specs() != params.specs() || b_ref.specs() != buffers.specs() {
            return Err(Error::Checkpoint("parameter layout does not match the configuration".into()));
        }
        let id = |s: &ParamStore, n: String| s.id(&n).expect("layout names");
        let mut blocks: [Vec<BlockIds>; 2] = [Vec::new(), Vec::new()];
        for (si, stream) in [Stream::Rgb, Stream::Flow].into_iter().enumerate() {
            let p = stream_prefix(stream);
            let mut cin = config.stream_channels(stream);
            for (b, &hidden) in config.channels_per_block.iter().enumerate() {
                blocks[si].push(BlockIds {
                    weight: id(&params, format!("{p}.block{b}.weight")),
                    bias: id(&params, format!("{p}.block{b}.bias")),
                    gamma: id(&params, format!("{p}.block{b}.bn.gamma")),
                    beta: id(&params, format!("{p}.block{b}.bn.beta")),
                    mean: id(&buffers, format!("{p}.block{b}.bn.running_mean")),
                    var: id(&buffers, format!("{p}.block{b}.bn.running_var")),
                    cin,
                    hidden,
                });
                cin = hidden;
            }
        }
        let head_weight = id(&params, "head.weight".into());
        let head_bias = id(&params, "head.bias".into());
        Ok(Clstm2 {
            config,
            params,
            buffers,
            blocks,
            head_weight,
            head_bias,
        })
    }

    pub fn config(&self) -> &Clstm2Config {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn head_ids(&self) -> [ParamId; 2] {
        [self.head_weight, self.head_bias]
    }

    fn check_input(&self, input: &ClipInput) -> Result<usize> {
        let (h, w) = self.config.input_hw;
        for (stream, seq) in [(Stream::Rgb, &input.rgb), (Stream::Flow, &input.flow)] {
            if seq.len() != self.config.seq_len {
                return Err(Error::Shape(format!(
                    "{} sequence has {} frames, expected {}",
                    stream_prefix(stream),
                    seq.len(),
                    self.config.seq_len
                )));
            }
            for f in seq {
                if (f.c, f.h, f.w) != (self.config.stream_channels(stream), h, w) || f.b != seq[0].b {
                    return Err(Error::Shape(format!(
                        "{} frame is {}x{}x{}, expected {}x{h}x{w}",
                        stream_prefix(stream),
                        f.c,
                        f.h,
                        f.w,
                        self.config.stream_channels(stream)
                    )));
                }
            }
        }
        if input.rgb[0].b != input.flow[0].b || input.rgb[0].b == 0 {
            return Err(Error::Shape("streams disagree on batch size".into()));
        }
        Ok(input.rgb[0].b)
    }

    fn stream_forward(&self, si: usize, xs: &[Fmap], mode: NormMode) -> Result<StreamPass> {
        let k = self.config.kernel_size;
        let mut cur = xs.to_vec();
        let mut blocks = Vec::with_capacity(N_BLOCKS);
        for ids in &self.blocks[si] {
            let steps = convlstm_forward_seq(
                &cur,
                self.params.get(ids.weight),
                self.params.get(ids.bias),
                ids.hidden,
                k,
            )?;
            let mut pooled = Vec::with_capacity(steps.len());
            let mut args = Vec::with_capacity(steps.len());
            for s in &steps {
                let (p, a) = maxpool2(&s.h)?;
                pooled.push(p);
                args.push(a);
            }
            let (ys, bn) = batch_norm_forward(
                &pooled,
                self.params.get(ids.gamma),
                self.params.get(ids.beta),
                self.buffers.get(ids.mean),
                self.buffers.get(ids.var),
                mode,
            )?;
            blocks.push(BlockCache {
                xs: std::mem::replace(&mut cur, ys),
                steps,
                args,
                bn,
            });
        }
        let last = cur.pop().expect("non-empty sequence");
        Ok(StreamPass { blocks, last })
    }

    fn stream_infer(&self, si: usize, xs: &[Fmap]) -> Result<Fmap> {
        let k = self.config.kernel_size;
        let mut cur = xs.to_vec();
        for ids in &self.blocks[si] {
            let hs = convlstm_infer_seq(&cur, self.params.get(ids.weight), self.params.get(ids.bias), ids.hidden, k)?;
            let mut pooled = Vec::with_capacity(hs.len());
            for h in &hs {
                pooled.push(maxpool2(h)?.0);
            }
            cur = batch_norm_forward(
                &pooled,
                self.params.get(ids.gamma),
                self.params.get(ids.beta),
                self.buffers.get(ids.mean),
                self.buffers.get(ids.var),
                NormMode::Running,
            )?
            .0;
        }
        Ok(cur.pop().expect("non-empty sequence"))
    }

    fn flatten(fused: &Fmap) -> Vec<f64> {
        let hw = fused.h * fused.w;
        let f = fused.c * hw;
        let mut out = vec![0.0; fused.b * f];
        for c in 0..fused.c {
            for b in 0..fused.b {
                let src = &fused.data[(c * fused.b + b) * hw..(c * fused.b + b + 1) * hw];
                out[b * f + c * hw..b * f + (c + 1) * hw].copy_from_slice(src);
            }
        }
        out
    }

    fn head(&self, features: &[f64], batch: usize) -> Vec<f64> {
        let nc = self.config.n_classes;
        let f = features.len() / batch;
        let w = self.params.get(self.head_weight);
        let bias = self.params.get(self.head_bias);
        let mut logits = vec![0.0; batch * nc];
        for b in 0..batch {
            let x = &features[b * f..(b + 1) * f];
            for o in 0..nc {
                logits[b * nc + o] = bias[o] + w[o * f..(o + 1) * f].iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        logits
    }

    /// Forward pass keeping every intermediate needed for backward.
    pub fn forward(&self, input: &ClipInput, mode: NormMode) -> Result<ForwardPass> {
        let batch = self.check_input(input)?;
        let rgb = self.stream_forward(0, &input.rgb, mode)?;
        let flow = self.stream_forward(1, &input.flow, mode)?;
        let mut fused = rgb.last.clone();
        fused.add_assign(&flow.last);
        let features = Self::flatten(&fused);
        let logits = self.head(&features, batch);
        let probs = softmax_rows(&logits, self.config.n_classes);
        Ok(ForwardPass {
            rgb,
            flow,
            features,
            logits,
            probs,
            batch,
        })
    }

    /// Inference with running batch-norm statistics; returns row-major
    /// `batch x n_classes` probabilities.
    pub fn predict_proba(&self, input: &ClipInput) -> Result<Vec<f64>> {
        let batch = self.check_input(input)?;
        let mut fused = self.stream_infer(0, &input.rgb)?;
        fused.add_assign(&self.stream_infer(1, &input.flow)?);
        let logits = self.head(&Self::flatten(&fused), batch);
        Ok(softmax_rows(&logits, self.config.n_classes))
    }

    /// Folds the batch statistics of a `Batch`-mode pass into the running averages.
    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        for (si, sp) in [&pass.rgb, &pass.flow].into_iter().enumerate() {
            for (ids, bc) in self.blocks[si].iter().zip(&sp.blocks) {
                let mut mean = self.buffers.get(ids.mean).to_vec();
                let mut var = self.buffers.get(ids.var).to_vec();
                update_running(&bc.bn, &mut mean, &mut var, BN_MOMENTUM);
                self.buffers.get_mut(ids.mean).copy_from_slice(&mean);
                self.buffers.get_mut(ids.var).copy_from_slice(&var);
            }
        }
    }

    /// Gradient of `sum(dlogits * logits)` w.r.t. the parameters.
    pub fn backward(&self, pass: &ForwardPass, dlogits: &[f64], train_streams: bool) -> Result<Vec<f64>> {
        let mut grads = self.params.zeros_like();
        let dfused = self.head_backward(pass, dlogits, &mut grads)?;
        if train_streams {
            for (si, sp) in [&pass.rgb, &pass.flow].into_iter().enumerate() {
                self.stream_backward(si, sp, &dfused, &mut grads, N_BLOCKS)?;
            }
        }
        Ok(grads)
    }

    fn head_backward(&self, pass: &ForwardPass, dlogits: &[f64], grads: &mut [f64]) -> Result<Fmap> {
        let nc = self.config.n_classes;
        let batch = pass.batch;
        if dlogits.len() != batch * nc {
            return Err(Error::Shape("logit gradient has the wrong length".into()));
        }
        let f = self.config.feature_dim();
        let w = self.params.get(self.head_weight);
        let wr = self.params.spec(self.head_weight).range();
        let br = self.params.spec(self.head_bias).range();
        let mut dfeat = vec![0.0; batch * f];
        for b in 0..batch {
            let x = &pass.features[b * f..(b + 1) * f];
            for o in 0..nc {
                let g = dlogits[b * nc + o];
                grads[br.start + o] += g;
                let dw = &mut grads[wr.start + o * f..wr.start + (o + 1) * f];
                for (d, v) in dw.iter_mut().zip(x) {
                    *d += g * v;
                }
                for (d, v) in dfeat[b * f..(b + 1) * f].iter_mut().zip(&w[o * f..(o + 1) * f]) {
                    *d += g * v;
                }
            }
        }
        let like = &pass.rgb.last;
        let hw = like.h * like.w;
        let mut dfused = like.zeros_like();
        for c in 0..like.c {
            for b in 0..batch {
                dfused.data[(c * batch + b) * hw..(c * batch + b + 1) * hw]
                    .copy_from_slice(&dfeat[b * f + c * hw..b * f + (c + 1) * hw]);
            }
        }
        Ok(dfused)
    }

    /// Backpropagates the gradient of the final-timestep output through the
    /// top `depth` blocks. Returns the total hidden-state gradients of the
    /// lowest block visited.
    fn stream_backward(&self, si: usize, sp: &StreamPass, dlast: &Fmap, grads: &mut [f64], depth: usize) -> Result<Vec<Fmap>> {
        let k = self.config.kernel_size;
        let t_len = sp.blocks[0].steps.len();
        let mut dys: Vec<Fmap> = (0..t_len).map(|_| dlast.zeros_like()).collect();
        dys[t_len - 1] = dlast.clone();
        let mut dh_total = Vec::new();
        for bi in (N_BLOCKS - depth..N_BLOCKS).rev() {
            let ids = &self.blocks[si][bi];
            let bc = &sp.blocks[bi];
            let gr = self.params.spec(ids.gamma).range();
            let br = self.params.spec(ids.beta).range();
            let (lo, hi) = grads.split_at_mut(br.start);
            let dpooled = batch_norm_backward(&dys, &bc.bn, self.params.get(ids.gamma), &mut lo[gr], &mut hi[..br.len()]);
            let dhs: Vec<Fmap> = dpooled
                .iter()
                .zip(&bc.args)
                .zip(&bc.steps)
                .map(|((d, a), s)| maxpool2_backward(d, a, &s.h))
                .collect();
            let wr = self.params.spec(ids.weight).range();
            let bsr = self.params.spec(ids.bias).range();
            let (lo, hi) = grads.split_at_mut(bsr.start);
            let need_dx = bi > N_BLOCKS - depth;
            let sg = convlstm_backward_seq(
                &bc.xs,
                &bc.steps,
                self.params.get(ids.weight),
                ids.hidden,
                k,
                &dhs,
                &mut lo[wr],
                &mut hi[..bsr.len()],
                need_dx,
            )?;
            debug_assert_eq!(bc.xs[0].c, ids.cin);
            dh_total = sg.dh_total;
            if let Some(dx) = sg.dxs {
                dys = dx;
            }
        }
        Ok(dh_total)
    }

    /// Hidden states of the last block of `stream` (before pooling) for every
    /// timestep, and the gradient of `class`'s logit w.r.t. each of them.
    /// Uses running batch-norm statistics.
    pub fn last_block_activations(&self, input: &ClipInput, stream: Stream, class: usize) -> Result<(Vec<Fmap>, Vec<Fmap>)> {
        if class >= self.config.n_classes {
            return Err(Error::Validation(format!("class {class} out of range")));
        }
        let pass = self.forward(input, NormMode::Running)?;
        let mut dlogits = vec![0.0; pass.batch * self.config.n_classes];
        for b in 0..pass.batch {
            dlogits[b * self.config.n_classes + class] = 1.0;
        }
        let mut scratch = self.params.zeros_like();
        let dfused = self.head_backward(&pass, &dlogits, &mut scratch)?;
        let (si, sp) = match stream {
            Stream::Rgb => (0, &pass.rgb),
            Stream::Flow => (1, &pass.flow),
        };
        let grads = self.stream_backward(si, sp, &dfused, &mut scratch, 1)?;
        let acts = sp.blocks[N_BLOCKS - 1].steps.iter().map(|s| s.h.clone()).collect();
        Ok((acts, grads))
    }

    /// Trainable parameter count per block (`rgb.block0`, …) and for the head.
    pub fn parameter_breakdown(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for spec in self.params.specs() {
            let group = match spec.name.rsplit_once('.') {
                Some((g, _)) if g.starts_with("head") => "head".to_string(),
                _ => spec.name.split('.').take(2).collect::<Vec<_>>().join("."),
            };
            match out.last_mut() {
                Some((g, n)) if *g == group => *n += spec.len(),
                _ => out.push((group, spec.len())),
            }
        }
        out
    }

    pub fn set_buffers(&mut self, data: &[f64]) -> Result<()> {
        if data.len() != self.buffers.len() {
            return Err(Error::Checkpoint("buffer length mismatch".into()));
        }
        self.buffers.data_mut().copy_from_slice(data);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Clstm2Config {
        Clstm2Config {
            channels_per_block: vec![2, 3, 2, 2],
            kernel_size: 3,
            input_hw: (16, 16),
            seq_len: 3,
            ..Default::default()
        }
    }

    fn random_input(cfg: &Clstm2Config, batch: usize, seed: u64) -> ClipInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = cfg.input_hw;
        let mut mk = |c: usize| -> Vec<Fmap> {
            (0..cfg.seq_len)
                .map(|_| Fmap::from_vec(c, batch, h, w, (0..c * batch * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()))
                .collect()
        };
        let rgb = mk(cfg.rgb_channels);
        let flow = mk(cfg.flow_channels);
        ClipInput { rgb, flow }
    }

    #[test]
    fn default_parameter_count() {
        let m = Clstm2::new(Clstm2Config::default(), 0).unwrap();
        assert_eq!(m.params().len(), 1_466_882);
        let breakdown = m.parameter_breakdown();
        assert_eq!(breakdown.len(), 9);
        assert_eq!(breakdown[0], ("rgb.block0".to_string(), 112_192));
        assert_eq!(breakdown[1].1, 204_992);
        assert_eq!(breakdown[8], ("head".to_string(), 12_546));
        assert_eq!(breakdown.iter().map(|b| b.1).sum::<usize>(), m.params().len());
    }

    #[test]
    fn rejects_indivisible_input() {
        let cfg = Clstm2Config {
            input_hw: (100, 96),
            ..tiny()
        };
        assert!(matches!(Clstm2::new(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn probabilities_sum_to_one_and_training_forward_agrees_after_running_update() {
        let cfg = tiny();
        let m = Clstm2::new(cfg.clone(), 1).unwrap();
        let input = random_input(&cfg, 2, 2);
        let p = m.predict_proba(&input).unwrap();
        assert_eq!(p.len(), 4);
        for row in p.chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let pass = m.forward(&input, NormMode::Running).unwrap();
        for (a, b) in pass.probs.iter().zip(&p) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn swapping_streams_changes_output() {
        let cfg = tiny();
        let m = Clstm2::new(cfg.clone(), 3).unwrap();
        let input = random_input(&cfg, 1, 4);
        let swapped = ClipInput {
            rgb: input.flow.clone(),
            flow: input.rgb.clone(),
        };
        let a = m.predict_proba(&input).unwrap();
        let b = m.predict_proba(&swapped).unwrap();
        assert!((a[0] - b[0]).abs() > 1e-9);
    }
}
