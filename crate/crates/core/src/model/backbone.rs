//! Generic backbone + linear head model.
//!
//! The bundled backbone is a toy: a per-pixel linear map with ReLU,
//! averaged over time and space. Any frozen extractor can be substituted by
//! feeding its features to [`BackboneHead::head_proba`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{softmax_rows, ClipInput};
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneHeadConfig {
    pub feature_dim: usize,
    pub n_classes: usize,
    pub backbone_frozen: bool,
    /// Adds a per-class multiplicative scale on the logits.
    pub head_scale: bool,
    pub input_channels: usize,
}

impl Default for BackboneHeadConfig {
    fn default() -> Self {
        BackboneHeadConfig {
            feature_dim: 2048,
            n_classes: 2,
            backbone_frozen: true,
            head_scale: true,
            input_channels: 3,
        }
    }
}

impl BackboneHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.n_classes < 2 || self.input_channels == 0 {
            return Err(Error::Config("backbone-head dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn head_parameter_count(&self) -> usize {
        self.n_classes * self.feature_dim + self.n_classes + if self.head_scale { self.n_classes } else { 0 }
    }
}

#[derive(Debug, Clone)]
pub struct BackboneHead {
    config: BackboneHeadConfig,
    params: ParamStore,
    bb_weight: ParamId,
    bb_bias: ParamId,
    head_weight: ParamId,
    head_bias: ParamId,
    head_scale: Option<ParamId>,
}

fn layout(config: &BackboneHeadConfig, rng: &mut ChaCha8Rng) -> ParamStore {
    let (f, c, nc) = (config.feature_dim, config.input_channels, config.n_classes);
    let mut p = ParamStore::new();
    let lb = (6.0 / (f + c) as f64).sqrt();
    p.add("backbone.weight", &[f, c], || rng.random_range(-lb..lb));
    p.add("backbone.bias", &[f], || 0.1);
    let lh = (6.0 / (f + nc) as f64).sqrt();
    p.add("head.weight", &[nc, f], || rng.random_range(-lh..lh));
    p.add("head.bias", &[nc], || 0.0);
    if config.head_scale {
        p.add("head.scale", &[nc], || 1.0);
    }
    p
}

pub struct BackbonePass {
    /// Pre-activation sign mask is recomputed in backward; keep features.
    features: Vec<f64>,
    pre_logits: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub batch: usize,
}

impl BackboneHead {
    pub fn new(config: BackboneHeadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout(&config, &mut rng);
        Self::from_params(config, params)
    }

    pub fn from_params(config: BackboneHeadConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = layout(&config, &mut ChaCha8Rng::seed_from_u64(0));
        if reference.specs() != params.specs() {
            return Err(Error::Checkpoint("parameter layout does not match the configuration".into()));
        }
        Ok(BackboneHead {
            bb_weight: params.id("backbone.weight").expect("layout"),
            bb_bias: params.id("backbone.bias").expect("layout"),
            head_weight: params.id("head.weight").expect("layout"),
            head_bias: params.id("head.bias").expect("layout"),
            head_scale: params.id("head.scale"),
            config,
            params,
        })
    }

    pub fn config(&self) -> &BackboneHeadConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.head_weight, self.head_bias];
        ids.extend(self.head_scale);
        ids
    }

    /// Number of parameters updated during training.
    pub fn trainable_parameters(&self) -> usize {
        if self.config.backbone_frozen {
            self.config.head_parameter_count()
        } else {
            self.params.len()
        }
    }

    /// Backbone features, `batch x feature_dim`, from the RGB stream.
    pub fn extract_features(&self, input: &ClipInput) -> Result<Vec<f64>> {
        let first = input.rgb.first().ok_or_else(|| Error::Shape("empty clip".into()))?;
        if first.c != self.config.input_channels {
            return Err(Error::Shape(format!(
                "backbone expects {} channels, got {}",
                self.config.input_channels, first.c
            )));
        }
        let (b, hw, f) = (first.b, first.h * first.w, self.config.feature_dim);
        let w = self.params.get(self.bb_weight);
        let bias = self.params.get(self.bb_bias);
        let norm = (input.rgb.len() * hw) as f64;
        let mut feats = vec![0.0; b * f];
        let mut px = vec![0.0; first.c];
        for frame in &input.rgb {
            for bi in 0..b {
                for p in 0..hw {
                    for (c, v) in px.iter_mut().enumerate() {
                        *v = frame.data[(c * b + bi) * hw + p];
                    }
                    for j in 0..f {
                        let z = bias[j] + w[j * first.c..(j + 1) * first.c].iter().zip(&px).map(|(a, x)| a * x).sum::<f64>();
                        if z > 0.0 {
                            feats[bi * f + j] += z / norm;
                        }
                    }
                }
            }
        }
        Ok(feats)
    }

    fn head_logits(&self, features: &[f64], batch: usize) -> (Vec<f64>, Vec<f64>) {
        let (f, nc) = (self.config.feature_dim, self.config.n_classes);
        let w = self.params.get(self.head_weight);
        let bias = self.params.get(self.head_bias);
        let mut pre = vec![0.0; batch * nc];
        for b in 0..batch {
            for o in 0..nc {
                pre[b * nc + o] = bias[o] + w[o * f..(o + 1) * f].iter().zip(&features[b * f..(b + 1) * f]).map(|(a, x)| a * x).sum::<f64>();
            }
        }
        let logits = match self.head_scale {
            Some(id) => {
                let s = self.params.get(id);
                pre.iter().enumerate().map(|(i, z)| z * s[i % nc]).collect()
            }
            None => pre.clone(),
        };
        (pre, logits)
    }

    /// Head applied to precomputed features (`batch x feature_dim`).
    pub fn head_proba(&self, features: &[f64]) -> Result<Vec<f64>> {
        let f = self.config.feature_dim;
        if features.is_empty() || features.len() % f != 0 {
            return Err(Error::Shape(format!("features of length {} are not a multiple of {f}", features.len())));
        }
        let (_, logits) = self.head_logits(features, features.len() / f);
        Ok(softmax_rows(&logits, self.config.n_classes))
    }

    pub fn forward(&self, input: &ClipInput) -> Result<BackbonePass> {
        let features = self.extract_features(input)?;
        let batch = features.len() / self.config.feature_dim;
        let (pre_logits, logits) = self.head_logits(&features, batch);
        let probs = softmax_rows(&logits, self.config.n_classes);
        Ok(BackbonePass {
            features,
            pre_logits,
            logits,
            probs,
            batch,
        })
    }

    pub fn predict_proba(&self, input: &ClipInput) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.probs)
    }

    /// Gradient of `sum(dlogits * logits)`. Backbone entries stay zero when
    /// the backbone is frozen or `train_backbone` is false.
    pub fn backward(&self, input: &ClipInput, pass: &BackbonePass, dlogits: &[f64], train_backbone: bool) -> Result<Vec<f64>> {
        let (f, nc, batch) = (self.config.feature_dim, self.config.n_classes, pass.batch);
        if dlogits.len() != batch * nc {
            return Err(Error::Shape("logit gradient has the wrong length".into()));
        }
        let mut grads = self.params.zeros_like();
        let mut dpre = dlogits.to_vec();
        if let Some(id) = self.head_scale {
            let s = self.params.get(id).to_vec();
            let r = self.params.spec(id).range();
            for (i, d) in dpre.iter_mut().enumerate() {
                grads[r.start + i % nc] += *d * pass.pre_logits[i];
                *d *= s[i % nc];
            }
        }
        let wr = self.params.spec(self.head_weight).range();
        let br = self.params.spec(self.head_bias).range();
        let w = self.params.get(self.head_weight);
        let mut dfeat = vec![0.0; batch * f];
        for b in 0..batch {
            for o in 0..nc {
                let g = dpre[b * nc + o];
                grads[br.start + o] += g;
                for j in 0..f {
                    grads[wr.start + o * f + j] += g * pass.features[b * f + j];
                    dfeat[b * f + j] += g * w[o * f + j];
                }
            }
        }
        if train_backbone && !self.config.backbone_frozen {
            let first = &input.rgb[0];
            let (hw, c) = (first.h * first.w, first.c);
            let norm = (input.rgb.len() * hw) as f64;
            let bw = self.params.get(self.bb_weight);
            let bb = self.params.get(self.bb_bias);
            let bwr = self.params.spec(self.bb_weight).range();
            let bbr = self.params.spec(self.bb_bias).range();
            let mut px = vec![0.0; c];
            for frame in &input.rgb {
                for bi in 0..batch {
                    for p in 0..hw {
                        for (ci, v) in px.iter_mut().enumerate() {
                            *v = frame.data[(ci * batch + bi) * hw + p];
                        }
                        for j in 0..f {
                            let z = bb[j] + bw[j * c..(j + 1) * c].iter().zip(&px).map(|(a, x)| a * x).sum::<f64>();
                            if z > 0.0 {
                                let g = dfeat[bi * f + j] / norm;
                                grads[bbr.start + j] += g;
                                for ci in 0..c {
                                    grads[bwr.start + j * c + ci] += g * px[ci];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Fmap;

    #[test]
    fn head_parameter_counts() {
        let cfg = BackboneHeadConfig::default();
        assert_eq!(cfg.head_parameter_count(), 4100);
        let no_scale = BackboneHeadConfig {
            head_scale: false,
            ..cfg.clone()
        };
        assert_eq!(no_scale.head_parameter_count(), 4098);
        let m = BackboneHead::new(cfg, 0).unwrap();
        assert_eq!(m.trainable_parameters(), 4100);
    }

    #[test]
    fn hand_set_head_matches_closed_form_softmax() {
        let cfg = BackboneHeadConfig {
            feature_dim: 3,
            head_scale: false,
            ..Default::default()
        };
        let mut m = BackboneHead::new(cfg, 0).unwrap();
        let wid = m.head_weight;
        m.params_mut().get_mut(wid).copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let p = m.head_proba(&[0.5, 2.0, -1.0]).unwrap();
        let expect = 1.0 / (1.0 + (2.0f64 - 0.5).exp());
        assert!((p[0] - expect).abs() < 1e-12);
        assert!((p[1] - (1.0 - expect)).abs() < 1e-12);
    }

    #[test]
    fn frozen_backbone_gets_zero_gradient() {
        let cfg = BackboneHeadConfig {
            feature_dim: 8,
            ..Default::default()
        };
        let m = BackboneHead::new(cfg, 1).unwrap();
        let frame = Fmap::from_vec(3, 2, 2, 2, (0..24).map(|i| i as f64 / 24.0 - 0.3).collect());
        let input = ClipInput {
            rgb: vec![frame.clone(), frame],
            flow: Vec::new(),
        };
        let pass = m.forward(&input).unwrap();
        let g = m.backward(&input, &pass, &[1.0, -1.0, 0.5, -0.5], true).unwrap();
        let bw = m.params().spec(m.bb_weight).range();
        let bb = m.params().spec(m.bb_bias).range();
        assert!(g[bw.start..bb.end].iter().all(|&v| v == 0.0));
        assert!(g[bb.end..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn unfrozen_gradients_match_finite_differences() {
        let cfg = BackboneHeadConfig {
            feature_dim: 4,
            backbone_frozen: false,
            ..Default::default()
        };
        let mut m = BackboneHead::new(cfg, 2).unwrap();
        let frame = Fmap::from_vec(3, 1, 2, 2, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        let input = ClipInput {
            rgb: vec![frame],
            flow: Vec::new(),
        };
        let up = [0.7, -0.3];
        let pass = m.forward(&input).unwrap();
        let g = m.backward(&input, &pass, &up, true).unwrap();
        let eps = 1e-6;
        for i in 0..m.params().len() {
            let orig = m.params().data()[i];
            m.params_mut().data_mut()[i] = orig + eps;
            let lp: f64 = m.forward(&input).unwrap().logits.iter().zip(&up).map(|(a, b)| a * b).sum();
            m.params_mut().data_mut()[i] = orig - eps;
            let lm: f64 = m.forward(&input).unwrap().logits.iter().zip(&up).map(|(a, b)| a * b).sum();
            m.params_mut().data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-6, "param {i}: {fd} vs {}", g[i]);
        }
    }
}
