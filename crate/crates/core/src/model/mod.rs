//! Classifiers sharing one prediction interface.

mod backbone;
pub mod checkpoint;
mod clstm;

pub use backbone::{BackboneHead, BackboneHeadConfig, BackbonePass};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Provenance, CHECKPOINT_FORMAT};
pub use clstm::{stream_prefix, Clstm2, Clstm2Config, ForwardPass, N_BLOCKS, POOL_FACTOR};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Fmap, NormMode, ParamId, ParamStore};

/// A batch of clips in channel-major layout, one map per timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipInput {
    pub rgb: Vec<Fmap>,
    pub flow: Vec<Fmap>,
}

impl ClipInput {
    pub fn batch(&self) -> usize {
        self.rgb.first().map_or(0, |f| f.b)
    }
}

/// Row-wise softmax of a `rows x n` matrix.
pub fn softmax_rows(logits: &[f64], n: usize) -> Vec<f64> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(probs: &[f64], labels: &[usize], n: usize) -> Result<(f64, Vec<f64>)> {
    if probs.len() != labels.len() * n || labels.is_empty() {
        return Err(Error::Shape("labels do not match the probability rows".into()));
    }
    let b = labels.len() as f64;
    let mut grad = probs.to_vec();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= n {
            return Err(Error::Validation(format!("label {y} out of range")));
        }
        loss -= probs[i * n + y].max(1e-300).ln();
        grad[i * n + y] -= 1.0;
    }
    for g in &mut grad {
        *g /= b;
    }
    Ok((loss / b, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Clstm2(Clstm2Config),
    BackboneHead(BackboneHeadConfig),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Clstm2(Clstm2Config::default())
    }
}

/// Which parameters a training step may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Whole model; batch norm uses batch statistics.
    Full,
    /// Classification head only; everything below runs in inference mode.
    HeadOnly,
}

#[derive(Debug, Clone)]
pub enum Model {
    Clstm2(Clstm2),
    BackboneHead(BackboneHead),
}

pub struct StepOutput {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(match config {
            ModelConfig::Clstm2(c) => Model::Clstm2(Clstm2::new(c.clone(), seed)?),
            ModelConfig::BackboneHead(c) => Model::BackboneHead(BackboneHead::new(c.clone(), seed)?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Clstm2(m) => ModelConfig::Clstm2(m.config().clone()),
            Model::BackboneHead(m) => ModelConfig::BackboneHead(m.config().clone()),
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Model::Clstm2(m) => m.config().n_classes,
            Model::BackboneHead(m) => m.config().n_classes,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Clstm2(m) => m.params(),
            Model::BackboneHead(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Clstm2(m) => m.params_mut(),
            Model::BackboneHead(m) => m.params_mut(),
        }
    }

    pub fn buffers(&self) -> Option<&ParamStore> {
        match self {
            Model::Clstm2(m) => Some(m.buffers()),
            Model::BackboneHead(_) => None,
        }
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        match self {
            Model::Clstm2(m) => m.head_ids().to_vec(),
            Model::BackboneHead(m) => m.head_ids(),
        }
    }

    /// Row-major `batch x n_classes` probabilities in inference mode.
    pub fn predict_proba(&self, input: &ClipInput) -> Result<Vec<f64>> {
        match self {
            Model::Clstm2(m) => m.predict_proba(input),
            Model::BackboneHead(m) => m.predict_proba(input),
        }
    }

    /// Loss and gradients for one batch. In the full regime the batch-norm
    /// running statistics are updated as a side effect.
    pub fn train_step(&mut self, input: &ClipInput, labels: &[usize], regime: Regime) -> Result<StepOutput> {
        let n = self.n_classes();
        match self {
            Model::Clstm2(m) => {
                let mode = match regime {
                    Regime::Full => NormMode::Batch,
                    Regime::HeadOnly => NormMode::Running,
                };
                let pass = m.forward(input, mode)?;
                let (loss, dlogits) = cross_entropy(&pass.probs, labels, n)?;
                let grads = m.backward(&pass, &dlogits, regime == Regime::Full)?;
                if mode == NormMode::Batch {
                    m.update_running_stats(&pass);
                }
                Ok(StepOutput {
                    loss,
                    grads,
                    probs: pass.probs,
                })
            }
            Model::BackboneHead(m) => {
                let pass = m.forward(input)?;
                let (loss, dlogits) = cross_entropy(&pass.probs, labels, n)?;
                let grads = m.backward(input, &pass, &dlogits, regime == Regime::Full)?;
                Ok(StepOutput {
                    loss,
                    grads,
                    probs: pass.probs,
                })
            }
        }
    }

    /// Trainable parameter count.
    pub fn count_parameters(&self) -> usize {
        match self {
            Model::Clstm2(m) => count_parameters(m.params()),
            Model::BackboneHead(m) => m.trainable_parameters(),
        }
    }

    pub fn parameter_breakdown(&self) -> Vec<(String, usize)> {
        match self {
            Model::Clstm2(m) => m.parameter_breakdown(),
            Model::BackboneHead(m) => {
                let head = m.config().head_parameter_count();
                let mut out = Vec::new();
                if !m.config().backbone_frozen {
                    out.push(("backbone".to_string(), m.params().len() - head));
                }
                out.push(("head".to_string(), head));
                out
            }
        }
    }
}

pub fn count_parameters(store: &ParamStore) -> usize {
    store.len()
}

/// Parameters of one ConvLSTM cell: four gates, each with an input kernel,
/// a hidden kernel and a bias.
pub fn convlstm_cell_parameter_count(cin: usize, hidden: usize, k: usize) -> usize {
    4 * hidden * ((cin + hidden) * k * k + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_layer_store_counts_zero() {
        assert_eq!(count_parameters(&ParamStore::new()), 0);
    }

    #[test]
    fn single_unit_cell_has_twelve_parameters() {
        assert_eq!(convlstm_cell_parameter_count(1, 1, 1), 12);
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_onehot() {
        let probs = softmax_rows(&[0.0, 1.0, 2.0, -1.0], 2);
        let (loss, g) = cross_entropy(&probs, &[1, 0], 2).unwrap();
        let expect = -(probs[1].ln() + probs[2].ln()) / 2.0;
        assert!((loss - expect).abs() < 1e-12);
        assert!((g[1] - (probs[1] - 1.0) / 2.0).abs() < 1e-12);
        assert!((g[3] - probs[3] / 2.0).abs() < 1e-12);
    }

    #[test]
    fn config_round_trips_through_json() {
        for cfg in [ModelConfig::default(), ModelConfig::BackboneHead(BackboneHeadConfig::default())] {
            let s = serde_json::to_string(&cfg).unwrap();
            assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), cfg);
        }
    }
}
