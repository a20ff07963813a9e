//! Experiment configuration file. Unknown keys anywhere are errors.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use paintransfer::explain::OverlayStyle;
use paintransfer::flow::{FlowEncoding, HornSchunckParams};
use paintransfer::mil::TieRule;
use paintransfer::model::ModelConfig;
use paintransfer::optim::OptimizerSpec;
use paintransfer::sampling::Stream;
use paintransfer::synth::SynthConfig;
use paintransfer::training::TrainConfig;
use paintransfer::transfer::{NormalizationSource, ZeroShotConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Manifest CSV; relative paths resolve against the config file.
    pub manifest: Option<PathBuf>,
    /// Root that manifest frame directories are relative to. Defaults to
    /// the manifest's directory.
    pub root: Option<PathBuf>,
    /// Listing of raw image-sequence videos for `prepare-frames`.
    pub source_listing: Option<PathBuf>,
    pub fps: f64,
    pub frame_hw: (usize, usize),
    pub clip_length: usize,
    pub clip_stride: usize,
    pub exclude_unresponsive: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: None,
            root: None,
            source_listing: None,
            fps: 2.0,
            frame_hw: (224, 224),
            clip_length: 10,
            clip_stride: 10,
            exclude_unresponsive: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub flip_prob: f64,
    pub seed: u64,
    pub n_repeats: usize,
    /// Fixed epoch count for `train-full`; otherwise scaled from a CV run.
    pub full_epochs: Option<usize>,
    pub optimizer: OptimizerSpec,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            max_epochs: t.max_epochs,
            early_stop_patience: t.early_stop_patience,
            batch_size: t.batch_size,
            eval_batch_size: t.eval_batch_size,
            flip_prob: t.flip_prob,
            seed: t.seed,
            n_repeats: 1,
            full_epochs: None,
            optimizer: t.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    pub normalization: NormalizationSource,
    pub n_repeats: usize,
}

impl Default for TransferSection {
    fn default() -> Self {
        TransferSection {
            normalization: NormalizationSource::Target,
            n_repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MilSection {
    /// Filters evaluated in addition to the unfiltered majority vote.
    pub k_fractions: Vec<f64>,
    pub tie_rule: TieRule,
}

impl Default for MilSection {
    fn default() -> Self {
        MilSection {
            k_fractions: vec![0.05, 0.01],
            tie_rule: TieRule::ConfidenceThenPain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub horn_schunck: HornSchunckParams,
    /// Displacement clip range in pixels per frame; scaled from the frame
    /// width when absent.
    pub clip_range: Option<f64>,
    pub channels: usize,
}

impl Default for FlowSection {
    fn default() -> Self {
        FlowSection {
            horn_schunck: HornSchunckParams::default(),
            clip_range: None,
            channels: 3,
        }
    }
}

impl FlowSection {
    pub fn encoding(&self) -> Result<Option<FlowEncoding>> {
        Ok(match self.clip_range {
            Some(r) => Some(FlowEncoding::new(r, self.channels)?),
            None if self.channels == 3 => None,
            None => bail!("flow.channels = {} needs an explicit flow.clip_range", self.channels),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainSection {
    pub stream: Stream,
    /// Class whose score is explained (1 = pain).
    pub class: usize,
    pub max_clips: usize,
    pub style: OverlayStyle,
}

impl Default for ExplainSection {
    fn default() -> Self {
        ExplainSection {
            stream: Stream::Rgb,
            class: 1,
            max_clips: 8,
            style: OverlayStyle::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub transfer: TransferSection,
    pub mil: MilSection,
    pub flow: FlowSection,
    pub explain: ExplainSection,
    /// Generator settings for `synth`; presets are used when absent.
    pub synth: Option<SynthConfig>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            data: DataSection::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            transfer: TransferSection::default(),
            mil: MilSection::default(),
            flow: FlowSection::default(),
            explain: ExplainSection::default(),
            synth: None,
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config and makes its relative data paths absolute with respect
    /// to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.manifest, &mut cfg.data.root, &mut cfg.data.source_listing]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.train.n_repeats == 0 || self.transfer.n_repeats == 0 {
            bail!("n_repeats must be at least 1");
        }
        for &k in &self.mil.k_fractions {
            paintransfer::mil::MilConfig::new(k)?;
        }
        if !(self.data.fps > 0.0) {
            bail!("data.fps must be positive");
        }
        if let ModelConfig::Clstm2(m) = &self.model {
            m.validate()?;
            if m.seq_len != self.data.clip_length {
                bail!("model.seq_len {} differs from data.clip_length {}", m.seq_len, self.data.clip_length);
            }
            if m.flow_channels != self.flow.channels {
                bail!("model.flow_channels {} differs from flow.channels {}", m.flow_channels, self.flow.channels);
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.train.max_epochs,
            early_stop_patience: self.train.early_stop_patience,
            batch_size: self.train.batch_size,
            eval_batch_size: self.train.eval_batch_size,
            flip_prob: self.train.flip_prob,
            seed: self.train.seed,
            optimizer: self.train.optimizer.clone(),
            clip_length: self.data.clip_length,
            clip_stride: self.data.clip_stride,
        }
    }

    pub fn zero_shot_config(&self) -> ZeroShotConfig {
        ZeroShotConfig {
            clip_length: self.data.clip_length,
            clip_stride: self.data.clip_stride,
            eval_batch_size: self.train.eval_batch_size,
            normalization: self.transfer.normalization,
        }
    }

    pub fn flow_channels(&self) -> usize {
        self.flow.channels
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let cfg = Config::parse("").unwrap();
        assert_eq!(cfg.data.clip_length, 10);
        assert_eq!(cfg.data.fps, 2.0);
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.train.eval_batch_size, 8);
        assert_eq!(cfg.train.max_epochs, 200);
        assert_eq!(cfg.train.early_stop_patience, 50);
        assert_eq!(cfg.mil.k_fractions, vec![0.05, 0.01]);
        assert_eq!(cfg.transfer.n_repeats, 3);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::parse("[data]\nclip_lenght = 10\n").is_err());
        assert!(Config::parse("[bogus]\n").is_err());
        assert!(Config::parse("[model]\nkind = \"clstm2\"\nkernel = 3\n").is_err());
        assert!(Config::parse("[train.optimizer]\nlr = 0.1\n").is_err());
    }

    #[test]
    fn partial_model_section() {
        let cfg = Config::parse("[model]\nkind = \"clstm2\"\nkernel_size = 3\ninput_hw = [32, 32]\n").unwrap();
        match cfg.model {
            ModelConfig::Clstm2(m) => {
                assert_eq!(m.kernel_size, 3);
                assert_eq!(m.channels_per_block, vec![32; 4]);
            }
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = Config::parse("[train]\nseed = 7\n[explain]\nstream = \"flow\"\n").unwrap();
        assert_eq!(Config::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn inconsistent_clip_length_rejected() {
        assert!(Config::parse("[data]\nclip_length = 8\n").is_err());
    }
}
