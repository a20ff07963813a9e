//! Single-file checkpoints: magic line, length-prefixed JSON header, then
//! little-endian `f64` parameters followed by buffers.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackboneHead, Clstm2, Model, ModelConfig};
use crate::data::NormalizationStats;
use crate::error::{Error, Result};
use crate::nn::{ParamSpec, ParamStore};

pub const CHECKPOINT_FORMAT: &str = "clstm2.v1";

/// Where a model state came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Provenance {
    pub domain_id: Option<String>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub provenance: Provenance,
    pub normalization: Option<NormalizationStats>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    model: ModelConfig,
    provenance: Provenance,
    normalization: Option<NormalizationStats>,
    params: Vec<ParamSpec>,
    buffers: Vec<ParamSpec>,
}

pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let empty = ParamStore::new();
    let buffers = ckpt.model.buffers().unwrap_or(&empty);
    let header = Header {
        format: CHECKPOINT_FORMAT.into(),
        model: ckpt.model.config(),
        provenance: ckpt.provenance.clone(),
        normalization: ckpt.normalization.clone(),
        params: ckpt.model.params().specs().to_vec(),
        buffers: buffers.specs().to_vec(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(32 + json.len() + 8 * (ckpt.model.params().len() + buffers.len()));
    out.extend_from_slice(CHECKPOINT_FORMAT.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in ckpt.model.params().data().iter().chain(buffers.data()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    crate::frames::ensure_parent(path)?;
    let bytes = checkpoint_bytes(ckpt)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn read_f64s(bytes: &[u8], n: usize) -> Result<(Vec<f64>, &[u8])> {
    if bytes.len() < 8 * n {
        return Err(Error::Checkpoint("checkpoint is truncated".into()));
    }
    let (head, rest) = bytes.split_at(8 * n);
    let vals = head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((vals, rest))
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let magic = format!("{CHECKPOINT_FORMAT}\n");
    let rest = bytes
        .strip_prefix(magic.as_bytes())
        .ok_or_else(|| Error::Checkpoint(format!("not a {CHECKPOINT_FORMAT} checkpoint")))?;
    if rest.len() < 8 {
        return Err(Error::Checkpoint("checkpoint is truncated".into()));
    }
    let (len, rest) = rest.split_at(8);
    let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
    if rest.len() < len {
        return Err(Error::Checkpoint("checkpoint header is truncated".into()));
    }
    let (json, rest) = rest.split_at(len);
    let header: Header = serde_json::from_slice(json)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {}", header.format)));
    }
    let n_params: usize = header.params.iter().map(ParamSpec::len).sum();
    let n_buffers: usize = header.buffers.iter().map(ParamSpec::len).sum();
    let (pdata, rest) = read_f64s(rest, n_params)?;
    let (bdata, rest) = read_f64s(rest, n_buffers)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after the data", rest.len())));
    }
    let params = ParamStore::from_parts(header.params, pdata)?;
    let buffers = ParamStore::from_parts(header.buffers, bdata)?;
    let model = match header.model {
        ModelConfig::Clstm2(c) => Model::Clstm2(Clstm2::from_parts(c, params, buffers)?),
        ModelConfig::BackboneHead(c) => {
            if !buffers.is_empty() {
                return Err(Error::Checkpoint("backbone-head checkpoints carry no buffers".into()));
            }
            Model::BackboneHead(BackboneHead::from_params(c, params)?)
        }
    };
    if let Some(n) = &header.normalization {
        n.validate()?;
    }
    Ok(Checkpoint {
        model,
        provenance: header.provenance,
        normalization: header.normalization,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneHeadConfig, Clstm2Config};

    #[test]
    fn round_trip_is_lossless() {
        let cfg = ModelConfig::Clstm2(Clstm2Config {
            channels_per_block: vec![2, 2, 2, 2],
            kernel_size: 3,
            input_hw: (16, 32),
            seq_len: 2,
            ..Default::default()
        });
        for cfg in [cfg, ModelConfig::BackboneHead(BackboneHeadConfig { feature_dim: 5, ..Default::default() })] {
            let mut model = Model::new(&cfg, 7).unwrap();
            model.params_mut().data_mut()[0] = std::f64::consts::PI * 1e-300;
            let ckpt = Checkpoint {
                model,
                provenance: Provenance {
                    domain_id: Some("SYNTH_DENSE".into()),
                    epochs: Some(115),
                    seed: Some(3),
                    note: None,
                },
                normalization: Some(NormalizationStats {
                    rgb_mean: vec![0.1, 0.2, 0.3],
                    rgb_std: vec![1.0, 2.0, 3.0],
                }),
            };
            let bytes = checkpoint_bytes(&ckpt).unwrap();
            let back = checkpoint_from_bytes(&bytes).unwrap();
            assert_eq!(back.model.params(), ckpt.model.params());
            assert_eq!(back.model.buffers(), ckpt.model.buffers());
            assert_eq!(back.provenance, ckpt.provenance);
            assert_eq!(back.normalization, ckpt.normalization);
            assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        assert!(checkpoint_from_bytes(b"something else").is_err());
        let model = Model::new(&ModelConfig::BackboneHead(BackboneHeadConfig { feature_dim: 2, ..Default::default() }), 0).unwrap();
        let bytes = checkpoint_bytes(&Checkpoint {
            model,
            provenance: Provenance::default(),
            normalization: None,
        })
        .unwrap();
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
