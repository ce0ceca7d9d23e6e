//! `AIRCKPT1` checkpoints.
//!
//! ```text
//! magic    8 bytes  "AIRCKPT1"
//! version  u32 LE
//! count    u32 LE
//! count x  { u16 LE name length, name bytes (UTF-8),
//!            u32 LE ndim, ndim x u32 LE dims, f32 LE data }
//! trailer  JSON metadata up to end of file
//! ```
//!
//! Tensor names are prefixed `g/`, `d/`, `opt_g/` and `opt_d/`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::RmsProp;
use super::TrainConfig;
use crate::nets::{NamedParam, Network, NetworkSpec};
use crate::synthdata::DataError;
use crate::synthdata::Reader;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AIRCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error("checkpoint version {found} is not supported (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint content: {0}")]
    Invalid(String),
}

impl From<DataError> for CheckpointError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { path, source } => Self::Io { path, source },
            DataError::Format { offset, detail } => Self::Format { offset, detail },
            other => Self::Invalid(other.to_string()),
        }
    }
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub g: Network,
    pub d: Network,
    pub opt_g: RmsProp,
    pub opt_d: RmsProp,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed iterations (each `n_critic` critic steps + one generator step).
    pub iteration: usize,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    epoch: usize,
    iteration: usize,
    config: TrainConfig,
    generator: NetworkSpec,
    critic: NetworkSpec,
}

fn named_tensors(state: &TrainState) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = Vec::new();
    for (prefix, net, opt) in [("g", &state.g, &state.opt_g), ("d", &state.d, &state.opt_d)] {
        for p in net.params() {
            out.push((format!("{prefix}/{}", p.name), &p.value));
        }
        for (p, acc) in net.params().iter().zip(opt.accumulators()) {
            out.push((format!("opt_{prefix}/{}", p.name), acc));
        }
    }
    out
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let tensors = named_tensors(state);
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = Meta {
        epoch: state.epoch,
        iteration: state.iteration,
        config: state.config.clone(),
        generator: state.g.spec().clone(),
        critic: state.d.spec().clone(),
    };
    out.extend_from_slice(&serde_json::to_vec_pretty(&meta).expect("metadata serializes"));
    out
}

/// Splits `prefix/...` tensors out of `all` in stored order.
fn take_group(all: &[(String, Tensor)], prefix: &str) -> Vec<NamedParam> {
    all.iter()
        .filter_map(|(name, t)| {
            name.strip_prefix(prefix)
                .and_then(|rest| rest.strip_prefix('/'))
                .map(|rest| NamedParam {
                    name: rest.to_string(),
                    value: t.clone(),
                })
        })
        .collect()
}

fn optimizer_for(
    net: &Network,
    acc: Vec<NamedParam>,
    which: &str,
) -> Result<RmsProp, CheckpointError> {
    let matches = acc.len() == net.params().len()
        && net
            .params()
            .iter()
            .zip(&acc)
            .all(|(p, a)| p.name == a.name && p.value.shape() == a.value.shape());
    if !matches {
        return Err(CheckpointError::Invalid(format!(
            "{which} accumulators do not match the network parameters"
        )));
    }
    Ok(RmsProp::from_accumulators(
        acc.into_iter().map(|a| a.value).collect(),
    ))
}

/// Parses a whole checkpoint; nothing is returned unless every part is valid.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState, CheckpointError> {
    let mut r = Reader::new(bytes);
    let magic = r.take(8, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Format {
            offset: 0,
            detail: format!("bad magic {:?}", String::from_utf8_lossy(magic)),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let at = r.offset();
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| CheckpointError::Format {
                offset: at,
                detail: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        tensors.push((name, r.tensor()?));
    }
    let meta_at = r.offset();
    let meta: Meta = serde_json::from_slice(r.rest()).map_err(|e| CheckpointError::Format {
        offset: meta_at,
        detail: format!("metadata: {e}"),
    })?;
    let net = |spec: NetworkSpec, prefix: &str| {
        Network::from_params(spec, take_group(&tensors, prefix))
            .map_err(|e| CheckpointError::Invalid(format!("{prefix}: {e}")))
    };
    let g = net(meta.generator, "g")?;
    let d = net(meta.critic, "d")?;
    let opt_g = optimizer_for(&g, take_group(&tensors, "opt_g"), "generator")?;
    let opt_d = optimizer_for(&d, take_group(&tensors, "opt_d"), "critic")?;
    let expected = 2 * (g.params().len() + d.params().len());
    if tensors.len() != expected {
        return Err(CheckpointError::Invalid(format!(
            "{} tensors stored, expected {expected}",
            tensors.len()
        )));
    }
    Ok(TrainState {
        g,
        d,
        opt_g,
        opt_d,
        epoch: meta.epoch,
        iteration: meta.iteration,
        config: meta.config,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(state)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_network, forward_d, forward_g};

    fn state() -> TrainState {
        let config = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let g = build_network(
            NetworkSpec::generator(2, 3)
                .with_size(32)
                .with_widths(4, 2, 8),
            1,
        )
        .unwrap();
        let mut d =
            build_network(NetworkSpec::critic(2).with_size(32).with_widths(4, 2, 8), 2).unwrap();
        // Give the zero-initialized heads some non-trivial values.
        for t in d.params_mut() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += (i as f32 * 0.37).sin() * 1e-3;
            }
        }
        let mut opt_g = RmsProp::new(g.params().iter().map(|p| &p.value));
        let grads: Vec<Tensor> = g
            .params()
            .iter()
            .map(|p| p.value.map(|v| v + 0.1))
            .collect();
        let mut g2 = g.clone();
        opt_g.step(g2.params_mut(), &grads, 1e-3);
        let opt_d = RmsProp::new(d.params().iter().map(|p| &p.value));
        TrainState {
            g: g2,
            d,
            opt_g,
            opt_d,
            epoch: 2,
            iteration: 17,
            config,
        }
    }

    #[test]
    fn round_trip_preserves_forward_outputs_bitwise() {
        let s = state();
        let back = decode_checkpoint(&encode_checkpoint(&s)).unwrap();
        assert_eq!(back, s);
        let pair = crate::synthdata::generate_pair(3, 32, 1, 1.0).unwrap();
        let (fixed1, moving) = (&pair.fixed, &pair.moving);
        let a = forward_g(&s.g, fixed1, moving).unwrap();
        let b = forward_g(&back.g, fixed1, moving).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let da = forward_d(&s.d, fixed1, moving).unwrap();
        let db = forward_d(&back.d, fixed1, moving).unwrap();
        assert_eq!(da.to_bits(), db.to_bits());
    }

    #[test]
    fn records_epoch_and_config() {
        let bytes = encode_checkpoint(&state());
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.epoch, 2);
        assert_eq!(back.iteration, 17);
        assert_eq!(back.config.epochs, 3);
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.contains("\"clip_c\": 0.01"));
        assert!(text.contains("\"n_critic\": 2"));
    }

    #[test]
    fn truncation_is_an_error() {
        let bytes = encode_checkpoint(&state());
        for cut in [4, 10, 15, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = encode_checkpoint(&state());
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(CheckpointError::Version { found: 7 })
        ));
    }

    #[test]
    fn corrupt_tensor_length_is_an_error() {
        let mut bytes = encode_checkpoint(&state());
        // First tensor: name length at 16, name, then ndim and dims.
        let name_len = u16::from_le_bytes([bytes[16], bytes[17]]) as usize;
        let dim0 = 18 + name_len + 4;
        bytes[dim0..dim0 + 4].copy_from_slice(&1000u32.to_le_bytes());
        assert!(decode_checkpoint(&bytes).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.airckpt");
        let s = state();
        save_checkpoint(&s, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), s);
    }
}
