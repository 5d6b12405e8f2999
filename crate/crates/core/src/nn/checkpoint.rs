//! Single-file checkpoint container shared by all trained networks.
//!
//! Layout: 8-byte magic, u32 little-endian header length, JSON header,
//! then f64 little-endian payload: every parameter tensor in header order,
//! followed by the optimizer's first and second moments when present.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::adam::{Adam, AdamConfig};
use super::params::ParamSet;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BGMTTSC1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    config: Value,
    step: u64,
    params: Vec<ParamDesc>,
    has_optimizer: bool,
    adam: Option<AdamConfig>,
    extra: Value,
}

#[derive(Serialize, Deserialize)]
struct ParamDesc {
    name: String,
    shape: Vec<usize>,
}

/// In-memory checkpoint: model kind, config snapshot, parameters, and
/// optionally Adam state.
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub step: u64,
    pub params: Vec<(String, ArrayD<f64>)>,
    pub adam: Option<(AdamConfig, Vec<ArrayD<f64>>, Vec<ArrayD<f64>>)>,
    pub extra: Value,
}

impl Checkpoint {
    pub fn from_params(
        kind: &str,
        config: Value,
        step: u64,
        params: &ParamSet,
        adam: Option<&Adam>,
    ) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            config,
            step,
            params: params
                .iter()
                .map(|(n, v)| (n.to_string(), v.clone()))
                .collect(),
            adam: adam.map(|a| (a.cfg, a.m.clone(), a.v.clone())),
            extra: Value::Null,
        }
    }

    /// Rebuild an [`Adam`] with restored moments; `params` must match the
    /// checkpointed shapes.
    pub fn restore_adam(&self, params: &ParamSet) -> Option<Adam> {
        self.adam.as_ref().map(|(cfg, m, v)| {
            let mut a = Adam::new(*cfg, params);
            a.step = self.step;
            a.m = m.clone();
            a.v = v.clone();
            a
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            step: self.step,
            params: self
                .params
                .iter()
                .map(|(n, v)| ParamDesc {
                    name: n.clone(),
                    shape: v.shape().to_vec(),
                })
                .collect(),
            has_optimizer: self.adam.is_some(),
            adam: self.adam.as_ref().map(|(cfg, _, _)| *cfg),
            extra: self.extra.clone(),
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        let push_arrays = |arrays: &[ArrayD<f64>], out: &mut Vec<u8>| {
            for a in arrays {
                for &v in a.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        let values: Vec<ArrayD<f64>> = self.params.iter().map(|(_, v)| v.clone()).collect();
        push_arrays(&values, &mut out);
        if let Some((_, m, v)) = &self.adam {
            push_arrays(m, &mut out);
            push_arrays(v, &mut out);
        }
        let mut f =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&out)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut f =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if bytes.len() < 12 || &bytes[0..8] != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: not a checkpoint file",
                path.display()
            )));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + hlen {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[12..12 + hlen])
            .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let mut offset = 12 + hlen;
        let mut read_array = |shape: &[usize]| -> Result<ArrayD<f64>> {
            let n: usize = shape.iter().product();
            let need = n * 8;
            if bytes.len() < offset + need {
                return Err(Error::Checkpoint("truncated payload".into()));
            }
            let data: Vec<f64> = bytes[offset..offset + need]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += need;
            ArrayD::from_shape_vec(IxDyn(shape), data)
                .map_err(|e| Error::Checkpoint(format!("payload shape: {e}")))
        };
        let mut params = Vec::with_capacity(header.params.len());
        for d in &header.params {
            params.push((d.name.clone(), read_array(&d.shape)?));
        }
        let adam = if header.has_optimizer {
            let cfg = header
                .adam
                .ok_or_else(|| Error::Checkpoint("optimizer state without config".into()))?;
            let mut m = Vec::with_capacity(header.params.len());
            for d in &header.params {
                m.push(read_array(&d.shape)?);
            }
            let mut v = Vec::with_capacity(header.params.len());
            for d in &header.params {
                v.push(read_array(&d.shape)?);
            }
            Some((cfg, m, v))
        } else {
            None
        };
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            step: header.step,
            params,
            adam,
            extra: header.extra,
        })
    }

    /// Decode the embedded config, verifying the model kind.
    pub fn config_as<T: serde::de::DeserializeOwned>(&self, expected_kind: &str) -> Result<T> {
        if self.kind != expected_kind {
            return Err(Error::Checkpoint(format!(
                "checkpoint kind {:?} but expected {:?}",
                self.kind, expected_kind
            )));
        }
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Checkpoint(format!("config decode: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn save_load_bitwise_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut params = ParamSet::new();
        params.add("a.w", ArrayD::from_shape_fn(IxDyn(&[3, 4]), |ix| (ix[0] * 4 + ix[1]) as f64 * 0.123456789));
        params.add("a.b", ArrayD::from_elem(IxDyn(&[3, 1]), -1.5e-7));
        let adam = Adam::new(AdamConfig::default(), &params);
        let ckpt = Checkpoint::from_params(
            "musicfilter",
            serde_json::json!({"width": 4}),
            42,
            &params,
            Some(&adam),
        );
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.kind, "musicfilter");
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.params.len(), 2);
        for ((n1, v1), (n2, v2)) in ckpt.params.iter().zip(&loaded.params) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2, "bitwise parameter round trip");
        }
        assert!(loaded.adam.is_some());
    }

    #[test]
    fn kind_mismatch_rejected() {
        let ckpt = Checkpoint {
            kind: "ssrn".into(),
            config: serde_json::json!({}),
            step: 0,
            params: vec![],
            adam: None,
            extra: Value::Null,
        };
        assert!(ckpt.config_as::<serde_json::Value>("gsttts").is_err());
    }

    #[test]
    fn garbage_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
