//! Binary checkpoint format (`MTCK`, version 1, little-endian):
//!
//! ```text
//! magic "MTCK" | u32 version
//! config:  u32 C, H, W | u32 stage count | per stage u32 channels, kernel, stride
//!          | u32 embedding_dim
//! meta:    u32 seed low, u32 seed high | u32 epochs | u32 len + utf-8 policy
//! tensors: u32 count | per tensor u16 name length, name, u8 rank,
//!          u32 dims, f32 payload
//! ```
//!
//! Backbone tensors are `stage{i}.weight` / `stage{i}.bias`; heads are stored
//! as `train_head.*` (the head trained jointly with the backbone) and
//! `head.*` (the linear-evaluation head).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{BackboneConfig, LinearHead, StageConfig};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MTCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: u32,
    pub policy: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: BackboneConfig,
    params: BTreeMap<String, Tensor>,
    pub train_head: Option<LinearHead>,
    pub head: Option<LinearHead>,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn new(config: BackboneConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.param_shapes() {
            let t = params
                .get(&name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            if t.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint",
                    expected: format!("{name} {shape:?}"),
                    actual: format!("{:?}", t.shape()),
                });
            }
        }
        if params.len() != config.param_shapes().len() {
            let extra = params
                .keys()
                .find(|k| !config.param_shapes().iter().any(|(n, _)| n == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Format(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self {
            config,
            params,
            train_head: None,
            head: None,
            meta: TrainingMeta::default(),
        })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    /// Backbone parameters in forward order.
    pub fn backbone_params(&self) -> Vec<(&str, &Tensor)> {
        self.config
            .param_shapes()
            .into_iter()
            .map(|(n, _)| {
                let (k, v) = self
                    .params
                    .get_key_value(&n)
                    .expect("validated at construction");
                (k.as_str(), v)
            })
            .collect()
    }

    pub(crate) fn backbone_params_mut(&mut self) -> Vec<&mut Tensor> {
        let order: Vec<String> = self
            .config
            .param_shapes()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let mut by_name: BTreeMap<&String, &mut Tensor> = self.params.iter_mut().collect();
        order
            .iter()
            .map(|n| by_name.remove(n).expect("validated at construction"))
            .collect()
    }

    /// Raw little-endian bytes of every backbone tensor, in name order.
    pub fn backbone_bytes(&self) -> Vec<u8> {
        self.params
            .values()
            .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    pub fn backbone_digest(&self) -> u64 {
        let all: Vec<f32> = self
            .params
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        rng::content_key(&all)
    }

    pub fn require_head(&self) -> Result<&LinearHead> {
        self.head.as_ref().ok_or(Error::MissingHead("linear head"))
    }

    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> =
            self.params.iter().map(|(k, v)| (k.clone(), v)).collect();
        for (prefix, head) in [("train_head", &self.train_head), ("head", &self.head)] {
            if let Some(h) = head {
                out.push((format!("{prefix}.weight"), &h.weight));
                out.push((format!("{prefix}.bias"), &h.bias));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        for d in self.config.input_shape {
            w.u32(d as u32);
        }
        w.u32(self.config.stages.len() as u32);
        for s in &self.config.stages {
            w.u32(s.channels as u32);
            w.u32(s.kernel as u32);
            w.u32(s.stride as u32);
        }
        w.u32(self.config.embedding_dim as u32);

        w.u32(self.meta.seed as u32);
        w.u32((self.meta.seed >> 32) as u32);
        w.u32(self.meta.epochs);
        w.u32(self.meta.policy.len() as u32);
        w.bytes(self.meta.policy.as_bytes());

        let tensors = self.tensors();
        w.u32(tensors.len() as u32);
        for (name, t) in tensors {
            w.u16(name.len() as u16);
            w.bytes(name.as_bytes());
            w.u8(t.rank() as u8);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            w.f32s(t.data());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, expected {VERSION}"
            )));
        }
        let input_shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let n_stages = r.u32()? as usize;
        let mut stages = Vec::with_capacity(n_stages.min(64));
        for _ in 0..n_stages {
            stages.push(StageConfig {
                channels: r.u32()? as usize,
                kernel: r.u32()? as usize,
                stride: r.u32()? as usize,
            });
        }
        let config = BackboneConfig {
            input_shape,
            stages,
            embedding_dim: r.u32()? as usize,
        };

        let seed = r.u32()? as u64 | (r.u32()? as u64) << 32;
        let epochs = r.u32()?;
        let policy_len = r.u32()? as usize;
        let policy = String::from_utf8(r.take(policy_len)?.to_vec())
            .map_err(|_| Error::Format("policy descriptor is not utf-8".into()))?;

        let count = r.u32()? as usize;
        let mut params = BTreeMap::new();
        let mut heads: BTreeMap<String, Tensor> = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::Format(format!("tensor `{name}` too large")))?;
            let t = Tensor::new(shape, r.f32s(n)?)?;
            if name.starts_with("head.") || name.starts_with("train_head.") {
                heads.insert(name, t);
            } else {
                params.insert(name, t);
            }
        }
        r.expect_end()?;

        let mut ckpt = Checkpoint::new(config, params)?;
        ckpt.meta = TrainingMeta {
            seed,
            epochs,
            policy,
        };
        let mut take_head = |prefix: &str| -> Result<Option<LinearHead>> {
            let w = heads.remove(&format!("{prefix}.weight"));
            let b = heads.remove(&format!("{prefix}.bias"));
            match (w, b) {
                (None, None) => Ok(None),
                (Some(w), Some(b)) => Ok(Some(LinearHead::new(w, b)?)),
                (Some(_), None) => Err(Error::MissingParameter(format!("{prefix}.bias"))),
                (None, Some(_)) => Err(Error::MissingParameter(format!("{prefix}.weight"))),
            }
        };
        ckpt.train_head = take_head("train_head")?;
        ckpt.head = take_head("head")?;
        if let Some(name) = heads.keys().next() {
            return Err(Error::Format(format!("unexpected tensor `{name}`")));
        }
        for h in ckpt.train_head.iter().chain(&ckpt.head) {
            if h.dim() != ckpt.config.embedding_dim {
                return Err(Error::shape(
                    "checkpoint head",
                    ckpt.config.embedding_dim,
                    h.dim(),
                ));
            }
        }
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_backbone, embed};

    fn ckpt_with_heads() -> Checkpoint {
        let mut c = build_backbone(&BackboneConfig::small(1, 16), 5).unwrap();
        c.train_head =
            Some(LinearHead::new(Tensor::full(&[3, 64], 0.5), Tensor::zeros(&[3])).unwrap());
        c.head =
            Some(LinearHead::new(Tensor::full(&[3, 64], -0.25), Tensor::full(&[3], 1.0)).unwrap());
        c.meta = TrainingMeta {
            seed: u64::MAX - 3,
            epochs: 7,
            policy: "flip_group".into(),
        };
        c
    }

    #[test]
    fn round_trip() {
        let c = ckpt_with_heads();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mtck");
        save_checkpoint(&c, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn embedding_survives_round_trip() {
        let c = ckpt_with_heads();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        let img = Tensor::new(
            vec![1, 16, 16],
            (0..256).map(|i| (i % 17) as f32 / 17.0).collect(),
        )
        .unwrap();
        assert!(embed(&c, &img)
            .unwrap()
            .bits_eq(&embed(&back, &img).unwrap()));
    }

    #[test]
    fn truncated_file_errors() {
        let bytes = ckpt_with_heads().to_bytes();
        for cut in [0, 4, 8, 30, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(
                    Checkpoint::from_bytes(&bytes[..cut]),
                    Err(Error::Truncated(_))
                ),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = ckpt_with_heads().to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
        bytes[0] = 0;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn missing_and_misshapen_parameters() {
        let c = build_backbone(&BackboneConfig::small(1, 16), 1).unwrap();
        let mut params = c.params.clone();
        params.remove("stage1.bias");
        assert!(matches!(
            Checkpoint::new(c.config.clone(), params),
            Err(Error::MissingParameter(n)) if n == "stage1.bias"
        ));
        let mut params = c.params.clone();
        params.insert("stage0.bias".into(), Tensor::zeros(&[3]));
        assert!(matches!(
            Checkpoint::new(c.config.clone(), params),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
