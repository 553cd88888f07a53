//! Convolutional backbone, linear heads, training loops and checkpoints.

mod backbone;
mod checkpoint;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use backbone::{build_backbone, embed};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingMeta};
pub use train::{train_backbone, train_linear_head, TrainOptions, TrainReport};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    pub stride: usize,
}

fn default_kernel() -> usize {
    3
}

/// Stages of `conv(kernel, stride, same-padding) + bias + relu`, followed by
/// a global average pool that yields the embedding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_shape: [usize; 3],
    pub stages: Vec<StageConfig>,
    pub embedding_dim: usize,
}

impl BackboneConfig {
    /// Three stride-2 stages of 16, 32 and 64 channels.
    pub fn small(channels: usize, size: usize) -> Self {
        let stage = |c| StageConfig {
            channels: c,
            kernel: 3,
            stride: 2,
        };
        Self {
            input_shape: [channels, size, size],
            stages: vec![stage(16), stage(32), stage(64)],
            embedding_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_shape.contains(&0) {
            return bad(format!("input shape {:?}", self.input_shape));
        }
        let Some(last) = self.stages.last() else {
            return bad("backbone needs at least one stage".into());
        };
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.stride == 0 {
                return bad(format!("stage {i}: channels and stride must be positive"));
            }
            if s.kernel % 2 == 0 {
                return bad(format!("stage {i}: kernel {} must be odd", s.kernel));
            }
        }
        if last.channels != self.embedding_dim {
            return bad(format!(
                "embedding_dim {} differs from last stage channels {}",
                self.embedding_dim, last.channels
            ));
        }
        Ok(())
    }

    /// `(name, shape)` of every backbone parameter, in forward order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut c_in = self.input_shape[0];
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((
                format!("stage{i}.weight"),
                vec![s.channels, c_in, s.kernel, s.kernel],
            ));
            out.push((format!("stage{i}.bias"), vec![s.channels]));
            c_in = s.channels;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Softmax classifier `weight · embedding + bias` with `weight: [K, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearHead {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let k = match *weight.shape() {
            [k, _] => k,
            _ => {
                return Err(Error::shape(
                    "linear head",
                    "[K, D]",
                    format!("{:?}", weight.shape()),
                ))
            }
        };
        if bias.shape() != [k] {
            return Err(Error::shape(
                "linear head",
                format!("bias [{k}]"),
                format!("{:?}", bias.shape()),
            ));
        }
        if !weight.is_finite() || !bias.is_finite() {
            return Err(Error::InvalidConfig(
                "linear head has non-finite entries".into(),
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[classes, dim]),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::shape(
                "linear head",
                format!("embedding dim {}", self.dim()),
                d,
            ));
        }
        Ok(())
    }

    /// Logits in `f64` for an embedding given in `f64`.
    pub fn logits_f64(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(embedding.len())?;
        Ok(self
            .weight
            .data()
            .chunks(self.dim())
            .zip(self.bias.data())
            .map(|(row, &b)| {
                row.iter()
                    .zip(embedding)
                    .map(|(&w, &e)| w as f64 * e)
                    .sum::<f64>()
                    + b as f64
            })
            .collect())
    }

    pub fn logits(&self, embedding: &Tensor) -> Result<Vec<f64>> {
        let e: Vec<f64> = embedding.data().iter().map(|&v| v as f64).collect();
        self.logits_f64(&e)
    }

    pub fn params_bytes(&self) -> Vec<u8> {
        self.weight
            .data()
            .iter()
            .chain(self.bias.data())
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }
}
