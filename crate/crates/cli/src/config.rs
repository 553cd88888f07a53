use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use metta::analysis::{default_alphas, Method};
use metta::data::AugmentationPolicy;
use metta::model::{BackboneConfig, StageConfig, TrainOptions};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub backbone: BackboneSection,
    pub training: TrainingSection,
    pub eval: EvalSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    pub output_dir: PathBuf,
}

/// Either a generator description or a pair of dataset files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub seed: Option<u64>,
    pub train_count: Option<usize>,
    pub test_count: Option<usize>,
    pub classes: Option<usize>,
    pub image_size: Option<usize>,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Generated {
        seed: u64,
        train_count: usize,
        test_count: usize,
        classes: usize,
        image_size: usize,
    },
    Files {
        train: PathBuf,
        test: PathBuf,
    },
}

impl DatasetSection {
    pub fn source(&self) -> Result<DatasetSource> {
        if self.train_path.is_some() || self.test_path.is_some() {
            return match (&self.train_path, &self.test_path) {
                (Some(train), Some(test)) => Ok(DatasetSource::Files {
                    train: train.clone(),
                    test: test.clone(),
                }),
                (None, _) => bail!("missing config key: dataset.train_path"),
                (_, None) => bail!("missing config key: dataset.test_path"),
            };
        }
        let missing: Vec<&str> = [
            ("dataset.seed", self.seed.is_none()),
            ("dataset.train_count", self.train_count.is_none()),
            ("dataset.test_count", self.test_count.is_none()),
            ("dataset.classes", self.classes.is_none()),
            ("dataset.image_size", self.image_size.is_none()),
        ]
        .into_iter()
        .filter_map(|(k, m)| m.then_some(k))
        .collect();
        if !missing.is_empty() {
            bail!("missing config keys: {}", missing.join(", "));
        }
        Ok(DatasetSource::Generated {
            seed: self.seed.unwrap(),
            train_count: self.train_count.unwrap(),
            test_count: self.test_count.unwrap(),
            classes: self.classes.unwrap(),
            image_size: self.image_size.unwrap(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub stages: Vec<StageConfig>,
    pub embedding_dim: usize,
}

impl BackboneSection {
    pub fn config(&self, input_shape: [usize; 3]) -> BackboneConfig {
        BackboneConfig {
            input_shape,
            stages: self.stages.clone(),
            embedding_dim: self.embedding_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub momentum: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub momentum: f32,
    pub policy: AugmentationPolicy,
    /// Seeds backbone initialization, shuffling and augmentation.
    pub seed: u64,
    /// Linear evaluation head on the frozen backbone.
    pub linear: OptimizerSection,
}

impl TrainingSection {
    pub fn backbone_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch: self.batch,
            learning_rate: self.lr,
            momentum: self.momentum,
            seed: self.seed,
        }
    }

    pub fn linear_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.linear.epochs,
            batch: self.linear.batch,
            learning_rate: self.linear.lr,
            momentum: self.linear.momentum,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub methods: Vec<String>,
    #[serde(rename = "S")]
    pub samples: Vec<usize>,
    pub seed: u64,
    /// Test-time augmentation; the training policy when absent.
    #[serde(default)]
    pub policy: Option<AugmentationPolicy>,
}

impl EvalSection {
    pub fn methods(&self) -> Result<Vec<Method>> {
        Ok(self
            .methods
            .iter()
            .map(|m| m.parse())
            .collect::<Result<Vec<Method>, _>>()?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub alphas: Vec<f64>,
    /// Augmentation samples per image for curves and jitter.
    #[serde(rename = "S")]
    pub samples: usize,
    pub jitter_subset: usize,
    pub retrieval_corpus: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            alphas: default_alphas(),
            samples: 32,
            jitter_subset: 50,
            retrieval_corpus: 200,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                anyhow::anyhow!("invalid config: {inner}")
            } else {
                anyhow::anyhow!("invalid config at `{path}`: {inner}")
            }
        })?;
        cfg.dataset.source()?;
        cfg.training.policy.validate()?;
        if let Some(p) = &cfg.eval.policy {
            p.validate()?;
        }
        cfg.eval.methods()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn eval_policy(&self) -> &AugmentationPolicy {
        self.eval.policy.as_ref().unwrap_or(&self.training.policy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEFAULT: &str = include_str!("../configs/default.json");

    #[test]
    fn bundled_config_parses() {
        let cfg = ExperimentConfig::from_json(DEFAULT).unwrap();
        assert_eq!(cfg.eval.samples, [10, 32]);
        assert_eq!(cfg.eval.methods().unwrap(), Method::ALL);
        assert!(matches!(
            cfg.dataset.source().unwrap(),
            DatasetSource::Generated {
                train_count: 2000,
                ..
            }
        ));
    }

    #[test]
    fn missing_keys_are_named() {
        let mut v: serde_json::Value = serde_json::from_str(DEFAULT).unwrap();
        v["training"].as_object_mut().unwrap().remove("epochs");
        let err = ExperimentConfig::from_json(&v.to_string())
            .unwrap_err()
            .to_string();
        assert!(err.contains("epochs") && err.contains("training"), "{err}");

        let mut v: serde_json::Value = serde_json::from_str(DEFAULT).unwrap();
        v["dataset"].as_object_mut().unwrap().remove("classes");
        let err = ExperimentConfig::from_json(&v.to_string())
            .unwrap_err()
            .to_string();
        assert!(err.contains("dataset.classes"), "{err}");
    }

    #[test]
    fn unknown_method_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(DEFAULT).unwrap();
        v["eval"]["methods"] = serde_json::json!(["central", "median"]);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }
}
