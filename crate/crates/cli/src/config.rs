//! Experiment configuration: one JSON document covering data, networks, training and evaluation.

use std::path::Path;

use caw_core::mask::{MaskMode, MaskSource, PoolMode};
use caw_core::metrics::EvalPool;
use caw_core::nn::{ConceptTrainConfig, NetConfig, TrainConfig};
use caw_core::stiefel::AlignConfig;
use caw_core::synth::SynthSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub num_samples: usize,
    pub image_size: usize,
    pub num_concepts: usize,
    pub concept_probs: Vec<f64>,
    pub noise_std: f64,
    pub fractions: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SynthSpec::default();
        Self {
            num_samples: 3000,
            image_size: s.image_size,
            num_concepts: s.num_concepts,
            concept_probs: s.concept_probs,
            noise_std: s.noise_std,
            fractions: [0.7, 0.15, 0.15],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSection {
    pub hidden_channels: usize,
    pub feature_channels: usize,
    pub use_caw: bool,
}

impl Default for NetSection {
    fn default() -> Self {
        let n = NetConfig::default();
        Self {
            hidden_channels: n.hidden_channels,
            feature_channels: n.feature_channels,
            use_caw: n.use_caw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConceptSection {
    /// Training-split images taken per concept for the concept dataset.
    pub samples_per_concept: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ConceptSection {
    fn default() -> Self {
        let c = ConceptTrainConfig::default();
        Self {
            samples_per_concept: 100,
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eta: f64,
    pub steps_per_pass: usize,
    /// Batches between alignment passes; `null` never aligns.
    pub update_period: Option<usize>,
    pub gamma: f64,
    pub eps: f64,
    pub momentum: f64,
    pub mask_mode: MaskMode,
    pub mask_source: MaskSource,
    pub pool: PoolMode,
    pub compensate_head: bool,
    pub recalibrate: bool,
    /// Initialize the main network's first convolution from the pretrained concept net.
    pub warm_start: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            eta: t.align.eta,
            steps_per_pass: t.align.steps_per_pass,
            update_period: t.align.update_period,
            gamma: t.gamma,
            eps: t.eps,
            momentum: t.momentum,
            mask_mode: t.mask_mode,
            mask_source: t.mask_source,
            pool: t.pool,
            compensate_head: t.compensate_head,
            recalibrate: t.recalibrate,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub pool: EvalPool,
    pub importance_repeats: usize,
    pub importance_batch: usize,
    pub gammas: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            pool: EvalPool::Max,
            importance_repeats: 20,
            importance_batch: 64,
            gammas: vec![0.0, 0.2, 0.5, 0.8, 1.0],
        }
    }
}

/// Everything that determines an experiment's outputs. Paths are deliberately
/// excluded so the hash does not depend on where files live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    pub net: NetSection,
    pub concept: ConceptSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            image_size: self.data.image_size,
            num_concepts: self.data.num_concepts,
            concept_probs: self.data.concept_probs.clone(),
            noise_std: self.data.noise_std,
            seed: self.seed,
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            in_channels: 3,
            hidden_channels: self.net.hidden_channels,
            feature_channels: self.net.feature_channels,
            num_outputs: 2,
            num_concepts: self.data.num_concepts,
            use_caw: self.net.use_caw,
            momentum: self.train.momentum,
            eps: self.train.eps,
        }
    }

    pub fn concept_train_config(&self) -> ConceptTrainConfig {
        ConceptTrainConfig {
            epochs: self.concept.epochs,
            batch_size: self.concept.batch_size,
            learning_rate: self.concept.learning_rate,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            seed: self.seed,
            align: AlignConfig {
                eta: t.eta,
                steps_per_pass: t.steps_per_pass,
                update_period: t.update_period,
            },
            gamma: t.gamma,
            eps: t.eps,
            momentum: t.momentum,
            mask_mode: t.mask_mode,
            mask_source: t.mask_source,
            pool: t.pool,
            compensate_head: t.compensate_head,
            recalibrate: t.recalibrate,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synth_spec()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.train_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let f = self.data.fractions;
        if f.iter().any(|x| !(*x >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CliError::Config(format!(
                "data.fractions {f:?} must be non-negative and sum to 1"
            )));
        }
        if self.data.num_samples == 0 {
            return Err(CliError::Config("data.num_samples must be positive".into()));
        }
        if self.net.feature_channels < self.data.num_concepts {
            return Err(CliError::Config(format!(
                "net.feature_channels {} is smaller than data.num_concepts {}",
                self.net.feature_channels, self.data.num_concepts
            )));
        }
        if self.net.hidden_channels == 0 {
            return Err(CliError::Config(
                "net.hidden_channels must be positive".into(),
            ));
        }
        let c = &self.concept;
        if c.samples_per_concept == 0 || c.batch_size == 0 || !(c.learning_rate > 0.0) {
            return Err(CliError::Config(
                "concept.samples_per_concept, batch_size and learning_rate must be positive".into(),
            ));
        }
        if self.eval.importance_repeats == 0 || self.eval.importance_batch < 2 {
            return Err(CliError::Config(
                "eval.importance_repeats must be positive and eval.importance_batch at least 2"
                    .into(),
            ));
        }
        if let Some(g) = self.eval.gammas.iter().find(|g| !(0.0..=1.0).contains(*g)) {
            return Err(CliError::Config(format!(
                "eval.gammas entry {g} outside [0, 1]"
            )));
        }
        Ok(())
    }
}
