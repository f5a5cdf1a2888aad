//! JSON checkpoints: named row-major arrays plus the config snapshot and training progress.

use std::path::Path;

use caw_core::linalg::Matrix;
use caw_core::nn::{CawLayer, Conv2d, Linear, TinyNet, TrainState};
use caw_core::stiefel::OrthogonalBasis;
use caw_core::whitening::WhiteningState;
use caw_core::Scalar;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::dataset::write_file;
use crate::error::CliError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    /// Multi-label concept classifier used for masks.
    ConceptNet,
    /// Main diagnosis network (with or without CAW).
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// Digest of the state the batch-order generator resumes from.
    pub rng_digest: String,
    pub state: TrainState,
    pub last_objective: Option<f64>,
    pub mask_fallbacks: usize,
    pub num_concepts: usize,
    pub drift_corrections: usize,
    pub arrays: Vec<NamedArray>,
}

/// Digest of the batch-order stream position: orders derive from `(seed, epoch)`.
pub fn rng_digest(seed: u64, epochs_done: usize) -> String {
    let mut h = Sha256::new();
    h.update(b"chacha8:");
    h.update(seed.to_le_bytes());
    h.update((epochs_done as u64).to_le_bytes());
    hex::encode(h.finalize())
}

fn array<T: Scalar>(name: &str, shape: &[usize], values: &[T]) -> NamedArray {
    NamedArray {
        name: name.to_string(),
        shape: shape.to_vec(),
        values: values.iter().map(|v| v.as_f64()).collect(),
    }
}

fn matrix_array<T: Scalar>(name: &str, m: &Matrix<T>) -> NamedArray {
    array(name, &[m.rows(), m.cols()], m.as_slice())
}

/// Training metadata stored alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Progress {
    pub state: TrainState,
    pub last_objective: Option<f64>,
    pub mask_fallbacks: usize,
}

impl Default for Progress {
    fn default() -> Self {
        Self {
            state: TrainState::default(),
            last_objective: None,
            mask_fallbacks: 0,
        }
    }
}

impl Checkpoint {
    pub fn from_net<T: Scalar>(
        kind: CheckpointKind,
        net: &TinyNet<T>,
        config: &ExperimentConfig,
        progress: &Progress,
    ) -> Self {
        let c1 = &net.conv1;
        let c2 = &net.conv2;
        let h = &net.head;
        let mut arrays = vec![
            array(
                "conv1.weight",
                &[c1.out_channels, c1.in_channels, 3, 3],
                &c1.weight,
            ),
            array("conv1.bias", &[c1.out_channels], &c1.bias),
            array(
                "conv2.weight",
                &[c2.out_channels, c2.in_channels, 3, 3],
                &c2.weight,
            ),
            array("conv2.bias", &[c2.out_channels], &c2.bias),
            array("head.weight", &[h.out_features, h.in_features], &h.weight),
            array("head.bias", &[h.out_features], &h.bias),
        ];
        let (mut num_concepts, mut drift) = (h.out_features, 0);
        if let Some(caw) = &net.caw {
            let w = &caw.whitening;
            let d = w.dim();
            arrays.extend([
                matrix_array("caw.q", caw.basis.matrix()),
                array("caw.mean", &[d], &w.mean),
                matrix_array("caw.covariance", &w.covariance),
                matrix_array("caw.whitening_matrix", &w.whitening_matrix),
                array("caw.running_mean", &[d], &w.running_mean),
                matrix_array("caw.running_covariance", &w.running_covariance),
                array("caw.momentum", &[], &[w.momentum]),
                array("caw.eps", &[], &[w.eps]),
            ]);
            num_concepts = caw.basis.num_concepts();
            drift = caw.basis.drift_corrections();
        }
        Checkpoint {
            format_version: FORMAT_VERSION,
            kind,
            config_hash: config.hash(),
            config: config.clone(),
            rng_digest: rng_digest(config.seed, progress.state.epochs_done),
            state: progress.state,
            last_objective: progress.last_objective,
            mask_fallbacks: progress.mask_fallbacks,
            num_concepts,
            drift_corrections: drift,
            arrays,
        }
    }

    fn get(&self, name: &str) -> Result<&NamedArray, CliError> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| CliError::Checkpoint(format!("missing array {name}")))
    }

    fn values<T: Scalar>(&self, name: &str, shape: &[usize]) -> Result<Vec<T>, CliError> {
        let a = self.get(name)?;
        if a.shape != shape {
            return Err(CliError::Checkpoint(format!(
                "array {name} has shape {:?}, expected {shape:?}",
                a.shape
            )));
        }
        let n: usize = shape.iter().product();
        if a.values.len() != n {
            return Err(CliError::Checkpoint(format!(
                "array {name} holds {} values for shape {shape:?}",
                a.values.len()
            )));
        }
        Ok(a.values.iter().map(|&v| T::of(v)).collect())
    }

    fn matrix<T: Scalar>(&self, name: &str, d: usize) -> Result<Matrix<T>, CliError> {
        Matrix::from_vec(d, d, self.values(name, &[d, d])?)
            .map_err(|e| CliError::Checkpoint(e.to_string()))
    }

    fn scalar<T: Scalar>(&self, name: &str) -> Result<T, CliError> {
        Ok(self.values::<T>(name, &[])?[0])
    }

    pub fn to_net<T: Scalar>(&self) -> Result<TinyNet<T>, CliError> {
        let shape_of =
            |name: &str| -> Result<Vec<usize>, CliError> { Ok(self.get(name)?.shape.clone()) };
        let w1 = shape_of("conv1.weight")?;
        let w2 = shape_of("conv2.weight")?;
        let hw = shape_of("head.weight")?;
        if w1.len() != 4 || w2.len() != 4 || hw.len() != 2 {
            return Err(CliError::Checkpoint(
                "weight arrays have the wrong rank".into(),
            ));
        }
        let mut conv1 = Conv2d::zeros(w1[1], w1[0]);
        conv1.weight = self.values("conv1.weight", &w1)?;
        conv1.bias = self.values("conv1.bias", &[w1[0]])?;
        let mut conv2 = Conv2d::zeros(w2[1], w2[0]);
        conv2.weight = self.values("conv2.weight", &w2)?;
        conv2.bias = self.values("conv2.bias", &[w2[0]])?;
        let mut head = Linear::zeros(hw[1], hw[0]);
        head.weight = self.values("head.weight", &hw)?;
        head.bias = self.values("head.bias", &[hw[0]])?;
        let d = w2[0];
        let caw = if self.arrays.iter().any(|a| a.name == "caw.q") {
            let whitening = WhiteningState::from_parts(
                self.values("caw.mean", &[d])?,
                self.matrix("caw.covariance", d)?,
                self.matrix("caw.whitening_matrix", d)?,
                self.values("caw.running_mean", &[d])?,
                self.matrix("caw.running_covariance", d)?,
                self.scalar("caw.momentum")?,
                self.scalar("caw.eps")?,
            )
            .map_err(|e| CliError::Checkpoint(e.to_string()))?;
            let basis = OrthogonalBasis::new(self.matrix("caw.q", d)?, self.num_concepts)
                .map_err(|e| CliError::Checkpoint(e.to_string()))?
                .with_drift_corrections(self.drift_corrections);
            Some(CawLayer { whitening, basis })
        } else {
            None
        };
        TinyNet::from_parts(conv1, conv2, caw, head)
            .map_err(|e| CliError::Checkpoint(e.to_string()))
    }

    pub fn progress(&self) -> Progress {
        Progress {
            state: self.state,
            last_objective: self.last_objective,
            mask_fallbacks: self.mask_fallbacks,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        write_file(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
        match raw.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(CliError::Checkpoint(format!(
                    "{}: format version {v} is not supported (expected {FORMAT_VERSION})",
                    path.display()
                )))
            }
            None => {
                return Err(CliError::Checkpoint(format!(
                    "{}: no format_version",
                    path.display()
                )))
            }
        }
        serde_json::from_value(raw)
            .map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Refuses checkpoints whose architecture disagrees with `config`.
    pub fn check_architecture(&self, config: &ExperimentConfig) -> Result<(), CliError> {
        let (a, b) = (&self.config, config);
        let same = a.net == b.net
            && a.data.num_concepts == b.data.num_concepts
            && a.data.image_size == b.data.image_size;
        if !same {
            return Err(CliError::Checkpoint(
                "checkpoint architecture (net section, concept count or image size) differs from the config".into(),
            ));
        }
        Ok(())
    }
}
