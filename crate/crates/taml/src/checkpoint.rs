//! JSON checkpoints: named tensors plus the run's provenance.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use taml_core::metalearn::Method;
use taml_core::params::ParameterSet;
use taml_core::tensor::Tensor;

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const THETA_PREFIX: &str = "theta.";
pub const PSI_PREFIX: &str = "psi.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub method: Method,
    pub seed: u64,
    pub backbone_seed: u64,
    pub iterations: usize,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(config: &ExperimentConfig, seed: u64, iterations: usize, theta: &ParameterSet, psi: &ParameterSet) -> Self {
        let mut all = ParameterSet::new();
        all.extend_prefixed(THETA_PREFIX, theta);
        all.extend_prefixed(PSI_PREFIX, psi);
        Self {
            method: config.method,
            seed,
            backbone_seed: config.backbone_seed,
            iterations,
            config_hash: config.model_identity().hash(),
            config: config.clone(),
            tensors: all.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Tensors under `prefix`, ordered like `reference`; names and shapes must agree.
    pub fn params(&self, prefix: &str, reference: &ParameterSet) -> Result<ParameterSet, CliError> {
        let mut out = ParameterSet::new();
        for (name, r) in reference.iter() {
            let key = format!("{prefix}{name}");
            let t = self
                .tensors
                .get(&key)
                .ok_or_else(|| CliError::Config(format!("checkpoint lacks tensor `{key}`")))?;
            if t.shape() != r.shape() {
                return Err(CliError::Config(format!(
                    "checkpoint tensor `{key}` has shape {:?}, config expects {:?}",
                    t.shape(),
                    r.shape()
                )));
            }
            out.push(name.to_string(), t.clone());
        }
        let expected = self.tensors.keys().filter(|k| k.starts_with(prefix)).count();
        if expected != reference.len() {
            return Err(CliError::Config(format!(
                "checkpoint has {expected} `{prefix}` tensors, config expects {}",
                reference.len()
            )));
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let c: Self = serde_json::from_str(text).map_err(|e| CliError::Config(format!("checkpoint: {e}")))?;
        if c.config_hash != c.config.model_identity().hash() {
            return Err(CliError::Config("checkpoint config hash does not match its config echo".into()));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        crate::write_file(path, &self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::io(format!("cannot read {}", path.display()), e))?;
        Self::from_json(&text)
    }
}
