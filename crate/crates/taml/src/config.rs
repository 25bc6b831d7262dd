//! Flat JSON experiment configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use taml_core::eval::ClassifierConfig;
use taml_core::experiment::Setup;
use taml_core::infernet::InferConfig;
use taml_core::metalearn::{MetaConfig, Method, OptimizerKind};
use taml_core::model::ModelConfig;
use taml_core::taskgen::TaskFamily;
use taml_core::text::Vocab;

use crate::error::CliError;

/// Every tunable of a run. Unknown keys are rejected; missing keys take the
/// defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    /// Seeds per method in `reproduce`, counted up from `seed`.
    pub seeds: usize,
    pub out_dir: String,
    pub train_tasks: usize,
    pub heldout_tasks: usize,

    pub content_tokens: u32,
    pub markers: u32,
    pub max_len: usize,
    pub min_len: usize,
    pub task_size_min: usize,
    pub task_size_max: usize,
    pub imbalance: f64,
    pub concentration: f64,
    pub marker_concentration: f64,
    pub markers_min: usize,
    pub markers_max: usize,

    pub backbone_seed: u64,
    pub d_emb: usize,
    pub d_feat: usize,
    pub layers: usize,
    pub width: usize,

    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub d_enc: usize,
    pub d_set: usize,
    pub sigma_init: f64,

    pub inner_lr: f64,
    pub meta_lr: f64,
    pub inner_steps: usize,
    pub mc_samples: usize,
    pub mc_samples_eval: usize,
    pub meta_batch: usize,
    pub iterations: usize,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub query_batch: usize,
    pub support_fraction: f64,
    pub episode_retries: usize,
    pub baseline_epochs: usize,
    pub baseline_lr: f64,

    pub clf_d_emb: usize,
    pub clf_filters: usize,
    pub clf_epochs: usize,
    pub clf_lr: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let s = Setup::default();
        Self::from_setup(&s, Method::Taml, 0, "out")
    }
}

impl ExperimentConfig {
    pub fn from_setup(s: &Setup, method: Method, seed: u64, out_dir: &str) -> Self {
        let (f, m, i, t, c) = (&s.family, &s.model, &s.infer, &s.meta, &s.classifier);
        Self {
            method,
            seed,
            seeds: s.seeds,
            out_dir: out_dir.into(),
            train_tasks: s.train_tasks,
            heldout_tasks: s.heldout_tasks,
            content_tokens: f.vocab.content,
            markers: f.vocab.markers,
            max_len: f.max_len,
            min_len: f.min_len,
            task_size_min: f.size_min,
            task_size_max: f.size_max,
            imbalance: f.imbalance,
            concentration: f.concentration,
            marker_concentration: f.marker_concentration,
            markers_min: f.markers_min,
            markers_max: f.markers_max,
            backbone_seed: s.backbone_seed,
            d_emb: m.d_emb,
            d_feat: m.d_feat,
            layers: m.layers,
            width: m.width,
            conv1_channels: i.conv1_channels,
            conv2_channels: i.conv2_channels,
            d_enc: i.d_enc,
            d_set: i.d_set,
            sigma_init: i.sigma_init,
            inner_lr: t.inner_lr,
            meta_lr: t.meta_lr,
            inner_steps: t.inner_steps,
            mc_samples: t.mc_samples,
            mc_samples_eval: t.mc_samples_eval,
            meta_batch: t.meta_batch,
            iterations: t.iterations,
            optimizer: t.optimizer,
            batch_size: t.batch_size,
            query_batch: t.query_batch,
            support_fraction: t.support_fraction,
            episode_retries: t.episode_retries,
            baseline_epochs: t.baseline_epochs,
            baseline_lr: t.baseline_lr,
            clf_d_emb: c.d_emb,
            clf_filters: c.filters,
            clf_epochs: c.epochs,
            clf_lr: c.lr,
        }
    }

    pub fn setup(&self) -> Setup {
        let vocab = Vocab {
            content: self.content_tokens,
            markers: self.markers,
        };
        Setup {
            family: TaskFamily {
                vocab,
                max_len: self.max_len,
                min_len: self.min_len,
                size_min: self.task_size_min,
                size_max: self.task_size_max,
                imbalance: self.imbalance,
                concentration: self.concentration,
                marker_concentration: self.marker_concentration,
                markers_min: self.markers_min,
                markers_max: self.markers_max,
            },
            model: ModelConfig {
                vocab_size: vocab.size(),
                max_len: self.max_len,
                d_emb: self.d_emb,
                d_feat: self.d_feat,
                layers: self.layers,
                width: self.width,
            },
            infer: InferConfig {
                conv1_channels: self.conv1_channels,
                conv2_channels: self.conv2_channels,
                d_enc: self.d_enc,
                d_set: self.d_set,
                sigma_init: self.sigma_init,
            },
            meta: MetaConfig {
                inner_lr: self.inner_lr,
                meta_lr: self.meta_lr,
                inner_steps: self.inner_steps,
                mc_samples: self.mc_samples,
                mc_samples_eval: self.mc_samples_eval,
                meta_batch: self.meta_batch,
                iterations: self.iterations,
                optimizer: self.optimizer,
                batch_size: self.batch_size,
                query_batch: self.query_batch,
                support_fraction: self.support_fraction,
                episode_retries: self.episode_retries,
                baseline_epochs: self.baseline_epochs,
                baseline_lr: self.baseline_lr,
            },
            classifier: ClassifierConfig {
                d_emb: self.clf_d_emb,
                widths: vec![2, 3],
                filters: self.clf_filters,
                epochs: self.clf_epochs,
                batch_size: self.batch_size,
                lr: self.clf_lr,
            },
            train_tasks: self.train_tasks,
            heldout_tasks: self.heldout_tasks,
            backbone_seed: self.backbone_seed,
            seeds: self.seeds,
        }
    }

    /// Parses and validates; every failure is a configuration error.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.setup().validate()?;
        let s = self.setup();
        taml_core::infernet::InferenceNet::new(s.infer, s.model.max_len, s.model.d_emb, s.model.num_tensors())?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON rendering.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(compact.as_bytes()))
    }

    /// The configuration with run-specific keys cleared, for compatibility checks.
    pub fn model_identity(&self) -> Self {
        Self {
            method: Method::Taml,
            seed: 0,
            out_dir: String::new(),
            ..self.clone()
        }
    }
}
