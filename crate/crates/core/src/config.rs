//! One JSON-serializable description of an entire run: modalities, tasks,
//! synthetic-data settings, predictor, loss, trainer, and evaluation
//! options. Every cross-reference is validated before any compute starts;
//! unknown keys are rejected. Shipped presets cover the standard scenarios.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::moe::{MoEConfig, PredictorKind};
use crate::synth::{ModalityKind, ModalityRegistry, ModalitySpec, SynthConfig, TaskSpec};
use crate::train::{TrainConfig, TrainState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    /// "cosine" or "energy".
    #[serde(default = "default_mode")]
    pub mode: String,
    /// Similarity-matrix export cap (rows and cols).
    #[serde(default = "default_cap")]
    pub matrix_cap: usize,
    /// Task used for retrieval metrics; defaults to the first task.
    #[serde(default)]
    pub eval_task: Option<usize>,
}

fn default_ks() -> Vec<usize> {
    vec![1, 5, 10]
}
fn default_mode() -> String {
    "cosine".to_string()
}
fn default_cap() -> usize {
    64
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ks: default_ks(),
            mode: default_mode(),
            matrix_cap: default_cap(),
            eval_task: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPaths {
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub log: Option<PathBuf>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub modalities: Vec<ModalitySpec>,
    pub tasks: Vec<TaskSpec>,
    pub synth: SynthConfig,
    #[serde(default = "default_kind")]
    pub predictor: PredictorKind,
    pub moe: MoEConfig,
    #[serde(default)]
    pub loss: LossConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default)]
    pub paths: RunPaths,
    /// Modality ids that get a trainable identity-initialized input adapter.
    #[serde(default)]
    pub adapter_modalities: Vec<usize>,
}

fn default_kind() -> PredictorKind {
    PredictorKind::Moe
}

impl RunConfig {
    pub fn registry(&self) -> Result<ModalityRegistry> {
        ModalityRegistry::new(self.modalities.clone())
    }

    /// Validate every cross-reference up front so that no compute starts on
    /// a config any module would later reject.
    pub fn validate(&self) -> Result<ModalityRegistry> {
        let registry = self.registry()?;
        if self.tasks.is_empty() {
            return Err(Error::config("at least one task is required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tasks {
            registry.validate_task(t)?;
            if !seen.insert(t.id) {
                return Err(Error::config(format!("duplicate task id {}", t.id)));
            }
        }
        self.synth.validate(&registry)?;
        self.moe.validate()?;
        if self.moe.modalities != registry.len() {
            return Err(Error::config(format!(
                "moe.modalities = {} but {} modalities are declared",
                self.moe.modalities,
                registry.len()
            )));
        }
        self.loss.validate()?;
        self.train.validate()?;
        for &id in &self.train.task_order {
            if !self.tasks.iter().any(|t| t.id == id) {
                return Err(Error::config(format!(
                    "train.task_order references unknown task id {id}"
                )));
            }
        }
        for &m in &self.adapter_modalities {
            registry.get(m)?;
        }
        if self.synth.num_train < self.train.batch_size {
            return Err(Error::config(format!(
                "batch_size {} exceeds the train split ({} samples)",
                self.train.batch_size, self.synth.num_train
            )));
        }
        if self.loss.alpha < 1.0 && self.train.batch_size < 2 {
            return Err(Error::config(
                "contrastive loss needs batch_size >= 2",
            ));
        }
        for &k in &self.eval.ks {
            if k == 0 {
                return Err(Error::config("eval.ks entries must be positive"));
            }
        }
        match self.eval.mode.as_str() {
            "cosine" | "energy" => {}
            other => {
                return Err(Error::config(format!(
                    "eval.mode must be \"cosine\" or \"energy\", got \"{other}\""
                )))
            }
        }
        if let Some(id) = self.eval.eval_task {
            if !self.tasks.iter().any(|t| t.id == id) {
                return Err(Error::config(format!("eval.eval_task {id} unknown")));
            }
        }
        Ok(registry)
    }

    /// The task retrieval metrics are computed on.
    pub fn eval_task(&self) -> &TaskSpec {
        match self.eval.eval_task {
            Some(id) => self.tasks.iter().find(|t| t.id == id).unwrap_or(&self.tasks[0]),
            None => &self.tasks[0],
        }
    }

    /// Materialize checkpoint metadata for this run.
    pub fn checkpoint_meta(&self) -> crate::train::CheckpointMeta {
        crate::train::CheckpointMeta {
            kind: self.predictor,
            moe: self.moe.clone(),
            loss: self.loss.clone(),
            train: self.train.clone(),
            modalities: self.modalities.clone(),
            tasks: self.tasks.clone(),
            adapter_modalities: self.adapter_modalities.clone(),
        }
    }

    /// Fresh trainer state (all schedule state is derived from the seed).
    pub fn fresh_state(&self) -> TrainState {
        TrainState::new()
    }
}

fn continuous(id: usize, name: &str, dim: usize) -> ModalitySpec {
    ModalitySpec {
        id,
        name: name.to_string(),
        dim,
        kind: ModalityKind::Continuous,
    }
}

fn mirrored_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec {
            id: 1,
            inputs: vec![1],
            outputs: vec![2],
        },
        TaskSpec {
            id: 2,
            inputs: vec![2],
            outputs: vec![1],
        },
    ]
}

/// Named run presets. "paper-scale" is selectable but far too heavy for
/// test suites.
pub fn preset(name: &str) -> Result<RunConfig> {
    let base_seed = 42;
    match name {
        "two-modal-clean" | "two-modal-noisy" => {
            let noise = if name == "two-modal-noisy" { 0.05 } else { 0.0 };
            Ok(RunConfig {
                modalities: vec![continuous(1, "alpha", 32), continuous(2, "beta", 48)],
                tasks: mirrored_tasks(),
                synth: SynthConfig {
                    latent_dim: 16,
                    noise_std: noise,
                    num_samples: 4608,
                    num_train: 4096,
                    num_val: 0,
                    num_classes: None,
                    seed: base_seed,
                },
                predictor: PredictorKind::Moe,
                moe: MoEConfig::desk(2),
                loss: LossConfig::default(),
                train: TrainConfig::desk(vec![1, 2], base_seed),
                eval: EvalOptions::default(),
                paths: RunPaths::default(),
                adapter_modalities: vec![],
            })
        }
        "three-modal-with-labels" => {
            let modalities = vec![
                continuous(1, "alpha", 32),
                continuous(2, "beta", 48),
                ModalitySpec {
                    id: 3,
                    name: "label".to_string(),
                    dim: 10,
                    kind: ModalityKind::OneHot,
                },
            ];
            let tasks = vec![
                TaskSpec {
                    id: 1,
                    inputs: vec![1],
                    outputs: vec![2],
                },
                TaskSpec {
                    id: 2,
                    inputs: vec![2],
                    outputs: vec![1],
                },
                TaskSpec {
                    id: 3,
                    inputs: vec![1],
                    outputs: vec![3],
                },
            ];
            Ok(RunConfig {
                modalities,
                tasks,
                synth: SynthConfig {
                    // a smaller latent and a larger train split than the
                    // two-modal presets: class boundaries (argmax of a latent
                    // readout) need dense coverage to pin down, while the
                    // retrieval directions stay easy
                    latent_dim: 8,
                    noise_std: 0.05,
                    num_samples: 16896,
                    num_train: 16384,
                    num_val: 0,
                    num_classes: Some(10),
                    seed: base_seed,
                },
                predictor: PredictorKind::Moe,
                moe: MoEConfig::desk(3),
                loss: LossConfig::default(),
                train: TrainConfig::desk(vec![1, 2, 3], base_seed),
                eval: EvalOptions::default(),
                paths: RunPaths::default(),
                adapter_modalities: vec![],
            })
        }
        "vqa-style" => {
            // two input modalities concatenated into one query, answering
            // into a third modality
            let modalities = vec![
                continuous(1, "scene", 32),
                continuous(2, "question", 16),
                continuous(3, "answer", 24),
            ];
            let tasks = vec![
                TaskSpec {
                    id: 1,
                    inputs: vec![1, 2],
                    outputs: vec![3],
                },
                TaskSpec {
                    id: 2,
                    inputs: vec![3],
                    outputs: vec![1, 2],
                },
            ];
            Ok(RunConfig {
                modalities,
                tasks,
                synth: SynthConfig {
                    latent_dim: 16,
                    noise_std: 0.05,
                    num_samples: 4608,
                    num_train: 4096,
                    num_val: 0,
                    num_classes: None,
                    seed: base_seed,
                },
                predictor: PredictorKind::Moe,
                moe: MoEConfig::desk(3),
                loss: LossConfig::default(),
                train: TrainConfig::desk(vec![1, 2], base_seed),
                eval: EvalOptions::default(),
                paths: RunPaths::default(),
                adapter_modalities: vec![],
            })
        }
        "paper-scale" => {
            let mut train = TrainConfig::desk(vec![1, 2], base_seed);
            train.batch_size = 128;
            Ok(RunConfig {
                modalities: vec![continuous(1, "alpha", 256), continuous(2, "beta", 256)],
                tasks: mirrored_tasks(),
                synth: SynthConfig {
                    latent_dim: 64,
                    noise_std: 0.05,
                    num_samples: 9216,
                    num_train: 8192,
                    num_val: 0,
                    num_classes: None,
                    seed: base_seed,
                },
                predictor: PredictorKind::Moe,
                moe: MoEConfig::paper_scale(2),
                loss: LossConfig::default(),
                train,
                eval: EvalOptions::default(),
                paths: RunPaths::default(),
                adapter_modalities: vec![],
            })
        }
        "tiny-gradcheck" => {
            let moe = MoEConfig {
                modalities: 2,
                experts_per_modality: 2,
                top_k: 1,
                gates: 2,
                hidden: 4,
                expansion: 2,
                dropout_p: 0.0,
            };
            moe.validate()?;
            let mut train = TrainConfig::desk(vec![1, 2], base_seed);
            train.steps = 10;
            train.batch_size = 4;
            Ok(RunConfig {
                modalities: vec![continuous(1, "alpha", 6), continuous(2, "beta", 5)],
                tasks: mirrored_tasks(),
                synth: SynthConfig {
                    latent_dim: 3,
                    noise_std: 0.0,
                    num_samples: 16,
                    num_train: 8,
                    num_val: 0,
                    num_classes: None,
                    seed: base_seed,
                },
                predictor: PredictorKind::Moe,
                moe,
                loss: LossConfig::default(),
                train,
                eval: EvalOptions {
                    ks: vec![1],
                    ..EvalOptions::default()
                },
                paths: RunPaths::default(),
                adapter_modalities: vec![1],
            })
        }
        other => Err(Error::config(format!(
            "unknown preset \"{other}\"; available: two-modal-clean, two-modal-noisy, \
             three-modal-with-labels, vqa-style, paper-scale, tiny-gradcheck"
        ))),
    }
}

pub fn preset_names() -> &'static [&'static str] {
    &[
        "two-modal-clean",
        "two-modal-noisy",
        "three-modal-with-labels",
        "vqa-style",
        "paper-scale",
        "tiny-gradcheck",
    ]
}

/// Set one dotted-path override (e.g. "train.steps" = "100") inside a JSON
/// config value. The raw string is parsed as JSON when possible, otherwise
/// treated as a string.
pub fn apply_override(root: &mut serde_json::Value, path: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad override path \"{path}\"")));
    }
    let mut cursor = root;
    for part in &parts[..parts.len() - 1] {
        cursor = match cursor {
            serde_json::Value::Object(map) => map
                .get_mut(*part)
                .ok_or_else(|| Error::config(format!("no config field \"{part}\" in \"{path}\"")))?,
            _ => {
                return Err(Error::config(format!(
                    "\"{part}\" in \"{path}\" is not an object"
                )))
            }
        };
    }
    let leaf = *parts.last().unwrap();
    let value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    match cursor {
        serde_json::Value::Object(map) => {
            if !map.contains_key(leaf) {
                return Err(Error::config(format!(
                    "no config field \"{leaf}\" in \"{path}\""
                )));
            }
            map.insert(leaf.to_string(), value);
            Ok(())
        }
        _ => Err(Error::config(format!(
            "parent of \"{leaf}\" in \"{path}\" is not an object"
        ))),
    }
}

/// Parse a RunConfig from JSON text with a list of dotted-path overrides.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut value: serde_json::Value = serde_json::from_str(text)?;
    for (path, raw) in overrides {
        apply_override(&mut value, path, raw)?;
    }
    let cfg: RunConfig = serde_json::from_value(value)?;
    cfg.validate()?;
    Ok(cfg)
}
