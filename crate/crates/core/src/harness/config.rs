//! Declarative experiment configuration (TOML) and named training presets.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::classifiers::ArchitectureConfig;
use crate::error::{Error, Result};
use crate::inversion::InitMode;
use crate::metrics::RadiusConfig;
use crate::training::{AdvTrainConfig, OptimizerKind, ScheduleSeg, TrainConfig};

pub const SPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub models: Vec<ModelRecipe>,
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub metrics: MetricsSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// `synthetic` (materialized on demand) or `cifar10` (binary archive).
    pub kind: DatasetKind,
    /// Directory holding the archive. Falls back to
    /// `$INVBENCH_DATA_DIR/<kind>`, then to `<output_dir>/data/<kind>`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub subset: Option<usize>,
    #[serde(default)]
    pub downscale: Option<usize>,
    /// Synthetic only: how many records to materialize.
    #[serde(default = "default_synth_train")]
    pub synth_train: usize,
    #[serde(default = "default_synth_val")]
    pub synth_val: usize,
}

fn default_synth_train() -> usize {
    10_000
}

fn default_synth_val() -> usize {
    2_000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetKind::Synthetic => write!(f, "synthetic"),
            DatasetKind::Cifar10 => write!(f, "cifar10"),
        }
    }
}

/// A model to train: a named preset plus overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelRecipe {
    pub id: String,
    pub preset: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub epochs: Option<u32>,
    /// Emit an extra checkpoint after this many epochs (the early trade-off
    /// point for adversarially trained models).
    #[serde(default)]
    pub early_checkpoint: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSpec {
    pub id: String,
    pub kind: AttackKind,
    /// Model ids to attack; empty means every declared model.
    #[serde(default)]
    pub models: Vec<String>,
    /// Target classes; empty means all ten.
    #[serde(default)]
    pub classes: Vec<u8>,
    #[serde(default)]
    pub seed: Option<u64>,
    // pgd / deepdream
    #[serde(default)]
    pub max_iterations: Option<u32>,
    #[serde(default)]
    pub init: Option<InitMode>,
    #[serde(default)]
    pub lr: Option<f32>,
    // deepdream
    #[serde(default)]
    pub octaves: Option<u32>,
    #[serde(default)]
    pub octave_scale: Option<f32>,
    #[serde(default)]
    pub steps_per_octave: Option<u32>,
    #[serde(default)]
    pub outer_iterations: Option<u32>,
    #[serde(default)]
    pub lambda_tv: Option<f32>,
    // gan
    #[serde(default)]
    pub epochs: Option<u32>,
    #[serde(default)]
    pub lambda_c: Option<f32>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub samples_per_class: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Pgd,
    Deepdream,
    Gan,
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttackKind::Pgd => write!(f, "pgd"),
            AttackKind::Deepdream => write!(f, "deepdream"),
            AttackKind::Gan => write!(f, "gan"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsSpec {
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Validation images probed by the adversarial-radius search.
    #[serde(default = "default_radius_images")]
    pub radius_images: usize,
    #[serde(default)]
    pub radius: RadiusConfig,
}

fn default_true() -> bool {
    true
}

fn default_radius_images() -> usize {
    100
}

impl Default for MetricsSpec {
    fn default() -> Self {
        MetricsSpec {
            enabled: true,
            radius_images: default_radius_images(),
            radius: RadiusConfig::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| Error::config(format!("bad experiment config: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SPEC_VERSION {
            return Err(Error::config(format!(
                "config version {} unsupported (expected {SPEC_VERSION})",
                self.version
            )));
        }
        let mut ids = std::collections::HashSet::new();
        for m in &self.models {
            resolve_preset(&m.preset).ok_or_else(|| {
                Error::config(format!("model `{}` references unknown preset `{}`", m.id, m.preset))
            })?;
            if !ids.insert(&m.id) {
                return Err(Error::config(format!("duplicate model id `{}`", m.id)));
            }
        }
        for a in &self.attacks {
            for mid in &a.models {
                if !self.models.iter().any(|m| &m.id == mid) {
                    return Err(Error::config(format!(
                        "attack `{}` references undeclared model `{mid}`",
                        a.id
                    )));
                }
            }
            if a.classes.iter().any(|&c| c >= 10) {
                return Err(Error::config(format!("attack `{}` has class id >= 10", a.id)));
            }
        }
        Ok(())
    }

    /// Model ids an attack applies to.
    pub fn attack_targets<'a>(&'a self, attack: &'a AttackSpec) -> Vec<&'a str> {
        if attack.models.is_empty() {
            self.models.iter().map(|m| m.id.as_str()).collect()
        } else {
            attack.models.iter().map(|s| s.as_str()).collect()
        }
    }
}

/// A fully resolved training recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub arch: PresetArch,
    pub train: TrainConfig,
    /// Present for adversarially trained recipes.
    pub adv: Option<AdvTrainConfig>,
    /// Default epoch for the early trade-off checkpoint.
    pub early_checkpoint: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum PresetArch {
    WideResnet { depth: usize, width: usize },
    Vgg16,
}

impl PresetArch {
    pub fn instantiate(&self, input_size: usize) -> ArchitectureConfig {
        match *self {
            PresetArch::WideResnet { depth, width } => {
                ArchitectureConfig::wide_resnet(depth, width, input_size)
            }
            PresetArch::Vgg16 => ArchitectureConfig::vgg16(input_size),
        }
    }
}

/// Named presets realizing the reference recipes (full scale) and the
/// desk-scale variants that run on modest hardware.
pub fn resolve_preset(name: &str) -> Option<Preset> {
    let sgd = |schedule: Vec<ScheduleSeg>, epochs, seed| TrainConfig {
        optimizer: OptimizerKind::SgdMomentum,
        schedule,
        momentum: 0.9,
        weight_decay: 2e-4,
        batch_size: 128,
        epochs,
        seed,
    };
    match name {
        "ttm-vgg" => Some(Preset {
            name: name.into(),
            arch: PresetArch::Vgg16,
            train: TrainConfig {
                optimizer: OptimizerKind::Adam,
                schedule: vec![ScheduleSeg { epochs: 100, lr: 1e-3 }],
                momentum: 0.9,
                weight_decay: 0.0,
                batch_size: 128,
                epochs: 100,
                seed: 0,
            },
            adv: None,
            early_checkpoint: None,
        }),
        "ttm-res" => Some(Preset {
            name: name.into(),
            arch: PresetArch::WideResnet { depth: 28, width: 10 },
            train: sgd(vec![ScheduleSeg { epochs: 100, lr: 0.01 }], 100, 0),
            adv: None,
            early_checkpoint: None,
        }),
        "atm-res" => Some(Preset {
            name: name.into(),
            arch: PresetArch::WideResnet { depth: 28, width: 10 },
            train: sgd(
                vec![
                    ScheduleSeg { epochs: 100, lr: 0.1 },
                    ScheduleSeg { epochs: 50, lr: 0.01 },
                    ScheduleSeg { epochs: 50, lr: 0.001 },
                ],
                200,
                0,
            ),
            adv: Some(AdvTrainConfig {
                epsilon: 10.0,
                step_size: 2.0,
                attack_iterations: 10,
                random_start: false,
            }),
            early_checkpoint: Some(10),
        }),
        "ttm-vgg-desk" => Some(Preset {
            name: name.into(),
            arch: PresetArch::Vgg16,
            train: TrainConfig {
                optimizer: OptimizerKind::Adam,
                schedule: vec![ScheduleSeg { epochs: 10, lr: 1e-3 }],
                momentum: 0.9,
                weight_decay: 0.0,
                batch_size: 64,
                epochs: 10,
                seed: 0,
            },
            adv: None,
            early_checkpoint: None,
        }),
        "ttm-res-desk" => Some(Preset {
            name: name.into(),
            arch: PresetArch::WideResnet { depth: 16, width: 2 },
            train: TrainConfig {
                optimizer: OptimizerKind::SgdMomentum,
                schedule: vec![
                    ScheduleSeg { epochs: 8, lr: 0.05 },
                    ScheduleSeg { epochs: 4, lr: 0.01 },
                ],
                momentum: 0.9,
                weight_decay: 2e-4,
                batch_size: 64,
                epochs: 12,
                seed: 0,
            },
            adv: None,
            early_checkpoint: None,
        }),
        "atm-res-desk" => Some(Preset {
            name: name.into(),
            arch: PresetArch::WideResnet { depth: 16, width: 2 },
            train: TrainConfig {
                optimizer: OptimizerKind::SgdMomentum,
                schedule: vec![
                    ScheduleSeg { epochs: 8, lr: 0.05 },
                    ScheduleSeg { epochs: 4, lr: 0.01 },
                ],
                momentum: 0.9,
                weight_decay: 2e-4,
                batch_size: 64,
                epochs: 12,
                seed: 0,
            },
            adv: Some(AdvTrainConfig {
                epsilon: 10.0,
                step_size: 2.5,
                attack_iterations: 5,
                random_start: false,
            }),
            early_checkpoint: Some(3),
        }),
        _ => None,
    }
}

/// Names accepted by [`resolve_preset`].
pub fn preset_names() -> &'static [&'static str] {
    &[
        "ttm-vgg",
        "ttm-res",
        "atm-res",
        "ttm-vgg-desk",
        "ttm-res-desk",
        "atm-res-desk",
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
seed = 7
output_dir = "/tmp/x"

[dataset]
kind = "synthetic"
subset = 64
downscale = 2
synth_train = 100
synth_val = 50

[[models]]
id = "ttm"
preset = "ttm-res-desk"
epochs = 1

[[attacks]]
id = "pgd"
kind = "pgd"
models = ["ttm"]
classes = [0, 1]
max_iterations = 5
"#;

    #[test]
    fn minimal_spec_parses() {
        let spec = ExperimentSpec::from_toml(MINIMAL).unwrap();
        assert_eq!(spec.models.len(), 1);
        assert_eq!(spec.attacks.len(), 1);
        assert!(spec.metrics.enabled);
    }

    #[test]
    fn unknown_preset_rejected() {
        let bad = MINIMAL.replace("ttm-res-desk", "nonsense");
        assert!(matches!(
            ExperimentSpec::from_toml(&bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attack_must_reference_declared_model() {
        let bad = MINIMAL.replace("models = [\"ttm\"]", "models = [\"ghost\"]");
        assert!(ExperimentSpec::from_toml(&bad).is_err());
    }

    #[test]
    fn wrong_version_rejected() {
        let bad = MINIMAL.replace("version = 1", "version = 2");
        assert!(ExperimentSpec::from_toml(&bad).is_err());
    }

    #[test]
    fn all_presets_resolve_and_validate() {
        for name in preset_names() {
            let p = resolve_preset(name).unwrap();
            p.train.validate().unwrap();
            if let Some(adv) = &p.adv {
                adv.validate().unwrap();
            }
        }
    }
}
