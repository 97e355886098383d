//! One strict JSON config file drives every command. Unknown keys abort.

use crate::error::{Error, Result};
use crate::synth::DatasetSpec;
use crate::trainer::{TaskKind, TrainConfig};
use crate::vit::ViTConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory (holds manifest.json and bags/).
    pub dataset_dir: String,
    /// Generation spec used by gen-data.
    pub spec: DatasetSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub run_dir: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub vit: ViTConfig,
    pub train: TrainConfig,
    pub data: DataSection,
    pub task: TaskSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = DatasetSpec::binary_default();
        RunConfig {
            vit: ViTConfig::default(),
            train: TrainConfig::default(),
            data: DataSection {
                dataset_dir: "data/binary".into(),
                spec,
            },
            task: TaskSection {
                kind: TaskKind::Binary,
                class_names: vec!["signal".into()],
            },
            output: OutputSection {
                run_dir: "runs/default".into(),
            },
        }
    }
}

impl RunConfig {
    /// Multi-label counterpart of the default config.
    pub fn multilabel_default() -> Self {
        let spec = DatasetSpec::multilabel_default();
        let class_names = spec.classes.iter().map(|c| c.name.clone()).collect();
        RunConfig {
            vit: ViTConfig::default(),
            train: TrainConfig {
                task: TaskKind::Multilabel,
                epochs: 25,
                tiles_per_bag: 32,
                ..TrainConfig::default()
            },
            data: DataSection {
                dataset_dir: "data/multilabel".into(),
                spec,
            },
            task: TaskSection {
                kind: TaskKind::Multilabel,
                class_names,
            },
            output: OutputSection {
                run_dir: "runs/multilabel".into(),
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.train.validate()?;
        self.data.spec.validate()?;
        if self.task.kind != self.train.task {
            return Err(Error::Config(
                "task.kind and train.task must agree".into(),
            ));
        }
        let classes = self.data.spec.classes.len();
        if self.task.class_names.len() != classes {
            return Err(Error::Config(format!(
                "task.class_names has {} entries but the dataset spec defines {} classes",
                self.task.class_names.len(),
                classes
            )));
        }
        match self.task.kind {
            TaskKind::Binary if classes != 1 => Err(Error::Config(
                "binary task requires exactly one class in data.spec".into(),
            )),
            TaskKind::Multilabel if classes < 2 => Err(Error::Config(
                "multilabel task requires at least two classes".into(),
            )),
            _ => Ok(()),
        }?;
        if self.data.spec.slide.tile_size != self.vit.tile_size {
            return Err(Error::Config(format!(
                "data.spec.slide.tile_size {} and vit.tile_size {} must match",
                self.data.spec.slide.tile_size, self.vit.tile_size
            )));
        }
        if self.data.spec.slide.channels != self.vit.channels {
            return Err(Error::Config(
                "data.spec.slide.channels and vit.channels must match".into(),
            ));
        }
        Ok(())
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
