//! Run configuration: a named preset plus JSON overrides.
//!
//! ```json
//! {
//!   "preset": "micro",
//!   "model": { "decoder": { "num_classes": 1, "ablation": { "multi_scale": false } } },
//!   "train": { "iterations": 2000, "optimizer": { "kind": "adamw" } },
//!   "data": { "task": "binary_lesion", "count": 64, "size": 64, "seed": 0 }
//! }
//! ```
//!
//! `model` is merged key by key into the preset's variant spec. Unknown keys
//! at any level are rejected with their full path.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::Task;
use crate::error::{Error, Result};
use crate::model::{VariantSpec, PRESET_NAMES};
use crate::train::TrainConfig;

fn default_preset() -> String {
    "micro".into()
}
fn default_count() -> usize {
    64
}
fn default_size() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_task")]
    pub task: Task,
    #[serde(default = "default_count")]
    pub count: usize,
    /// Square image side.
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_task() -> Task {
    Task::BinaryLesion
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { task: default_task(), count: default_count(), size: default_size(), seed: 0 }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    #[serde(default = "default_preset")]
    preset: String,
    #[serde(default)]
    model: Option<Value>,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    data: DataConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub preset: String,
    pub model: VariantSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn strict<T: serde::de::DeserializeOwned>(value: Value, prefix: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let at = if path == "." { prefix.to_string() } else { format!("{prefix}{path}") };
        Error::Config(format!("at `{at}`: {}", e.inner()))
    })
}

impl RunConfig {
    pub fn from_preset(name: &str) -> Result<RunConfig> {
        RunConfig::from_json_str(&format!(r#"{{"preset": {}}}"#, serde_json::to_string(name)?))
    }

    pub fn from_json_str(text: &str) -> Result<RunConfig> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let raw: RawRunConfig = strict(value, "")?;
        let mut model = serde_json::to_value(VariantSpec::preset(&raw.preset)?)?;
        if let Some(overlay) = raw.model {
            if !overlay.is_object() {
                return Err(Error::Config("at `model`: expected an object".into()));
            }
            merge(&mut model, overlay);
        }
        let model: VariantSpec = strict(model, "model.")?;
        model.validate()?;
        raw.train.validate()?;
        let cfg = RunConfig { preset: raw.preset, model, train: raw.train, data: raw.data };
        cfg.check_task()?;
        Ok(cfg)
    }

    /// `source` is either a preset name or a path to a JSON file.
    pub fn load(source: &str) -> Result<RunConfig> {
        let path = Path::new(source);
        if !path.exists() && PRESET_NAMES.contains(&source) {
            return RunConfig::from_preset(source);
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {source:?}: {e}")))?;
        RunConfig::from_json_str(&text)
    }

    fn check_task(&self) -> Result<()> {
        let want = self.data.task.model_classes();
        if self.model.decoder.num_classes != want {
            return Err(Error::Config(format!(
                "at `model.decoder.num_classes`: task {} needs {want} output classes, config has {}",
                self.data.task, self.model.decoder.num_classes
            )));
        }
        if self.data.size == 0 || self.data.size % 32 != 0 {
            return Err(Error::Config(format!("at `data.size`: {} must be a positive multiple of 32", self.data.size)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::AttentionMode;
    use crate::optim::OptimizerConfig;

    #[test]
    fn empty_document_is_micro_defaults() {
        let c = RunConfig::from_json_str("{}").unwrap();
        assert_eq!(c.model, VariantSpec::preset("micro").unwrap());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.train.optimizer, OptimizerConfig::adamw());
    }

    #[test]
    fn overrides_merge_into_preset() {
        let c = RunConfig::from_json_str(
            r#"{"preset":"mcanet-t","model":{"decoder":{"ablation":{"attention_mode":"none"}}},
                "train":{"optimizer":{"kind":"sgd"}}}"#,
        )
        .unwrap();
        assert_eq!(c.model.encoder.channels, [32, 64, 160, 256]);
        assert_eq!(c.model.decoder.channels, 64);
        assert_eq!(c.model.decoder.ablation.attention_mode, AttentionMode::None);
        assert!(c.model.decoder.ablation.multi_scale);
        assert_eq!(c.train.optimizer, OptimizerConfig::sgd());
    }

    #[test]
    fn unknown_keys_are_named() {
        for (doc, key) in [
            (r#"{"presett":"micro"}"#, "presett"),
            (r#"{"model":{"decoder":{"ablation":{"multi_scal":true}}}}"#, "multi_scal"),
            (r#"{"train":{"optimizer":{"kind":"adamw","betas":1}}}"#, "betas"),
            (r#"{"data":{"sizee":64}}"#, "sizee"),
        ] {
            let err = RunConfig::from_json_str(doc).unwrap_err().to_string();
            assert!(err.contains(key), "{err}");
        }
    }

    #[test]
    fn wrong_types_and_values_are_located() {
        let err = RunConfig::from_json_str(r#"{"model":{"decoder":{"heads":"two"}}}"#).unwrap_err().to_string();
        assert!(err.contains("model.decoder.heads"), "{err}");
        let err = RunConfig::from_json_str(r#"{"model":{"decoder":{"heads":3}}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(RunConfig::from_json_str(r#"{"preset":"huge"}"#).is_err());
        assert!(RunConfig::from_json_str("[1,2").is_err());
    }

    #[test]
    fn task_and_classes_must_agree() {
        let err = RunConfig::from_json_str(r#"{"data":{"task":"multi_organ:3"}}"#).unwrap_err().to_string();
        assert!(err.contains("num_classes"), "{err}");
        let ok = RunConfig::from_json_str(r#"{"data":{"task":"multi_organ:3"},"model":{"decoder":{"num_classes":4}}}"#);
        assert!(ok.is_ok());
    }

    #[test]
    fn presets_by_name() {
        for name in PRESET_NAMES {
            assert_eq!(RunConfig::load(name).unwrap().model, VariantSpec::preset(name).unwrap());
        }
    }
}
