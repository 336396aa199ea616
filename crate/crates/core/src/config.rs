//! The single JSON experiment document read by every CLI command.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::eval::{default_regions, validate_regions, Method, RegionSpec};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Scored regions; defaults to one per foreground class plus `whole`.
    pub regions: Option<Vec<RegionSpec>>,
    pub methods: Vec<Method>,
    /// Student modalities covered by the matrix.
    pub modalities: Vec<usize>,
    /// Modality of the component ablation.
    pub ablation_modality: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            regions: None,
            methods: Method::ALL.to_vec(),
            modalities: vec![0, 1, 2],
            ablation_modality: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    pub eval: EvalConfig,
    pub out_dir: String,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            model: ModelConfig::default(),
            teacher: TrainConfig {
                use_kd: false,
                use_proto: false,
                ..TrainConfig::default()
            },
            student: TrainConfig::default(),
            eval: EvalConfig::default(),
            out_dir: "runs".into(),
            seeds: (0..5).collect(),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path`, applies `key=value` overrides, validates, and returns
    /// the fully populated config.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut doc: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = serde_json::from_value(doc)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        self.model.segnet(1, self.generator.classes).validate()?;
        validate_regions(&self.regions(), self.generator.classes)?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        let m = self.generator.modalities;
        for &i in self
            .eval
            .modalities
            .iter()
            .chain([&self.eval.ablation_modality])
        {
            if i >= m {
                return Err(Error::ModalityOutOfRange {
                    index: i,
                    modalities: m,
                });
            }
        }
        Ok(())
    }

    pub fn regions(&self) -> Vec<RegionSpec> {
        self.eval
            .regions
            .clone()
            .unwrap_or_else(|| default_regions(self.generator.classes))
    }
}

/// Sets `a.b.c=value` in `doc`. The value is parsed as JSON when possible
/// and taken as a bare string otherwise; missing objects along the path are
/// created so that unknown keys still reach schema validation.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !cur.is_object() {
            return Err(Error::Config(format!(
                "override `{key}` descends into a non-object"
            )));
        }
        cur = cur
            .as_object_mut()
            .expect("checked object")
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match cur.as_object_mut() {
        Some(obj) => {
            obj.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(Error::Config(format!(
            "override `{key}` descends into a non-object"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_str(text: &str, overrides: &[&str]) -> Result<ExperimentConfig> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, text).unwrap();
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        ExperimentConfig::load(&p, &o)
    }

    #[test]
    fn empty_document_is_all_defaults() {
        let c = load_str("{}", &[]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.student.weights.alpha, 10.0);
        assert_eq!(c.student.weights.beta, 0.1);
        assert_eq!(c.student.weights.temperature, 10.0);
    }

    #[test]
    fn overrides_apply() {
        let c = load_str(
            r#"{"student": {"epochs": 3}}"#,
            &[
                "student.weights.alpha=2.5",
                "teacher.epochs=7",
                "out_dir=elsewhere",
                "seeds=[4,5]",
            ],
        )
        .unwrap();
        assert_eq!(c.student.epochs, 3);
        assert_eq!(c.student.weights.alpha, 2.5);
        assert_eq!(c.teacher.epochs, 7);
        assert_eq!(c.out_dir, "elsewhere");
        assert_eq!(c.seeds, vec![4, 5]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(load_str(r#"{"studnet": {}}"#, &[])
            .unwrap_err()
            .is_config_error());
        assert!(load_str("{}", &["student.alhpa=1"])
            .unwrap_err()
            .is_config_error());
        assert!(load_str("{}", &["no_equals"]).is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let e = ExperimentConfig::load(Path::new("/nonexistent/cfg.json"), &[]).unwrap_err();
        assert!(e.is_config_error());
        assert!(e.to_string().contains("/nonexistent/cfg.json"));
    }

    #[test]
    fn modality_range_checked() {
        let e = load_str("{}", &["eval.modalities=[0,3]"]).unwrap_err();
        assert!(matches!(e, Error::ModalityOutOfRange { index: 3, .. }));
    }
}
