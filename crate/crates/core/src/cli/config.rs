// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::BenchmarkConfig;
use crate::error::{Error, Result};
use crate::evalharness::{EditorConfig, EvalConfig};
use crate::io::read_artifact_string;
use crate::transformer::{ModelConfig, TrainSchedule};
use crate::weightupdate::SolverConfig;

/// Environment variable that replaces `output_dir` when set.
pub const OUTPUT_ROOT_ENV: &str = "KEDIT_OUTPUT_ROOT";

/// Everything a run depends on. Every field has a default, so an empty file
/// is a valid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of preservation-key sampling; the model, training schedule and
    /// benchmark carry their own seeds.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainSchedule,
    pub bench: BenchmarkConfig,
    pub editor: EditorConfig,
    pub solver: SolverConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            model: ModelConfig::default(),
            train: TrainSchedule::default(),
            bench: BenchmarkConfig::default(),
            editor: EditorConfig::default(),
            solver: SolverConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `dotted.path = raw` in `table`; `raw` is read as a TOML value and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects dotted.path=value, got {assignment:?}")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("--set: malformed key path {path:?}")));
    }
    let (last, parents) = keys.split_last().expect("split yields one key");
    let mut cur = table;
    for (i, k) in parents.iter().enumerate() {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("--set: {} is not a table", keys[..=i].join("."))))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text; errors name the offending field.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    /// Reads `path` (defaults when `None`), applies `--set` overrides in
    /// order, then the output-root environment variable.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => read_artifact_string(p)?,
            None => String::new(),
        };
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| {
            Error::Config(format!("{}: {}", path.map(|p| p.display().to_string()).unwrap_or_default(), e))
        })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let merged = toml::to_string(&table).map_err(|e| Error::Format(e.to_string()))?;
        let mut cfg = Self::from_toml(&merged)?;
        if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
            if !root.is_empty() {
                cfg.output_dir = PathBuf::from(root);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.editor.window_size == 0 {
            return Err(Error::Config("editor.window_size must be at least 1".into()));
        }
        self.editor.optimizer.validate()?;
        if self.editor.affinity.t_aff == 0 {
            return Err(Error::Config("editor.affinity.t_aff must be at least 1".into()));
        }
        self.solver.validate(self.model.n_layers)?;
        self.eval.validate()
    }

    /// Canonical serialization.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// First 12 hex digits of the SHA-256 of the canonical serialization,
    /// with `output_dir` blanked so the location of a run does not change
    /// its identity.
    pub fn hash(&self) -> Result<String> {
        let canon = RunConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let digest = Sha256::digest(canon.to_toml()?.as_bytes());
        Ok(digest.iter().take(6).map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_the_default_and_round_trips() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn defaults_carry_the_reference_settings() {
        let c = RunConfig::default();
        assert_eq!(c.editor.window_size, 20);
        assert_eq!(c.editor.optimizer.learning_rate, 0.5);
        assert_eq!(c.editor.optimizer.steps, 25);
        assert_eq!(c.editor.affinity.t_aff, 3);
        assert_eq!(c.editor.affinity.probe_lr, 0.5);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn hash_is_stable_and_ignores_output_dir() {
        let a = RunConfig::default();
        let b = RunConfig {
            output_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 12);
        let mut c = a.clone();
        c.editor.window_size = 10;
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn overrides_set_nested_values() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "editor.optimizer.steps=5").unwrap();
        apply_override(&mut t, "editor.objective = window").unwrap();
        apply_override(&mut t, "solver.memit_layers=[1, 2]").unwrap();
        let cfg = RunConfig::from_toml(&toml::to_string(&t).unwrap()).unwrap();
        assert_eq!(cfg.editor.optimizer.steps, 5);
        assert_eq!(cfg.editor.objective.name(), "window");
        assert_eq!(cfg.solver.memit_layers, vec![1, 2]);
        assert!(apply_override(&mut t, "no-equals-sign").is_err());
        apply_override(&mut t, "editor.window_size=5").unwrap();
        assert!(apply_override(&mut t, "editor.window_size.x=1").is_err());
    }

    #[test]
    fn bad_values_name_the_field() {
        let err = RunConfig::from_toml("[model]\nn_layers = \"four\"\n").unwrap_err().to_string();
        assert!(err.contains("n_layers"), "{err}");
        let err = RunConfig::from_toml("[editor]\nobjective = \"nope\"\n").unwrap_err().to_string();
        assert!(err.contains("objective"), "{err}");
        let err = RunConfig::from_toml("bogus = 1\n").unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = RunConfig::load(Some(Path::new("/nonexistent/run.toml")), &[]).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
        assert!(err.to_string().contains("/nonexistent/run.toml"));
    }
}
