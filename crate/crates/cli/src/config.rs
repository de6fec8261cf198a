use std::fs;
use std::path::{Path, PathBuf};

use cdlg::probe::ProbeConfig;
use cdlg::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::fail::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_dataset")]
    pub dataset: String,
    /// Bundle directory; relative paths are taken from the config file's
    /// directory.
    pub bundle: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
}

fn default_dataset() -> String {
    "unnamed".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub channels: Vec<usize>,
    pub p_re: Vec<f64>,
    pub p_mf: Vec<f64>,
}

/// Sets `path` (dot separated) in `doc` to `raw`, parsed as JSON when it can
/// be and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("--set expects key=value, got `{assignment}`")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let mut keys = path.split('.').peekable();
    while let Some(key) = keys.next() {
        if key.is_empty() {
            return Err(CliError::config(format!("empty key in `{path}`")));
        }
        let map = match node {
            Value::Object(map) => map,
            _ => {
                return Err(CliError::config(format!(
                    "`{path}`: `{key}` is inside a non-object"
                )))
            }
        };
        if keys.peek().is_none() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

pub fn load_run_config(path: &Path, overrides: &[String]) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("reading {}: {e}", path.display())))?;
    let mut doc: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(doc)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    if cfg.bundle.is_relative() {
        cfg.bundle = base.join(&cfg.bundle);
    }
    if let Some(out) = &cfg.out_dir {
        if out.is_relative() {
            cfg.out_dir = Some(base.join(out));
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn dotted_overrides() {
        let mut doc = json!({"train": {"epochs": 3}});
        apply_override(&mut doc, "train.epochs=7").unwrap();
        apply_override(&mut doc, "train.encoder.channels=2").unwrap();
        apply_override(&mut doc, "dataset=cora").unwrap();
        assert_eq!(
            doc,
            json!({"train": {"epochs": 7, "encoder": {"channels": 2}}, "dataset": "cora"})
        );
        assert!(apply_override(&mut doc, "dataset.x=1").is_err());
        assert!(apply_override(&mut doc, "novalue").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"bundle": "b", "trian": {}}"#).unwrap();
        assert_eq!(load_run_config(&p, &[]).unwrap_err().code, 1);
        fs::write(&p, r#"{"bundle": "b"}"#).unwrap();
        assert_eq!(
            load_run_config(&p, &[]).unwrap().bundle,
            dir.path().join("b")
        );
        let err = load_run_config(&p, &["train.encoder.chanels=3".into()]).unwrap_err();
        assert_eq!(err.code, 1);
    }
}
