//! Run configuration: a TOML file layered under `--set key=value`
//! overrides. Unknown keys are rejected at every level.

use std::fs;
use std::path::Path;

use artiscope::pipeline::RunConfig;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

/// A dotted key path and the value placed there.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: Value,
}

impl Override {
    pub fn new(key: &str, value: impl Into<Value>) -> Self {
        Self {
            key: key.to_string(),
            value: value.into(),
        }
    }

    /// Parse `key=value`. The value is read as a TOML literal (`5`,
    /// `true`, `["a", "b"]`, `"text"`) and falls back to a bare string.
    pub fn parse(s: &str) -> CliResult<Self> {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(CliError::Usage(format!("invalid key in `{s}`")));
        }
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .map(|v| serde_json::to_value(v).expect("TOML values map to JSON"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        Ok(Self::new(key, value))
    }
}

fn apply(root: &mut Value, o: &Override) -> CliResult<()> {
    let mut node = root;
    let parts: Vec<&str> = o.key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let Value::Object(map) = node else {
            return Err(CliError::Config(format!("`{}`: `{part}` is not a table", o.key)));
        };
        node = map.entry(*part).or_insert_with(|| Value::Object(Map::new()));
    }
    let Value::Object(map) = node else {
        return Err(CliError::Config(format!("`{}` does not name a table entry", o.key)));
    };
    map.insert(parts[parts.len() - 1].to_string(), o.value.clone());
    Ok(())
}

/// Defaults, then the file, then overrides in order.
pub fn load(path: Option<&Path>, overrides: &[Override]) -> CliResult<RunConfig> {
    let mut root = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let table: toml::Table =
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::to_value(table).expect("TOML values map to JSON")
        }
        None => Value::Object(Map::new()),
    };
    for o in overrides {
        apply(&mut root, o)?;
    }
    let config: RunConfig = serde_json::from_value(root).map_err(|e| {
        let origin = path.map_or_else(|| "overrides".to_string(), |p| p.display().to_string());
        CliError::Config(format!("{origin}: {e}"))
    })?;
    config.validate()?;
    Ok(config)
}

/// The effective configuration as TOML.
pub fn to_toml(config: &RunConfig) -> CliResult<String> {
    toml::to_string(config).map_err(|e| CliError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_parse_as_toml_literals() {
        assert_eq!(Override::parse("attribution.k=3").unwrap().value, Value::from(3));
        assert_eq!(Override::parse("a.b = true").unwrap().value, Value::from(true));
        assert_eq!(
            Override::parse("attribution.exclusions=[\"the\", \".\"]").unwrap().value,
            serde_json::json!(["the", "."])
        );
        assert_eq!(Override::parse("data.train=x/y.jsonl").unwrap().value, Value::from("x/y.jsonl"));
        assert!(Override::parse("novalue").is_err());
        assert!(Override::parse("a..b=1").is_err());
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[model]\nepochs = 3\nseed = 4\n[attribution]\nk = 7\n").unwrap();
        let c = load(Some(&path), &[Override::parse("model.seed=9").unwrap()]).unwrap();
        assert_eq!((c.model.epochs, c.model.seed, c.attribution.k), (3, 9, 7));
        assert_eq!(c.model.embedding_dim, RunConfig::default().model.embedding_dim);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(load(None, &[Override::parse("model.epoch=3").unwrap()]), Err(CliError::Config(_))));
        assert!(matches!(load(None, &[Override::parse("nope=1").unwrap()]), Err(CliError::Config(_))));
        assert!(load(None, &[Override::parse("attribution.k=0").unwrap()]).is_err());
        assert!(load(None, &[Override::parse("model.seed.x=1").unwrap()]).is_err());
    }

    #[test]
    fn printed_config_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::default();
        c.data.validation = Some("v.jsonl".into());
        let path = dir.path().join("c.toml");
        fs::write(&path, to_toml(&c).unwrap()).unwrap();
        assert_eq!(load(Some(&path), &[]).unwrap(), c);
    }
}
