//! Config resolution: file (TOML or JSON) + `--set` overrides + defaults.
//!
//! Precedence: CLI `--set` > config file > built-in defaults. Unknown keys
//! are rejected by name.

use std::path::Path;

use normgeo::montecarlo::McConfig;
use serde_json::Value;

use crate::{CliError, CliResult};

/// Loads the Monte Carlo config, applying `--set key=value` overrides.
/// Returns the config plus its resolved JSON form (for the manifest).
pub fn load_mc_config(path: Option<&Path>, sets: &[String]) -> CliResult<(McConfig, Value)> {
    let mut value = match path {
        None => serde_json::to_value(McConfig::default()).expect("default config serializes"),
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Usage(format!(
                    "config file '{}' not found",
                    p.display()
                )));
            }
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read '{}': {e}", p.display())))?;
            if p.extension().is_some_and(|e| e == "json") {
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| CliError::Usage(format!("invalid JSON config: {e}")))?
            } else {
                let toml_value: toml::Value = toml::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("invalid TOML config: {e}")))?;
                serde_json::to_value(toml_value)
                    .map_err(|e| CliError::Usage(format!("config conversion failed: {e}")))?
            }
        }
    };

    let map = value
        .as_object_mut()
        .ok_or_else(|| CliError::Usage("config root must be a table".into()))?;
    for set in sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set '{set}' is not KEY=VALUE")))?;
        let parsed = serde_json::from_str::<Value>(raw).unwrap_or(Value::String(raw.to_string()));
        map.insert(key.to_string(), parsed);
    }

    let cfg: McConfig = serde_json::from_value(value.clone())
        .map_err(|e| CliError::Usage(format!("bad config key or value: {e}")))?;
    cfg.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok((cfg, value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_plus_set_overrides() {
        let (cfg, _) = load_mc_config(None, &["replications=3".into(), "beta_fix=1.2".into()])
            .map_err(|_| "fail")
            .unwrap();
        assert_eq!(cfg.replications, 3);
        assert_eq!(cfg.beta_fix, vec![1.2]);
    }

    #[test]
    fn unknown_key_names_the_key() {
        let err = load_mc_config(None, &["no_such_key=1".into()]);
        match err {
            Err(CliError::Usage(msg)) => assert!(msg.contains("no_such_key"), "{msg}"),
            _ => panic!("expected usage error"),
        }
    }

    #[test]
    fn missing_config_file_is_usage_error() {
        let err = load_mc_config(Some(Path::new("/nonexistent/zz.toml")), &[]);
        assert!(matches!(err, Err(CliError::Usage(_))));
    }
}
