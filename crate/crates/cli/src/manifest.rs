use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub const BUNDLED_CONFIG: &str = "<bundled default_microgrid.json>";

/// Provenance embedded in every output artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: String,
    pub parameters: BTreeMap<String, serde_json::Value>,
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` when set.
    pub timestamp: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: Option<&Path>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: config.map_or_else(|| BUNDLED_CONFIG.to_string(), |p| p.display().to_string()),
            parameters: BTreeMap::new(),
            timestamp: timestamp(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.parameters.insert(key.to_string(), v);
        self
    }

    /// A `#` comment line for the top of CSV outputs.
    pub fn csv_comment(&self) -> String {
        format!("# manifest {}\n", serde_json::to_string(self).expect("manifest serializes"))
    }
}

fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_comment_round_trips() {
        let m = RunManifest::new("simulate", None).with("steps", 10).with("eps0", 1e-3);
        let line = m.csv_comment();
        let json = line.strip_prefix("# manifest ").unwrap().trim_end();
        let back: RunManifest = serde_json::from_str(json).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.config, BUNDLED_CONFIG);
    }
}
