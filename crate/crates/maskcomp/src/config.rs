//! Plain key-value run configuration.
//!
//! One `key = value` pair per line, `#` comments. Every command resolves
//! its effective settings into this format and writes them next to its
//! outputs, so any artifact can be traced back to the exact run.

use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {0}: expected `key = value`")]
    BadLine(usize),
    #[error("key `{key}`: cannot parse `{value}` as {want}")]
    BadValue {
        key: String,
        value: String,
        want: &'static str,
    },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    map: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> KvConfig {
        KvConfig::default()
    }

    pub fn parse_str(text: &str) -> Result<KvConfig> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::BadLine(i + 1))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(KvConfig { map })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<KvConfig> {
        KvConfig::parse_str(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.map.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    /// Typed lookup; absent keys yield `Ok(None)`, malformed values an error.
    pub fn parse<T: std::str::FromStr>(&self, key: &str, want: &'static str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v.clone(),
                want,
            }),
        }
    }

    pub fn parse_or<T: std::str::FromStr>(
        &self,
        key: &str,
        want: &'static str,
        default: T,
    ) -> Result<T> {
        Ok(self.parse(key, want)?.unwrap_or(default))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Canonical text form: sorted keys, one pair per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Writes the resolved configuration (plus tool provenance) next to a
    /// command's outputs.
    pub fn write_resolved(&self, dir: impl AsRef<Path>, command: &str) -> Result<()> {
        let mut full = self.clone();
        full.set("command", command);
        full.set("tool_version", env!("CARGO_PKG_VERSION"));
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.as_ref().join("run-config.txt"), full.render())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_pairs() {
        let c = KvConfig::parse_str("# hello\nsteps = 40\n\nlr=0.003\nname = stage one\n").unwrap();
        assert_eq!(c.get("steps"), Some("40"));
        assert_eq!(c.parse::<f64>("lr", "float").unwrap(), Some(0.003));
        assert_eq!(c.get("name"), Some("stage one"));
        assert_eq!(c.parse_or::<usize>("batch", "int", 7).unwrap(), 7);
    }

    #[test]
    fn rejects_malformed_lines_and_values() {
        assert!(matches!(
            KvConfig::parse_str("what is this"),
            Err(ConfigError::BadLine(1))
        ));
        let c = KvConfig::parse_str("lr = fast").unwrap();
        assert!(matches!(
            c.parse::<f64>("lr", "float"),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn render_is_sorted_and_round_trips() {
        let mut c = KvConfig::new();
        c.set("zebra", 1);
        c.set("alpha", "x");
        let text = c.render();
        assert!(text.find("alpha").unwrap() < text.find("zebra").unwrap());
        assert_eq!(KvConfig::parse_str(&text).unwrap(), c);
    }
}
