//! Run configuration. Values resolve as defaults < config file < flags and
//! every run writes the resolved set beside its outputs; feeding that
//! snapshot back through `--config` repeats the run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::checkpoint::{parse_kv, write_kv};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "DIFFTALK_OUTPUT_ROOT";
pub const SNAPSHOT_FILE: &str = "config.resolved";

#[derive(Debug, Clone, PartialEq)]
pub struct CommandConfig {
    pub command: String,
    values: BTreeMap<String, String>,
}

pub fn default_output_dir(command: &str) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(command)
}

impl CommandConfig {
    /// `defaults` fixes the key set; any other key in the file or the
    /// flags is rejected.
    pub fn resolve(
        command: &str,
        defaults: Vec<(&str, String)>,
        file: Option<&Path>,
        flags: &[(String, String)],
    ) -> Result<Self> {
        let mut values: BTreeMap<String, String> = defaults.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        values.insert("out".into(), default_output_dir(command).display().to_string());
        let mut cfg = Self {
            command: command.to_string(),
            values,
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
            let kv = parse_kv(&text).map_err(|e| match e {
                Error::Parse { line, message, .. } => {
                    Error::Config(format!("{}:{line}: {message}", path.display()))
                }
                other => other,
            })?;
            for (k, v) in kv {
                cfg.set(&k, v, &format!("config file {}", path.display()))?;
            }
        }
        for (k, v) in flags {
            cfg.set(k, v.clone(), "flags")?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: String, origin: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(Error::Config(format!(
                "unknown key `{key}` for `{}` in {origin}; known keys: {}",
                self.command,
                self.values.keys().cloned().collect::<Vec<_>>().join(", ")
            ))),
        }
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("`{}` has no key `{key}`", self.command)))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`")))
    }

    /// Empty string reads as absent.
    pub fn optional(&self, key: &str) -> Result<Option<&str>> {
        Ok(Some(self.raw(key)?).filter(|v| !v.is_empty()))
    }

    pub fn required_path(&self, key: &str) -> Result<PathBuf> {
        self.optional(key)?
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("`{}` needs `{key}` (flag --{} or config key)", self.command, key.replace('_', "-"))))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.raw(key)?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("`{key}` has invalid entry `{s}`")))
            })
            .collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.values["out"])
    }

    pub fn snapshot(&self) -> String {
        format!("# difftalk {}\n{}", self.command, write_kv(&self.values))
    }

    /// Creates the output directory and writes the snapshot into it.
    pub fn write_snapshot(&self) -> Result<PathBuf> {
        let dir = self.out_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(SNAPSHOT_FILE);
        std::fs::write(&path, self.snapshot()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
