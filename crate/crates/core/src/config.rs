//! `ragforge.toml`: one file for data directory, port, model registry and
//! service limits. Relative paths resolve against the file's directory.
//! `RAGFORGE_DATA_DIR` overrides `data_dir`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DATA_DIR_ENV: &str = "RAGFORGE_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub data_dir: PathBuf,
    pub port: u16,
    /// Model registry (`models.toml`).
    pub models: Option<PathBuf>,
    /// Prompt template overrides.
    pub templates_dir: Option<PathBuf>,
    /// When set, every request must carry `Authorization: Bearer <token>`.
    pub auth_token: Option<String>,
    /// Concurrent runs, evaluations and synthesis jobs.
    pub workers: usize,
    /// Embedding batches in flight during an index build.
    pub build_parallelism: usize,
    pub build_batch_size: usize,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("ragforge-data"),
            port: 8080,
            models: None,
            templates_dir: None,
            auth_token: None,
            workers: 4,
            build_parallelism: 1,
            build_batch_size: 32,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Invalid { path: String, message: String },
}

impl AppConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| ConfigError::Invalid { path: path.display().to_string(), message: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data_dir = base.join(&cfg.data_dir);
        cfg.models = cfg.models.map(|m| base.join(m));
        cfg.templates_dir = cfg.templates_dir.map(|t| base.join(t));
        cfg.validate().map_err(|message| ConfigError::Invalid { path: path.display().to_string(), message })?;
        Ok(cfg)
    }

    /// Loads `path` when given, otherwise defaults; then applies the
    /// environment override.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV).filter(|d| !d.is_empty()) {
            cfg.data_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.workers == 0 || self.build_parallelism == 0 || self.build_batch_size == 0 {
            return Err("workers, build_parallelism and build_batch_size must be at least 1".into());
        }
        Ok(())
    }

    pub fn kb_dir(&self) -> PathBuf {
        self.data_dir.join("kb")
    }

    pub fn traces_dir(&self) -> PathBuf {
        self.data_dir.join("traces")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.data_dir.join("reports")
    }

    pub fn synth_dir(&self) -> PathBuf {
        self.data_dir.join("synth")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ragforge.toml");
        std::fs::write(&p, "data_dir = \"data\"\nmodels = \"models.toml\"\nport = 9000\n").unwrap();
        let c = AppConfig::from_file(&p).unwrap();
        assert_eq!(c.data_dir, dir.path().join("data"));
        assert_eq!(c.models, Some(dir.path().join("models.toml")));
        assert_eq!(c.port, 9000);
        assert_eq!(c.workers, 4);
        assert_eq!(c.kb_dir(), dir.path().join("data/kb"));
    }

    #[test]
    fn rejects_unknown_keys_and_zero_workers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ragforge.toml");
        std::fs::write(&p, "prot = 1\n").unwrap();
        assert!(AppConfig::from_file(&p).is_err());
        std::fs::write(&p, "workers = 0\n").unwrap();
        assert!(AppConfig::from_file(&p).is_err());
    }
}
