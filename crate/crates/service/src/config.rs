use std::path::{Path, PathBuf};

use hrc_core::metrics::bundled_scene;
use hrc_core::perception::{load_scene, DetectorConfig, SceneObject};
use hrc_core::planner::{PlanBackend, RemoteBackend, StubBackend, StubTable};
use hrc_core::{ConfigError, RobotConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Stub,
    Remote,
}

impl std::str::FromStr for BackendKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "stub" => Ok(Self::Stub),
            "remote" => Ok(Self::Remote),
            other => Err(ConfigError::Invalid(format!(
                "unknown backend `{other}`, expected stub or remote"
            ))),
        }
    }
}

/// Service settings. Read from a TOML or JSON file, then overridden by
/// `HRC_*` environment variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    /// Scene file; the bundled desk scene when absent.
    pub scene: Option<PathBuf>,
    /// Stub table; the bundled table when absent.
    pub stub_table: Option<PathBuf>,
    pub backend: BackendKind,
    pub remote: Option<RemoteBackend>,
    pub error_probability: f64,
    pub seed: u64,
    pub detector: DetectorConfig,
    pub robot: RobotConfig,
    /// Overrides are loaded from and saved to this file when set.
    pub overrides_path: Option<PathBuf>,
    /// The latest metrics CSV is also written here when set.
    pub metrics_path: Option<PathBuf>,
    /// World snapshots are streamed every this many simulation ticks.
    pub snapshot_every_ticks: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            scene: None,
            stub_table: None,
            backend: BackendKind::Stub,
            remote: None,
            error_probability: 0.0,
            seed: 0,
            detector: DetectorConfig::default(),
            robot: RobotConfig::default(),
            overrides_path: None,
            metrics_path: None,
            snapshot_every_ticks: 10,
        }
    }
}

impl ServiceConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
        }
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(path.display().to_string(), e.to_string()))?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut config.scene,
            &mut config.stub_table,
            &mut config.overrides_path,
            &mut config.metrics_path,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    /// Applies `HRC_BIND`, `HRC_SCENE`, `HRC_STUB_TABLE`, `HRC_BACKEND`,
    /// `HRC_REMOTE_URL`, `HRC_ERROR_PROBABILITY` and `HRC_SEED`.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (key, value) in vars {
            let value = value.as_ref();
            match key.as_ref() {
                "HRC_BIND" => self.bind = value.to_string(),
                "HRC_SCENE" => self.scene = Some(value.into()),
                "HRC_STUB_TABLE" => self.stub_table = Some(value.into()),
                "HRC_BACKEND" => self.backend = value.parse()?,
                "HRC_REMOTE_URL" => self.remote = Some(RemoteBackend::new(value)),
                "HRC_ERROR_PROBABILITY" => {
                    self.error_probability = value.parse().map_err(|_| {
                        ConfigError::Invalid(format!(
                            "HRC_ERROR_PROBABILITY `{value}` is not a number"
                        ))
                    })?
                }
                "HRC_SEED" => {
                    self.seed = value.parse().map_err(|_| {
                        ConfigError::Invalid(format!("HRC_SEED `{value}` is not an integer"))
                    })?
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn load_scene(&self) -> Result<Vec<SceneObject>, ConfigError> {
        match &self.scene {
            Some(p) => load_scene(p),
            None => Ok(bundled_scene()),
        }
    }

    pub fn build_backend(&self) -> Result<PlanBackend, ConfigError> {
        match self.backend {
            BackendKind::Stub => {
                let table = match &self.stub_table {
                    Some(p) => StubTable::load(p)?,
                    None => StubTable::builtin(),
                };
                Ok(PlanBackend::Stub(StubBackend::new(
                    table,
                    self.error_probability,
                    self.seed,
                )?))
            }
            BackendKind::Remote => self.remote.clone().map(PlanBackend::Remote).ok_or_else(|| {
                ConfigError::Invalid("remote backend selected without a remote endpoint".into())
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_file_values() {
        let mut c = ServiceConfig::parse("bind = \"0.0.0.0:1\"\nseed = 4\n").unwrap();
        c.apply_env([("HRC_SEED", "9"), ("HRC_BACKEND", "stub"), ("PATH", "/bin")])
            .unwrap();
        assert_eq!((c.bind.as_str(), c.seed), ("0.0.0.0:1", 9));
        assert!(c.apply_env([("HRC_SEED", "nine")]).is_err());
        assert!(c.apply_env([("HRC_BACKEND", "oracle")]).is_err());
    }

    #[test]
    fn remote_needs_an_endpoint() {
        let mut c = ServiceConfig::default();
        c.apply_env([("HRC_BACKEND", "remote")]).unwrap();
        assert!(c.build_backend().is_err());
        c.apply_env([("HRC_REMOTE_URL", "http://127.0.0.1:9/plan")])
            .unwrap();
        assert!(matches!(c.build_backend(), Ok(PlanBackend::Remote(_))));
    }

    #[test]
    fn file_paths_are_relative_to_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hrc.toml");
        std::fs::write(&path, "scene = \"scene.json\"\n").unwrap();
        let c = ServiceConfig::load(&path).unwrap();
        assert_eq!(c.scene.unwrap(), dir.path().join("scene.json"));
    }
}
