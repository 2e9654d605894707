//! TOML service configuration. Every key is optional.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::artificial::DEFAULT_JACCARD_THRESHOLD;
use crate::assembly::AssemblyConfig;
use crate::ingest::{BufferConfig, DropPolicy};
use crate::store::DEFAULT_WINDOW_NANO;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub ingest: IngestSection,
    pub assembly: AssemblySection,
    pub clustering: ClusteringSection,
    pub store: StoreSection,
    pub api: ApiSection,
    pub pipeline: PipelineSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub capacity_spans: usize,
    /// Port of the OTLP listener. Equal to `api.port` means one shared listener.
    pub port: u16,
}

impl Default for IngestSection {
    fn default() -> Self {
        IngestSection {
            capacity_spans: BufferConfig::default().capacity_spans,
            port: 4318,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssemblySection {
    pub inactivity_timeout_ms: u64,
    pub clock_skew_tolerance_us: u64,
    pub max_pending_spans: usize,
}

impl Default for AssemblySection {
    fn default() -> Self {
        let d = AssemblyConfig::default();
        AssemblySection {
            inactivity_timeout_ms: d.inactivity_timeout_nano / 1_000_000,
            clock_skew_tolerance_us: d.clock_skew_tolerance_nano / 1_000,
            max_pending_spans: d.max_pending_spans,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringSection {
    pub jaccard_threshold: f64,
}

impl Default for ClusteringSection {
    fn default() -> Self {
        ClusteringSection {
            jaccard_threshold: DEFAULT_JACCARD_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreSection {
    /// Without a directory windows live in memory only.
    pub dir: Option<PathBuf>,
    pub window_ms: u64,
}

impl Default for StoreSection {
    fn default() -> Self {
        StoreSection {
            dir: None,
            window_ms: DEFAULT_WINDOW_NANO / 1_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApiSection {
    pub port: u16,
}

impl Default for ApiSection {
    fn default() -> Self {
        ApiSection { port: 8080 }
    }
}

/// How often and how much the consumer drains from the ingest buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub tick_ms: u64,
    pub drain_batch: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            tick_ms: 100,
            drain_batch: 8192,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value for {key}: {reason}")]
    Invalid { key: &'static str, reason: &'static str },
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: Config = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key, reason| Err(ConfigError::Invalid { key, reason });
        if self.ingest.capacity_spans == 0 {
            return invalid("ingest.capacity_spans", "must be at least 1");
        }
        if self.assembly.inactivity_timeout_ms == 0 {
            return invalid("assembly.inactivity_timeout_ms", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.clustering.jaccard_threshold) {
            return invalid("clustering.jaccard_threshold", "must lie in [0, 1]");
        }
        if self.store.window_ms == 0 {
            return invalid("store.window_ms", "must be positive");
        }
        if self.pipeline.tick_ms == 0 || self.pipeline.drain_batch == 0 {
            return invalid("pipeline", "tick_ms and drain_batch must be positive");
        }
        Ok(())
    }

    pub fn buffer(&self) -> BufferConfig {
        BufferConfig {
            capacity_spans: self.ingest.capacity_spans,
            drop_policy: DropPolicy::DropNew,
        }
    }

    pub fn assembly(&self) -> AssemblyConfig {
        AssemblyConfig {
            inactivity_timeout_nano: self.assembly.inactivity_timeout_ms.saturating_mul(1_000_000),
            clock_skew_tolerance_nano: self.assembly.clock_skew_tolerance_us.saturating_mul(1_000),
            max_pending_spans: self.assembly.max_pending_spans,
        }
    }

    pub fn window_nano(&self) -> u64 {
        self.store.window_ms.saturating_mul(1_000_000)
    }

    pub fn tick(&self) -> Duration {
        Duration::from_millis(self.pipeline.tick_ms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::parse("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.buffer().capacity_spans, 100_000);
        assert_eq!(c.assembly(), AssemblyConfig::default());
        assert_eq!(c.window_nano(), 10_000_000_000);
        assert_eq!(c.clustering.jaccard_threshold, 0.5);
    }

    #[test]
    fn keys_map_to_components() {
        let c = Config::parse(
            r#"
            [ingest]
            capacity_spans = 10
            port = 4000
            [assembly]
            inactivity_timeout_ms = 250
            clock_skew_tolerance_us = 5
            [clustering]
            jaccard_threshold = 0.7
            [store]
            dir = "/tmp/windows"
            window_ms = 1000
            [api]
            port = 9000
            "#,
        )
        .unwrap();
        assert_eq!(c.buffer().capacity_spans, 10);
        assert_eq!(c.assembly().inactivity_timeout_nano, 250_000_000);
        assert_eq!(c.assembly().clock_skew_tolerance_nano, 5_000);
        assert_eq!(c.window_nano(), 1_000_000_000);
        assert_eq!(c.store.dir.as_deref(), Some(Path::new("/tmp/windows")));
        assert_eq!((c.ingest.port, c.api.port), (4000, 9000));
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::parse("[ingest]\ncapacity_spans = 0").is_err());
        assert!(Config::parse("[clustering]\njaccard_threshold = 1.5").is_err());
        assert!(Config::parse("[store]\nwindow_ms = 0").is_err());
        assert!(Config::parse("[ingest]\ncapacity = 3").is_err());
    }
}
