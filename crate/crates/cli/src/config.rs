//! Run configuration: JSON config files merged under command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use doctree_core::baseline::{DEFAULT_CHUNK_SIZE, DEFAULT_K_COMPRESS};
use doctree_core::gateway::{BackendConfig, ChatGateway, EmbedGateway};
use doctree_core::trace::TraceLog;
use doctree_core::tree::AggregateConfig;
use doctree_core::{Error, Result};

use crate::{CliError, CliResult};

/// Backend sections of a backend-config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendsFile {
    pub chat: BackendConfig,
    pub embed: BackendConfig,
}

/// Optional values read from a run-config file. Flags win over these.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub backend_config: Option<PathBuf>,
    pub strategy: Option<String>,
    pub chunk_size: Option<usize>,
    pub k_compress: Option<usize>,
    pub rag_top_k: Option<usize>,
    pub truncate_tokens: Option<usize>,
    pub parallelism: Option<usize>,
    pub seed: Option<u64>,
    pub confidence: Option<bool>,
    pub aggregation: Option<bool>,
    pub compression: Option<bool>,
    pub knn_k: Option<usize>,
    pub min_sim: Option<f64>,
    pub resolution: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

/// Fully resolved run parameters.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedRun {
    pub backend_config: Option<PathBuf>,
    pub chunk_size: usize,
    pub k_compress: usize,
    pub rag_top_k: Option<usize>,
    pub truncate_tokens: Option<usize>,
    pub parallelism: usize,
    pub seed: u64,
    pub confidence: bool,
    pub aggregation: bool,
    pub compression: bool,
    pub knn_k: usize,
    pub min_sim: f64,
    pub resolution: f64,
}

impl ResolvedRun {
    pub fn from_file(file: FileConfig) -> ResolvedRun {
        ResolvedRun {
            backend_config: file.backend_config,
            chunk_size: file.chunk_size.unwrap_or(DEFAULT_CHUNK_SIZE),
            k_compress: file.k_compress.unwrap_or(DEFAULT_K_COMPRESS),
            rag_top_k: file.rag_top_k,
            truncate_tokens: file.truncate_tokens,
            parallelism: file.parallelism.unwrap_or(4),
            seed: file.seed.unwrap_or(0),
            confidence: file.confidence.unwrap_or(true),
            aggregation: file.aggregation.unwrap_or(true),
            compression: file.compression.unwrap_or(true),
            knn_k: file.knn_k.unwrap_or(8),
            min_sim: file.min_sim.unwrap_or(0.0),
            resolution: file.resolution.unwrap_or(1.0),
        }
    }

    pub fn aggregate_config(&self) -> AggregateConfig {
        AggregateConfig {
            knn_k: self.knn_k,
            min_sim: self.min_sim,
            resolution: self.resolution,
            seed: self.seed,
            ..AggregateConfig::default()
        }
    }

    /// Snapshot embedded into report outputs for reproducibility.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("resolved config serializes")
    }
}

/// Build the chat and embedding gateways named by the resolved config,
/// sharing one trace log. Without a backend-config file both gateways run
/// on deterministic local mocks (unscripted chat requests then fail loudly).
pub fn load_gateways(run: &ResolvedRun) -> CliResult<(ChatGateway, EmbedGateway, TraceLog)> {
    let backends = match &run.backend_config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!(
                    "cannot read backend config {}: {e}",
                    path.display()
                ))
            })?;
            serde_json::from_str::<BackendsFile>(&text)
                .map_err(|e| CliError::Config(format!("backend config {}: {e}", path.display())))?
        }
        None => BackendsFile {
            chat: BackendConfig::mock(),
            embed: BackendConfig::mock(),
        },
    };
    let trace = TraceLog::new();
    let chat = ChatGateway::from_config(&backends.chat, trace.clone())
        .map_err(|e| CliError::Config(format!("chat backend: {e}")))?;
    let embed = EmbedGateway::from_config(&backends.embed, trace.clone())
        .map_err(|e| CliError::Config(format!("embedding backend: {e}")))?;
    Ok((chat, embed, trace))
}
