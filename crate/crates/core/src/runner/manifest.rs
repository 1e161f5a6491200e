use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::AgentConfig;
use crate::backends::{
    ChatBackend, EmbeddingBackend, HashEmbedder, OpenAiCompatClient, OpenAiConfig,
};
use crate::engine::StopCriterion;
use crate::metrics::MetricSuite;
use crate::prompts::{PromptRegistry, TemplateSet};
use crate::simworld::{ReleaseRate, SimWorldBackend};
use crate::types::{digest_hex, AnalysisMode, Scenario};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error("building HTTP client: {0}")]
    Client(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: PathBuf,
    pub scenario: Scenario,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelClass {
    #[default]
    Proprietary,
    OpenWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChatBackendConfig {
    Openai {
        #[serde(flatten)]
        client: OpenAiConfig,
        #[serde(default)]
        class: ModelClass,
    },
    /// Scripted synthetic target; ground truth comes from the dataset.
    Simworld { release_rate: ReleaseRate },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingConfig {
    Openai {
        #[serde(flatten)]
        client: OpenAiConfig,
        sentence_model: String,
        /// Defaults to `sentence_model`.
        #[serde(default)]
        token_model: Option<String>,
    },
    /// Deterministic hashed embeddings seeded by the manifest seed.
    Mock { dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub datasets: Vec<DatasetRef>,
    pub chat: ChatBackendConfig,
    #[serde(default)]
    pub embeddings: Option<EmbeddingConfig>,
    pub agent: AgentConfig,
    /// Falls back to the backend class default when absent.
    #[serde(default)]
    pub stop: Option<StopCriterion>,
    #[serde(default)]
    pub template_set: TemplateSet,
    #[serde(default = "one")]
    pub concurrency_limit: usize,
    pub journal_path: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl RunManifest {
    pub fn new(
        run_id: impl Into<String>,
        chat: ChatBackendConfig,
        model_id: impl Into<String>,
        journal_path: impl Into<PathBuf>,
    ) -> Self {
        Self {
            run_id: run_id.into(),
            datasets: Vec::new(),
            chat,
            embeddings: None,
            agent: AgentConfig::new(model_id, AnalysisMode::Structured),
            stop: None,
            template_set: TemplateSet::default(),
            concurrency_limit: 1,
            journal_path: journal_path.into(),
            seed: 0,
        }
    }

    pub fn with_dataset(mut self, path: impl Into<PathBuf>, scenario: Scenario) -> Self {
        self.datasets.push(DatasetRef {
            path: path.into(),
            scenario,
        });
        self
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut manifest: Self =
            serde_json::from_str(&text).map_err(|source| ManifestError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        // Relative dataset and journal paths are taken from the manifest's directory.
        if let Some(dir) = path.parent() {
            for d in &mut manifest.datasets {
                if d.path.is_relative() {
                    d.path = dir.join(&d.path);
                }
            }
            if manifest.journal_path.is_relative() {
                manifest.journal_path = dir.join(&manifest.journal_path);
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        let invalid = |m: &str| Err(ManifestError::Invalid(m.to_string()));
        if self.run_id.trim().is_empty() {
            return invalid("run_id is empty");
        }
        if self.concurrency_limit == 0 {
            return invalid("concurrency_limit must be at least 1");
        }
        if self.datasets.is_empty() {
            return invalid("no datasets");
        }
        if self.agent.chat.model_id.trim().is_empty() {
            return invalid("agent.chat.model_id is empty");
        }
        if self.agent.retry.max_attempts == 0 {
            return invalid("agent.retry.max_attempts must be at least 1");
        }
        if let Some(stop) = self.stop {
            if stop.max_iterations == 0 {
                return invalid("stop.max_iterations must be at least 1");
            }
        }
        if let Some(EmbeddingConfig::Mock { dim: 0 }) = self.embeddings {
            return invalid("mock embedding dim must be positive");
        }
        if let ChatBackendConfig::Simworld {
            release_rate: ReleaseRate::Limited(0),
        } = self.chat
        {
            return invalid("release_rate must be positive");
        }
        self.agent
            .chat
            .request("")
            .validate()
            .map_err(|e| ManifestError::Invalid(e.to_string()))
    }

    pub fn stop_criterion(&self) -> StopCriterion {
        self.stop.unwrap_or(match self.chat {
            ChatBackendConfig::Openai {
                class: ModelClass::Proprietary,
                ..
            } => StopCriterion::proprietary(),
            _ => StopCriterion::open_weights(),
        })
    }

    /// Identity of the run's configuration. Concurrency and the journal
    /// location do not affect results and are excluded.
    pub fn digest(&self) -> String {
        let mut m = self.clone();
        m.concurrency_limit = 0;
        m.journal_path = PathBuf::new();
        m.stop = Some(self.stop_criterion());
        digest_hex(
            serde_json::to_string(&m)
                .expect("manifest serializes")
                .as_bytes(),
        )
    }

    /// Scenario names joined with `+`.
    pub fn dataset_label(&self) -> String {
        self.datasets
            .iter()
            .map(|d| d.scenario.as_str())
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn prompt_registry(&self) -> PromptRegistry {
        PromptRegistry::with_set(self.template_set)
    }

    pub fn build_chat_backend(&self) -> Result<Arc<dyn ChatBackend>, ManifestError> {
        Ok(match &self.chat {
            ChatBackendConfig::Openai { client, .. } => Arc::new(
                OpenAiCompatClient::new(client)
                    .map_err(|e| ManifestError::Client(e.to_string()))?,
            ),
            ChatBackendConfig::Simworld { release_rate } => Arc::new(
                SimWorldBackend::new(*release_rate, self.seed)
                    .with_registry(Arc::new(self.prompt_registry())),
            ),
        })
    }

    pub fn build_metrics(&self) -> Result<MetricSuite, ManifestError> {
        let mut suite = MetricSuite {
            retry: self.agent.retry.clone(),
            ..MetricSuite::lexical()
        };
        match &self.embeddings {
            None => {}
            Some(EmbeddingConfig::Mock { dim }) => {
                suite.embedder =
                    Some(Arc::new(HashEmbedder::new(*dim, self.seed)) as Arc<dyn EmbeddingBackend>);
                suite.sentence_model = "mock".into();
                suite.token_model = "mock".into();
            }
            Some(EmbeddingConfig::Openai {
                client,
                sentence_model,
                token_model,
            }) => {
                let c = OpenAiCompatClient::new(client)
                    .map_err(|e| ManifestError::Client(e.to_string()))?;
                suite.embedder = Some(Arc::new(c));
                suite.sentence_model = sentence_model.clone();
                suite.token_model = token_model
                    .clone()
                    .unwrap_or_else(|| sentence_model.clone());
            }
        }
        Ok(suite)
    }
}
