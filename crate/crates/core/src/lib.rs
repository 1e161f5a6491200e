//! Iterative persona refinement for role-playing agents.
//!
//! Three chat agents cooperate in a loop: a role-player generates behavior
//! from a persona, an analyst compares it with ground truth, and a refiner
//! rewrites the persona from the analysis. The loop runs per task record
//! until the persona stops changing or an iteration budget is spent.

pub mod agents;
pub mod backends;
pub mod datasets;
pub mod engine;
pub mod metrics;
pub mod prompts;
pub mod runner;
pub mod simworld;
pub mod types;

pub use agents::{AgentConfig, AgentError, Agents};
pub use backends::{BackendError, ChatBackend, EmbeddingBackend};
pub use engine::{Engine, IterationRecord, StopCriterion, StopReason, Trajectory};
pub use metrics::{bertscore_f1, cosine, rouge_l_f1, MetricSuite};
pub use prompts::{PromptRegistry, TemplateId};
pub use types::{normalize_persona, MetricVector, PersonaProfile, Scenario, TaskRecord};
