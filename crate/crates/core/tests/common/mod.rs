#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use persona_refinery::agents::{AgentConfig, Agents};
use persona_refinery::backends::{RetryPolicy, Sleeper};
use persona_refinery::datasets::write_records;
use persona_refinery::engine::{Engine, StopCriterion, Trajectory};
use persona_refinery::metrics::MetricSuite;
use persona_refinery::prompts::PromptRegistry;
use persona_refinery::runner::{ChatBackendConfig, RunManifest};
use persona_refinery::simworld::{ReleaseRate, SyntheticTarget};
use persona_refinery::types::{AnalysisMode, Scenario, TaskRecord};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const RATES: [ReleaseRate; 4] = [
    ReleaseRate::Limited(1),
    ReleaseRate::Limited(2),
    ReleaseRate::Limited(3),
    ReleaseRate::Unbounded,
];

pub struct NoSleep;

impl Sleeper for NoSleep {
    fn sleep(&self, _: Duration) {}
}

pub fn trait_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("t{i:02}")).collect()
}

/// A target with `total` traits whose initial persona already covers the
/// first `total - missing`.
pub fn target_record(
    id: &str,
    total: usize,
    missing: usize,
    rate: ReleaseRate,
) -> (SyntheticTarget, TaskRecord) {
    let names = trait_names(total);
    let target = SyntheticTarget::new(names.clone(), rate, 0).unwrap();
    let covered: Vec<&str> = names[..total - missing]
        .iter()
        .map(String::as_str)
        .collect();
    let record = target.task_record(id, Scenario::Debate, covered);
    (target, record)
}

/// Random target: 1..=10 traits drawn from a 26-letter pool, a random
/// covered subset, and a random release rate.
pub fn random_target(rng: &mut ChaCha8Rng, id: &str) -> (SyntheticTarget, TaskRecord) {
    let mut pool: Vec<String> = ('a'..='z')
        .map(|c| format!("{c}{}", rng.gen_range(0..10)))
        .collect();
    pool.sort();
    pool.dedup();
    pool.shuffle(rng);
    let n = rng.gen_range(1..=10);
    let attrs: BTreeSet<String> = pool.into_iter().take(n).collect();
    let rate = RATES[rng.gen_range(0..RATES.len())];
    let target = SyntheticTarget::new(attrs.clone(), rate, rng.gen()).unwrap();
    let covered: Vec<&str> = attrs
        .iter()
        .filter(|_| rng.gen_bool(0.3))
        .map(String::as_str)
        .collect();
    let record = target.task_record(id, Scenario::Debate, covered);
    (target, record)
}

pub fn sim_engine(rate: ReleaseRate, stop: StopCriterion) -> Engine {
    let registry = Arc::new(PromptRegistry::builtin());
    let mut cfg = AgentConfig::new("simworld", AnalysisMode::Structured);
    cfg.retry = RetryPolicy {
        max_attempts: 3,
        base_delay_ms: 0,
        max_delay_ms: 0,
    };
    let backend = SyntheticTarget::new(["x"], rate, 0)
        .unwrap()
        .backend()
        .with_registry(registry.clone());
    let agents = Agents::new(Arc::new(backend), registry, cfg).with_sleeper(Arc::new(NoSleep));
    Engine::new(agents, MetricSuite::lexical(), stop)
}

pub fn run_sim(record: &TaskRecord, rate: ReleaseRate, stop: StopCriterion) -> Trajectory {
    sim_engine(rate, stop).run(record)
}

/// Writes `records` as a JSONL dataset under `dir`.
pub fn write_dataset(dir: &Path, name: &str, records: &[TaskRecord]) -> PathBuf {
    let path = dir.join(name);
    let mut buf = Vec::new();
    write_records(&mut buf, records).unwrap();
    std::fs::write(&path, buf).unwrap();
    path
}

/// A fixed mix of simworld records with different amounts of missing traits.
pub fn sim_records(n: usize, seed: u64) -> Vec<TaskRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| random_target(&mut rng, &format!("r{i}")).1)
        .collect()
}

pub fn sim_manifest(dir: &Path, dataset: &Path, rate: ReleaseRate, limit: usize) -> RunManifest {
    let mut m = RunManifest::new(
        "sim-run",
        ChatBackendConfig::Simworld { release_rate: rate },
        "simworld",
        dir.join("journal.jsonl"),
    )
    .with_dataset(dataset, Scenario::Debate);
    m.concurrency_limit = limit;
    m.agent.retry = RetryPolicy {
        max_attempts: 3,
        base_delay_ms: 0,
        max_delay_ms: 0,
    };
    m
}
