//! The refinement loop: generate, analyze, refine, regenerate, score, until
//! the persona stops changing or the iteration budget runs out.
//!
//! Iteration 0 scores the initial persona's behavior (the baseline). Each
//! later iteration `t` analyzes the behavior of `P_{t-1}`, refines it into
//! `P_t`, regenerates behavior with `P_t` and scores that, so the metrics of
//! iteration `t` always describe `P_t`.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::agents::{AgentError, Agents, Usage};
use crate::metrics::MetricSuite;
use crate::types::{
    validate_record, BehaviorSample, DivergenceReport, MetricVector, PersonaProfile, RawTaskRecord,
    TaskRecord,
};

pub const OPEN_WEIGHTS_MAX_ITERATIONS: u32 = 15;
pub const PROPRIETARY_MAX_ITERATIONS: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopCriterion {
    pub max_iterations: u32,
    #[serde(default = "yes")]
    pub check_convergence: bool,
}

fn yes() -> bool {
    true
}

impl StopCriterion {
    pub fn new(max_iterations: u32) -> Self {
        assert!(max_iterations >= 1, "max_iterations must be at least 1");
        Self {
            max_iterations,
            check_convergence: true,
        }
    }

    pub fn open_weights() -> Self {
        Self::new(OPEN_WEIGHTS_MAX_ITERATIONS)
    }

    pub fn proprietary() -> Self {
        Self::new(PROPRIETARY_MAX_ITERATIONS)
    }
}

impl Default for StopCriterion {
    fn default() -> Self {
        Self::proprietary()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    BudgetExhausted,
    RecordError,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Converged => "converged",
            StopReason::BudgetExhausted => "budget_exhausted",
            StopReason::RecordError => "record_error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop(StopReason),
}

/// Decides whether to stop after iteration `t` (1-based) produced `next`
/// from `prev`. Convergence wins when both criteria fire.
pub fn should_stop(
    prev: &PersonaProfile,
    next: &PersonaProfile,
    t: u32,
    crit: &StopCriterion,
) -> StopDecision {
    debug_assert!(t >= 1);
    if crit.check_convergence && prev.same_text(next) {
        StopDecision::Stop(StopReason::Converged)
    } else if t >= crit.max_iterations {
        StopDecision::Stop(StopReason::BudgetExhausted)
    } else {
        StopDecision::Continue
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub persona_before: PersonaProfile,
    pub persona_after: PersonaProfile,
    pub behavior: BehaviorSample,
    /// Absent for the baseline iteration.
    pub report: Option<DivergenceReport>,
    pub metrics: MetricVector,
    pub refinement_rejected: bool,
    pub usage: Usage,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub record_id: String,
    /// Iteration 0; missing only if the baseline itself failed.
    pub baseline: Option<IterationRecord>,
    /// Iterations 1.. in order.
    pub iterations: Vec<IterationRecord>,
    pub stop_reason: StopReason,
    pub error: Option<String>,
}

impl Trajectory {
    pub fn baseline_metrics(&self) -> Option<MetricVector> {
        self.baseline.as_ref().map(|b| b.metrics)
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.iterations.last().or(self.baseline.as_ref())
    }

    pub fn final_persona(&self) -> Option<&PersonaProfile> {
        self.last().map(|r| &r.persona_after)
    }
}

pub(crate) fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub struct Engine {
    agents: Agents,
    metrics: MetricSuite,
    stop: StopCriterion,
}

impl Engine {
    pub fn new(agents: Agents, metrics: MetricSuite, stop: StopCriterion) -> Self {
        Self {
            agents,
            metrics,
            stop,
        }
    }

    pub fn stop_criterion(&self) -> &StopCriterion {
        &self.stop
    }

    pub fn baseline(&self, record: &TaskRecord) -> Result<IterationRecord, AgentError> {
        let started_at_ms = now_ms();
        let persona = record.initial_persona.clone();
        let (behavior, usage) = self.agents.generate_behavior(&persona, record, 0)?;
        let metrics = self.metrics.score(&behavior.text, &record.ground_truth);
        Ok(IterationRecord {
            iteration: 0,
            persona_before: persona.clone(),
            persona_after: persona,
            behavior,
            report: None,
            metrics,
            refinement_rejected: false,
            usage,
            started_at_ms,
            finished_at_ms: now_ms(),
        })
    }

    /// Runs iteration `prev.iteration + 1` starting from the state left by
    /// `prev`.
    pub fn step(
        &self,
        record: &TaskRecord,
        prev: &IterationRecord,
    ) -> Result<(IterationRecord, StopDecision), AgentError> {
        let started_at_ms = now_ms();
        let t = prev.iteration + 1;
        let before = &prev.persona_after;
        let mut usage = Usage::default();

        let (report, u) = self
            .agents
            .analyze_divergence(before, record, &prev.behavior)?;
        usage += u;
        let refined = self.agents.refine_persona(before, &report)?;
        usage += refined.usage;
        let (behavior, u) = self.agents.generate_behavior(&refined.persona, record, t)?;
        usage += u;
        let metrics = self.metrics.score(&behavior.text, &record.ground_truth);

        let decision = should_stop(before, &refined.persona, t, &self.stop);
        Ok((
            IterationRecord {
                iteration: t,
                persona_before: before.clone(),
                persona_after: refined.persona,
                behavior,
                report: Some(report),
                metrics,
                refinement_rejected: refined.rejected,
                usage,
                started_at_ms,
                finished_at_ms: now_ms(),
            },
            decision,
        ))
    }

    pub fn run(&self, record: &TaskRecord) -> Trajectory {
        self.run_from(record, Vec::new(), &mut |_, _| {})
    }

    /// Continues a trajectory whose first `prior.len()` iterations (baseline
    /// included) are already done. `observer` sees every new iteration and
    /// the stop reason it triggered, if any.
    pub fn run_from(
        &self,
        record: &TaskRecord,
        prior: Vec<IterationRecord>,
        observer: &mut dyn FnMut(&IterationRecord, Option<StopReason>),
    ) -> Trajectory {
        let mut traj = Trajectory {
            record_id: record.id.clone(),
            baseline: None,
            iterations: Vec::new(),
            stop_reason: StopReason::RecordError,
            error: None,
        };
        let check = validate_record(&RawTaskRecord::from(record));
        if !check.is_ok() {
            traj.error = Some(AgentError::InvalidRecord(check.violations).to_string());
            return traj;
        }

        let mut prior = prior.into_iter();
        traj.baseline = prior.next();
        traj.iterations.extend(prior);

        if traj.baseline.is_none() {
            match self.baseline(record) {
                Ok(b) => {
                    observer(&b, None);
                    traj.baseline = Some(b);
                }
                Err(e) => {
                    traj.error = Some(e.to_string());
                    return traj;
                }
            }
        }

        loop {
            let prev = traj.last().expect("baseline present");
            if prev.iteration >= 1 {
                if let StopDecision::Stop(reason) = should_stop(
                    &prev.persona_before,
                    &prev.persona_after,
                    prev.iteration,
                    &self.stop,
                ) {
                    traj.stop_reason = reason;
                    return traj;
                }
            }
            match self.step(record, prev) {
                Ok((rec, decision)) => {
                    let reason = match decision {
                        StopDecision::Stop(r) => Some(r),
                        StopDecision::Continue => None,
                    };
                    observer(&rec, reason);
                    traj.iterations.push(rec);
                }
                Err(e) => {
                    log::warn!("record {}: {e}", record.id);
                    traj.error = Some(e.to_string());
                    traj.stop_reason = StopReason::RecordError;
                    return traj;
                }
            }
        }
    }
}

/// One full trajectory for `record`.
pub fn run_trajectory(
    record: &TaskRecord,
    agents: Agents,
    crit: StopCriterion,
    metrics: MetricSuite,
) -> Trajectory {
    Engine::new(agents, metrics, crit).run(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::AgentConfig;
    use crate::backends::{FaultInjector, RetryPolicy, ScriptedBackend};
    use crate::prompts::PromptRegistry;
    use crate::types::{AnalysisMode, Scenario};
    use std::sync::Arc;

    fn persona(s: &str) -> PersonaProfile {
        PersonaProfile::initial(s).unwrap()
    }

    #[test]
    fn stop_examples() {
        let crit = StopCriterion::open_weights();
        let (a, b) = (persona("You are A."), persona("You are B."));
        assert_eq!(
            should_stop(&a, &a.clone(), 1, &crit),
            StopDecision::Stop(StopReason::Converged)
        );
        assert_eq!(
            should_stop(&a, &b, 15, &crit),
            StopDecision::Stop(StopReason::BudgetExhausted)
        );
        assert_eq!(should_stop(&a, &b, 14, &crit), StopDecision::Continue);
        let no_conv = StopCriterion {
            check_convergence: false,
            ..crit
        };
        assert_eq!(
            should_stop(&a, &a.clone(), 1, &no_conv),
            StopDecision::Continue
        );
    }

    #[test]
    fn whitespace_only_differences_converge() {
        let crit = StopCriterion::proprietary();
        assert_eq!(
            should_stop(&persona("You are A.\n"), &persona("  You are A."), 1, &crit),
            StopDecision::Stop(StopReason::Converged)
        );
    }

    fn record(gt: &str) -> TaskRecord {
        TaskRecord {
            id: "r".into(),
            scenario: Scenario::MovieReview,
            content: "positive".into(),
            ground_truth: gt.into(),
            initial_persona: persona("You are a critic."),
        }
    }

    fn engine(backend: Arc<dyn crate::backends::ChatBackend>, max: u32) -> Engine {
        let mut cfg = AgentConfig::new("m", AnalysisMode::FreeForm);
        cfg.retry = RetryPolicy {
            max_attempts: 2,
            base_delay_ms: 0,
            max_delay_ms: 0,
        };
        let agents = Agents::new(backend, Arc::new(PromptRegistry::builtin()), cfg);
        Engine::new(agents, MetricSuite::lexical(), StopCriterion::new(max))
    }

    #[test]
    fn invalid_record_never_reaches_backend() {
        let backend = Arc::new(FaultInjector::new(ScriptedBackend::new(), 0));
        let traj = engine(backend.clone(), 3).run(&record(""));
        assert_eq!(traj.stop_reason, StopReason::RecordError);
        assert!(traj.baseline.is_none());
        assert_eq!(backend.calls(), 0);
    }

    #[test]
    fn distinct_personas_run_to_budget() {
        let counter = std::sync::atomic::AtomicUsize::new(0);
        let backend = ScriptedBackend::new().with_fallback(move |p| {
            if p.contains("CURRENT PERSONA:") {
                let n = counter.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                Ok(format!("You are revision {n}."))
            } else {
                Ok("A fine film.".into())
            }
        });
        let traj = engine(Arc::new(backend), 4).run(&record("A fine film."));
        assert_eq!(traj.stop_reason, StopReason::BudgetExhausted);
        assert_eq!(traj.iterations.len(), 4);
        for w in traj.iterations.windows(2) {
            assert_eq!(w[0].persona_after, w[1].persona_before);
        }
        assert_eq!(traj.baseline_metrics().unwrap().rouge_l_f1, 1.0);
    }

    #[test]
    fn rejected_refinement_converges() {
        let backend = ScriptedBackend::new()
            .with_contains("CURRENT PERSONA:", vec!["Persona: nope".into()])
            .with_fallback(|_| Ok("ok".into()));
        let traj = engine(Arc::new(backend), 10).run(&record("ok"));
        assert_eq!(traj.stop_reason, StopReason::Converged);
        assert_eq!(traj.iterations.len(), 1);
        assert!(traj.iterations[0].refinement_rejected);
        assert_eq!(traj.iterations[0].persona_after.iteration, 0);
    }

    #[test]
    fn mid_loop_failure_keeps_partial_iterations() {
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let backend = ScriptedBackend::new().with_fallback(move |p| {
            let n = calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            if n >= 4 {
                return Err(crate::backends::AttemptError::Permanent("down".into()));
            }
            if p.contains("CURRENT PERSONA:") {
                Ok(format!("You are v{n}."))
            } else {
                Ok("text".into())
            }
        });
        let traj = engine(Arc::new(backend), 10).run(&record("text"));
        assert_eq!(traj.stop_reason, StopReason::RecordError);
        assert!(traj.baseline.is_some());
        assert_eq!(traj.iterations.len(), 1);
        assert!(traj.error.unwrap().contains("down"));
    }
}
