use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::TxnError;
use crate::clock::SharedClock;

#[derive(Clone, Debug, PartialEq)]
pub enum StepResult {
    Ok(Value),
    Failed(String),
}

/// One local transaction of a saga plus the action that semantically undoes
/// it. Compensations must be idempotent: a crash between a compensation and
/// its journal entry makes recovery run it again.
pub trait SagaStep<C>: Send + Sync {
    fn name(&self) -> &str;

    fn action(&self, ctx: &mut C) -> StepResult;

    fn compensate(&self, ctx: &mut C) -> Result<(), String>;

    /// Rebuilds context from a journaled action output when resuming past
    /// a step that already ran.
    fn restore(&self, _ctx: &mut C, _output: &Value) {}
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SagaEvent {
    ActionOk,
    ActionFailed,
    CompensationOk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub saga_id: String,
    pub seq: u64,
    pub step_name: String,
    pub event: SagaEvent,
    /// Nanoseconds on the orchestrator's clock.
    pub ts: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

pub fn journal_to_ndjson(entries: &[JournalEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("journal entries serialize"));
        out.push('\n');
    }
    out
}

pub fn journal_from_ndjson(text: &str) -> Result<Vec<JournalEntry>, TxnError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| TxnError::RejectedJournal(e.to_string())))
        .collect()
}

/// Where the orchestrator writes each journal entry before moving on.
pub trait JournalSink {
    fn append(&self, entry: &JournalEntry) -> Result<(), String>;
}

#[derive(Debug, Default)]
pub struct MemoryJournal {
    entries: Mutex<Vec<JournalEntry>>,
}

impl MemoryJournal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> Vec<JournalEntry> {
        self.entries.lock().clone()
    }
}

impl JournalSink for MemoryJournal {
    fn append(&self, entry: &JournalEntry) -> Result<(), String> {
        self.entries.lock().push(entry.clone());
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SagaState {
    Running,
    Compensating,
    Completed,
    Compensated,
    StuckCompensating,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SagaOutcome {
    Completed,
    Compensated { failed_step: String, reason: String },
    /// A compensation kept failing after every retry; needs an operator.
    StuckCompensating { step: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SagaExecution {
    pub saga_id: String,
    pub cursor: usize,
    pub state: SagaState,
    pub journal: Vec<JournalEntry>,
    pub outcome: SagaOutcome,
}

/// Bounded exponential backoff for compensations: `attempts` tries with
/// `base * 2^k` between try k and k+1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 5,
            base: Duration::from_millis(10),
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.base * 2u32.saturating_pow(attempt)
    }
}

/// Where a journal says the saga stands.
#[derive(Debug)]
struct Position {
    actions_ok: usize,
    failed: Option<String>,
    compensated: usize,
}

fn replay(saga_id: &str, names: &[&str], journal: &[JournalEntry]) -> Result<Position, TxnError> {
    let reject = |msg: String| Err(TxnError::RejectedJournal(msg));
    let mut pos = Position {
        actions_ok: 0,
        failed: None,
        compensated: 0,
    };
    for (i, e) in journal.iter().enumerate() {
        if e.saga_id != saga_id {
            return reject(format!("entry {i} belongs to saga {}", e.saga_id));
        }
        if e.seq != i as u64 {
            return reject(format!("entry {i} has seq {}", e.seq));
        }
        match (e.event, &pos.failed) {
            (SagaEvent::ActionOk, None) => {
                if pos.actions_ok == names.len() || names[pos.actions_ok] != e.step_name {
                    return reject(format!("unexpected ActionOk for {}", e.step_name));
                }
                pos.actions_ok += 1;
            }
            (SagaEvent::ActionFailed, None) => {
                if pos.actions_ok == names.len() || names[pos.actions_ok] != e.step_name {
                    return reject(format!("unexpected ActionFailed for {}", e.step_name));
                }
                pos.failed = Some(e.reason.clone().unwrap_or_default());
            }
            (SagaEvent::CompensationOk, Some(_)) => {
                if pos.compensated == pos.actions_ok {
                    return reject(format!("extra compensation for {}", e.step_name));
                }
                let expect = names[pos.actions_ok - 1 - pos.compensated];
                if expect != e.step_name {
                    return reject(format!("compensation for {} out of order", e.step_name));
                }
                pos.compensated += 1;
            }
            (ev, _) => return reject(format!("{ev:?} for {} not valid here", e.step_name)),
        }
    }
    Ok(pos)
}

#[derive(Debug)]
pub struct SagaOrchestrator {
    clock: SharedClock,
    retry: RetryPolicy,
}

struct Run<'a> {
    saga_id: &'a str,
    journal: Vec<JournalEntry>,
    sink: &'a dyn JournalSink,
    clock: &'a SharedClock,
}

impl Run<'_> {
    fn record(
        &mut self,
        step: &str,
        event: SagaEvent,
        output: Option<Value>,
        reason: Option<String>,
    ) -> Result<(), TxnError> {
        let entry = JournalEntry {
            saga_id: self.saga_id.to_string(),
            seq: self.journal.len() as u64,
            step_name: step.to_string(),
            event,
            ts: self.clock.now().as_nanos(),
            output,
            reason,
        };
        self.sink.append(&entry).map_err(TxnError::JournalWrite)?;
        self.journal.push(entry);
        Ok(())
    }
}

impl SagaOrchestrator {
    pub fn new(clock: SharedClock) -> Self {
        Self::with_retry(clock, RetryPolicy::default())
    }

    pub fn with_retry(clock: SharedClock, retry: RetryPolicy) -> Self {
        SagaOrchestrator { clock, retry }
    }

    /// Runs the steps in order. When step k fails, compensations run for
    /// steps k-1 down to 0.
    pub fn execute<C>(
        &self,
        saga_id: &str,
        steps: &[&dyn SagaStep<C>],
        ctx: &mut C,
        sink: &dyn JournalSink,
    ) -> Result<SagaExecution, TxnError> {
        self.resume(saga_id, &[], steps, ctx, sink)
    }

    /// Continues a saga from a journal prefix without re-running anything
    /// the journal already records. `sink` only receives new entries.
    pub fn resume<C>(
        &self,
        saga_id: &str,
        journal: &[JournalEntry],
        steps: &[&dyn SagaStep<C>],
        ctx: &mut C,
        sink: &dyn JournalSink,
    ) -> Result<SagaExecution, TxnError> {
        if steps.is_empty() {
            return Err(TxnError::EmptySaga);
        }
        let names: Vec<&str> = steps.iter().map(|s| s.name()).collect();
        let pos = replay(saga_id, &names, journal)?;
        for (i, step) in steps.iter().enumerate().take(pos.actions_ok) {
            if let Some(out) = &journal[i].output {
                step.restore(ctx, out);
            }
        }

        let mut run = Run {
            saga_id,
            journal: journal.to_vec(),
            sink,
            clock: &self.clock,
        };

        let mut done = pos.actions_ok;
        let failure = match pos.failed {
            Some(reason) => Some((names[done].to_string(), reason)),
            None => {
                let mut failure = None;
                while done < steps.len() {
                    let step = steps[done];
                    match step.action(ctx) {
                        StepResult::Ok(out) => {
                            let out = (!out.is_null()).then_some(out);
                            run.record(step.name(), SagaEvent::ActionOk, out, None)?;
                            done += 1;
                        }
                        StepResult::Failed(reason) => {
                            run.record(step.name(), SagaEvent::ActionFailed, None, Some(reason.clone()))?;
                            failure = Some((step.name().to_string(), reason));
                            break;
                        }
                    }
                }
                failure
            }
        };

        let Some((failed_step, reason)) = failure else {
            return Ok(SagaExecution {
                saga_id: saga_id.to_string(),
                cursor: steps.len(),
                state: SagaState::Completed,
                journal: run.journal,
                outcome: SagaOutcome::Completed,
            });
        };

        let remaining = done - pos.compensated;
        for idx in (0..remaining).rev() {
            let step = steps[idx];
            if !self.compensate_with_retry(step, ctx) {
                return Ok(SagaExecution {
                    saga_id: saga_id.to_string(),
                    cursor: idx,
                    state: SagaState::StuckCompensating,
                    journal: run.journal,
                    outcome: SagaOutcome::StuckCompensating {
                        step: step.name().to_string(),
                    },
                });
            }
            run.record(step.name(), SagaEvent::CompensationOk, None, None)?;
        }
        Ok(SagaExecution {
            saga_id: saga_id.to_string(),
            cursor: done,
            state: SagaState::Compensated,
            journal: run.journal,
            outcome: SagaOutcome::Compensated { failed_step, reason },
        })
    }

    fn compensate_with_retry<C>(&self, step: &dyn SagaStep<C>, ctx: &mut C) -> bool {
        for attempt in 0..self.retry.attempts {
            if step.compensate(ctx).is_ok() {
                return true;
            }
            if attempt + 1 < self.retry.attempts {
                self.clock.sleep(self.retry.backoff(attempt));
            }
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{Clock, VirtualClock};
    use serde_json::json;

    /// Test context: an external-effect log plus scripted failures.
    #[derive(Default)]
    struct Ctx {
        effects: Vec<String>,
        fail_at: Option<usize>,
        comp_failures: u32,
    }

    struct Step(usize, String);

    impl SagaStep<Ctx> for Step {
        fn name(&self) -> &str {
            &self.1
        }
        fn action(&self, ctx: &mut Ctx) -> StepResult {
            if ctx.fail_at == Some(self.0) {
                return StepResult::Failed(format!("boom at {}", self.0));
            }
            ctx.effects.push(format!("A{}", self.0 + 1));
            StepResult::Ok(json!(self.0))
        }
        fn compensate(&self, ctx: &mut Ctx) -> Result<(), String> {
            if ctx.comp_failures > 0 {
                ctx.comp_failures -= 1;
                return Err("flaky".into());
            }
            ctx.effects.push(format!("C{}", self.0 + 1));
            Ok(())
        }
    }

    fn steps(n: usize) -> Vec<Step> {
        (0..n).map(|i| Step(i, format!("s{}", i + 1))).collect()
    }

    fn refs(s: &[Step]) -> Vec<&dyn SagaStep<Ctx>> {
        s.iter().map(|s| s as &dyn SagaStep<Ctx>).collect()
    }

    fn events(exec: &SagaExecution) -> Vec<String> {
        exec.journal
            .iter()
            .map(|e| {
                let n = &e.step_name[1..];
                match e.event {
                    SagaEvent::ActionOk => format!("A{n}ok"),
                    SagaEvent::ActionFailed => format!("A{n}fail"),
                    SagaEvent::CompensationOk => format!("C{n}ok"),
                }
            })
            .collect()
    }

    #[test]
    fn all_steps_ok_completes() {
        let orch = SagaOrchestrator::new(VirtualClock::new().shared());
        let s = steps(3);
        let mut ctx = Ctx::default();
        let exec = orch.execute("s", &refs(&s), &mut ctx, &MemoryJournal::new()).unwrap();
        assert_eq!(exec.outcome, SagaOutcome::Completed);
        assert_eq!(exec.state, SagaState::Completed);
        assert_eq!(exec.cursor, 3);
        assert_eq!(events(&exec), ["A1ok", "A2ok", "A3ok"]);
    }

    #[test]
    fn third_step_failure_compensates_backwards() {
        let orch = SagaOrchestrator::new(VirtualClock::new().shared());
        let s = steps(3);
        let mut ctx = Ctx {
            fail_at: Some(2),
            ..Ctx::default()
        };
        let sink = MemoryJournal::new();
        let exec = orch.execute("s", &refs(&s), &mut ctx, &sink).unwrap();
        assert_eq!(events(&exec), ["A1ok", "A2ok", "A3fail", "C2ok", "C1ok"]);
        assert_eq!(ctx.effects, ["A1", "A2", "C2", "C1"]);
        assert_eq!(exec.state, SagaState::Compensated);
        assert_eq!(sink.entries(), exec.journal);
    }

    #[test]
    fn compensation_retries_with_backoff_then_parks() {
        let clock = VirtualClock::new();
        let orch = SagaOrchestrator::new(clock.shared());
        let s = steps(2);
        let mut ctx = Ctx {
            fail_at: Some(1),
            comp_failures: 3,
            ..Ctx::default()
        };
        let exec = orch.execute("s", &refs(&s), &mut ctx, &MemoryJournal::new()).unwrap();
        assert_eq!(exec.state, SagaState::Compensated);
        // backoff 10 + 20 + 40 ms
        assert_eq!(clock.now().as_nanos(), 70_000_000);

        let mut ctx = Ctx {
            fail_at: Some(1),
            comp_failures: 5,
            ..Ctx::default()
        };
        let exec = orch.execute("s2", &refs(&s), &mut ctx, &MemoryJournal::new()).unwrap();
        assert_eq!(exec.outcome, SagaOutcome::StuckCompensating { step: "s1".into() });
        assert!(!ctx.effects.contains(&"C1".to_string()));
    }

    #[test]
    fn resume_from_prefixes() {
        let orch = SagaOrchestrator::new(VirtualClock::new().shared());
        let s = steps(2);
        let mk = |seq, name: &str, ev| JournalEntry {
            saga_id: "r".into(),
            seq,
            step_name: name.into(),
            event: ev,
            ts: 0,
            output: None,
            reason: None,
        };
        let mut ctx = Ctx::default();
        let exec = orch
            .resume("r", &[mk(0, "s1", SagaEvent::ActionOk)], &refs(&s), &mut ctx, &MemoryJournal::new())
            .unwrap();
        assert_eq!(ctx.effects, ["A2"]);
        assert_eq!(exec.outcome, SagaOutcome::Completed);

        let mut ctx = Ctx::default();
        let j = [mk(0, "s1", SagaEvent::ActionOk), mk(1, "s2", SagaEvent::ActionFailed)];
        let exec = orch.resume("r", &j, &refs(&s), &mut ctx, &MemoryJournal::new()).unwrap();
        assert_eq!(ctx.effects, ["C1"]);
        assert!(matches!(exec.outcome, SagaOutcome::Compensated { .. }));
    }

    #[test]
    fn corrupt_journals_rejected() {
        let orch = SagaOrchestrator::new(VirtualClock::new().shared());
        let s = steps(2);
        let mk = |seq, name: &str, ev| JournalEntry {
            saga_id: "r".into(),
            seq,
            step_name: name.into(),
            event: ev,
            ts: 0,
            output: None,
            reason: None,
        };
        let bad: Vec<Vec<JournalEntry>> = vec![
            vec![mk(0, "s2", SagaEvent::ActionOk)],
            vec![mk(1, "s1", SagaEvent::ActionOk)],
            vec![mk(0, "s1", SagaEvent::CompensationOk)],
            vec![mk(0, "s1", SagaEvent::ActionOk), mk(1, "s1", SagaEvent::ActionOk)],
            vec![
                mk(0, "s1", SagaEvent::ActionOk),
                mk(1, "s2", SagaEvent::ActionFailed),
                mk(2, "s1", SagaEvent::CompensationOk),
                mk(3, "s1", SagaEvent::CompensationOk),
            ],
            vec![
                mk(0, "s1", SagaEvent::ActionOk),
                mk(1, "s2", SagaEvent::ActionOk),
                mk(2, "s2", SagaEvent::ActionOk),
            ],
        ];
        for j in bad {
            let mut ctx = Ctx::default();
            let r = orch.resume("r", &j, &refs(&s), &mut ctx, &MemoryJournal::new());
            assert!(matches!(r, Err(TxnError::RejectedJournal(_))), "{j:?}");
            assert!(ctx.effects.is_empty());
        }
        let mut ctx = Ctx::default();
        assert!(matches!(
            orch.resume("other", &[mk(0, "s1", SagaEvent::ActionOk)], &refs(&s), &mut ctx, &MemoryJournal::new()),
            Err(TxnError::RejectedJournal(_))
        ));
        assert_eq!(
            orch.execute::<Ctx>("x", &[], &mut Ctx::default(), &MemoryJournal::new()),
            Err(TxnError::EmptySaga)
        );
    }

    #[test]
    fn journal_ndjson_round_trip() {
        let orch = SagaOrchestrator::new(VirtualClock::new().shared());
        let s = steps(3);
        let mut ctx = Ctx {
            fail_at: Some(2),
            ..Ctx::default()
        };
        let exec = orch.execute("s", &refs(&s), &mut ctx, &MemoryJournal::new()).unwrap();
        let text = journal_to_ndjson(&exec.journal);
        assert_eq!(text.lines().count(), 5);
        assert_eq!(journal_from_ndjson(&text).unwrap(), exec.journal);
        assert!(text.lines().next().unwrap().starts_with(r#"{"saga_id":"s","seq":0,"step_name":"s1","event":"ActionOk","ts":0"#));
        assert!(journal_from_ndjson("{not json").is_err());
    }
}
