use std::collections::BTreeMap;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::TxnError;
use crate::clock::SharedClock;

/// Length of one logical tick when timeouts run on a virtual clock.
pub const VIRTUAL_TICK: Duration = Duration::from_millis(1);

pub fn default_vote_timeout(clock: &SharedClock) -> Duration {
    if clock.is_virtual() {
        VIRTUAL_TICK * 10
    } else {
        Duration::from_millis(500)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Vote {
    Yes,
    No,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VoteRecord {
    Yes,
    No,
    Timeout,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("participant unreachable: {0}")]
pub struct ParticipantError(pub String);

/// A resource manager taking part in two-phase commit. After voting `Yes`
/// it must be able to commit; `rollback` must be idempotent.
pub trait Participant: Send + Sync {
    fn id(&self) -> &str;
    fn prepare(&self, txn_id: &str) -> Result<Vote, ParticipantError>;
    fn commit(&self, txn_id: &str);
    fn rollback(&self, txn_id: &str);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Init,
    Preparing,
    Committed,
    Aborted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TwoPcOutcome {
    Committed,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwoPcRecord {
    pub txn_id: String,
    pub participants: Vec<String>,
    pub phase: Phase,
    pub votes: BTreeMap<String, VoteRecord>,
}

#[derive(Debug)]
pub struct TwoPhaseCoordinator {
    clock: SharedClock,
    vote_timeout: Duration,
    records: Mutex<BTreeMap<String, TwoPcRecord>>,
}

impl TwoPhaseCoordinator {
    pub fn new(clock: SharedClock) -> Self {
        let vote_timeout = default_vote_timeout(&clock);
        Self::with_timeout(clock, vote_timeout)
    }

    pub fn with_timeout(clock: SharedClock, vote_timeout: Duration) -> Self {
        TwoPhaseCoordinator {
            clock,
            vote_timeout,
            records: Mutex::new(BTreeMap::new()),
        }
    }

    fn update(&self, record: &TwoPcRecord) {
        self.records
            .lock()
            .insert(record.txn_id.clone(), record.clone());
    }

    pub fn record(&self, txn_id: &str) -> Option<TwoPcRecord> {
        self.records.lock().get(txn_id).cloned()
    }

    /// Prepare phase collects a vote from every participant; an error or a
    /// vote slower than the timeout counts as `Timeout`. Commit phase then
    /// commits everyone on a unanimous `Yes`, otherwise rolls back every
    /// participant that reached the prepared state.
    pub fn run(&self, txn_id: &str, participants: &[&dyn Participant]) -> Result<TwoPcOutcome, TxnError> {
        if participants.is_empty() {
            return Err(TxnError::NoParticipants);
        }
        let mut record = TwoPcRecord {
            txn_id: txn_id.to_string(),
            participants: participants.iter().map(|p| p.id().to_string()).collect(),
            phase: Phase::Init,
            votes: BTreeMap::new(),
        };
        self.update(&record);

        record.phase = Phase::Preparing;
        self.update(&record);
        let mut prepared = Vec::new();
        for p in participants {
            let started = self.clock.now();
            let answer = p.prepare(txn_id);
            let late = self.clock.now().saturating_since(started) > self.vote_timeout;
            let vote = match answer {
                Ok(Vote::Yes) => {
                    // a late Yes still holds resources and must be released
                    prepared.push(*p);
                    if late {
                        VoteRecord::Timeout
                    } else {
                        VoteRecord::Yes
                    }
                }
                Ok(Vote::No) if late => VoteRecord::Timeout,
                Ok(Vote::No) => VoteRecord::No,
                Err(_) => VoteRecord::Timeout,
            };
            record.votes.insert(p.id().to_string(), vote);
        }
        self.update(&record);

        let unanimous = record.votes.values().all(|v| *v == VoteRecord::Yes);
        if unanimous {
            for p in participants {
                p.commit(txn_id);
            }
            record.phase = Phase::Committed;
            self.update(&record);
            Ok(TwoPcOutcome::Committed)
        } else {
            for p in prepared {
                p.rollback(txn_id);
            }
            record.phase = Phase::Aborted;
            self.update(&record);
            Ok(TwoPcOutcome::Aborted)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[derive(Clone, Copy, Debug, PartialEq)]
    enum Script {
        Yes,
        No,
        Crash,
        SlowYes,
    }

    struct Scripted {
        id: String,
        script: Script,
        clock: VirtualClock,
        commits: AtomicUsize,
        rollbacks: AtomicUsize,
        prepared: parking_lot::Mutex<bool>,
    }

    impl Scripted {
        fn new(id: &str, script: Script, clock: &VirtualClock) -> Self {
            Scripted {
                id: id.into(),
                script,
                clock: clock.clone(),
                commits: AtomicUsize::new(0),
                rollbacks: AtomicUsize::new(0),
                prepared: parking_lot::Mutex::new(false),
            }
        }
    }

    impl Participant for Scripted {
        fn id(&self) -> &str {
            &self.id
        }
        fn prepare(&self, _: &str) -> Result<Vote, ParticipantError> {
            match self.script {
                Script::Yes => {
                    *self.prepared.lock() = true;
                    Ok(Vote::Yes)
                }
                Script::SlowYes => {
                    self.clock.advance(VIRTUAL_TICK * 11);
                    *self.prepared.lock() = true;
                    Ok(Vote::Yes)
                }
                Script::No => Ok(Vote::No),
                Script::Crash => Err(ParticipantError(self.id.clone())),
            }
        }
        fn commit(&self, _: &str) {
            self.commits.fetch_add(1, Ordering::SeqCst);
            *self.prepared.lock() = false;
        }
        fn rollback(&self, _: &str) {
            self.rollbacks.fetch_add(1, Ordering::SeqCst);
            *self.prepared.lock() = false;
        }
    }

    fn run(scripts: &[Script]) -> (TwoPcOutcome, Vec<Scripted>, TwoPcRecord) {
        let clock = VirtualClock::new();
        let coord = TwoPhaseCoordinator::new(clock.shared());
        let ps: Vec<Scripted> = scripts
            .iter()
            .enumerate()
            .map(|(i, s)| Scripted::new(&format!("p{i}"), *s, &clock))
            .collect();
        let refs: Vec<&dyn Participant> = ps.iter().map(|p| p as &dyn Participant).collect();
        let out = coord.run("t1", &refs).unwrap();
        let rec = coord.record("t1").unwrap();
        (out, ps, rec)
    }

    #[test]
    fn unanimous_yes_commits_everyone() {
        let (out, ps, rec) = run(&[Script::Yes; 3]);
        assert_eq!(out, TwoPcOutcome::Committed);
        assert_eq!(rec.phase, Phase::Committed);
        assert!(ps.iter().all(|p| p.commits.load(Ordering::SeqCst) == 1));
        assert!(ps.iter().all(|p| p.rollbacks.load(Ordering::SeqCst) == 0));
    }

    #[test]
    fn single_no_rolls_back_yes_voters_only() {
        let (out, ps, rec) = run(&[Script::Yes, Script::No, Script::Yes]);
        assert_eq!(out, TwoPcOutcome::Aborted);
        assert_eq!(rec.votes["p1"], VoteRecord::No);
        let rb: Vec<_> = ps.iter().map(|p| p.rollbacks.load(Ordering::SeqCst)).collect();
        assert_eq!(rb, vec![1, 0, 1]);
        assert!(ps.iter().all(|p| p.commits.load(Ordering::SeqCst) == 0));
    }

    #[test]
    fn slow_vote_times_out_and_is_released() {
        let (out, ps, rec) = run(&[Script::Yes, Script::SlowYes]);
        assert_eq!(out, TwoPcOutcome::Aborted);
        assert_eq!(rec.votes["p1"], VoteRecord::Timeout);
        assert!(ps.iter().all(|p| !*p.prepared.lock()));
    }

    #[test]
    fn exhaustive_vote_vectors_never_mix_outcomes() {
        let choices = [Script::Yes, Script::No, Script::Crash];
        let mut cases = 0;
        for a in choices {
            for b in choices {
                for c in choices {
                    let scripts = [a, b, c];
                    let (out, ps, rec) = run(&scripts);
                    let all_yes = scripts.iter().all(|s| *s == Script::Yes);
                    let commits: Vec<_> = ps.iter().map(|p| p.commits.load(Ordering::SeqCst)).collect();
                    let rollbacks: Vec<_> = ps.iter().map(|p| p.rollbacks.load(Ordering::SeqCst)).collect();
                    if all_yes {
                        assert_eq!(out, TwoPcOutcome::Committed);
                        assert_eq!(commits, vec![1, 1, 1]);
                        assert_eq!(rollbacks, vec![0, 0, 0]);
                    } else {
                        assert_eq!(out, TwoPcOutcome::Aborted);
                        assert_eq!(commits, vec![0, 0, 0]);
                        let expect: Vec<usize> = scripts.iter().map(|s| usize::from(*s == Script::Yes)).collect();
                        assert_eq!(rollbacks, expect);
                        assert_eq!(rec.phase, Phase::Aborted);
                    }
                    assert!(ps.iter().all(|p| !*p.prepared.lock()), "orphaned prepare in {scripts:?}");
                    cases += 1;
                }
            }
        }
        assert_eq!(cases, 27);
    }

    #[test]
    fn empty_participant_list_rejected() {
        let coord = TwoPhaseCoordinator::new(VirtualClock::new().shared());
        assert_eq!(coord.run("t", &[]), Err(TxnError::NoParticipants));
    }
}
