//! Distributed transaction coordination: a two-phase commit coordinator and
//! a journaled saga orchestrator with reverse-order compensation.

mod saga;
mod two_phase;

use thiserror::Error;

pub use saga::{
    journal_from_ndjson, journal_to_ndjson, JournalEntry, JournalSink, MemoryJournal, RetryPolicy,
    SagaEvent, SagaExecution, SagaOrchestrator, SagaOutcome, SagaState, SagaStep, StepResult,
};
pub use two_phase::{
    default_vote_timeout, Participant, ParticipantError, Phase, TwoPcOutcome, TwoPcRecord,
    TwoPhaseCoordinator, Vote, VoteRecord, VIRTUAL_TICK,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TxnError {
    #[error("a transaction needs at least one participant")]
    NoParticipants,
    #[error("a saga needs at least one step")]
    EmptySaga,
    #[error("journal rejected: {0}")]
    RejectedJournal(String),
    #[error("journal write failed: {0}")]
    JournalWrite(String),
}
