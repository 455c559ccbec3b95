mod common;

use common::props::{check_journal, saga_case, saga_fuzz, saga_oracle, two_pc_case, two_pc_exhaustive, Script};
use proptest::prelude::*;
use skyway::txn::{JournalEntry, SagaEvent};

#[test]
fn two_pc_all_vote_vectors() {
    let (passed, failures) = two_pc_exhaustive();
    assert!(failures.is_empty(), "{failures:?}");
    assert_eq!(passed, 27);
}

#[test]
fn two_pc_crash_alone_aborts() {
    two_pc_case([Script::Yes, Script::Yes, Script::Crash]).unwrap();
    two_pc_case([Script::Crash, Script::Yes, Script::Yes]).unwrap();
}

#[test]
fn saga_thousand_seeded_fail_points() {
    let (passed, failures) = saga_fuzz(1000);
    assert!(failures.is_empty(), "{failures:?}");
    assert_eq!(passed, 1000);
}

#[test]
fn saga_oracle_for_failure_in_the_middle() {
    let (effects, journal) = saga_oracle(4, Some(2));
    assert_eq!(effects, ["A0", "A1", "C1", "C0"]);
    assert_eq!(
        journal,
        [
            (0, SagaEvent::ActionOk),
            (1, SagaEvent::ActionOk),
            (2, SagaEvent::ActionFailed),
            (1, SagaEvent::CompensationOk),
            (0, SagaEvent::CompensationOk),
        ]
    );
}

fn entry(seq: u64, step: usize, event: SagaEvent) -> JournalEntry {
    JournalEntry {
        saga_id: "j".into(),
        seq,
        step_name: format!("s{step}"),
        event,
        ts: 0,
        output: None,
        reason: None,
    }
}

#[test]
fn journal_checker_catches_disorder() {
    use SagaEvent::*;
    let good = [entry(0, 0, ActionOk), entry(1, 1, ActionOk), entry(2, 2, ActionFailed), entry(3, 1, CompensationOk)];
    assert!(check_journal("j", 4, &good).is_ok());
    let swapped = [entry(0, 0, ActionOk), entry(1, 1, ActionOk), entry(2, 2, ActionFailed), entry(3, 0, CompensationOk)];
    assert!(check_journal("j", 4, &swapped).is_err());
    let doubled = [entry(0, 0, ActionOk), entry(1, 0, ActionOk)];
    assert!(check_journal("j", 4, &doubled).is_err());
    let gap = [entry(0, 0, ActionOk), entry(2, 1, ActionOk)];
    assert!(check_journal("j", 4, &gap).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn saga_converges_for_any_seed(seed in 1000u64..u64::MAX) {
        prop_assert!(saga_case(seed).is_ok(), "{:?}", saga_case(seed));
    }
}
