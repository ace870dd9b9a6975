//! Harness operation contracts over the shipped fixtures.

use std::path::PathBuf;

use agentsys::context::Mode;
use agentsys::harness::{
    load_scenario, overhead_report, position_sweep, run_scenario, run_suite, ConfigPatch,
};
use agentsys::record::RunRecord;

fn fixture(path: &str) -> agentsys::harness::Scenario {
    let full = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(path);
    load_scenario(&full).expect("fixture loads")
}

#[test]
fn sweep_with_zero_obedience_never_succeeds() {
    let scenario = fixture("banking/b04_inbox_attack.json");
    let points =
        position_sweep(&scenario, &[1, 2, 3], 0.0, 50, &ConfigPatch::default()).unwrap();
    for point in points {
        assert_eq!(point.asr, 0.0, "round {}", point.round);
    }
}

#[test]
fn benign_suite_metrics_are_clean() {
    let scenarios = vec![
        fixture("banking/b01_balance.json"),
        fixture("banking/b03_transfer_chain.json"),
    ];
    let outcome = run_suite(
        &scenarios,
        &[Mode::Isolated],
        &[0, 1],
        1,
        &ConfigPatch::default(),
    );
    let metrics = &outcome.metrics["isolated"];
    assert_eq!(metrics.benign_utility, 100.0);
    assert_eq!(metrics.asr, 0.0);
    assert_eq!(metrics.attacked_runs, 0);
    assert_eq!(metrics.defense_quality, 100.0);
    assert_eq!(outcome.failures, 0);
}

#[test]
fn overhead_rows_match_across_trajectory_lengths() {
    let scenarios = vec![
        fixture("banking/b07_worker_subcall_short.json"),
        fixture("workspace/w08_worker_subcall_long.json"),
    ];
    let outcome = run_suite(&scenarios, &[Mode::Isolated], &[2], 1, &ConfigPatch::default());
    let rows = overhead_report(&outcome.records);
    let short = rows
        .iter()
        .find(|r| r.trajectory_len == 2)
        .expect("trajectory-2 bucket");
    let long = rows
        .iter()
        .find(|r| r.trajectory_len == 6)
        .expect("trajectory-6 bucket");
    // identical command-subcall counts give identical validator cost,
    // independent of trajectory length
    assert_eq!(short.validator_calls, 1);
    assert_eq!(long.validator_calls, 1);
    assert!(short.consistent && long.consistent);
    assert!(long.tokens > 0 && short.tokens > 0);
}

#[test]
fn persisted_records_reproduce_outcome_flags() {
    let scenario = fixture("banking/b02_reviews_attack.json");
    for (mode, attack) in [
        (Mode::Baseline, None),
        (Mode::Baseline, Some(0)),
        (Mode::Isolated, None),
        (Mode::Isolated, Some(0)),
    ] {
        let record =
            run_scenario(&scenario, mode, 17, attack, &ConfigPatch::default()).unwrap();
        let mut reloaded = RunRecord::from_jsonl(&record.to_jsonl()).unwrap();
        // wipe and re-derive the flags from persisted state + trace
        reloaded.utility_met = false;
        reloaded.security_met = false;
        agentsys::harness::suite::evaluate_outcomes(&scenario, attack, &mut reloaded);
        assert_eq!(reloaded.utility_met, record.utility_met, "{mode:?} {attack:?}");
        assert_eq!(reloaded.security_met, record.security_met, "{mode:?} {attack:?}");
    }
}

#[test]
fn attacked_baseline_context_carries_the_payload_nonce() {
    // the persistence premise: in baseline mode the injected payload sits
    // in every later context snapshot, nonce included
    let scenario = fixture("banking/b02_reviews_attack.json");
    let record =
        run_scenario(&scenario, Mode::Baseline, 23, Some(0), &ConfigPatch::default()).unwrap();
    let serialized = record.final_context().serialize();
    assert!(serialized.contains(&scenario.injections[0].taint_nonce));
}
