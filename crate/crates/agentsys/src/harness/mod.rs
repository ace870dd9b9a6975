//! Scenario harness: declarative task/attack fixtures, injection
//! placement, suite execution across modes, and metrics.

pub mod inject;
pub mod scenario;
pub mod suite;
pub mod synth;
pub mod taint;

pub use inject::{place_injection, Injector};
pub use scenario::{load_scenario, InjectionSpec, Placement, Predicate, RoundMatch, Scenario};
pub use suite::{
    aggregate_metrics, defense_quality, divergence, divergence_records, overhead_report,
    position_sweep, run_scenario, run_suite, ConfigPatch, HarnessError, Metrics, OverheadRow,
    PositionPoint, RunTask, SuiteOutcome,
};
