//! Agent orchestration runtime with hierarchical context isolation.
//!
//! The crate implements two execution modes for a tool-calling agent loop:
//!
//! - **baseline**: the conventional full-memory loop, where every raw tool
//!   output is appended to the main agent's context;
//! - **isolated**: tool outputs are confined to short-lived worker agents
//!   that distill them into schema-bounded return values, with command
//!   tool calls inside workers gated by a validator and a budget-bounded
//!   sanitize-restart recovery loop.
//!
//! On top of the runtime sits a deterministic scenario harness
//! ([`harness`]) that places injection payloads into tool observations,
//! runs benign/attacked pairs across modes, and aggregates attack success
//! rate, utility, trace divergence, and overhead metrics. Policies are
//! pluggable ([`policy`]): scripted, mechanical extraction, seeded
//! susceptible, or a remote chat endpoint.

pub mod agent;
pub mod canon;
pub mod context;
pub mod harness;
pub mod intent;
pub mod policy;
pub mod record;
pub mod sanitizer;
pub mod stack;
pub mod toolenv;
pub mod validator;
pub mod worker;

pub use agent::{final_report, run_main_loop, ObservationTap, RunError, RunSetup};
pub use context::{Action, Context, Mode, RunConfig, TaskQuery, TraceTurn};
pub use intent::{ConformanceReport, FailureObject, FailureType, IntentSchema, ReturnValue};
pub use record::RunRecord;
pub use toolenv::{EnvState, ToolRegistry, ToolResult, ToolSpec, ToolTaxonomy};
