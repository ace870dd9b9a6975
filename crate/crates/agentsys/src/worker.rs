//! Short-lived extraction workers.
//!
//! A worker receives one raw tool observation, the declared intent schema,
//! and the compact call stack; it never receives the user query or the
//! main context. Its job is to distill the observation into a value that
//! passes the syntactic gate. Workers may call additional tools: query
//! calls execute directly, command calls pass through the validator, and a
//! denial routes into the budget-bounded sanitize-restart loop. Every
//! failure path maps to a preset [`FailureObject`]; failure details are
//! fixed template text, never observation bytes.

use serde_json::Value;

use crate::agent::RunCore;
use crate::context::{Action, TraceTurn};
use crate::intent::{
    conforms, gate_return, render_schema, FailureObject, FailureType, IntentSchema, ReturnValue,
};
use crate::policy::{worker_prompt, ParsedAction};
use crate::record::RecordEvent;
use crate::sanitizer::RecoveryBudget;
use crate::stack::{push_stack, CallStack, StackEntry};
use crate::toolenv::ToolEnvError;
use crate::validator::{should_validate, CallOrigin};
use crate::canon;

/// Everything a worker is given. There is no query field by construction.
#[derive(Debug, Clone)]
pub struct WorkerInput {
    pub observation: Value,
    pub intent: IntentSchema,
    /// Call-stack snapshot at spawn time; prompts additionally reflect
    /// calls the worker itself makes.
    pub stack: CallStack,
    pub depth: u32,
    pub budget_remaining: u32,
}

/// What a worker hands back to its parent.
#[derive(Debug, Clone, PartialEq)]
pub enum WorkerResult {
    Return(ReturnValue),
    Failure(FailureObject),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerOutcome {
    pub result: WorkerResult,
    pub tokens_used: u64,
    pub subcalls: u32,
    pub sanitize_count: u32,
}

pub(crate) enum SubcallOutcome {
    Executed(Value),
    Denied,
    Failed(FailureObject),
}

/// Run one worker to completion.
pub(crate) fn spawn_worker(
    core: &mut RunCore,
    input: WorkerInput,
    subtask_id: &str,
    source_tool: &str,
) -> WorkerOutcome {
    let parent = subtask_id
        .rsplit_once('.')
        .map(|(p, _)| p.to_string())
        .unwrap_or_else(|| "root".to_string());
    let intent_rendered = render_schema(&input.intent);
    core.events.push(RecordEvent::WorkerStart {
        subtask: subtask_id.to_string(),
        parent,
        depth: input.depth,
        tool: source_tool.to_string(),
        intent: intent_rendered.clone(),
    });

    let mut tokens_used = 0u64;
    let mut subcalls = 0u32;
    let mut sanitize_count = 0u32;
    let failure = |ft: FailureType, detail: &str| {
        WorkerResult::Failure(FailureObject::new(ft, detail, subtask_id))
    };

    let result: WorkerResult = 'outcome: {
        if input.depth > core.cfg.max_worker_depth {
            break 'outcome failure(FailureType::DepthExceeded, "worker depth cap exceeded");
        }
        let mut observation = input.observation.clone();
        let mut budget = RecoveryBudget::new(input.budget_remaining);
        // each iteration is one extraction attempt over the (possibly
        // sanitized) observation
        'restart: loop {
            let mut local_turns: Vec<Value> = Vec::new();
            let mut re_asked = false;
            let mut local_round = 0u32;
            loop {
                local_round += 1;
                if local_round > core.cfg.max_rounds {
                    break 'outcome failure(
                        FailureType::MissingInformation,
                        "extraction did not converge within the round cap",
                    );
                }
                let prompt = worker_prompt(
                    &observation,
                    &intent_rendered,
                    &core.stack.to_value(),
                    &local_turns,
                );
                let resp = match core.worker_backend.next(&prompt) {
                    Ok(resp) => resp,
                    Err(_) => {
                        break 'outcome failure(FailureType::ParseFailure, "worker policy failed")
                    }
                };
                tokens_used += resp.tokens_in + resp.tokens_out;
                core.add_tokens(resp.tokens_in, resp.tokens_out);
                match resp.parsed {
                    ParsedAction::Return(value) => {
                        // the gate sees the value exactly as it would cross
                        // the boundary
                        match gate_return(&canon::to_string(&value)) {
                            Ok(object) => {
                                let conformance = conforms(&object, &input.intent);
                                break 'outcome WorkerResult::Return(ReturnValue {
                                    value: object,
                                    source_round: core.current_round,
                                    conformance,
                                });
                            }
                            Err(_) => {
                                if !re_asked {
                                    re_asked = true;
                                    local_turns.push(serde_json::json!({
                                        "error": "return must be a JSON object matching the intent"
                                    }));
                                    continue;
                                }
                                break 'outcome failure(
                                    FailureType::ParseFailure,
                                    "return value failed the gate",
                                );
                            }
                        }
                    }
                    ParsedAction::Fail { failure: declared } => {
                        break 'outcome declared_failure(&declared, subtask_id)
                    }
                    ParsedAction::Act(Action::Stop) => {
                        // one re-ask tolerates a format slip before failing
                        if !re_asked {
                            re_asked = true;
                            local_turns.push(serde_json::json!({
                                "note": "emit a return value for the declared intent"
                            }));
                            continue;
                        }
                        break 'outcome failure(
                            FailureType::ParseFailure,
                            "worker stopped without a return value",
                        );
                    }
                    ParsedAction::Act(Action::Call {
                        tool,
                        args,
                        intent: sub_intent,
                    }) => {
                        subcalls += 1;
                        let outcome = request_subcall(
                            core,
                            subtask_id,
                            subcalls,
                            input.depth,
                            &tool,
                            &args,
                            sub_intent.clone(),
                        );
                        match outcome {
                            SubcallOutcome::Executed(sub_obs) => {
                                let turn = TraceTurn::new(
                                    local_round,
                                    &resp.raw_text,
                                    Action::Call {
                                        tool: tool.clone(),
                                        args: args.clone(),
                                        intent: sub_intent,
                                    },
                                    Some(sub_obs.clone()),
                                )
                                .expect("call turn carries an observation");
                                core.events.push(RecordEvent::Turn {
                                    subtask: subtask_id.to_string(),
                                    turn: turn.to_value(),
                                    tokens_in: resp.tokens_in,
                                    tokens_out: resp.tokens_out,
                                });
                                local_turns.push(serde_json::json!({
                                    "tool": tool,
                                    "observation": sub_obs,
                                }));
                            }
                            SubcallOutcome::Denied => {
                                if !core.cfg.sanitizer_enabled {
                                    break 'outcome failure(
                                        FailureType::ValidatorDenied,
                                        "command call denied by validator",
                                    );
                                }
                                if budget.consume() {
                                    sanitize_count += 1;
                                    observation =
                                        sanitize_observation(core, subtask_id, &observation);
                                    continue 'restart;
                                }
                                break 'outcome failure(
                                    FailureType::BudgetExhausted,
                                    "sanitize budget exhausted",
                                );
                            }
                            SubcallOutcome::Failed(fo) => {
                                break 'outcome WorkerResult::Failure(fo)
                            }
                        }
                    }
                    _ => {
                        break 'outcome failure(
                            FailureType::ParseFailure,
                            "worker response out of protocol",
                        )
                    }
                }
            }
        }
    };

    let result_value = match &result {
        WorkerResult::Return(rv) => serde_json::json!({
            "return": {
                "value": rv.value,
                "source_round": rv.source_round,
                "conformance": serde_json::to_value(&rv.conformance).expect("report serializes"),
            }
        }),
        WorkerResult::Failure(fo) => serde_json::json!({"failure": fo.to_value()}),
    };
    core.events.push(RecordEvent::WorkerEnd {
        subtask: subtask_id.to_string(),
        result: result_value,
        tokens: tokens_used,
        subcalls,
        sanitize_count,
    });
    WorkerOutcome {
        result,
        tokens_used,
        subcalls,
        sanitize_count,
    }
}

fn declared_failure(declared: &str, subtask_id: &str) -> WorkerResult {
    let (ft, detail) = match declared {
        "missing_information" => (
            FailureType::MissingInformation,
            "required fields absent from observation",
        ),
        "parse_failure" => (FailureType::ParseFailure, "worker declared a parse failure"),
        "tool_error" => (FailureType::ToolError, "worker declared a tool failure"),
        _ => (
            FailureType::ParseFailure,
            "worker declared an unknown failure type",
        ),
    };
    WorkerResult::Failure(FailureObject::new(ft, detail, subtask_id))
}

/// Route one worker tool-call attempt.
///
/// Query-labeled tools execute directly. Command-labeled tools are gated
/// by the validator first; a denial hands control back to the
/// sanitize-restart loop without touching stack or state. Executed calls
/// push a stack entry, and a declared sub-intent spawns a nested worker
/// over the sub-observation.
pub(crate) fn request_subcall(
    core: &mut RunCore,
    parent_subtask: &str,
    subcall_index: u32,
    depth: u32,
    tool: &str,
    args: &Value,
    sub_intent: Option<IntentSchema>,
) -> SubcallOutcome {
    let fail = |ft: FailureType, detail: &str| {
        SubcallOutcome::Failed(FailureObject::new(ft, detail, parent_subtask))
    };
    if core.registry.get(tool).is_none() {
        return fail(FailureType::ToolError, "proposed tool is not registered");
    }
    let entry = match StackEntry::new(tool, args, sub_intent.as_ref().map(render_schema)) {
        Ok(entry) => entry,
        Err(_) => return fail(FailureType::ToolError, "call metadata exceeded size cap"),
    };

    let needs_gate = core.cfg.validator_enabled
        && should_validate(tool, core.taxonomy, CallOrigin::Worker).unwrap_or(true);
    if needs_gate {
        let (verdict, event) = core.validator.gate(&core.stack, entry.clone(), parent_subtask);
        core.events.push(RecordEvent::Validation {
            subtask: event.subtask_id,
            request: event.request,
            decision: event.decision.as_str().to_string(),
            rationale: event.rationale,
            checker: event.checker.as_str().to_string(),
            cached: event.cached,
        });
        if !verdict.allowed() {
            return SubcallOutcome::Denied;
        }
    }

    match core.execute_tapped(parent_subtask, tool, args) {
        Err(ToolEnvError::ToolNotFound(_)) => {
            fail(FailureType::ToolError, "proposed tool is not registered")
        }
        Err(_) => fail(
            FailureType::ToolError,
            "subcall arguments failed type checking",
        ),
        Ok(observation) => {
            core.stack = push_stack(&core.stack, entry);
            match sub_intent {
                // a declared sub-intent confines the sub-observation to a
                // nested worker
                Some(intent) => {
                    let child_id = format!("{parent_subtask}.{subcall_index}");
                    let child_input = WorkerInput {
                        observation,
                        intent,
                        stack: core.stack.clone(),
                        depth: depth + 1,
                        budget_remaining: core.cfg.budget,
                    };
                    let outcome = spawn_worker(core, child_input, &child_id, tool);
                    let value = match outcome.result {
                        WorkerResult::Return(rv) => rv.value,
                        WorkerResult::Failure(fo) => fo.to_value(),
                    };
                    SubcallOutcome::Executed(value)
                }
                None => SubcallOutcome::Executed(observation),
            }
        }
    }
}

/// Sanitize an observation value in place of the worker's seeding text.
///
/// String observations are cleaned directly; structured observations have
/// every string leaf cleaned. One invocation is counted either way and one
/// event is logged with the full input rendering.
pub(crate) fn sanitize_observation(core: &mut RunCore, subtask: &str, obs: &Value) -> Value {
    core.sanitize_invocations += 1;
    let input_text = match obs {
        Value::String(s) => s.clone(),
        other => canon::to_string(other),
    };
    let mut removed = Vec::new();
    let mut passes = 1u32;
    let mut tokens = (0u64, 0u64);
    let cleaned = clean_value(
        core.sanitizer,
        obs,
        &mut String::new(),
        &mut removed,
        &mut passes,
        &mut tokens,
    );
    core.add_tokens(tokens.0, tokens.1);
    core.events.push(RecordEvent::Sanitize {
        subtask: subtask.to_string(),
        input: input_text,
        removed: Value::Array(removed),
        passes,
    });
    cleaned
}

fn clean_value(
    sanitizer: &mut crate::sanitizer::Sanitizer,
    value: &Value,
    path: &mut String,
    removed: &mut Vec<Value>,
    passes: &mut u32,
    tokens: &mut (u64, u64),
) -> Value {
    match value {
        Value::String(text) => {
            let (report, tin, tout) = sanitizer.sanitize(text);
            tokens.0 += tin;
            tokens.1 += tout;
            *passes = (*passes).max(report.passes);
            if !report.removed_spans.is_empty() {
                let spans: Vec<Value> = report
                    .removed_spans
                    .iter()
                    .map(|(s, e, id)| serde_json::json!([s, e, id]))
                    .collect();
                removed.push(serde_json::json!({
                    "path": if path.is_empty() { "/".to_string() } else { path.clone() },
                    "spans": spans,
                }));
            }
            Value::String(report.cleaned)
        }
        Value::Array(items) => Value::Array(
            items
                .iter()
                .enumerate()
                .map(|(i, item)| {
                    let len = path.len();
                    path.push('/');
                    path.push_str(&i.to_string());
                    let cleaned = clean_value(sanitizer, item, path, removed, passes, tokens);
                    path.truncate(len);
                    cleaned
                })
                .collect(),
        ),
        Value::Object(map) => {
            let mut out = serde_json::Map::new();
            for (k, v) in map {
                let len = path.len();
                path.push('/');
                path.push_str(k);
                out.insert(
                    k.clone(),
                    clean_value(sanitizer, v, path, removed, passes, tokens),
                );
                path.truncate(len);
            }
            Value::Object(out)
        }
        other => other.clone(),
    }
}
