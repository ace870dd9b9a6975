//! Per-run telemetry: the trace (main and worker subtrees with lineage),
//! counters, token totals, outcomes, and the JSONL persistence format.
//!
//! A record serializes to one JSONL document: a header line, a context-base
//! line, one line per event in chronological order, a report line, and a
//! footer with counters and outcome flags. Every line is canonical JSON, so
//! identical runs produce byte-identical files.

use serde_json::Value;
use thiserror::Error;

use crate::canon;
use crate::context::{Context, Mode, TaskQuery, TraceTurn};
use crate::toolenv::EnvState;

/// One chronological event inside a run.
#[derive(Debug, Clone, PartialEq)]
pub enum RecordEvent {
    /// A trace turn of the main agent (`subtask == "root"`) or a worker.
    Turn {
        subtask: String,
        turn: Value,
        tokens_in: u64,
        tokens_out: u64,
    },
    WorkerStart {
        subtask: String,
        parent: String,
        depth: u32,
        tool: String,
        intent: String,
    },
    WorkerEnd {
        subtask: String,
        result: Value,
        tokens: u64,
        subcalls: u32,
        sanitize_count: u32,
    },
    Validation {
        subtask: String,
        request: Value,
        decision: String,
        rationale: String,
        checker: String,
        cached: bool,
    },
    Sanitize {
        subtask: String,
        input: String,
        removed: Value,
        passes: u32,
    },
}

impl RecordEvent {
    fn to_value(&self) -> Value {
        match self {
            RecordEvent::Turn {
                subtask,
                turn,
                tokens_in,
                tokens_out,
            } => serde_json::json!({
                "type": "turn",
                "subtask": subtask,
                "turn": turn,
                "tokens_in": tokens_in,
                "tokens_out": tokens_out,
            }),
            RecordEvent::WorkerStart {
                subtask,
                parent,
                depth,
                tool,
                intent,
            } => serde_json::json!({
                "type": "worker_start",
                "subtask": subtask,
                "parent": parent,
                "depth": depth,
                "tool": tool,
                "intent": intent,
            }),
            RecordEvent::WorkerEnd {
                subtask,
                result,
                tokens,
                subcalls,
                sanitize_count,
            } => serde_json::json!({
                "type": "worker_end",
                "subtask": subtask,
                "result": result,
                "tokens": tokens,
                "subcalls": subcalls,
                "sanitize_count": sanitize_count,
            }),
            RecordEvent::Validation {
                subtask,
                request,
                decision,
                rationale,
                checker,
                cached,
            } => serde_json::json!({
                "type": "validation",
                "subtask": subtask,
                "request": request,
                "decision": decision,
                "rationale": rationale,
                "checker": checker,
                "cached": cached,
            }),
            RecordEvent::Sanitize {
                subtask,
                input,
                removed,
                passes,
            } => serde_json::json!({
                "type": "sanitize",
                "subtask": subtask,
                "input": input,
                "removed": removed,
                "passes": passes,
            }),
        }
    }

    fn from_value(value: &Value) -> Option<Self> {
        let get_str = |k: &str| value.get(k)?.as_str().map(str::to_string);
        let get_u64 = |k: &str| value.get(k)?.as_u64();
        match value.get("type")?.as_str()? {
            "turn" => Some(RecordEvent::Turn {
                subtask: get_str("subtask")?,
                turn: value.get("turn")?.clone(),
                tokens_in: get_u64("tokens_in")?,
                tokens_out: get_u64("tokens_out")?,
            }),
            "worker_start" => Some(RecordEvent::WorkerStart {
                subtask: get_str("subtask")?,
                parent: get_str("parent")?,
                depth: get_u64("depth")? as u32,
                tool: get_str("tool")?,
                intent: get_str("intent")?,
            }),
            "worker_end" => Some(RecordEvent::WorkerEnd {
                subtask: get_str("subtask")?,
                result: value.get("result")?.clone(),
                tokens: get_u64("tokens")?,
                subcalls: get_u64("subcalls")? as u32,
                sanitize_count: get_u64("sanitize_count")? as u32,
            }),
            "validation" => Some(RecordEvent::Validation {
                subtask: get_str("subtask")?,
                request: value.get("request")?.clone(),
                decision: get_str("decision")?,
                rationale: get_str("rationale")?,
                checker: get_str("checker")?,
                cached: value.get("cached")?.as_bool()?,
            }),
            "sanitize" => Some(RecordEvent::Sanitize {
                subtask: get_str("subtask")?,
                input: get_str("input")?,
                removed: value.get("removed")?.clone(),
                passes: get_u64("passes")? as u32,
            }),
            _ => None,
        }
    }
}

/// A tool call that actually executed, with its origin subtask.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutedCall {
    pub subtask: String,
    pub tool: String,
    pub args: Value,
}

/// Complete telemetry of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub scenario_id: String,
    pub mode: Mode,
    pub seed: u64,
    /// Index of the injection armed for this run; None is the benign arm.
    pub attack: Option<usize>,
    pub config_digest: String,
    pub system_prompt: String,
    pub tool_descriptions: Vec<String>,
    pub query: TaskQuery,
    pub events: Vec<RecordEvent>,
    pub report: String,
    pub final_state: EnvState,
    pub executed_calls: Vec<ExecutedCall>,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub validator_invocations: u64,
    pub checker_calls: u64,
    pub sanitize_invocations: u64,
    /// Number of main-agent tool-call rounds (the trajectory length).
    pub rounds: u32,
    pub utility_met: bool,
    pub security_met: bool,
    pub error: Option<String>,
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("bad record line {line}: {reason}")]
    BadLine { line: usize, reason: String },
    #[error("record is missing its {0} section")]
    MissingSection(&'static str),
}

impl RunRecord {
    /// Main-agent trace turns, parsed back from events.
    pub fn main_turns(&self) -> Vec<TraceTurn> {
        self.events
            .iter()
            .filter_map(|e| match e {
                RecordEvent::Turn { subtask, turn, .. } if subtask == "root" => {
                    TraceTurn::from_value(turn)
                }
                _ => None,
            })
            .collect()
    }

    /// Rebuild the final main-agent context from base fields plus root
    /// turn events.
    pub fn final_context(&self) -> Context {
        let mut ctx = Context::new(
            &self.system_prompt,
            self.tool_descriptions.clone(),
            self.query.clone(),
        );
        for turn in self.main_turns() {
            ctx = crate::context::append_turn(&ctx, turn).expect("record rounds are consecutive");
        }
        ctx
    }

    /// All validation-request serializations logged during the run.
    pub fn validation_requests(&self) -> Vec<String> {
        self.events
            .iter()
            .filter_map(|e| match e {
                RecordEvent::Validation { request, .. } => Some(canon::to_string(request)),
                _ => None,
            })
            .collect()
    }

    pub fn total_tokens(&self) -> u64 {
        self.tokens_in + self.tokens_out
    }

    /// Serialize to the canonical JSONL document.
    pub fn to_jsonl(&self) -> String {
        let mut lines: Vec<String> = Vec::new();
        lines.push(canon::to_string(&serde_json::json!({
            "type": "header",
            "scenario": self.scenario_id,
            "mode": self.mode.as_str(),
            "seed": self.seed,
            "attack": self.attack,
            "config_digest": self.config_digest,
        })));
        lines.push(canon::to_string(&serde_json::json!({
            "type": "context_base",
            "system_prompt": self.system_prompt,
            "tool_descriptions": self.tool_descriptions,
            "query": self.query.to_value(),
        })));
        for event in &self.events {
            lines.push(canon::to_string(&event.to_value()));
        }
        lines.push(canon::to_string(&serde_json::json!({
            "type": "report",
            "text": self.report,
        })));
        let executed: Vec<Value> = self
            .executed_calls
            .iter()
            .map(|c| serde_json::json!({"subtask": c.subtask, "tool": c.tool, "args": c.args}))
            .collect();
        lines.push(canon::to_string(&serde_json::json!({
            "type": "footer",
            "final_state": {"doc": self.final_state.doc, "version": self.final_state.version},
            "executed_calls": executed,
            "tokens_in": self.tokens_in,
            "tokens_out": self.tokens_out,
            "validator_invocations": self.validator_invocations,
            "checker_calls": self.checker_calls,
            "sanitize_invocations": self.sanitize_invocations,
            "rounds": self.rounds,
            "utility_met": self.utility_met,
            "security_met": self.security_met,
            "error": self.error,
        })));
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// Parse a JSONL document produced by [`RunRecord::to_jsonl`].
    pub fn from_jsonl(text: &str) -> Result<Self, RecordError> {
        let mut header: Option<Value> = None;
        let mut base: Option<Value> = None;
        let mut report: Option<String> = None;
        let mut footer: Option<Value> = None;
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let value: Value = serde_json::from_str(line).map_err(|e| RecordError::BadLine {
                line: i + 1,
                reason: e.to_string(),
            })?;
            match value.get("type").and_then(Value::as_str) {
                Some("header") => header = Some(value),
                Some("context_base") => base = Some(value),
                Some("report") => {
                    report = value
                        .get("text")
                        .and_then(Value::as_str)
                        .map(str::to_string)
                }
                Some("footer") => footer = Some(value),
                Some(_) => {
                    let event = RecordEvent::from_value(&value).ok_or(RecordError::BadLine {
                        line: i + 1,
                        reason: "unparseable event".into(),
                    })?;
                    events.push(event);
                }
                None => {
                    return Err(RecordError::BadLine {
                        line: i + 1,
                        reason: "line has no type".into(),
                    })
                }
            }
        }
        let header = header.ok_or(RecordError::MissingSection("header"))?;
        let base = base.ok_or(RecordError::MissingSection("context_base"))?;
        let footer = footer.ok_or(RecordError::MissingSection("footer"))?;
        let bad = |reason: &str| RecordError::BadLine {
            line: 0,
            reason: reason.to_string(),
        };
        let executed_calls = footer
            .get("executed_calls")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("footer lacks executed_calls"))?
            .iter()
            .map(|c| {
                Some(ExecutedCall {
                    subtask: c.get("subtask")?.as_str()?.to_string(),
                    tool: c.get("tool")?.as_str()?.to_string(),
                    args: c.get("args")?.clone(),
                })
            })
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("bad executed call"))?;
        Ok(RunRecord {
            scenario_id: header
                .get("scenario")
                .and_then(Value::as_str)
                .ok_or_else(|| bad("header lacks scenario"))?
                .to_string(),
            mode: header
                .get("mode")
                .and_then(Value::as_str)
                .and_then(Mode::parse)
                .ok_or_else(|| bad("header lacks mode"))?,
            seed: header
                .get("seed")
                .and_then(Value::as_u64)
                .ok_or_else(|| bad("header lacks seed"))?,
            attack: header
                .get("attack")
                .and_then(Value::as_u64)
                .map(|i| i as usize),
            config_digest: header
                .get("config_digest")
                .and_then(Value::as_str)
                .unwrap_or("")
                .to_string(),
            system_prompt: base
                .get("system_prompt")
                .and_then(Value::as_str)
                .unwrap_or("")
                .to_string(),
            tool_descriptions: base
                .get("tool_descriptions")
                .and_then(Value::as_array)
                .map(|a| {
                    a.iter()
                        .filter_map(Value::as_str)
                        .map(str::to_string)
                        .collect()
                })
                .unwrap_or_default(),
            query: base
                .get("query")
                .and_then(TaskQuery::from_value)
                .ok_or_else(|| bad("bad query"))?,
            events,
            report: report.unwrap_or_default(),
            final_state: EnvState {
                doc: footer
                    .pointer("/final_state/doc")
                    .cloned()
                    .ok_or_else(|| bad("footer lacks final state"))?,
                version: footer
                    .pointer("/final_state/version")
                    .and_then(Value::as_u64)
                    .unwrap_or(0),
            },
            executed_calls,
            tokens_in: footer.get("tokens_in").and_then(Value::as_u64).unwrap_or(0),
            tokens_out: footer
                .get("tokens_out")
                .and_then(Value::as_u64)
                .unwrap_or(0),
            validator_invocations: footer
                .get("validator_invocations")
                .and_then(Value::as_u64)
                .unwrap_or(0),
            checker_calls: footer
                .get("checker_calls")
                .and_then(Value::as_u64)
                .unwrap_or(0),
            sanitize_invocations: footer
                .get("sanitize_invocations")
                .and_then(Value::as_u64)
                .unwrap_or(0),
            rounds: footer.get("rounds").and_then(Value::as_u64).unwrap_or(0) as u32,
            utility_met: footer
                .get("utility_met")
                .and_then(Value::as_bool)
                .unwrap_or(false),
            security_met: footer
                .get("security_met")
                .and_then(Value::as_bool)
                .unwrap_or(false),
            error: footer
                .get("error")
                .and_then(Value::as_str)
                .map(str::to_string),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::{Action, TraceTurn};
    use serde_json::json;

    fn sample() -> RunRecord {
        let turn = TraceTurn::new(
            1,
            "look up",
            Action::Call {
                tool: "get_balance".into(),
                args: json!({"account": "alice"}),
                intent: None,
            },
            Some(json!({"balance": 100})),
        )
        .unwrap();
        RunRecord {
            scenario_id: "s1".into(),
            mode: Mode::Baseline,
            seed: 7,
            attack: Some(0),
            config_digest: "abc".into(),
            system_prompt: "sys".into(),
            tool_descriptions: vec!["get_balance: reads".into()],
            query: TaskQuery::new("q1", "check balance"),
            events: vec![RecordEvent::Turn {
                subtask: "root".into(),
                turn: turn.to_value(),
                tokens_in: 10,
                tokens_out: 5,
            }],
            report: "balance is 100".into(),
            final_state: EnvState::new(json!({"accounts": {"alice": 100}})),
            executed_calls: vec![ExecutedCall {
                subtask: "root".into(),
                tool: "get_balance".into(),
                args: json!({"account": "alice"}),
            }],
            tokens_in: 10,
            tokens_out: 5,
            validator_invocations: 0,
            checker_calls: 0,
            sanitize_invocations: 0,
            rounds: 1,
            utility_met: true,
            security_met: false,
            error: None,
        }
    }

    #[test]
    fn jsonl_round_trips() {
        let record = sample();
        let text = record.to_jsonl();
        let parsed = RunRecord::from_jsonl(&text).unwrap();
        assert_eq!(parsed, record);
        // and the rendering is stable
        assert_eq!(parsed.to_jsonl(), text);
    }

    #[test]
    fn final_context_rebuilds_from_events() {
        let record = sample();
        let ctx = record.final_context();
        assert_eq!(ctx.turns().len(), 1);
        assert_eq!(ctx.query.text, "check balance");
    }

    #[test]
    fn serialization_is_deterministic() {
        assert_eq!(sample().to_jsonl(), sample().to_jsonl());
    }
}
