//! Main-agent working memory: queries, actions, trace turns, and the
//! append-only context.
//!
//! The canonical context serialization is line-oriented: one header line
//! (system prompt, tool descriptions, query) followed by one line per turn,
//! all rendered as canonical JSON. Appending a turn appends exactly one
//! line, so the serialization of any earlier snapshot is a byte-for-byte
//! prefix of every later one. Containment and determinism checks rely on
//! that property.

use serde_json::Value;
use thiserror::Error;

use crate::canon;
use crate::intent::{render_schema, IntentSchema};

/// The user task handed to a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskQuery {
    pub id: String,
    pub text: String,
    /// Harness-assigned marker embedded verbatim in `text`; lets the
    /// harness detect query leakage into worker scopes.
    pub taint_nonce: Option<String>,
}

impl TaskQuery {
    pub fn new(id: &str, text: &str) -> Self {
        Self {
            id: id.to_string(),
            text: text.to_string(),
            taint_nonce: None,
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::json!({
            "id": self.id,
            "text": self.text,
            "taint_nonce": self.taint_nonce,
        })
    }

    pub fn from_value(value: &Value) -> Option<Self> {
        Some(Self {
            id: value.get("id")?.as_str()?.to_string(),
            text: value.get("text")?.as_str()?.to_string(),
            taint_nonce: value
                .get("taint_nonce")
                .and_then(Value::as_str)
                .map(str::to_string),
        })
    }
}

/// One policy decision: stop, or call a tool.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Stop,
    Call {
        tool: String,
        args: Value,
        /// Declared return-shape contract; present only in isolated mode.
        intent: Option<IntentSchema>,
    },
}

impl Action {
    pub fn to_value(&self) -> Value {
        match self {
            Action::Stop => serde_json::json!({"kind": "stop"}),
            Action::Call { tool, args, intent } => serde_json::json!({
                "kind": "call",
                "tool": tool,
                "args": args,
                "intent": intent.as_ref().map(render_schema),
            }),
        }
    }

    pub fn from_value(value: &Value) -> Option<Self> {
        match value.get("kind")?.as_str()? {
            "stop" => Some(Action::Stop),
            "call" => {
                let intent = match value.get("intent") {
                    None | Some(Value::Null) => None,
                    Some(Value::String(text)) => Some(crate::intent::parse_schema(text).ok()?),
                    Some(_) => return None,
                };
                Some(Action::Call {
                    tool: value.get("tool")?.as_str()?.to_string(),
                    args: value.get("args").cloned().unwrap_or(Value::Null),
                    intent,
                })
            }
            _ => None,
        }
    }

    /// Comparable identity for divergence: tool plus canonical args.
    pub fn signature(&self) -> (String, String) {
        match self {
            Action::Stop => ("<stop>".to_string(), String::new()),
            Action::Call { tool, args, .. } => (tool.clone(), canon::to_string(args)),
        }
    }
}

/// One round of the trace: rationale, action, and (for calls) observation.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceTurn {
    pub round: u32,
    pub policy_output: String,
    pub action: Action,
    observation: Option<Value>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ContextError {
    #[error("turn round {got} does not extend context ending at round {last}")]
    RoundGap { last: u32, got: u32 },
    #[error("observation must be present iff the action is a call")]
    ObservationMismatch,
}

impl TraceTurn {
    /// Observation presence is tied to the action kind: calls carry one,
    /// stop turns never do.
    pub fn new(
        round: u32,
        policy_output: &str,
        action: Action,
        observation: Option<Value>,
    ) -> Result<Self, ContextError> {
        let is_call = matches!(action, Action::Call { .. });
        if is_call != observation.is_some() {
            return Err(ContextError::ObservationMismatch);
        }
        Ok(Self {
            round,
            policy_output: policy_output.to_string(),
            action,
            observation,
        })
    }

    pub fn observation(&self) -> Option<&Value> {
        self.observation.as_ref()
    }

    pub fn to_value(&self) -> Value {
        let mut map = serde_json::Map::new();
        map.insert("round".into(), Value::from(self.round));
        map.insert("policy_output".into(), Value::from(self.policy_output.clone()));
        map.insert("action".into(), self.action.to_value());
        if let Some(obs) = &self.observation {
            map.insert("observation".into(), obs.clone());
        }
        Value::Object(map)
    }

    pub fn from_value(value: &Value) -> Option<Self> {
        let action = Action::from_value(value.get("action")?)?;
        TraceTurn::new(
            u32::try_from(value.get("round")?.as_u64()?).ok()?,
            value.get("policy_output")?.as_str()?,
            action,
            value.get("observation").cloned(),
        )
        .ok()
    }
}

/// The accumulated working memory conditioning each policy decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub system_prompt: String,
    pub tool_descriptions: Vec<String>,
    pub query: TaskQuery,
    turns: Vec<TraceTurn>,
}

impl Context {
    pub fn new(system_prompt: &str, tool_descriptions: Vec<String>, query: TaskQuery) -> Self {
        Self {
            system_prompt: system_prompt.to_string(),
            tool_descriptions,
            query,
            turns: Vec::new(),
        }
    }

    pub fn turns(&self) -> &[TraceTurn] {
        &self.turns
    }

    pub fn last_round(&self) -> u32 {
        self.turns.last().map(|t| t.round).unwrap_or(0)
    }

    /// Canonical line-oriented serialization. Earlier snapshots are byte
    /// prefixes of later ones.
    pub fn serialize(&self) -> String {
        let header = serde_json::json!({
            "query": self.query.to_value(),
            "system_prompt": self.system_prompt,
            "tool_descriptions": self.tool_descriptions,
        });
        let mut out = canon::to_string(&header);
        for turn in &self.turns {
            out.push('\n');
            out.push_str(&canon::to_string(&turn.to_value()));
        }
        out
    }
}

/// Append a turn, enforcing strictly consecutive rounds.
pub fn append_turn(ctx: &Context, turn: TraceTurn) -> Result<Context, ContextError> {
    let last = ctx.last_round();
    if turn.round != last + 1 {
        return Err(ContextError::RoundGap {
            last,
            got: turn.round,
        });
    }
    let mut next = ctx.clone();
    next.turns.push(turn);
    Ok(next)
}

/// Execution mode of the main loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Mode {
    /// Full-memory accumulation: raw observations appended verbatim.
    Baseline,
    /// Worker delegation: only gate-accepted values or failure objects
    /// reach the main context.
    Isolated,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Isolated => "isolated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "baseline" => Some(Mode::Baseline),
            "isolated" => Some(Mode::Isolated),
            _ => None,
        }
    }
}

/// Per-run configuration knobs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    pub mode: Mode,
    /// Hard cap on main-loop rounds; guarantees termination against
    /// misbehaving policies.
    pub max_rounds: u32,
    /// Per-subtask sanitize-restart budget (ignored in baseline mode).
    pub budget: u32,
    /// Maximum worker nesting depth (ignored in baseline mode).
    pub max_worker_depth: u32,
    pub seed: u64,
    /// Reject return values whose conformance report is not clean.
    pub strict_intent: bool,
    /// Ablation switch: skip validator gating of worker command calls.
    pub validator_enabled: bool,
    /// Ablation switch: disable the sanitize-restart loop (denials fail
    /// the subtask immediately).
    pub sanitizer_enabled: bool,
    /// Ablation switch: sanitize every observation before worker dispatch.
    pub sanitize_all: bool,
}

impl RunConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            max_rounds: 20,
            budget: 2,
            max_worker_depth: 3,
            seed: 0,
            strict_intent: false,
            validator_enabled: true,
            sanitizer_enabled: true,
            sanitize_all: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn to_value(&self) -> Value {
        serde_json::json!({
            "mode": self.mode.as_str(),
            "max_rounds": self.max_rounds,
            "budget": self.budget,
            "max_worker_depth": self.max_worker_depth,
            "seed": self.seed,
            "strict_intent": self.strict_intent,
            "validator_enabled": self.validator_enabled,
            "sanitizer_enabled": self.sanitizer_enabled,
            "sanitize_all": self.sanitize_all,
        })
    }
}
