//! Event-triggered alignment gate over worker tool calls.
//!
//! Validation fires only when a worker proposes a command-labeled tool;
//! query calls and all main-agent top-level calls bypass it. The checker's
//! view is built exclusively from trusted inputs: the user query, the
//! compact call stack, and the proposed call. Observation text cannot reach
//! it because [`ValidationRequest`] can only be constructed through
//! [`build_view`].
//!
//! Two checker implementations share the interface: a deterministic rule
//! policy (JSON rule file, first match wins) and any [`PolicyBackend`].
//! Every checker failure maps to deny.

use std::collections::BTreeMap;
use std::path::Path;

use regex::Regex;
use serde_json::Value;
use thiserror::Error;

use crate::canon;
use crate::context::TaskQuery;
use crate::policy::{validator_prompt, ParsedAction, PolicyBackend, PolicyPrompt};
use crate::stack::{CallStack, StackEntry};
use crate::toolenv::{CqLabel, ToolTaxonomy};

/// Cap on verdict rationale length, in characters.
pub const MAX_RATIONALE: usize = 512;

/// Where a tool call originates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallOrigin {
    MainAgent,
    Worker,
}

#[derive(Debug, Error, PartialEq)]
pub enum ValidatorError {
    #[error("tool {0:?} is not in the taxonomy")]
    UnknownTool(String),
    #[error("bad rule policy: {0}")]
    BadRules(String),
}

/// Whether a proposed call must pass validation: only worker-originated
/// calls to command-labeled tools do.
pub fn should_validate(
    tool: &str,
    taxonomy: &ToolTaxonomy,
    origin: CallOrigin,
) -> Result<bool, ValidatorError> {
    let label = taxonomy
        .get(tool)
        .ok_or_else(|| ValidatorError::UnknownTool(tool.to_string()))?;
    Ok(origin == CallOrigin::Worker && label == CqLabel::Command)
}

/// The checker's complete view: user query text, call stack, proposed call.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRequest {
    query_text: String,
    stack: CallStack,
    proposed: StackEntry,
}

/// The only constructor for [`ValidationRequest`].
pub fn build_view(query: &TaskQuery, stack: &CallStack, proposed: StackEntry) -> ValidationRequest {
    ValidationRequest {
        query_text: query.text.clone(),
        stack: stack.clone(),
        proposed,
    }
}

impl ValidationRequest {
    pub fn query_text(&self) -> &str {
        &self.query_text
    }

    pub fn stack(&self) -> &CallStack {
        &self.stack
    }

    pub fn proposed(&self) -> &StackEntry {
        &self.proposed
    }

    pub fn to_value(&self) -> Value {
        serde_json::json!({
            "query": self.query_text,
            "stack": self.stack.to_value(),
            "proposed": self.proposed.to_value(),
        })
    }

    pub fn serialize(&self) -> String {
        canon::to_string(&self.to_value())
    }

    /// Cache key for verdict reuse within a run.
    pub fn cache_key(&self) -> (String, String) {
        (
            canon::to_string(&self.stack.to_value()),
            canon::to_string(&self.proposed.to_value()),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny,
}

impl Decision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Decision::Allow => "allow",
            Decision::Deny => "deny",
        }
    }
}

/// Which checker produced a verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckerKind {
    Scripted,
    Remote,
    RulePolicy,
}

impl CheckerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CheckerKind::Scripted => "scripted",
            CheckerKind::Remote => "remote",
            CheckerKind::RulePolicy => "rule_policy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub decision: Decision,
    pub rationale: String,
    pub checker: CheckerKind,
}

impl Verdict {
    fn new(decision: Decision, rationale: &str, checker: CheckerKind) -> Self {
        Self {
            decision,
            rationale: rationale.chars().take(MAX_RATIONALE).collect(),
            checker,
        }
    }

    pub fn allowed(&self) -> bool {
        self.decision == Decision::Allow
    }
}

// ---------------------------------------------------------------------------
// Rule policy
// ---------------------------------------------------------------------------

/// Predicate over one argument of the proposed call.
#[derive(Debug, Clone)]
enum ArgPredicate {
    Eq { path: String, value: Value },
    Ne { path: String, value: Value },
    In { path: String, values: Vec<Value> },
    NotIn { path: String, values: Vec<Value> },
    Contains { path: String, needle: String },
    Matches { path: String, regex: Regex },
}

impl ArgPredicate {
    fn eval(&self, args: &Value) -> bool {
        match self {
            ArgPredicate::Eq { path, value } => args.pointer(path) == Some(value),
            ArgPredicate::Ne { path, value } => args.pointer(path) != Some(value),
            ArgPredicate::In { path, values } => args
                .pointer(path)
                .map(|v| values.contains(v))
                .unwrap_or(false),
            ArgPredicate::NotIn { path, values } => args
                .pointer(path)
                .map(|v| !values.contains(v))
                .unwrap_or(true),
            ArgPredicate::Contains { path, needle } => args
                .pointer(path)
                .and_then(Value::as_str)
                .map(|s| s.contains(needle.as_str()))
                .unwrap_or(false),
            ArgPredicate::Matches { path, regex } => args
                .pointer(path)
                .and_then(Value::as_str)
                .map(|s| regex.is_match(s))
                .unwrap_or(false),
        }
    }
}

#[derive(Debug, Clone)]
struct RuleEntry {
    tool: Option<String>,
    query_regex: Option<Regex>,
    intent_contains: Option<String>,
    args: Vec<ArgPredicate>,
    decision: Decision,
    rationale: String,
}

impl RuleEntry {
    fn matches(&self, request: &ValidationRequest) -> bool {
        if let Some(tool) = &self.tool {
            if tool != &request.proposed.tool {
                return false;
            }
        }
        if let Some(re) = &self.query_regex {
            if !re.is_match(&request.query_text) {
                return false;
            }
        }
        if let Some(needle) = &self.intent_contains {
            let hit = request
                .proposed
                .intent
                .as_deref()
                .map(|i| i.contains(needle.as_str()))
                .unwrap_or(false);
            if !hit {
                return false;
            }
        }
        let args = request.proposed.args();
        self.args.iter().all(|p| p.eval(&args))
    }
}

/// Deterministic allow/deny rules over (query text, stack, proposed call).
///
/// File format: `{"default":"allow"|"deny","rules":[{"match":{"tool":...,
/// "query_regex":...,"intent_contains":...,"args":[{"path":"/to","op":"eq",
/// "value":...}]},"decision":"deny","rationale":"..."}]}`. First matching
/// rule wins; the default decision applies when none match.
#[derive(Debug, Clone)]
pub struct RulePolicy {
    rules: Vec<RuleEntry>,
    default_decision: Decision,
}

impl Default for RulePolicy {
    /// Ships allow-by-default: event triggering already restricts scope.
    fn default() -> Self {
        Self {
            rules: Vec::new(),
            default_decision: Decision::Allow,
        }
    }
}

impl RulePolicy {
    pub fn from_value(value: &Value) -> Result<Self, ValidatorError> {
        let obj = value
            .as_object()
            .ok_or_else(|| ValidatorError::BadRules("rule file must be an object".into()))?;
        let default_decision = match obj.get("default").and_then(Value::as_str) {
            None | Some("allow") => Decision::Allow,
            Some("deny") => Decision::Deny,
            Some(other) => {
                return Err(ValidatorError::BadRules(format!(
                    "unknown default decision {other:?}"
                )))
            }
        };
        let mut rules = Vec::new();
        for (i, rule) in obj
            .get("rules")
            .and_then(Value::as_array)
            .unwrap_or(&Vec::new())
            .iter()
            .enumerate()
        {
            rules.push(Self::parse_rule(i, rule)?);
        }
        Ok(Self {
            rules,
            default_decision,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ValidatorError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ValidatorError::BadRules(format!("cannot read {}: {e}", path.display()))
        })?;
        let value = serde_json::from_str(&text).map_err(|e| {
            ValidatorError::BadRules(format!("{} is not JSON: {e}", path.display()))
        })?;
        Self::from_value(&value)
    }

    fn parse_rule(index: usize, value: &Value) -> Result<RuleEntry, ValidatorError> {
        let bad = |msg: String| ValidatorError::BadRules(format!("rule {index}: {msg}"));
        let obj = value
            .as_object()
            .ok_or_else(|| bad("must be an object".into()))?;
        let decision = match obj.get("decision").and_then(Value::as_str) {
            Some("allow") => Decision::Allow,
            Some("deny") => Decision::Deny,
            other => return Err(bad(format!("bad decision {other:?}"))),
        };
        let rationale = obj
            .get("rationale")
            .and_then(Value::as_str)
            .unwrap_or("matched rule")
            .to_string();
        let matcher = obj.get("match").and_then(Value::as_object);
        let mut tool = None;
        let mut query_regex = None;
        let mut intent_contains = None;
        let mut args = Vec::new();
        if let Some(matcher) = matcher {
            if let Some(t) = matcher.get("tool").and_then(Value::as_str) {
                tool = Some(t.to_string());
            }
            if let Some(re) = matcher.get("query_regex").and_then(Value::as_str) {
                query_regex =
                    Some(Regex::new(re).map_err(|e| bad(format!("bad query regex: {e}")))?);
            }
            if let Some(n) = matcher.get("intent_contains").and_then(Value::as_str) {
                intent_contains = Some(n.to_string());
            }
            for (j, pred) in matcher
                .get("args")
                .and_then(Value::as_array)
                .unwrap_or(&Vec::new())
                .iter()
                .enumerate()
            {
                args.push(Self::parse_predicate(index, j, pred)?);
            }
        }
        Ok(RuleEntry {
            tool,
            query_regex,
            intent_contains,
            args,
            decision,
            rationale,
        })
    }

    fn parse_predicate(
        rule: usize,
        index: usize,
        value: &Value,
    ) -> Result<ArgPredicate, ValidatorError> {
        let bad =
            |msg: String| ValidatorError::BadRules(format!("rule {rule} predicate {index}: {msg}"));
        let obj = value
            .as_object()
            .ok_or_else(|| bad("must be an object".into()))?;
        let path = obj
            .get("path")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("needs path".into()))?
            .to_string();
        let op = obj
            .get("op")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("needs op".into()))?;
        let val = || {
            obj.get("value")
                .cloned()
                .ok_or_else(|| bad("needs value".into()))
        };
        let list = || {
            obj.get("value")
                .and_then(Value::as_array)
                .cloned()
                .ok_or_else(|| bad("needs a list value".into()))
        };
        match op {
            "eq" => Ok(ArgPredicate::Eq { path, value: val()? }),
            "ne" => Ok(ArgPredicate::Ne { path, value: val()? }),
            "in" => Ok(ArgPredicate::In {
                path,
                values: list()?,
            }),
            "not_in" => Ok(ArgPredicate::NotIn {
                path,
                values: list()?,
            }),
            "contains" => Ok(ArgPredicate::Contains {
                path,
                needle: val()?
                    .as_str()
                    .ok_or_else(|| bad("contains needs a string".into()))?
                    .to_string(),
            }),
            "matches" => Ok(ArgPredicate::Matches {
                path,
                regex: Regex::new(
                    val()?
                        .as_str()
                        .ok_or_else(|| bad("matches needs a string".into()))?,
                )
                .map_err(|e| bad(format!("bad regex: {e}")))?,
            }),
            other => Err(bad(format!("unknown op {other:?}"))),
        }
    }

    pub fn evaluate(&self, request: &ValidationRequest) -> Verdict {
        for rule in &self.rules {
            if rule.matches(request) {
                return Verdict::new(rule.decision, &rule.rationale, CheckerKind::RulePolicy);
            }
        }
        Verdict::new(
            self.default_decision,
            "default decision",
            CheckerKind::RulePolicy,
        )
    }
}

// ---------------------------------------------------------------------------
// Checker dispatch
// ---------------------------------------------------------------------------

/// The configured checker behind the validation gate.
pub enum Checker {
    Rules(RulePolicy),
    Backend(Box<dyn PolicyBackend>),
}

impl Checker {
    fn kind(&self) -> CheckerKind {
        match self {
            Checker::Rules(_) => CheckerKind::RulePolicy,
            Checker::Backend(b) => match b.kind() {
                crate::policy::BackendKind::Remote => CheckerKind::Remote,
                _ => CheckerKind::Scripted,
            },
        }
    }
}

/// Run one validation. Any checker failure yields deny.
pub fn validate(request: &ValidationRequest, checker: &mut Checker) -> Verdict {
    match checker {
        Checker::Rules(rules) => rules.evaluate(request),
        Checker::Backend(backend) => {
            let kind = match backend.kind() {
                crate::policy::BackendKind::Remote => CheckerKind::Remote,
                _ => CheckerKind::Scripted,
            };
            let prompt: PolicyPrompt = validator_prompt(&request.to_value());
            match backend.next(&prompt) {
                Ok(resp) => match resp.parsed {
                    ParsedAction::Verdict { allow, rationale } => Verdict::new(
                        if allow { Decision::Allow } else { Decision::Deny },
                        &rationale,
                        kind,
                    ),
                    _ => Verdict::new(Decision::Deny, "checker response malformed", kind),
                },
                Err(crate::policy::PolicyError::Transport(_)) => {
                    Verdict::new(Decision::Deny, "checker unavailable", kind)
                }
                Err(_) => Verdict::new(Decision::Deny, "checker response malformed", kind),
            }
        }
    }
}

/// One logged validation attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationEvent {
    pub subtask_id: String,
    pub request: Value,
    pub decision: Decision,
    pub rationale: String,
    pub checker: CheckerKind,
    pub cached: bool,
}

/// Run-scoped validation gate: owns the checker, the per-run verdict
/// cache, and the invocation counters. Events are returned to the caller
/// so the run record keeps chronological order.
pub struct ValidatorHandle {
    query: TaskQuery,
    checker: Checker,
    cache: BTreeMap<(String, String), Verdict>,
    pub invocations: u64,
    pub checker_calls: u64,
}

impl ValidatorHandle {
    pub fn new(query: TaskQuery, checker: Checker) -> Self {
        Self {
            query,
            checker,
            cache: BTreeMap::new(),
            invocations: 0,
            checker_calls: 0,
        }
    }

    pub fn checker_kind(&self) -> CheckerKind {
        self.checker.kind()
    }

    /// Gate one proposed worker command call. Every attempt counts as an
    /// invocation; identical repeats within a run are served from cache.
    pub fn gate(
        &mut self,
        stack: &CallStack,
        proposed: StackEntry,
        subtask_id: &str,
    ) -> (Verdict, ValidationEvent) {
        let request = build_view(&self.query, stack, proposed);
        self.invocations += 1;
        let key = request.cache_key();
        let (verdict, cached) = match self.cache.get(&key) {
            Some(v) => (v.clone(), true),
            None => {
                self.checker_calls += 1;
                let v = validate(&request, &mut self.checker);
                self.cache.insert(key, v.clone());
                (v, false)
            }
        };
        let event = ValidationEvent {
            subtask_id: subtask_id.to_string(),
            request: request.to_value(),
            decision: verdict.decision,
            rationale: verdict.rationale.clone(),
            checker: verdict.checker,
            cached,
        };
        (verdict, event)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ScriptedBackend;
    use crate::toolenv::{classify_tools, register_tool, ToolRegistry, ToolSpec};
    use serde_json::json;

    fn taxonomy() -> ToolTaxonomy {
        let mut reg = ToolRegistry::new();
        register_tool(
            &mut reg,
            ToolSpec::from_value(&json!({
                "name": "send_money",
                "description": "",
                "args": {"to": "string", "amount": "number"},
                "rules": [{"match": {}, "output": "ok", "mutations": [
                    {"op": "add", "path": "/log", "value": 1}
                ]}],
            }))
            .unwrap(),
        )
        .unwrap();
        register_tool(
            &mut reg,
            ToolSpec::from_value(&json!({
                "name": "read_file",
                "description": "",
                "args": {"name": "string"},
                "rules": [{"match": {}, "output": "contents"}],
            }))
            .unwrap(),
        )
        .unwrap();
        classify_tools(&reg, None)
    }

    fn entry(tool: &str, args: Value) -> StackEntry {
        StackEntry::new(tool, &args, None).unwrap()
    }

    #[test]
    fn triggers_only_on_worker_command_calls() {
        let tax = taxonomy();
        assert!(should_validate("send_money", &tax, CallOrigin::Worker).unwrap());
        assert!(!should_validate("read_file", &tax, CallOrigin::Worker).unwrap());
        assert!(!should_validate("send_money", &tax, CallOrigin::MainAgent).unwrap());
        assert_eq!(
            should_validate("nope", &tax, CallOrigin::Worker),
            Err(ValidatorError::UnknownTool("nope".into()))
        );
    }

    #[test]
    fn view_contains_exactly_query_stack_proposed() {
        let query = TaskQuery::new("q", "pay the rent");
        let empty = build_view(&query, &CallStack::new(), entry("send_email", json!({})));
        assert_eq!(empty.stack().len(), 0);

        let mut stack = CallStack::new();
        stack = crate::stack::push_stack(&stack, entry("read_file", json!({"name": "a"})));
        stack = crate::stack::push_stack(&stack, entry("read_file", json!({"name": "b"})));
        let request = build_view(&query, &stack, entry("send_email", json!({"to": "x"})));
        let text = request.serialize();
        assert!(text.contains("pay the rent"));
        assert!(text.contains("read_file"));
        assert!(text.contains("send_email"));
    }

    #[test]
    fn rule_policy_denies_unknown_payees() {
        // deny any transfer whose payee is outside the known contact list
        let rules = RulePolicy::from_value(&json!({
            "default": "allow",
            "rules": [{
                "match": {
                    "tool": "send_money",
                    "args": [{"path": "/to", "op": "not_in", "value": ["bob", "carol"]}],
                },
                "decision": "deny",
                "rationale": "payee not in contacts",
            }],
        }))
        .unwrap();
        let query = TaskQuery::new("q", "pay bob");
        let attacker = build_view(
            &query,
            &CallStack::new(),
            entry("send_money", json!({"to": "attacker", "amount": 9000})),
        );
        // oracle: hand evaluation of the rule against the request
        let verdict = rules.evaluate(&attacker);
        assert_eq!(verdict.decision, Decision::Deny);
        assert_eq!(verdict.rationale, "payee not in contacts");

        let friendly = build_view(
            &query,
            &CallStack::new(),
            entry("send_money", json!({"to": "bob", "amount": 10})),
        );
        assert_eq!(rules.evaluate(&friendly).decision, Decision::Allow);
    }

    #[test]
    fn scripted_checker_round_trip() {
        let mut checker = Checker::Backend(Box::new(
            ScriptedBackend::from_value(&json!({
                "validator": [{"decision": "allow", "rationale": "fits the task"}],
            }))
            .unwrap(),
        ));
        let query = TaskQuery::new("q", "task");
        let request = build_view(&query, &CallStack::new(), entry("t", json!({})));
        let verdict = validate(&request, &mut checker);
        assert!(verdict.allowed());
        assert_eq!(verdict.checker, CheckerKind::Scripted);
    }

    #[test]
    fn checker_failure_is_fail_closed() {
        // exhausted script behaves like a dead checker
        let mut checker = Checker::Backend(Box::new(
            ScriptedBackend::from_value(&json!({"validator": []})).unwrap(),
        ));
        let query = TaskQuery::new("q", "task");
        let request = build_view(&query, &CallStack::new(), entry("t", json!({})));
        let verdict = validate(&request, &mut checker);
        assert_eq!(verdict.decision, Decision::Deny);
    }

    #[test]
    fn handle_caches_identical_proposals() {
        let query = TaskQuery::new("q", "task");
        let mut handle = ValidatorHandle::new(query, Checker::Rules(RulePolicy::default()));
        let stack = CallStack::new();
        let proposed = entry("send_money", json!({"to": "bob"}));
        let (_, first) = handle.gate(&stack, proposed.clone(), "root.1");
        let (_, second) = handle.gate(&stack, proposed.clone(), "root.1");
        let different = entry("send_money", json!({"to": "carol"}));
        let (_, third) = handle.gate(&stack, different, "root.1");
        assert_eq!(handle.invocations, 3);
        assert_eq!(handle.checker_calls, 2);
        assert!(!first.cached);
        assert!(second.cached);
        assert!(!third.cached);
    }
}
