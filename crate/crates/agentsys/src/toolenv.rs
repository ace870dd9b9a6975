//! Declarative simulated tool environment.
//!
//! Tools are defined by data, not code: each tool carries a list of
//! behavior rules (argument pattern -> output template + state mutations)
//! evaluated first-match-wins against a JSON environment document. Keeping
//! behaviors declarative makes read-only tools statically checkable and
//! scenarios portable.
//!
//! Template language: string values may reference `{args.name}` and
//! `{state./json/pointer}` (the pointer may itself contain `{args.name}`
//! segments). A string that consists of exactly one placeholder splices the
//! referenced JSON value; any other placeholder use interpolates text.

use std::collections::BTreeMap;

use serde_json::Value;
use thiserror::Error;

use crate::canon;
use crate::intent::{render_schema, ConformanceReport, IntentSchema};
use crate::policy::{classify_prompt, LabelAnswer, ParsedAction, PolicyBackend};

/// Side-effect labeling of a tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ToolLabel {
    Command,
    Query,
    Unlabeled,
}

impl ToolLabel {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "command" => Some(ToolLabel::Command),
            "query" => Some(ToolLabel::Query),
            "unlabeled" => Some(ToolLabel::Unlabeled),
            _ => None,
        }
    }
}

/// Resolved command/query label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CqLabel {
    Command,
    Query,
}

impl CqLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            CqLabel::Command => "command",
            CqLabel::Query => "query",
        }
    }
}

/// A single state mutation applied when a behavior rule fires.
#[derive(Debug, Clone, PartialEq)]
pub enum Mutation {
    /// Set (insert or replace) the value at a pointer.
    Set { path: String, value: Value },
    /// Numeric add at a pointer.
    Add { path: String, value: Value },
    /// Numeric subtract at a pointer.
    Sub { path: String, value: Value },
    /// Append to the array at a pointer.
    Push { path: String, value: Value },
}

/// One behavior rule: argument pattern, output template, mutations.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorRule {
    /// Structural pattern over args: literal values must match exactly,
    /// the string `"*"` matches any present value.
    pub match_args: BTreeMap<String, Value>,
    pub output: Value,
    pub mutations: Vec<Mutation>,
}

/// How a tool behaves when executed.
#[derive(Debug, Clone, PartialEq)]
pub enum Behavior {
    Rules(Vec<BehaviorRule>),
    /// Opaque built-in; currently `echo` (returns its arguments).
    Builtin(String),
}

/// A registered tool.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub arg_schema: IntentSchema,
    pub behavior: Behavior,
    pub label: ToolLabel,
}

#[derive(Debug, Error, PartialEq)]
pub enum ToolEnvError {
    #[error("tool {0:?} is already registered")]
    DuplicateTool(String),
    #[error("tool {0:?} is not registered")]
    ToolNotFound(String),
    #[error("arguments for tool {tool:?} failed type checking: {detail}")]
    ArgType { tool: String, detail: String },
    #[error("bad tool definition: {0}")]
    BadSpec(String),
}

impl ToolSpec {
    /// Parse a tool definition from its JSON form.
    pub fn from_value(value: &Value) -> Result<Self, ToolEnvError> {
        let obj = value
            .as_object()
            .ok_or_else(|| ToolEnvError::BadSpec("tool must be an object".into()))?;
        let name = obj
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| ToolEnvError::BadSpec("tool needs a name".into()))?
            .to_string();
        if name.is_empty() {
            return Err(ToolEnvError::BadSpec("tool name is empty".into()));
        }
        let description = obj
            .get("description")
            .and_then(Value::as_str)
            .unwrap_or("")
            .to_string();
        let arg_schema = match obj.get("args") {
            Some(decl) => IntentSchema::from_value(decl)
                .map_err(|e| ToolEnvError::BadSpec(format!("tool {name}: bad arg schema: {e}")))?,
            None => IntentSchema::from_value(&serde_json::json!({})).unwrap(),
        };
        let label = match obj.get("label").and_then(Value::as_str) {
            Some(text) => ToolLabel::parse(text)
                .ok_or_else(|| ToolEnvError::BadSpec(format!("tool {name}: bad label {text:?}")))?,
            None => ToolLabel::Unlabeled,
        };
        let behavior = if let Some(builtin) = obj.get("builtin").and_then(Value::as_str) {
            if builtin != "echo" {
                return Err(ToolEnvError::BadSpec(format!(
                    "tool {name}: unknown builtin {builtin:?}"
                )));
            }
            Behavior::Builtin(builtin.to_string())
        } else {
            let rules = obj
                .get("rules")
                .and_then(Value::as_array)
                .ok_or_else(|| {
                    ToolEnvError::BadSpec(format!("tool {name}: needs rules or builtin"))
                })?
                .iter()
                .map(|r| parse_rule(&name, r))
                .collect::<Result<Vec<_>, _>>()?;
            Behavior::Rules(rules)
        };
        Ok(Self {
            name,
            description,
            arg_schema,
            behavior,
            label,
        })
    }

    /// Whether any behavior rule declares a mutation.
    pub fn declares_mutations(&self) -> bool {
        match &self.behavior {
            Behavior::Rules(rules) => rules.iter().any(|r| !r.mutations.is_empty()),
            Behavior::Builtin(_) => false,
        }
    }

    /// Rendered description block for policy prompts.
    pub fn render(&self) -> String {
        format!(
            "{}: {} (args: {})",
            self.name,
            self.description,
            render_schema(&self.arg_schema)
        )
    }
}

fn parse_rule(tool: &str, value: &Value) -> Result<BehaviorRule, ToolEnvError> {
    let obj = value
        .as_object()
        .ok_or_else(|| ToolEnvError::BadSpec(format!("tool {tool}: rule must be an object")))?;
    let match_args = match obj.get("match") {
        Some(Value::Object(map)) => map.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        None => BTreeMap::new(),
        Some(_) => {
            return Err(ToolEnvError::BadSpec(format!(
                "tool {tool}: rule match must be an object"
            )))
        }
    };
    let output = obj
        .get("output")
        .cloned()
        .ok_or_else(|| ToolEnvError::BadSpec(format!("tool {tool}: rule needs an output")))?;
    let mutations = match obj.get("mutations") {
        None => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|m| parse_mutation(tool, m))
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => {
            return Err(ToolEnvError::BadSpec(format!(
                "tool {tool}: mutations must be a list"
            )))
        }
    };
    Ok(BehaviorRule {
        match_args,
        output,
        mutations,
    })
}

fn parse_mutation(tool: &str, value: &Value) -> Result<Mutation, ToolEnvError> {
    let obj = value
        .as_object()
        .ok_or_else(|| ToolEnvError::BadSpec(format!("tool {tool}: mutation must be an object")))?;
    let op = obj
        .get("op")
        .and_then(Value::as_str)
        .ok_or_else(|| ToolEnvError::BadSpec(format!("tool {tool}: mutation needs op")))?;
    let path = obj
        .get("path")
        .and_then(Value::as_str)
        .ok_or_else(|| ToolEnvError::BadSpec(format!("tool {tool}: mutation needs path")))?
        .to_string();
    let val = obj
        .get("value")
        .cloned()
        .ok_or_else(|| ToolEnvError::BadSpec(format!("tool {tool}: mutation needs value")))?;
    match op {
        "set" => Ok(Mutation::Set { path, value: val }),
        "add" => Ok(Mutation::Add { path, value: val }),
        "sub" => Ok(Mutation::Sub { path, value: val }),
        "push" => Ok(Mutation::Push { path, value: val }),
        other => Err(ToolEnvError::BadSpec(format!(
            "tool {tool}: unknown mutation op {other:?}"
        ))),
    }
}

/// The whole simulated world as one JSON document plus a version counter
/// that advances on every committed mutation.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub doc: Value,
    pub version: u64,
}

impl EnvState {
    pub fn new(doc: Value) -> Self {
        Self { doc, version: 0 }
    }

    /// Canonical byte rendering; used in atomicity diff checks.
    pub fn serialize(&self) -> String {
        canon::to_string(&serde_json::json!({"doc": self.doc, "version": self.version}))
    }
}

/// Result of executing one tool call.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolResult {
    pub observation: Value,
    pub state_after: EnvState,
    pub mutated: bool,
}

/// Immutable collection of registered tools.
#[derive(Debug, Clone, Default)]
pub struct ToolRegistry {
    tools: BTreeMap<String, ToolSpec>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tools.keys()
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    /// Description blocks in stable name order.
    pub fn render_descriptions(&self) -> Vec<String> {
        self.tools.values().map(ToolSpec::render).collect()
    }
}

/// Add a tool to the registry.
pub fn register_tool(registry: &mut ToolRegistry, spec: ToolSpec) -> Result<(), ToolEnvError> {
    if registry.tools.contains_key(&spec.name) {
        return Err(ToolEnvError::DuplicateTool(spec.name));
    }
    registry.tools.insert(spec.name.clone(), spec);
    Ok(())
}

// ---------------------------------------------------------------------------
// Template resolution
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("unresolved reference {0}")]
    Unresolved(String),
}

/// Substitute `{args.x}` occurrences in a raw text (pointers included).
fn substitute_args_text(text: &str, args: &Value) -> Result<String, TemplateError> {
    let mut out = String::new();
    let mut rest = text;
    while let Some(start) = rest.find("{args.") {
        out.push_str(&rest[..start]);
        let tail = &rest[start + "{args.".len()..];
        let Some(end) = tail.find('}') else {
            return Err(TemplateError::Unresolved(rest[start..].to_string()));
        };
        let name = &tail[..end];
        let value = args
            .get(name)
            .ok_or_else(|| TemplateError::Unresolved(format!("{{args.{name}}}")))?;
        match value {
            Value::String(s) => out.push_str(s),
            other => out.push_str(&canon::to_string(other)),
        }
        rest = &tail[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Resolve one template string to a JSON value.
fn resolve_text(text: &str, args: &Value, state_doc: &Value) -> Result<Value, TemplateError> {
    // exact single arg placeholder: splice the raw value
    if let Some(name) = text
        .strip_prefix("{args.")
        .and_then(|t| t.strip_suffix('}'))
    {
        if !name.contains(['{', '}']) {
            return args
                .get(name)
                .cloned()
                .ok_or_else(|| TemplateError::Unresolved(format!("{{args.{name}}}")));
        }
    }
    // exact single state placeholder (args substituted inside the pointer)
    if let Some(ptr_text) = text
        .strip_prefix("{state.")
        .and_then(|t| t.strip_suffix('}'))
    {
        let ptr = substitute_args_text(ptr_text, args)?;
        if !ptr.contains(['{', '}']) {
            return state_doc
                .pointer(&ptr)
                .cloned()
                .ok_or_else(|| TemplateError::Unresolved(format!("{{state.{ptr}}}")));
        }
    }
    // interpolation: args first, then state references
    let text = substitute_args_text(text, args)?;
    let mut out = String::new();
    let mut rest = text.as_str();
    while let Some(start) = rest.find("{state.") {
        out.push_str(&rest[..start]);
        let tail = &rest[start + "{state.".len()..];
        let Some(end) = tail.find('}') else {
            return Err(TemplateError::Unresolved(rest[start..].to_string()));
        };
        let ptr = &tail[..end];
        let value = state_doc
            .pointer(ptr)
            .ok_or_else(|| TemplateError::Unresolved(format!("{{state.{ptr}}}")))?;
        match value {
            Value::String(s) => out.push_str(s),
            other => out.push_str(&canon::to_string(other)),
        }
        rest = &tail[end + 1..];
    }
    out.push_str(rest);
    Ok(Value::String(out))
}

/// Recursively resolve a template value.
fn resolve_template(template: &Value, args: &Value, state_doc: &Value) -> Result<Value, TemplateError> {
    match template {
        Value::String(text) => resolve_text(text, args, state_doc),
        Value::Array(items) => Ok(Value::Array(
            items
                .iter()
                .map(|item| resolve_template(item, args, state_doc))
                .collect::<Result<Vec<_>, _>>()?,
        )),
        Value::Object(map) => {
            let mut out = serde_json::Map::new();
            for (k, v) in map {
                out.insert(k.clone(), resolve_template(v, args, state_doc)?);
            }
            Ok(Value::Object(out))
        }
        other => Ok(other.clone()),
    }
}

/// Validate that a tool's templates only reference declared args and, for
/// static pointers, paths present in the given initial state. Dynamic
/// pointers (containing arg substitutions) are checked at execution.
pub fn validate_tool_templates(spec: &ToolSpec, initial_doc: &Value) -> Result<(), ToolEnvError> {
    let arg_fields: Vec<String> = match spec.arg_schema.root() {
        crate::intent::SchemaNode::Object(fields) => fields.keys().cloned().collect(),
        _ => Vec::new(),
    };
    let Behavior::Rules(rules) = &spec.behavior else {
        return Ok(());
    };
    let check_text = |text: &str| -> Result<(), ToolEnvError> {
        let mut rest = text;
        while let Some(start) = rest.find("{args.") {
            let tail = &rest[start + "{args.".len()..];
            let Some(end) = tail.find('}') else {
                return Err(ToolEnvError::BadSpec(format!(
                    "tool {}: unterminated placeholder in {text:?}",
                    spec.name
                )));
            };
            let name = &tail[..end];
            if !arg_fields.iter().any(|f| f == name) {
                return Err(ToolEnvError::BadSpec(format!(
                    "tool {}: template references undeclared arg {name:?}",
                    spec.name
                )));
            }
            rest = &tail[end + 1..];
        }
        let mut rest = text;
        while let Some(start) = rest.find("{state.") {
            let tail = &rest[start + "{state.".len()..];
            let Some(end) = tail.find('}') else {
                return Err(ToolEnvError::BadSpec(format!(
                    "tool {}: unterminated placeholder in {text:?}",
                    spec.name
                )));
            };
            let ptr = &tail[..end];
            if !ptr.contains('{') && initial_doc.pointer(ptr).is_none() {
                return Err(ToolEnvError::BadSpec(format!(
                    "tool {}: template references missing state path {ptr:?}",
                    spec.name
                )));
            }
            rest = &tail[end + 1..];
        }
        Ok(())
    };
    let check_value = |value: &Value| -> Result<(), ToolEnvError> {
        fn walk(v: &Value, f: &dyn Fn(&str) -> Result<(), ToolEnvError>) -> Result<(), ToolEnvError> {
            match v {
                Value::String(s) => f(s),
                Value::Array(items) => items.iter().try_for_each(|i| walk(i, f)),
                Value::Object(map) => map.values().try_for_each(|i| walk(i, f)),
                _ => Ok(()),
            }
        }
        walk(value, &check_text)
    };
    for rule in rules {
        check_value(&rule.output)?;
        for mutation in &rule.mutations {
            let (path, value) = match mutation {
                Mutation::Set { path, value }
                | Mutation::Add { path, value }
                | Mutation::Sub { path, value }
                | Mutation::Push { path, value } => (path, value),
            };
            check_text(path)?;
            check_value(value)?;
            if !path.contains('{') {
                let parent = parent_pointer(path);
                if initial_doc.pointer(&parent).is_none() {
                    return Err(ToolEnvError::BadSpec(format!(
                        "tool {}: mutation path {path:?} has no parent in initial state",
                        spec.name
                    )));
                }
            }
        }
    }
    Ok(())
}

fn parent_pointer(path: &str) -> String {
    match path.rfind('/') {
        Some(0) | None => String::new(),
        Some(idx) => path[..idx].to_string(),
    }
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

fn pattern_matches(pattern: &BTreeMap<String, Value>, args: &Value) -> bool {
    pattern.iter().all(|(key, expected)| match args.get(key) {
        None => false,
        Some(actual) => expected == &Value::String("*".into()) || actual == expected,
    })
}

fn numeric_add(target: &Value, amount: &Value, negate: bool) -> Result<Value, TemplateError> {
    let err = || TemplateError::Unresolved("numeric mutation on non-number".into());
    let (Some(_), Some(_)) = (target.as_f64(), amount.as_f64()) else {
        return Err(err());
    };
    if let (Some(a), Some(b)) = (target.as_i64(), amount.as_i64()) {
        let b = if negate { -b } else { b };
        return Ok(Value::from(a.checked_add(b).ok_or_else(err)?));
    }
    let a = target.as_f64().unwrap();
    let b = amount.as_f64().unwrap();
    Ok(Value::from(if negate { a - b } else { a + b }))
}

fn apply_mutation(doc: &mut Value, mutation: &Mutation, args: &Value, base: &Value) -> Result<(), TemplateError> {
    let (path_t, value_t, kind) = match mutation {
        Mutation::Set { path, value } => (path, value, 0),
        Mutation::Add { path, value } => (path, value, 1),
        Mutation::Sub { path, value } => (path, value, 2),
        Mutation::Push { path, value } => (path, value, 3),
    };
    let path = substitute_args_text(path_t, args)?;
    let value = resolve_template(value_t, args, base)?;
    match kind {
        0 => {
            let parent = parent_pointer(&path);
            let key = path.rsplit('/').next().unwrap_or("").to_string();
            let slot = doc
                .pointer_mut(&parent)
                .ok_or_else(|| TemplateError::Unresolved(format!("{{state.{parent}}}")))?;
            match slot {
                Value::Object(map) => {
                    map.insert(key, value);
                    Ok(())
                }
                Value::Array(items) => {
                    let idx: usize = key
                        .parse()
                        .map_err(|_| TemplateError::Unresolved(format!("{{state.{path}}}")))?;
                    if idx < items.len() {
                        items[idx] = value;
                        Ok(())
                    } else {
                        Err(TemplateError::Unresolved(format!("{{state.{path}}}")))
                    }
                }
                _ => Err(TemplateError::Unresolved(format!("{{state.{path}}}"))),
            }
        }
        1 | 2 => {
            let slot = doc
                .pointer_mut(&path)
                .ok_or_else(|| TemplateError::Unresolved(format!("{{state.{path}}}")))?;
            *slot = numeric_add(slot, &value, kind == 2)?;
            Ok(())
        }
        _ => {
            let slot = doc
                .pointer_mut(&path)
                .ok_or_else(|| TemplateError::Unresolved(format!("{{state.{path}}}")))?;
            match slot {
                Value::Array(items) => {
                    items.push(value);
                    Ok(())
                }
                _ => Err(TemplateError::Unresolved(format!("{{state.{path}}}"))),
            }
        }
    }
}

/// Execute a tool call against a state.
///
/// Mutations are atomic: the returned state either reflects the whole rule
/// or is byte-identical to the input. A call matching no rule yields a
/// tool-level error observation, not an error.
pub fn execute(
    registry: &ToolRegistry,
    tool: &str,
    args: &Value,
    state: &EnvState,
) -> Result<ToolResult, ToolEnvError> {
    let spec = registry
        .get(tool)
        .ok_or_else(|| ToolEnvError::ToolNotFound(tool.to_string()))?;

    if !args.is_object() {
        return Err(ToolEnvError::ArgType {
            tool: tool.to_string(),
            detail: "arguments must be a JSON object".into(),
        });
    }
    let report: ConformanceReport = crate::intent::conforms(args, &spec.arg_schema);
    if !report.acceptable(false) {
        return Err(ToolEnvError::ArgType {
            tool: tool.to_string(),
            detail: format!(
                "missing: {:?}, mismatched: {:?}",
                report.missing_fields, report.type_mismatches
            ),
        });
    }

    match &spec.behavior {
        Behavior::Builtin(name) => match name.as_str() {
            "echo" => Ok(ToolResult {
                observation: args.clone(),
                state_after: state.clone(),
                mutated: false,
            }),
            other => Err(ToolEnvError::BadSpec(format!("unknown builtin {other:?}"))),
        },
        Behavior::Rules(rules) => {
            let Some(rule) = rules.iter().find(|r| pattern_matches(&r.match_args, args)) else {
                return Ok(ToolResult {
                    observation: serde_json::json!({
                        "error": "no behavior rule matched",
                        "tool": tool,
                    }),
                    state_after: state.clone(),
                    mutated: false,
                });
            };
            let outcome = (|| -> Result<(Value, Value), TemplateError> {
                let observation = resolve_template(&rule.output, args, &state.doc)?;
                let mut doc = state.doc.clone();
                for mutation in &rule.mutations {
                    apply_mutation(&mut doc, mutation, args, &state.doc)?;
                }
                Ok((observation, doc))
            })();
            match outcome {
                Ok((observation, doc)) => {
                    let mutated = !rule.mutations.is_empty();
                    Ok(ToolResult {
                        observation,
                        state_after: EnvState {
                            doc,
                            version: if mutated { state.version + 1 } else { state.version },
                        },
                        mutated,
                    })
                }
                // template failures surface as tool-level error
                // observations and leave the state untouched
                Err(e) => Ok(ToolResult {
                    observation: serde_json::json!({
                        "error": format!("template error: {e}"),
                        "tool": tool,
                    }),
                    state_after: state.clone(),
                    mutated: false,
                }),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Command/query taxonomy
// ---------------------------------------------------------------------------

/// How a taxonomy was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaxonomyProvenance {
    RuleBased,
    ClassifierBacked,
    Manual,
}

impl TaxonomyProvenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaxonomyProvenance::RuleBased => "rule_based",
            TaxonomyProvenance::ClassifierBacked => "classifier_backed",
            TaxonomyProvenance::Manual => "manual",
        }
    }
}

/// Total command/query labeling over a registry; computed once per toolset
/// and reused for the whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolTaxonomy {
    labels: BTreeMap<String, CqLabel>,
    pub provenance: TaxonomyProvenance,
}

impl ToolTaxonomy {
    pub fn get(&self, tool: &str) -> Option<CqLabel> {
        self.labels.get(tool).copied()
    }

    pub fn is_command(&self, tool: &str) -> Option<bool> {
        self.get(tool).map(|l| l == CqLabel::Command)
    }

    pub fn to_value(&self) -> Value {
        let mut map = serde_json::Map::new();
        for (tool, label) in &self.labels {
            map.insert(tool.clone(), Value::String(label.as_str().into()));
        }
        serde_json::json!({
            "labels": Value::Object(map),
            "provenance": self.provenance.as_str(),
        })
    }
}

/// Label every tool in the registry.
///
/// Manual labels win; declarative behaviors are labeled by a static rule
/// pass (any declared mutation -> command, otherwise query); opaque tools
/// go to the classifier when one is provided. Anything still unresolved,
/// including classifier failures, is labeled command.
pub fn classify_tools(
    registry: &ToolRegistry,
    mut classifier: Option<Box<dyn PolicyBackend>>,
) -> ToolTaxonomy {
    let mut labels = BTreeMap::new();
    let mut manual = 0usize;
    let mut classified = 0usize;
    for name in registry.names() {
        let spec = registry.get(name).expect("registered");
        let label = match spec.label {
            ToolLabel::Command => {
                manual += 1;
                CqLabel::Command
            }
            ToolLabel::Query => {
                manual += 1;
                CqLabel::Query
            }
            ToolLabel::Unlabeled => match &spec.behavior {
                Behavior::Rules(_) => {
                    if spec.declares_mutations() {
                        CqLabel::Command
                    } else {
                        CqLabel::Query
                    }
                }
                Behavior::Builtin(_) => match classifier.as_mut() {
                    Some(backend) => {
                        classified += 1;
                        let prompt = classify_prompt(&serde_json::json!({
                            "tool": spec.name,
                            "description": spec.description,
                            "args": render_schema(&spec.arg_schema),
                        }));
                        match backend.next(&prompt) {
                            Ok(resp) => match resp.parsed {
                                ParsedAction::Label(LabelAnswer::Query) => CqLabel::Query,
                                // ambiguity and failure default to command
                                _ => CqLabel::Command,
                            },
                            Err(_) => CqLabel::Command,
                        }
                    }
                    None => CqLabel::Command,
                },
            },
        };
        labels.insert(name.clone(), label);
    }
    let provenance = if classified > 0 {
        TaxonomyProvenance::ClassifierBacked
    } else if manual == labels.len() && !labels.is_empty() {
        TaxonomyProvenance::Manual
    } else {
        TaxonomyProvenance::RuleBased
    };
    ToolTaxonomy { labels, provenance }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn bank_state() -> EnvState {
        EnvState::new(json!({"accounts": {"alice": 100, "bob": 5}}))
    }

    fn get_balance_spec() -> ToolSpec {
        ToolSpec::from_value(&json!({
            "name": "get_balance",
            "description": "read an account balance",
            "args": {"account": "string"},
            "rules": [
                {"match": {}, "output": "{state./accounts/{args.account}}"}
            ],
        }))
        .unwrap()
    }

    fn transfer_spec() -> ToolSpec {
        ToolSpec::from_value(&json!({
            "name": "transfer",
            "description": "move money between accounts",
            "args": {"to": "string", "amount": "number"},
            "rules": [{
                "match": {},
                "output": {"status": "transferred"},
                "mutations": [
                    {"op": "sub", "path": "/accounts/alice", "value": "{args.amount}"},
                    {"op": "add", "path": "/accounts/{args.to}", "value": "{args.amount}"},
                ],
            }],
        }))
        .unwrap()
    }

    fn registry() -> ToolRegistry {
        let mut reg = ToolRegistry::new();
        register_tool(&mut reg, get_balance_spec()).unwrap();
        register_tool(&mut reg, transfer_spec()).unwrap();
        reg
    }

    #[test]
    fn register_rejects_duplicates() {
        let mut reg = ToolRegistry::new();
        register_tool(&mut reg, get_balance_spec()).unwrap();
        assert!(reg.get("get_balance").is_some());
        assert_eq!(
            register_tool(&mut reg, get_balance_spec()),
            Err(ToolEnvError::DuplicateTool("get_balance".into()))
        );
    }

    #[test]
    fn descriptions_render_in_stable_name_order() {
        let reg = registry();
        let blocks = reg.render_descriptions();
        assert_eq!(blocks.len(), 2);
        let mut sorted = blocks.clone();
        sorted.sort();
        assert_eq!(blocks, sorted);
        assert!(blocks[0].starts_with("get_balance:"));
    }

    #[test]
    fn balance_template_resolves_from_state() {
        // oracle: /accounts/alice in the fixture doc is the number 100,
        // and a lone placeholder splices the raw value
        let result = execute(
            &registry(),
            "get_balance",
            &json!({"account": "alice"}),
            &bank_state(),
        )
        .unwrap();
        assert_eq!(result.observation, json!(100));
        assert_eq!(crate::canon::to_string(&result.observation), "100");
        assert!(!result.mutated);
        assert_eq!(result.state_after.version, 0);
    }

    #[test]
    fn transfer_applies_hand_computed_mutations() {
        // oracle: alice 100-30=70, bob 5+30=35, version bumps once
        let result = execute(
            &registry(),
            "transfer",
            &json!({"to": "bob", "amount": 30}),
            &bank_state(),
        )
        .unwrap();
        assert_eq!(result.state_after.doc, json!({"accounts": {"alice": 70, "bob": 35}}));
        assert!(result.mutated);
        assert_eq!(result.state_after.version, 1);
        assert_eq!(result.observation, json!({"status": "transferred"}));
    }

    #[test]
    fn unknown_tool_is_an_error() {
        let err = execute(&registry(), "send_fax", &json!({}), &bank_state()).unwrap_err();
        assert_eq!(err, ToolEnvError::ToolNotFound("send_fax".into()));
    }

    #[test]
    fn unmatched_rule_yields_error_observation_atomically() {
        let spec = ToolSpec::from_value(&json!({
            "name": "pick",
            "description": "",
            "args": {"which": "string"},
            "rules": [
                {"match": {"which": "a"}, "output": "A"},
            ],
        }))
        .unwrap();
        let mut reg = ToolRegistry::new();
        register_tool(&mut reg, spec).unwrap();
        let before = bank_state();
        let before_bytes = before.serialize();
        let result = execute(&reg, "pick", &json!({"which": "z"}), &before).unwrap();
        assert_eq!(result.observation["error"], json!("no behavior rule matched"));
        assert!(!result.mutated);
        assert_eq!(result.state_after.serialize(), before_bytes);
    }

    #[test]
    fn bad_args_are_rejected_without_state_change() {
        let before = bank_state();
        let before_bytes = before.serialize();
        let err = execute(&registry(), "transfer", &json!({"to": "bob"}), &before).unwrap_err();
        assert!(matches!(err, ToolEnvError::ArgType { .. }));
        assert_eq!(before.serialize(), before_bytes);
    }

    #[test]
    fn wildcard_and_literal_rule_matching() {
        let spec = ToolSpec::from_value(&json!({
            "name": "route",
            "description": "",
            "args": {"dest": "string"},
            "rules": [
                {"match": {"dest": "home"}, "output": "short"},
                {"match": {"dest": "*"}, "output": "long"},
            ],
        }))
        .unwrap();
        let mut reg = ToolRegistry::new();
        register_tool(&mut reg, spec).unwrap();
        let state = EnvState::new(json!({}));
        let a = execute(&reg, "route", &json!({"dest": "home"}), &state).unwrap();
        assert_eq!(a.observation, json!("short"));
        let b = execute(&reg, "route", &json!({"dest": "away"}), &state).unwrap();
        assert_eq!(b.observation, json!("long"));
    }

    #[test]
    fn classify_uses_rule_pass() {
        let mut reg = registry();
        register_tool(
            &mut reg,
            ToolSpec::from_value(&json!({
                "name": "mystery",
                "description": "opaque helper",
                "builtin": "echo",
            }))
            .unwrap(),
        )
        .unwrap();
        let taxonomy = classify_tools(&reg, None);
        assert_eq!(taxonomy.get("transfer"), Some(CqLabel::Command));
        assert_eq!(taxonomy.get("get_balance"), Some(CqLabel::Query));
        // opaque and unclassified defaults to command
        assert_eq!(taxonomy.get("mystery"), Some(CqLabel::Command));
        assert_eq!(taxonomy.provenance, TaxonomyProvenance::RuleBased);
    }

    #[test]
    fn classify_is_deterministic_and_stable() {
        let reg = registry();
        let a = classify_tools(&reg, None);
        let b = classify_tools(&reg, None);
        assert_eq!(a, b);
    }

    #[test]
    fn manual_labels_win() {
        let mut reg = ToolRegistry::new();
        register_tool(
            &mut reg,
            ToolSpec::from_value(&json!({
                "name": "weird_reader",
                "description": "flagged command by hand",
                "label": "command",
                "rules": [{"match": {}, "output": "x"}],
            }))
            .unwrap(),
        )
        .unwrap();
        let taxonomy = classify_tools(&reg, None);
        assert_eq!(taxonomy.get("weird_reader"), Some(CqLabel::Command));
        assert_eq!(taxonomy.provenance, TaxonomyProvenance::Manual);
    }

    #[test]
    fn template_validation_flags_bad_references() {
        let spec = ToolSpec::from_value(&json!({
            "name": "bad",
            "description": "",
            "args": {"x": "string"},
            "rules": [{"match": {}, "output": "{state./missing/path}"}],
        }))
        .unwrap();
        let err = validate_tool_templates(&spec, &json!({"accounts": {}})).unwrap_err();
        assert!(matches!(err, ToolEnvError::BadSpec(_)));

        let spec = ToolSpec::from_value(&json!({
            "name": "bad2",
            "description": "",
            "args": {"x": "string"},
            "rules": [{"match": {}, "output": "{args.y}"}],
        }))
        .unwrap();
        assert!(validate_tool_templates(&spec, &json!({})).is_err());

        assert!(validate_tool_templates(&get_balance_spec(), &bank_state().doc).is_ok());
    }

    mod prop {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // query purity: tools whose rules declare no mutations never
            // advance the state version, whatever the args
            #[test]
            fn query_tools_never_mutate(account in "[a-z]{1,8}") {
                let reg = registry();
                let state = bank_state();
                let result = execute(
                    &reg,
                    "get_balance",
                    &serde_json::json!({ "account": account }),
                    &state,
                )
                .unwrap();
                prop_assert_eq!(result.state_after.version, 0);
                prop_assert!(!result.mutated);
                prop_assert_eq!(result.state_after.serialize(), state.serialize());
            }
        }
    }
}
