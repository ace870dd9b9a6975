//! Compact tool-call metadata trace.
//!
//! The stack records which tools were called with which arguments and under
//! which declared intent. It deliberately has no field for tool outputs:
//! everything a validator later sees from here is call metadata, never
//! observation text.

use serde_json::Value;
use thiserror::Error;

use crate::canon;

/// Cap on the canonical argument rendering stored per entry.
pub const MAX_ARGS_DIGEST: usize = 2048;

/// Metadata for one tool call: tool id, canonical JSON of the arguments,
/// and the rendered intent schema (when one was declared).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackEntry {
    pub tool: String,
    pub args_digest: String,
    pub intent: Option<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StackError {
    #[error("stack entry args digest is {got} bytes, cap is {MAX_ARGS_DIGEST}")]
    EntryTooLarge { got: usize },
}

impl StackEntry {
    pub fn new(tool: &str, args: &Value, intent: Option<String>) -> Result<Self, StackError> {
        let args_digest = canon::to_string(args);
        if args_digest.len() > MAX_ARGS_DIGEST {
            return Err(StackError::EntryTooLarge {
                got: args_digest.len(),
            });
        }
        Ok(Self {
            tool: tool.to_string(),
            args_digest,
            intent,
        })
    }

    pub fn to_value(&self) -> Value {
        serde_json::json!({
            "tool": self.tool,
            "args_digest": self.args_digest,
            "intent": self.intent,
        })
    }

    /// Arguments parsed back out of the canonical digest.
    pub fn args(&self) -> Value {
        serde_json::from_str(&self.args_digest).unwrap_or(Value::Null)
    }
}

/// Append-only sequence of stack entries.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CallStack {
    entries: Vec<StackEntry>,
}

impl CallStack {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[StackEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_value(&self) -> Value {
        Value::Array(self.entries.iter().map(StackEntry::to_value).collect())
    }
}

/// Return a stack extended by one entry; prior entries are untouched.
pub fn push_stack(stack: &CallStack, entry: StackEntry) -> CallStack {
    let mut next = stack.clone();
    next.entries.push(entry);
    next
}
