//! Instruction-span removal from untrusted observations.
//!
//! The rule engine deletes spans matching a versioned pattern set
//! (imperative openers, role directives, policy-override phrases, tool-use
//! suggestions). Patterns are applied in passes until a pass removes
//! nothing, with removed spans reported in original-input byte coordinates.
//! An LLM-backed sanitizer can stand in behind the same report contract;
//! its output is accepted only when it is a strict subsequence of the
//! input (deletion-only), otherwise the pass degrades to a no-op.
//!
//! The sanitizer sees only the observation text: no query, no intent.

use std::path::Path;

use regex::RegexBuilder;
use serde_json::Value;
use thiserror::Error;

use crate::policy::{sanitizer_prompt, ParsedAction, PolicyBackend};

const DEFAULT_PATTERNS: &str = include_str!("../assets/sanitizer_patterns.json");

/// Passes cap; pathological pattern sets cannot loop forever.
const MAX_PASSES: usize = 8;

/// One removed byte range of the original input, with the matching rule id.
pub type RemovedSpan = (usize, usize, String);

/// Result of one sanitization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SanitizationReport {
    pub cleaned: String,
    /// Non-overlapping, sorted by start, in original-input coordinates.
    pub removed_spans: Vec<RemovedSpan>,
    pub passes: u32,
}

#[derive(Debug, Error)]
pub enum SanitizerError {
    #[error("bad pattern file: {0}")]
    BadPatterns(String),
}

struct CompiledRule {
    id: String,
    regex: regex::Regex,
}

/// Rule-based span-removal engine.
pub struct SanitizeEngine {
    rules: Vec<CompiledRule>,
}

impl SanitizeEngine {
    /// The shipped default pattern set.
    pub fn with_default_rules() -> Self {
        Self::from_json(DEFAULT_PATTERNS).expect("default patterns compile")
    }

    pub fn from_json(text: &str) -> Result<Self, SanitizerError> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| SanitizerError::BadPatterns(format!("not JSON: {e}")))?;
        Self::from_value(&value)
    }

    pub fn from_file(path: &Path) -> Result<Self, SanitizerError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SanitizerError::BadPatterns(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_value(value: &Value) -> Result<Self, SanitizerError> {
        let list = value
            .as_array()
            .ok_or_else(|| SanitizerError::BadPatterns("pattern file must be a list".into()))?;
        let mut rules = Vec::new();
        for (i, entry) in list.iter().enumerate() {
            let bad = |msg: String| SanitizerError::BadPatterns(format!("pattern {i}: {msg}"));
            let obj = entry
                .as_object()
                .ok_or_else(|| bad("must be an object".into()))?;
            let id = obj
                .get("id")
                .and_then(Value::as_str)
                .ok_or_else(|| bad("needs id".into()))?
                .to_string();
            let pattern = obj
                .get("pattern")
                .and_then(Value::as_str)
                .ok_or_else(|| bad("needs pattern".into()))?;
            let kind = obj.get("kind").and_then(Value::as_str).unwrap_or("regex");
            let case_insensitive = obj
                .get("case_insensitive")
                .and_then(Value::as_bool)
                .unwrap_or(false);
            let source = match kind {
                "regex" => pattern.to_string(),
                "phrase" => regex::escape(pattern),
                other => return Err(bad(format!("unknown kind {other:?}"))),
            };
            let regex = RegexBuilder::new(&source)
                .case_insensitive(case_insensitive)
                .build()
                .map_err(|e| bad(format!("bad regex: {e}")))?;
            rules.push(CompiledRule { id, regex });
        }
        Ok(Self { rules })
    }

    /// Delete instruction-like spans. Runs passes until a fixpoint (or the
    /// pass cap), so deletions that join text into a new match are caught.
    pub fn sanitize(&self, input: &str) -> SanitizationReport {
        // retained ranges of the original input, in order
        let mut segments: Vec<(usize, usize)> = if input.is_empty() {
            Vec::new()
        } else {
            vec![(0, input.len())]
        };
        let mut current = input.to_string();
        let mut removed: Vec<RemovedSpan> = Vec::new();
        let mut passes = 0u32;

        while (passes as usize) < MAX_PASSES {
            passes += 1;
            let mut matches: Vec<(usize, usize, &str)> = Vec::new();
            for rule in &self.rules {
                for m in rule.regex.find_iter(&current) {
                    if m.start() < m.end() {
                        matches.push((m.start(), m.end(), rule.id.as_str()));
                    }
                }
            }
            if matches.is_empty() {
                break;
            }
            // earliest-start wins; rule declaration order breaks ties
            matches.sort_by_key(|&(s, e, _)| (s, e));
            let mut kept: Vec<(usize, usize, String)> = Vec::new();
            let mut last_end = 0usize;
            for (s, e, id) in matches {
                if s >= last_end {
                    kept.push((s, e, id.to_string()));
                    last_end = e;
                }
            }
            remove_current_ranges(&mut segments, &kept, &mut removed);
            current = segments
                .iter()
                .map(|&(s, e)| &input[s..e])
                .collect::<String>();
        }

        removed.sort_by_key(|&(s, e, _)| (s, e));
        SanitizationReport {
            cleaned: current,
            removed_spans: removed,
            passes,
        }
    }
}

/// Map non-overlapping current-coordinate ranges onto original coordinates,
/// recording removals and shrinking the retained segments.
fn remove_current_ranges(
    segments: &mut Vec<(usize, usize)>,
    matches: &[(usize, usize, String)],
    removed: &mut Vec<RemovedSpan>,
) {
    let mut next_segments = Vec::new();
    let mut mi = 0usize;
    let mut cursor = 0usize; // current-coordinate start of the segment
    for &(orig_start, orig_end) in segments.iter() {
        let seg_len = orig_end - orig_start;
        let cur_start = cursor;
        let cur_end = cursor + seg_len;
        let mut keep_from = orig_start;
        while mi < matches.len() {
            let (ms, me, ref id) = matches[mi];
            if ms >= cur_end {
                break;
            }
            if me <= cur_start {
                mi += 1;
                continue;
            }
            let ov_start = ms.max(cur_start);
            let ov_end = me.min(cur_end);
            let del_start = orig_start + (ov_start - cur_start);
            let del_end = orig_start + (ov_end - cur_start);
            if del_start > keep_from {
                next_segments.push((keep_from, del_start));
            }
            removed.push((del_start, del_end, id.clone()));
            keep_from = del_end;
            if me <= cur_end {
                mi += 1;
            } else {
                break;
            }
        }
        if keep_from < orig_end {
            next_segments.push((keep_from, orig_end));
        }
        cursor = cur_end;
    }
    *segments = next_segments;
}

/// Remaining sanitize-restart units for one subtask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecoveryBudget {
    remaining: u32,
}

impl RecoveryBudget {
    pub fn new(units: u32) -> Self {
        Self { remaining: units }
    }

    pub fn remaining(&self) -> u32 {
        self.remaining
    }

    /// Consume one unit; false means the budget is exhausted.
    pub fn consume(&mut self) -> bool {
        if self.remaining == 0 {
            false
        } else {
            self.remaining -= 1;
            true
        }
    }
}

/// The sanitizer behind a run: the rule engine or a policy backend
/// honoring the same report contract.
pub enum Sanitizer {
    Rules(SanitizeEngine),
    Backend(Box<dyn PolicyBackend>),
}

impl Sanitizer {
    pub fn default_rules() -> Self {
        Sanitizer::Rules(SanitizeEngine::with_default_rules())
    }

    /// Run one sanitization; returns the report plus (tokens_in,
    /// tokens_out) spent when a backend did the work.
    pub fn sanitize(&mut self, input: &str) -> (SanitizationReport, u64, u64) {
        match self {
            Sanitizer::Rules(engine) => (engine.sanitize(input), 0, 0),
            Sanitizer::Backend(backend) => {
                let prompt = sanitizer_prompt(input);
                match backend.next(&prompt) {
                    Ok(resp) => {
                        let report = match resp.parsed {
                            ParsedAction::Cleaned(cleaned) => {
                                match subsequence_spans(input, &cleaned) {
                                    Some(spans) => SanitizationReport {
                                        cleaned,
                                        removed_spans: spans
                                            .into_iter()
                                            .map(|(s, e)| (s, e, "policy".to_string()))
                                            .collect(),
                                        passes: 1,
                                    },
                                    // not deletion-only: refuse the edit
                                    None => no_op(input),
                                }
                            }
                            _ => no_op(input),
                        };
                        (report, resp.tokens_in, resp.tokens_out)
                    }
                    Err(_) => (no_op(input), 0, 0),
                }
            }
        }
    }
}

fn no_op(input: &str) -> SanitizationReport {
    SanitizationReport {
        cleaned: input.to_string(),
        removed_spans: Vec::new(),
        passes: 1,
    }
}

/// Greedy alignment of `cleaned` as a subsequence of `input`; returns the
/// deleted ranges, or None when `cleaned` is not a subsequence.
fn subsequence_spans(input: &str, cleaned: &str) -> Option<Vec<(usize, usize)>> {
    let mut spans = Vec::new();
    let mut cleaned_chars = cleaned.char_indices().map(|(_, c)| c).peekable();
    let mut gap_start: Option<usize> = None;
    for (idx, ch) in input.char_indices() {
        if cleaned_chars.peek() == Some(&ch) {
            cleaned_chars.next();
            if let Some(start) = gap_start.take() {
                spans.push((start, idx));
            }
        } else if gap_start.is_none() {
            gap_start = Some(idx);
        }
    }
    if cleaned_chars.peek().is_some() {
        return None;
    }
    if let Some(start) = gap_start {
        spans.push((start, input.len()));
    }
    Some(spans)
}
