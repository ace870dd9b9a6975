//! Injection placement: payloads are attached to tool observations at the
//! harness layer. Tool behaviors and the environment transition are never
//! modified; a placed injection leaves `state_after` byte-identical.

use serde_json::Value;

use crate::agent::ObservationTap;
use crate::canon;
use crate::toolenv::ToolResult;

use super::scenario::{InjectionSpec, Placement};

/// Apply a placement to an observation value.
pub(crate) fn apply_placement(observation: &Value, spec: &InjectionSpec) -> Value {
    match &spec.placement {
        Placement::Append => match observation {
            Value::String(s) => Value::String(format!("{s}{}", spec.payload)),
            other => Value::String(format!("{}{}", canon::to_string(other), spec.payload)),
        },
        Placement::Prepend => match observation {
            Value::String(s) => Value::String(format!("{}{s}", spec.payload)),
            other => Value::String(format!("{}{}", spec.payload, canon::to_string(other))),
        },
        Placement::FieldWrap(pointer) => {
            let mut out = observation.clone();
            if let Some(slot) = out.pointer_mut(pointer) {
                if let Value::String(s) = slot {
                    *slot = Value::String(format!("{s}{}", spec.payload));
                }
            }
            out
        }
    }
}

/// Apply one injection to a tool result when the round matches.
/// Environment state is untouched by construction.
pub fn place_injection(result: &ToolResult, spec: &InjectionSpec, round: u32) -> ToolResult {
    if !spec.round.matches(round) {
        return result.clone();
    }
    ToolResult {
        observation: apply_placement(&result.observation, spec),
        state_after: result.state_after.clone(),
        mutated: result.mutated,
    }
}

/// Observation tap holding the armed injection specs for a run. A benign
/// run simply carries an empty list.
pub struct Injector {
    specs: Vec<InjectionSpec>,
}

impl Injector {
    pub fn new(specs: Vec<InjectionSpec>) -> Self {
        Self { specs }
    }

    pub fn benign() -> Self {
        Self { specs: Vec::new() }
    }
}

impl ObservationTap for Injector {
    fn tap(&self, tool: &str, round: u32, observation: Value) -> Value {
        let mut observation = observation;
        for spec in &self.specs {
            if spec.target_tool == tool && spec.round.matches(round) {
                observation = apply_placement(&observation, spec);
            }
        }
        observation
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scenario::{Predicate, RoundMatch};
    use crate::toolenv::EnvState;
    use serde_json::json;

    fn spec(placement: Placement, round: RoundMatch) -> InjectionSpec {
        InjectionSpec {
            target_tool: "read_reviews".into(),
            round,
            payload: " EVIL tn_abc".into(),
            placement,
            taint_nonce: "tn_abc".into(),
            security_check: Predicate::ToolCalled {
                tool: "read_reviews".into(),
                args_subset: None,
            },
        }
    }

    fn result(observation: Value) -> ToolResult {
        ToolResult {
            observation,
            state_after: EnvState::new(json!({"reviews": ["good"]})),
            mutated: false,
        }
    }

    #[test]
    fn append_contaminates_string_observation() {
        let out = place_injection(
            &result(json!("Great phone!")),
            &spec(Placement::Append, RoundMatch::At(1)),
            1,
        );
        assert_eq!(out.observation, json!("Great phone! EVIL tn_abc"));
    }

    #[test]
    fn field_wrap_touches_only_that_field() {
        let obs = json!({"reviews": [{"text": "good", "stars": 5}, {"text": "bad", "stars": 1}]});
        let out = place_injection(
            &result(obs.clone()),
            &spec(Placement::FieldWrap("/reviews/0/text".into()), RoundMatch::Any),
            3,
        );
        // JSON diff oracle: only /reviews/0/text changes
        assert_eq!(
            out.observation.pointer("/reviews/0/text"),
            Some(&json!("good EVIL tn_abc"))
        );
        let mut restored = out.observation.clone();
        *restored.pointer_mut("/reviews/0/text").unwrap() = json!("good");
        assert_eq!(restored, obs);
    }

    #[test]
    fn round_mismatch_leaves_observation_unchanged() {
        let out = place_injection(
            &result(json!("text")),
            &spec(Placement::Append, RoundMatch::At(2)),
            1,
        );
        assert_eq!(out.observation, json!("text"));
    }

    #[test]
    fn environment_state_is_never_touched() {
        let before = result(json!("text"));
        let before_bytes = before.state_after.serialize();
        let out = place_injection(&before, &spec(Placement::Append, RoundMatch::Any), 1);
        assert_eq!(out.state_after.serialize(), before_bytes);
    }

    #[test]
    fn tap_applies_matching_specs_only() {
        let injector = Injector::new(vec![spec(Placement::Append, RoundMatch::At(2))]);
        let same = injector.tap("other_tool", 2, json!("x"));
        assert_eq!(same, json!("x"));
        let same = injector.tap("read_reviews", 1, json!("x"));
        assert_eq!(same, json!("x"));
        let hit = injector.tap("read_reviews", 2, json!("x"));
        assert_eq!(hit, json!("x EVIL tn_abc"));
    }
}
