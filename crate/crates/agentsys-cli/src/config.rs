//! Effective configuration: flags override environment variables, which
//! override the JSON config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use agentsys::context::Mode;
use agentsys::harness::ConfigPatch;
use anyhow::{bail, Context, Result};
use serde_json::Value;

use crate::RunKnobs;

#[derive(Debug, Clone, Default)]
pub struct Effective {
    pub mode: Option<Mode>,
    pub seed: u64,
    pub seeds: u64,
    pub out: Option<PathBuf>,
    pub jobs: usize,
    pub policies: BTreeMap<String, String>,
    pub patch: ConfigPatch,
}

fn env_u64(name: &str) -> Option<u64> {
    std::env::var(name).ok().and_then(|v| v.parse().ok())
}

/// Merge config file < environment < flags.
pub fn effective(
    config_file: Option<&Path>,
    mode_flag: Option<&str>,
    seed_flag: Option<u64>,
    seeds_flag: Option<u64>,
    out_flag: Option<&Path>,
    jobs_flag: Option<usize>,
    knobs: &RunKnobs,
) -> Result<Effective> {
    let mut eff = Effective {
        seed: 0,
        seeds: 1,
        jobs: 1,
        ..Effective::default()
    };

    // config file layer
    if let Some(path) = config_file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let value: Value = serde_json::from_str(&text)
            .with_context(|| format!("config file {} is not JSON", path.display()))?;
        if let Some(mode) = value.get("mode").and_then(Value::as_str) {
            eff.mode = Some(parse_mode(mode)?);
        }
        if let Some(seed) = value.get("seed").and_then(Value::as_u64) {
            eff.seed = seed;
        }
        if let Some(seeds) = value.get("seeds").and_then(Value::as_u64) {
            eff.seeds = seeds;
        }
        if let Some(out) = value.get("out").and_then(Value::as_str) {
            eff.out = Some(PathBuf::from(out));
        }
        if let Some(jobs) = value.get("jobs").and_then(Value::as_u64) {
            eff.jobs = jobs as usize;
        }
        if let Some(policies) = value.get("policies").and_then(Value::as_object) {
            for (role, selector) in policies {
                let selector = selector
                    .as_str()
                    .context("config policies must map role -> selector string")?;
                eff.policies.insert(role.clone(), selector.to_string());
            }
        }
        if let Some(budget) = value.get("budget").and_then(Value::as_u64) {
            eff.patch.budget = Some(budget as u32);
        }
        if let Some(rounds) = value.get("max_rounds").and_then(Value::as_u64) {
            eff.patch.max_rounds = Some(rounds as u32);
        }
        if let Some(depth) = value.get("max_worker_depth").and_then(Value::as_u64) {
            eff.patch.max_worker_depth = Some(depth as u32);
        }
        if let Some(strict) = value.get("strict_intent").and_then(Value::as_bool) {
            eff.patch.strict_intent = Some(strict);
        }
        if let Some(preset) = value.get("preset").and_then(Value::as_str) {
            apply_preset(&mut eff.patch, preset)?;
        }
    }

    // environment layer
    if let Ok(mode) = std::env::var("AGENTSYS_MODE") {
        eff.mode = Some(parse_mode(&mode)?);
    }
    if let Some(seed) = env_u64("AGENTSYS_SEED") {
        eff.seed = seed;
    }
    if let Some(seeds) = env_u64("AGENTSYS_SEEDS") {
        eff.seeds = seeds;
    }
    if let Ok(out) = std::env::var("AGENTSYS_OUT") {
        eff.out = Some(PathBuf::from(out));
    }
    if let Some(jobs) = env_u64("AGENTSYS_JOBS") {
        eff.jobs = jobs as usize;
    }
    if let Some(budget) = env_u64("AGENTSYS_BUDGET") {
        eff.patch.budget = Some(budget as u32);
    }

    // flag layer
    if let Some(mode) = mode_flag {
        eff.mode = Some(parse_mode(mode)?);
    }
    if let Some(seed) = seed_flag {
        eff.seed = seed;
    }
    if let Some(seeds) = seeds_flag {
        eff.seeds = seeds;
    }
    if let Some(out) = out_flag {
        eff.out = Some(out.to_path_buf());
    }
    if let Some(jobs) = jobs_flag {
        eff.jobs = jobs;
    }
    if let Some(budget) = knobs.budget {
        eff.patch.budget = Some(budget);
    }
    if let Some(rounds) = knobs.max_rounds {
        eff.patch.max_rounds = Some(rounds);
    }
    if let Some(depth) = knobs.depth {
        eff.patch.max_worker_depth = Some(depth);
    }
    if knobs.strict {
        eff.patch.strict_intent = Some(true);
    }
    if let Some(preset) = &knobs.preset {
        apply_preset(&mut eff.patch, preset)?;
    }
    for entry in &knobs.policies {
        let (role, selector) = entry
            .split_once('=')
            .with_context(|| format!("bad --policy {entry:?}, want role=selector"))?;
        if !matches!(role, "main" | "worker" | "validator" | "sanitizer") {
            bail!("unknown policy role {role:?}");
        }
        eff.policies.insert(role.to_string(), selector.to_string());
    }

    Ok(eff)
}

pub fn parse_mode(text: &str) -> Result<Mode> {
    Mode::parse(text).with_context(|| format!("unknown mode {text:?}"))
}

pub fn parse_modes(text: &str) -> Result<Vec<Mode>> {
    match text {
        "both" => Ok(vec![Mode::Baseline, Mode::Isolated]),
        other => Ok(vec![parse_mode(other)?]),
    }
}

/// Ablation presets over the run config.
pub fn apply_preset(patch: &mut ConfigPatch, preset: &str) -> Result<()> {
    match preset {
        // skip validation and unconditionally sanitize before dispatch
        "no-validator" => {
            patch.validator_enabled = Some(false);
            patch.sanitize_all = Some(true);
        }
        // denials fail the subtask immediately
        "no-sanitizer" => {
            patch.sanitizer_enabled = Some(false);
        }
        // context isolation alone
        "isolation-only" => {
            patch.validator_enabled = Some(false);
            patch.sanitizer_enabled = Some(false);
        }
        other => bail!("unknown preset {other:?}"),
    }
    Ok(())
}
