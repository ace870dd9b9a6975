//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use agentsys::context::Mode;
use agentsys::harness::{
    aggregate_metrics, load_scenario, overhead_report, run_scenario, run_suite, RunTask, Scenario,
};
use agentsys::policy::Selector;
use agentsys::record::RunRecord;
use agentsys::toolenv::{classify_tools, register_tool, ToolRegistry, ToolSpec};
use anyhow::{bail, Context, Result};
use serde_json::Value;

use crate::config::{self, Effective};
use crate::{Cli, Command};

pub fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Run {
            scenario,
            mode,
            seed,
            out,
            knobs,
        } => {
            let eff = config::effective(
                cli.config.as_deref(),
                mode.as_deref(),
                seed,
                None,
                out.as_deref(),
                None,
                &knobs,
            )?;
            run_one(&scenario, &eff)
        }
        Command::Bench {
            suite,
            modes,
            seeds,
            report,
            out,
            jobs,
            knobs,
        } => {
            let eff = config::effective(
                cli.config.as_deref(),
                None,
                None,
                seeds,
                out.as_deref(),
                jobs,
                &knobs,
            )?;
            bench(&suite, &modes, report.as_deref(), &eff)
        }
        Command::Classify { tools, classifier } => classify(&tools, classifier.as_deref()),
        Command::Report { input, format } => report_cmd(&input, &format),
    }
}

fn apply_policy_overrides(scenario: &mut Scenario, eff: &Effective) {
    for (role, selector) in &eff.policies {
        scenario
            .policy_script_refs
            .insert(role.clone(), selector.clone());
    }
}

fn record_path(out: &Path, record: &RunRecord) -> PathBuf {
    let arm = match record.attack {
        None => "benign".to_string(),
        Some(i) => format!("attack{i}"),
    };
    out.join(format!(
        "{}_{}_{}_{}.jsonl",
        record.scenario_id,
        record.mode.as_str(),
        record.seed,
        arm
    ))
}

fn write_record(out: Option<&Path>, record: &RunRecord) -> Result<()> {
    let Some(out) = out else { return Ok(()) };
    fs::create_dir_all(out)
        .with_context(|| format!("cannot create output dir {}", out.display()))?;
    let path = record_path(out, record);
    fs::write(&path, record.to_jsonl())
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn run_one(scenario_path: &Path, eff: &Effective) -> Result<u8> {
    let mut scenario = load_scenario(scenario_path).map_err(anyhow::Error::new)?;
    apply_policy_overrides(&mut scenario, eff);
    let mode = eff.mode.unwrap_or(Mode::Isolated);

    let mut arms: Vec<Option<usize>> = vec![None];
    arms.extend((0..scenario.injections.len()).map(Some));
    for attack in arms {
        let record = run_scenario(&scenario, mode, eff.seed, attack, &eff.patch)
            .map_err(anyhow::Error::new)?;
        write_record(eff.out.as_deref(), &record)?;
        let arm = match attack {
            None => "benign".to_string(),
            Some(i) => format!("attack {i}"),
        };
        println!(
            "{} {} seed {} [{}]: rounds={} utility={} security={} tokens={} validator_calls={} sanitize_calls={}",
            record.scenario_id,
            record.mode.as_str(),
            record.seed,
            arm,
            record.rounds,
            record.utility_met,
            record.security_met,
            record.total_tokens(),
            record.validator_invocations,
            record.sanitize_invocations,
        );
    }
    Ok(0)
}

fn bench(suite_dir: &Path, modes: &str, report: Option<&Path>, eff: &Effective) -> Result<u8> {
    let modes = config::parse_modes(modes)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(suite_dir)
        .with_context(|| format!("cannot read suite dir {}", suite_dir.display()))?
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            (path.is_file() && path.extension().map(|e| e == "json").unwrap_or(false))
                .then_some(path)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("suite dir {} holds no scenario files", suite_dir.display());
    }
    let mut scenarios = Vec::new();
    for path in &paths {
        let mut scenario = load_scenario(path).map_err(anyhow::Error::new)?;
        apply_policy_overrides(&mut scenario, eff);
        scenarios.push(scenario);
    }

    let seeds: Vec<u64> = (0..eff.seeds.max(1)).collect();
    let outcome = run_suite(&scenarios, &modes, &seeds, eff.jobs, &eff.patch);

    for (_, record) in &outcome.records {
        write_record(eff.out.as_deref(), record)?;
    }

    let mut report_value = outcome.to_value();
    let overhead: Vec<Value> = overhead_report(&outcome.records)
        .into_iter()
        .map(|row| {
            serde_json::json!({
                "mode": row.mode,
                "trajectory_len": row.trajectory_len,
                "runs": row.runs,
                "tokens": row.tokens,
                "validator_calls": row.validator_calls,
                "sanitize_calls": row.sanitize_calls,
                "consistent": row.consistent,
            })
        })
        .collect();
    report_value["overhead"] = Value::Array(overhead);

    if let Some(path) = report {
        let rendered = if path.extension().map(|e| e == "csv").unwrap_or(false) {
            outcome.to_csv()
        } else {
            agentsys::canon::to_string(&report_value)
        };
        fs::write(path, rendered)
            .with_context(|| format!("cannot write report {}", path.display()))?;
    }

    for metrics in outcome.metrics.values() {
        println!(
            "{}: benign_utility={:.2}% attacked_utility={:.2}% asr={:.2}% defense_quality={:.2} tokens={}",
            metrics.mode,
            metrics.benign_utility,
            metrics.attacked_utility,
            metrics.asr,
            metrics.defense_quality,
            metrics.tokens_total,
        );
    }
    if outcome.failures > 0 {
        eprintln!("{} of {} runs failed", outcome.failures, outcome.records.len());
        return Ok(2);
    }
    Ok(0)
}

fn classify(tools_path: &Path, classifier: Option<&str>) -> Result<u8> {
    let text = fs::read_to_string(tools_path)
        .with_context(|| format!("cannot read {}", tools_path.display()))?;
    let value: Value = serde_json::from_str(&text)
        .with_context(|| format!("{} is not JSON", tools_path.display()))?;
    let list = value
        .get("tools")
        .and_then(Value::as_array)
        .or_else(|| value.as_array())
        .context("tools file must be a list or {\"tools\": [...]}")?;
    let mut registry = ToolRegistry::new();
    for spec in list {
        let spec = ToolSpec::from_value(spec).map_err(anyhow::Error::new)?;
        register_tool(&mut registry, spec).map_err(anyhow::Error::new)?;
    }
    let base_dir = tools_path.parent().unwrap_or(Path::new("."));
    let backend = match classifier {
        Some(selector) => Some(
            Selector::parse(selector)
                .map_err(anyhow::Error::new)?
                .build(base_dir, 0)
                .map_err(anyhow::Error::new)?,
        ),
        None => None,
    };
    let taxonomy = classify_tools(&registry, backend);
    println!("{}", agentsys::canon::to_string(&taxonomy.to_value()));
    Ok(0)
}

fn report_cmd(input: &Path, format: &str) -> Result<u8> {
    let mut paths: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("cannot read {}", input.display()))?
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            (path.extension().map(|e| e == "jsonl").unwrap_or(false)).then_some(path)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no run records in {}", input.display());
    }
    let mut records = Vec::new();
    for path in &paths {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        let record = RunRecord::from_jsonl(&text)
            .with_context(|| format!("cannot parse {}", path.display()))?;
        let task = RunTask {
            scenario_id: record.scenario_id.clone(),
            mode: record.mode,
            seed: record.seed,
            attack: record.attack,
        };
        records.push((task, record));
    }
    let metrics = aggregate_metrics(&records);
    match format {
        "json" => {
            let value: serde_json::Map<String, Value> = metrics
                .iter()
                .map(|(mode, m)| (mode.clone(), m.to_value()))
                .collect();
            println!("{}", agentsys::canon::to_string(&Value::Object(value)));
        }
        "csv" => {
            println!(
                "mode,benign_runs,attacked_runs,benign_utility,attacked_utility,asr,defense_quality,tokens_total"
            );
            for m in metrics.values() {
                println!(
                    "{},{},{},{:.4},{:.4},{:.4},{:.4},{}",
                    m.mode,
                    m.benign_runs,
                    m.attacked_runs,
                    m.benign_utility,
                    m.attacked_utility,
                    m.asr,
                    m.defense_quality,
                    m.tokens_total
                );
            }
        }
        "md" => {
            println!("| mode | benign utility | attacked utility | asr | defense quality | tokens |");
            println!("|---|---|---|---|---|---|");
            for m in metrics.values() {
                println!(
                    "| {} | {:.2}% | {:.2}% | {:.2}% | {:.2} | {} |",
                    m.mode,
                    m.benign_utility,
                    m.attacked_utility,
                    m.asr,
                    m.defense_quality,
                    m.tokens_total
                );
            }
        }
        other => bail!("unknown report format {other:?}"),
    }
    Ok(0)
}
