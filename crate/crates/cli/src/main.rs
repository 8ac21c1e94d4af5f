//! Operator entry point for the privacy-by-design pipelines.
//!
//! `pbd run` drives one of the scripted scenarios — `ehr` (hospital
//! imaging), `dbt` (benefit transfer across five authorities), or `ct`
//! (contact tracing) — from a line-oriented config file, judges every
//! step against the script's expectation, and emits a deterministic
//! report: same config and seed, same bytes. `pbd audit-verify` re-checks
//! a serialized audit chain and names the first entry that cannot be
//! trusted.
//!
//! Exit codes: 0 all expectations met, 1 an expectation or invariant
//! failed (or a chain did not verify), 2 the run could not start.

use clap::{Args, Parser, Subcommand};
use pbd_core::crypto::hash::Digest;
use pbd_core::regulator::audit;
use pbd_core::regulator::review_manifest;
use pbd_core::scenarios::{self, ScenarioConfig, ScenarioReport};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pbd", version, about = "Run privacy-pipeline scenarios and verify audit chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scripted scenario and report every decision
    Run(RunArgs),
    /// Verify a serialized audit chain, reporting the first bad entry
    AuditVerify(AuditVerifyArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario to drive: ehr, dbt, or ct (alias: contact-tracing)
    #[arg(long)]
    scenario: String,
    /// Scenario script (line-oriented parameters and steps)
    #[arg(long)]
    config: PathBuf,
    /// Every random choice in the run flows from this seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace the scenario's built-in rule set with this rule file
    /// (single-authority scenarios: ehr and ct)
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Review extra TE manifests (blank-line separated) through the
    /// regulator's structural checks before running; any rejection aborts
    #[arg(long)]
    manifests: Option<PathBuf>,
    /// Write each authority's audit chain to this path (suffixed with the
    /// authority name when the scenario has several)
    #[arg(long)]
    audit_out: Option<PathBuf>,
    /// Write the report here instead of standard output
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditVerifyArgs {
    /// Serialized audit chain, one entry per line
    log: PathBuf,
    /// Published head hash (hex); with --len, also catches tail truncation
    #[arg(long, requires = "len")]
    head: Option<String>,
    /// Published entry count the chain must have
    #[arg(long, requires = "head")]
    len: Option<usize>,
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run(args) => run_cmd(&args),
        Command::AuditVerify(args) => audit_verify_cmd(&args),
    }
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

fn run_cmd(args: &RunArgs) -> ExitCode {
    let report = match prepare_and_run(args) {
        Ok(report) => report,
        Err(message) => {
            eprintln!("pbd: {message}");
            return ExitCode::from(2);
        }
    };
    if let Err(message) = write_outputs(args, &report) {
        eprintln!("pbd: {message}");
        return ExitCode::from(2);
    }
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn prepare_and_run(args: &RunArgs) -> Result<ScenarioReport, String> {
    let scenario = normalize_scenario(&args.scenario)?;

    if let Some(path) = &args.manifests {
        review_manifest_file(path)?;
    }

    let text = fs::read_to_string(&args.config)
        .map_err(|e| format!("{}: {e}", args.config.display()))?;
    let mut config = ScenarioConfig::parse(&text).map_err(|e| e.to_string())?;
    if config.scenario == "contact-tracing" {
        config.scenario = "ct".to_string();
    }
    if config.scenario != scenario {
        return Err(format!(
            "--scenario {} but the config names scenario {}",
            scenario, config.scenario
        ));
    }

    let rules = args
        .rules
        .as_ref()
        .map(|p| fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display())))
        .transpose()?;

    let result = match scenario.as_str() {
        "ehr" => scenarios::ehr::run_with_rules(&config, args.seed, rules.as_deref()),
        "ct" => scenarios::ct::run_with_rules(&config, args.seed, rules.as_deref()),
        "dbt" => {
            if rules.is_some() {
                return Err(
                    "dbt policy is federated across five authorities; --rules is not supported"
                        .to_string(),
                );
            }
            scenarios::dbt::run(&config, args.seed)
        }
        _ => unreachable!("normalize_scenario admits only known names"),
    };
    result.map_err(|e| e.to_string())
}

fn normalize_scenario(name: &str) -> Result<String, String> {
    match name {
        "ehr" | "dbt" | "ct" => Ok(name.to_string()),
        "contact-tracing" => Ok("ct".to_string()),
        other => Err(format!("unknown scenario {other:?} (expected ehr, dbt, or ct)")),
    }
}

/// Puts every blank-line-separated manifest in the file through the same
/// structural review a regulator applies at approval time.
fn review_manifest_file(path: &Path) -> Result<(), String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut blocks = Vec::new();
    let mut current = String::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                blocks.push(std::mem::take(&mut current));
            }
        } else {
            current.push_str(line);
            current.push('\n');
        }
    }
    if !current.is_empty() {
        blocks.push(current);
    }
    if blocks.is_empty() {
        return Err(format!("{}: no manifests found", path.display()));
    }
    for (i, block) in blocks.iter().enumerate() {
        review_manifest(block)
            .map_err(|e| format!("{}: manifest {}: {e}", path.display(), i + 1))?;
    }
    eprintln!("pbd: reviewed {} manifest(s): all pass", blocks.len());
    Ok(())
}

fn write_outputs(args: &RunArgs, report: &ScenarioReport) -> Result<(), String> {
    if let Some(base) = &args.audit_out {
        let many = report.audits.len() > 1;
        for (name, text) in &report.audits {
            let path = audit_path(base, name, many);
            fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display()))?;
        }
    }
    let text = report.to_text();
    match &args.report_out {
        Some(path) => fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

/// `audit.log` for a single authority; `audit-r1-payments.log` and so on
/// when the scenario has several.
fn audit_path(base: &Path, name: &str, many: bool) -> PathBuf {
    if !many {
        return base.to_path_buf();
    }
    let stem = base.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    let ext = base
        .extension()
        .map(|e| format!(".{}", e.to_string_lossy()))
        .unwrap_or_default();
    base.with_file_name(format!("{stem}-{name}{ext}"))
}

// ---------------------------------------------------------------------------
// audit-verify
// ---------------------------------------------------------------------------

fn audit_verify_cmd(args: &AuditVerifyArgs) -> ExitCode {
    let text = match fs::read_to_string(&args.log) {
        Ok(text) => text,
        Err(e) => {
            eprintln!("pbd: {}: {e}", args.log.display());
            return ExitCode::from(2);
        }
    };
    let verified = match (&args.head, args.len) {
        (Some(head_hex), Some(len)) => {
            let Some(head) = Digest::from_hex(head_hex) else {
                eprintln!("pbd: --head is not a hex digest");
                return ExitCode::from(2);
            };
            audit::verify_against_head(&text, &head, len)
        }
        _ => audit::verify_text(&text),
    };
    match verified {
        Ok(entries) => {
            println!("ok ({} entries)", entries.len());
            ExitCode::SUCCESS
        }
        Err(violation) => {
            println!("first-bad-entry {}: {}", violation.first_bad, violation.reason);
            ExitCode::from(1)
        }
    }
}
