//! `cdfuzz analyze`: load a fixture, replay it, fuzz the crypto-related
//! transactions and report defect findings.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use cdfuzz_core::analysis::{analyze, Analysis, AnalysisConfig};
use cdfuzz_core::oracles::{Defect, Finding};
use cdfuzz_core::replay::Fixture;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{Map, Value};

pub const EXIT_CLEAN: i32 = 0;
pub const EXIT_FINDINGS: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "cdfuzz", version, about = "Crypto-defect fuzzing of EVM contract histories")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Analyze a fixture and report findings.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
}

#[derive(Debug, clap::Args)]
pub struct AnalyzeArgs {
    /// Fixture JSON file.
    pub fixture: PathBuf,
    /// Extra ABIs (`{"0xaddr": [...]}`) merged over the fixture's.
    #[arg(long)]
    pub abi: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub max_seeds: usize,
    #[arg(long, default_value_t = 16)]
    pub cases_per_seed: usize,
    #[arg(long, default_value_t = 8)]
    pub replays: usize,
    #[arg(long, default_value_t = 0)]
    pub rng_seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated defect classes to check.
    #[arg(long, value_delimiter = ',', value_parser = parse_defect)]
    pub only: Option<Vec<Defect>>,
    /// Include wall-clock time in the report (makes output non-reproducible).
    #[arg(long)]
    pub timing: bool,
}

fn parse_defect(s: &str) -> Result<Defect, String> {
    s.parse()
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho {
    pub max_seeds: usize,
    pub cases_per_seed: usize,
    pub replays: usize,
    pub rng_seed: u64,
    pub only: Option<Vec<Defect>>,
    pub attacker_addresses: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedPoolStats {
    pub seeds: usize,
    pub selectors: Vec<String>,
    pub crypto_apis: Vec<cdfuzz_core::evm::CryptoApi>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Incomplete {
    pub stubbed_precompiles: Vec<u8>,
    pub taint_desyncs: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContractReport {
    pub address: String,
    pub findings: Vec<Finding>,
    /// Findings matched by a mitigation pattern; not counted as defects.
    pub suppressed: Vec<Finding>,
    pub seed_pool: SeedPoolStats,
    pub cases_executed: usize,
    pub incomplete_analysis: Incomplete,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub tool_version: String,
    pub fixture_path: String,
    pub config: ConfigEcho,
    pub contracts: Vec<ContractReport>,
    /// Active findings of every contract, in contract order.
    pub findings: Vec<Finding>,
    pub suppressed: Vec<Finding>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<u64>,
}

pub fn build_report(fixture_path: &Path, cfg: &AnalysisConfig, analysis: &Analysis, wall_clock_ms: Option<u64>) -> Report {
    let contracts: Vec<ContractReport> = analysis
        .contracts
        .iter()
        .map(|c| ContractReport {
            address: c.address.to_string(),
            findings: c.findings.iter().filter(|f| f.is_active()).cloned().collect(),
            suppressed: c.findings.iter().filter(|f| !f.is_active()).cloned().collect(),
            seed_pool: SeedPoolStats {
                seeds: c.seeds,
                selectors: c.selectors.iter().map(|s| format!("0x{}", hex(s))).collect(),
                crypto_apis: c.crypto_apis.iter().copied().collect(),
            },
            cases_executed: c.cases_executed,
            incomplete_analysis: Incomplete {
                stubbed_precompiles: c.stubbed_precompiles.iter().copied().collect(),
                taint_desyncs: c.taint_desyncs,
            },
        })
        .collect();
    Report {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        fixture_path: fixture_path.display().to_string(),
        config: ConfigEcho {
            max_seeds: cfg.max_seeds,
            cases_per_seed: cfg.fuzz.max_cases_per_seed,
            replays: cfg.fuzz.replay_repetitions,
            rng_seed: cfg.fuzz.rng_seed,
            only: cfg.only.as_ref().map(|o| o.iter().copied().collect()),
            attacker_addresses: cfg.fuzz.attacker_addresses.iter().map(|a| a.to_string()).collect(),
        },
        findings: contracts.iter().flat_map(|c| c.findings.iter().cloned()).collect(),
        suppressed: contracts.iter().flat_map(|c| c.suppressed.iter().cloned()).collect(),
        contracts,
        wall_clock_ms,
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Rebuilds every object with keys inserted in sorted order.
pub fn canonical(v: Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut entries: Vec<(String, Value)> = m.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, canonical(v))).collect::<Map<_, _>>())
        }
        Value::Array(a) => Value::Array(a.into_iter().map(canonical).collect()),
        other => other,
    }
}

/// Canonical JSON text: sorted keys, two-space indent, trailing newline.
pub fn to_canonical_json(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(&canonical(v.clone())).expect("JSON values serialize");
    s.push('\n');
    s
}

pub fn render_report(report: &Report, format: Format) -> String {
    match format {
        Format::Json => to_canonical_json(&serde_json::to_value(report).expect("report serializes")),
        Format::Text => report
            .findings
            .iter()
            .map(|f| format!("{} {} {} {}\n", f.defect, f.contract, f.selector_hex(), f.evidence.case_id))
            .collect(),
    }
}

/// Writes the rendered report and returns the byte count.
pub fn emit_report(report: &Report, format: Format, out: &mut dyn Write) -> io::Result<usize> {
    let text = render_report(report, format);
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(text.len())
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_CLEAN };
            let _ = if e.use_stderr() { write!(stderr, "{e}") } else { write!(stdout, "{e}") };
            return code;
        }
    };
    match cli.command {
        Command::Analyze(args) => run_analyze(&args, stdout, stderr),
    }
}

fn run_analyze(args: &AnalyzeArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let started = Instant::now();
    let mut fixture = match Fixture::load(&args.fixture) {
        Ok(f) => f,
        Err(e) => {
            let _ = writeln!(stderr, "error: {}: {e}", args.fixture.display());
            return EXIT_USAGE;
        }
    };
    if let Some(abi_path) = &args.abi {
        let merged = std::fs::read_to_string(abi_path)
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str::<Value>(&t).map_err(|e| e.to_string()))
            .and_then(|v| fixture.merge_abis(&v).map_err(|e| e.to_string()));
        if let Err(e) = merged {
            let _ = writeln!(stderr, "error: {}: {e}", abi_path.display());
            return EXIT_USAGE;
        }
    }

    let mut cfg = AnalysisConfig::for_fixture(&fixture);
    cfg.max_seeds = args.max_seeds;
    cfg.fuzz.max_cases_per_seed = args.cases_per_seed;
    cfg.fuzz.replay_repetitions = args.replays;
    cfg.fuzz.rng_seed = args.rng_seed;
    cfg.only = args.only.as_ref().map(|o| o.iter().copied().collect::<BTreeSet<_>>());

    let analysis = match analyze(&fixture, &cfg) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(stderr, "internal error: {e}");
            return EXIT_INTERNAL;
        }
    };
    for c in &analysis.contracts {
        if !c.stubbed_precompiles.is_empty() {
            let _ = writeln!(stderr, "warning: {}: analysis incomplete, stubbed precompiles {:?} reached", c.address, c.stubbed_precompiles);
        }
    }
    let elapsed = args.timing.then(|| started.elapsed().as_millis() as u64);
    let report = build_report(&args.fixture, &cfg, &analysis, elapsed);

    let written = match &args.out {
        Some(path) => std::fs::File::create(path).and_then(|mut f| emit_report(&report, args.format, &mut f)),
        None => emit_report(&report, args.format, stdout),
    };
    if let Err(e) = written {
        let target = args.out.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "stdout".into());
        let _ = writeln!(stderr, "error: cannot write {target}: {e}");
        return EXIT_USAGE;
    }
    if !report.findings.is_empty() {
        EXIT_FINDINGS
    } else {
        EXIT_CLEAN
    }
}
