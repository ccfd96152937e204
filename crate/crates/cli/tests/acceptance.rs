//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero when any
//! criterion fails.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use cdfuzz::{build_report, render_report, to_canonical_json, Format};
use cdfuzz_core::analysis::{analyze, reconfirm, Analysis, AnalysisConfig};
use cdfuzz_core::replay::Fixture;
use cdfuzz_corpus::checks::{self, Check};
use cdfuzz_corpus::{EXPECTED, MITIGATED};

fn fixture_path(name: &str) -> PathBuf {
    cdfuzz_corpus::fixtures_dir().join(format!("{name}.json"))
}

struct Run {
    name: &'static str,
    fixture: Fixture,
    cfg: AnalysisConfig,
    analysis: Analysis,
    elapsed: Duration,
}

fn run_corpus() -> Result<Vec<Run>, String> {
    EXPECTED
        .iter()
        .map(|(name, _)| {
            let fixture = Fixture::load(&fixture_path(name)).map_err(|e| format!("{name}: {e}"))?;
            let cfg = AnalysisConfig::for_fixture(&fixture);
            let start = Instant::now();
            let analysis = analyze(&fixture, &cfg).map_err(|e| format!("{name}: {e}"))?;
            Ok(Run { name, fixture, cfg, analysis, elapsed: start.elapsed() })
        })
        .collect()
}

fn active(run: &Run) -> BTreeSet<String> {
    run.analysis.active_findings().map(|f| f.defect.to_string()).collect()
}

fn corpus_exactness(runs: &[Run]) -> Check {
    let mut wrong = Vec::new();
    for (run, (_, expected)) in runs.iter().zip(EXPECTED) {
        let want: BTreeSet<String> = expected.iter().map(|s| s.to_string()).collect();
        let got = active(run);
        if got != want {
            wrong.push(format!("{}: expected {want:?}, got {got:?}", run.name));
        }
    }
    if wrong.is_empty() {
        Ok(format!("{} fixtures match their expected labels", runs.len()))
    } else {
        Err(wrong.join("; "))
    }
}

fn negative_variants(runs: &[Run]) -> Check {
    let mut wrong = Vec::new();
    for (name, mitigated) in MITIGATED {
        let run = runs.iter().find(|r| r.name == *name).ok_or(format!("no run for {name}"))?;
        let got = active(run);
        for m in mitigated.iter().filter(|m| got.contains(**m)) {
            wrong.push(format!("{name} still reports {m}"));
        }
    }
    if wrong.is_empty() {
        Ok(format!("{} mitigated variants clean", MITIGATED.len()))
    } else {
        Err(wrong.join("; "))
    }
}

fn malleability_and_sm(runs: &[Run]) -> Check {
    let prop = checks::malleability(100)?;
    let sm = |name: &str| runs.iter().find(|r| r.name == name).map(|r| active(r).contains("SM"));
    match (sm("fig4_transfer_with_sig"), sm("guarded_transfer_with_sig")) {
        (Some(true), Some(false)) => Ok(format!("{prop}; SM on unguarded, none on guarded")),
        other => Err(format!("SM unguarded/guarded = {other:?}")),
    }
}

fn determinism(runs: &[Run]) -> Check {
    for run in runs {
        let path = fixture_path(run.name);
        let first = render_report(&build_report(&path, &run.cfg, &run.analysis, None), Format::Json);
        let again = analyze(&run.fixture, &run.cfg).map_err(|e| e.to_string())?;
        let second = render_report(&build_report(&path, &run.cfg, &again, None), Format::Json);
        if first != second {
            return Err(format!("{}: two runs differ", run.name));
        }
        let parsed: serde_json::Value = serde_json::from_str(&first).map_err(|e| e.to_string())?;
        if to_canonical_json(&parsed) != first {
            return Err(format!("{}: JSON does not round-trip", run.name));
        }
        if run.analysis.active_findings().next().is_none() && parsed["findings"] != serde_json::json!([]) {
            return Err(format!("{}: empty report lacks \"findings\": []", run.name));
        }
    }
    Ok(format!("{} reports byte-identical across runs and round-trip", runs.len()))
}

fn timing(runs: &[Run]) -> Check {
    let total: Duration = runs.iter().map(|r| r.elapsed).sum();
    if runs.len() >= 12 && total < Duration::from_secs(60) {
        Ok(format!("{} fixtures in {:.1}s", runs.len(), total.as_secs_f64()))
    } else {
        Err(format!("{} fixtures in {:.1}s", runs.len(), total.as_secs_f64()))
    }
}

fn evidence_replay(runs: &[Run]) -> Check {
    let mut n = 0;
    for run in runs {
        for f in run.analysis.active_findings() {
            match reconfirm(&run.fixture, &run.cfg, f).map_err(|e| e.to_string())? {
                Some(again) if again.defect == f.defect && again.evidence.case_id == f.evidence.case_id => n += 1,
                other => return Err(format!("{}: {} {} not reproduced: {other:?}", run.name, f.defect, f.evidence.case_id)),
            }
        }
    }
    Ok(format!("{n} findings reproduced from their evidence case"))
}

fn crypto_vectors() -> Check {
    let parts = [
        checks::keccak_vectors(100)?,
        checks::sha256_vectors()?,
        checks::ripemd160_vectors()?,
        checks::ecrecover_signers(100)?,
        checks::ecrecover_malformed(10_000)?,
    ];
    Ok(parts.join("; "))
}

fn main() {
    let corpus = run_corpus();
    let with_corpus = |f: fn(&[Run]) -> Check| -> Check {
        match &corpus {
            Ok(runs) => f(runs),
            Err(e) => Err(format!("corpus analysis failed: {e}")),
        }
    };

    type Criterion<'a> = (&'static str, Box<dyn FnOnce() -> Check + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("corpus-exactness", Box::new(|| with_corpus(corpus_exactness))),
        ("negative-variants", Box::new(|| with_corpus(negative_variants))),
        ("crypto-vectors", Box::new(crypto_vectors)),
        ("malleability-sm", Box::new(|| with_corpus(malleability_and_sm))),
        ("merkle-trees", Box::new(|| checks::merkle_trees(50))),
        ("json-determinism", Box::new(|| with_corpus(determinism))),
        ("corpus-timing", Box::new(|| with_corpus(timing))),
        ("micro-programs", Box::new(|| checks::micro_programs(1000))),
        ("evidence-replay", Box::new(|| with_corpus(evidence_replay))),
    ];

    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
