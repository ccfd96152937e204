use std::path::PathBuf;
use std::process::Command;

use cdfuzz::{run, EXIT_CLEAN, EXIT_FINDINGS, EXIT_USAGE};
use serde_json::Value;

fn fixture(name: &str) -> String {
    cdfuzz_corpus::fixtures_dir().join(format!("{name}.json")).display().to_string()
}

fn cdfuzz(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("cdfuzz").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cdfuzz-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn text_lines_and_findings_exit() {
    let (code, out, _) = cdfuzz(&["analyze", &fixture("fig4_transfer_with_sig")]);
    assert_eq!(code, EXIT_FINDINGS);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 1);
    let cols: Vec<&str> = lines[0].split(' ').collect();
    assert_eq!(cols[0], "SM");
    assert!(cols[1].starts_with("0x") && cols[1].len() == 42);
    assert!(cols[2].starts_with("0x") && cols[2].len() == 10);
    assert!(cols[3].starts_with("case-"));
}

#[test]
fn clean_fixture_exits_zero_with_empty_findings() {
    let (code, out, _) = cdfuzz(&["analyze", &fixture("fig9_fixed_permit"), "--format", "json"]);
    assert_eq!(code, EXIT_CLEAN);
    assert!(out.contains("\"findings\": []"));
    let v: Value = serde_json::from_str(&out).unwrap();
    assert!(v.get("wall_clock_ms").is_none());
    assert_eq!(v["config"]["cases_per_seed"], 16);
    assert_eq!(v["config"]["replays"], 8);
    assert_eq!(v["config"]["max_seeds"], 500);
}

#[test]
fn suppressed_findings_are_listed_but_not_counted() {
    let (code, out, _) = cdfuzz(&["analyze", &fixture("capped_sig_mint"), "--format", "json"]);
    assert_eq!(code, EXIT_CLEAN);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["findings"], serde_json::json!([]));
    assert_eq!(v["suppressed"][0]["defect"], "SSR");
    assert_eq!(v["suppressed"][0]["suppressed_by"], "per-address-limit");
}

#[test]
fn only_restricts_detectors() {
    let (code, out, _) = cdfuzz(&["analyze", &fixture("fig2_permit"), "--only", "sm,csr"]);
    assert_eq!(code, EXIT_FINDINGS);
    let mut got: Vec<&str> = out.lines().map(|l| l.split(' ').next().unwrap()).collect();
    got.sort();
    assert_eq!(got, ["CSR", "SM"]);
    let (code, out, _) = cdfuzz(&["analyze", &fixture("fig2_permit"), "--only", "WR"]);
    assert_eq!((code, out.as_str()), (EXIT_CLEAN, ""));
}

#[test]
fn json_is_canonical_and_reproducible() {
    let a = cdfuzz(&["analyze", &fixture("fig3_mint"), "--format", "json"]).1;
    let b = cdfuzz(&["analyze", &fixture("fig3_mint"), "--format", "json"]).1;
    assert_eq!(a, b);
    let v: Value = serde_json::from_str(&a).unwrap();
    assert_eq!(cdfuzz::to_canonical_json(&v), a);
    let other = cdfuzz(&["analyze", &fixture("fig3_mint"), "--format", "json", "--rng-seed", "9"]).1;
    assert_eq!(serde_json::from_str::<Value>(&other).unwrap()["config"]["rng_seed"], 9);
}

#[test]
fn out_and_timing() {
    let path = scratch("report.json");
    let (code, out, _) = cdfuzz(&["analyze", &fixture("fig8_gamble"), "--format", "json", "--timing", "--out", path.to_str().unwrap()]);
    assert_eq!(code, EXIT_FINDINGS);
    assert!(out.is_empty());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert!(v["wall_clock_ms"].is_u64());
    assert_eq!(v["findings"][0]["defect"], "WR");
}

#[test]
fn usage_and_fixture_errors_exit_two() {
    assert_eq!(cdfuzz(&[]).0, EXIT_USAGE);
    assert_eq!(cdfuzz(&["analyze"]).0, EXIT_USAGE);
    assert_eq!(cdfuzz(&["analyze", &fixture("empty"), "--format", "yaml"]).0, EXIT_USAGE);
    assert_eq!(cdfuzz(&["analyze", &fixture("empty"), "--only", "XYZ"]).0, EXIT_USAGE);
    assert_eq!(cdfuzz(&["analyze", "/nonexistent/fixture.json"]).0, EXIT_USAGE);

    let bad = scratch("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let (code, _, err) = cdfuzz(&["analyze", bad.to_str().unwrap()]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("bad.json"));
    assert_eq!(cdfuzz(&["analyze", &fixture("empty"), "--abi", bad.to_str().unwrap()]).0, EXIT_USAGE);
    assert_eq!(cdfuzz(&["analyze", &fixture("empty"), "--out", "/nonexistent/dir/r.json"]).0, EXIT_USAGE);
}

#[test]
fn help_exits_zero() {
    let (code, out, _) = cdfuzz(&["analyze", "--help"]);
    assert_eq!(code, EXIT_CLEAN);
    assert!(out.contains("--cases-per-seed"));
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_cdfuzz");
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(status(&["analyze", &fixture("empty")]), Some(EXIT_CLEAN));
    assert_eq!(status(&["analyze", &fixture("fig7_add_users")]), Some(EXIT_FINDINGS));
    assert_eq!(status(&["analyze", "missing.json"]), Some(EXIT_USAGE));
}

#[test]
fn unsupported_opcode_is_internal_error() {
    // contract runs TLOAD, which the interpreter does not implement
    let f = serde_json::json!({
        "abis": {},
        "accounts": {
            "0x0000000000000000000000000000000000001000": {"balance": "0x0", "code": "0x60005c00", "nonce": 0, "storage": {}},
            "0x00000000000000000000000000000000000000aa": {"balance": "0xde0b6b3a7640000", "code": "0x", "nonce": 0, "storage": {}}
        },
        "block": {"chainid": 1, "coinbase": "0x00000000000000000000000000000000000000cb", "gaslimit": 30000000,
                  "number": 1, "prevrandao": "0x01", "timestamp": 1},
        "transactions": [{"data": "0x", "from": "0x00000000000000000000000000000000000000aa", "gasLimit": 1000000,
                          "to": "0x0000000000000000000000000000000000001000", "value": "0x0"}]
    });
    let path = scratch("tload.json");
    std::fs::write(&path, f.to_string()).unwrap();
    let (code, _, err) = cdfuzz(&["analyze", path.to_str().unwrap()]);
    assert_eq!(code, cdfuzz::EXIT_INTERNAL, "{err}");
}
