use cdfuzz_core::replay::{build_seed_pool, Fixture};

#[test]
fn committed_fixtures_match_regeneration() {
    for (name, fixture) in cdfuzz_corpus::all() {
        let path = cdfuzz_corpus::fixtures_dir().join(format!("{name}.json"));
        let on_disk = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(on_disk == cdfuzz_corpus::render(&fixture), "{name} is stale; rerun build-corpus");
    }
}

#[test]
fn every_expected_entry_has_a_fixture() {
    let names: Vec<&str> = cdfuzz_corpus::all().iter().map(|(n, _)| *n).collect();
    assert_eq!(names.len(), cdfuzz_corpus::EXPECTED.len());
    for (name, _) in cdfuzz_corpus::EXPECTED {
        assert!(names.contains(name), "{name}");
    }
}

#[test]
fn loaded_history_replays_without_reverts() {
    for (name, _) in cdfuzz_corpus::all() {
        let fixture = Fixture::load(&cdfuzz_corpus::fixtures_dir().join(format!("{name}.json"))).unwrap();
        let outcome = build_seed_pool(&fixture, 500).unwrap();
        for h in &outcome.history {
            assert!(h.success, "{name} tx {} reverted", h.index);
            assert!(h.taint_error.is_none(), "{name} tx {}: {:?}", h.index, h.taint_error);
        }
    }
}
