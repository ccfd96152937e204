//! Regenerates fixtures/*.json.

fn main() {
    let dir = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(cdfuzz_corpus::fixtures_dir);
    std::fs::create_dir_all(&dir).expect("create fixture dir");
    for (name, fixture) in cdfuzz_corpus::all() {
        let path = dir.join(format!("{name}.json"));
        std::fs::write(&path, cdfuzz_corpus::render(&fixture)).expect("write fixture");
        println!("{} ({} transactions)", path.display(), fixture.transactions.len());
    }
}
