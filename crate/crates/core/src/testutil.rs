use std::path::PathBuf;

/// Reads a one-column CSV of floats from `tests/fixtures/`.
pub fn read_golden_csv(name: &str) -> Vec<f64> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    text.lines().skip(1).filter(|l| !l.is_empty()).map(|l| l.trim().parse().unwrap()).collect()
}
