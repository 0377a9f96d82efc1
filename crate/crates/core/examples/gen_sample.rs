//! Generates a small synthetic dataset in the ingest CSV format.
//!
//! Usage: `cargo run -p mpstan-core --example gen_sample -- <output-dir>`
//!
//! The repository's `data/sample/` fixture was produced with this program.

use mpstan_core::synthetic::{generate, write_fixture_csvs, SyntheticSpec};

fn main() -> anyhow::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .ok_or_else(|| anyhow::anyhow!("usage: gen_sample <output-dir>"))?;
    let dir = std::path::PathBuf::from(dir);
    std::fs::create_dir_all(&dir)?;
    let spec = SyntheticSpec {
        n: 6,
        days: 120,
        seed: 7,
        ..SyntheticSpec::default()
    };
    let truth = generate(&spec)?;
    let (cases, meta) = write_fixture_csvs(&truth.dataset, &dir)?;
    println!("wrote {} and {}", cases.display(), meta.display());
    Ok(())
}
