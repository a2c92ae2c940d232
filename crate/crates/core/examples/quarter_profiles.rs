//! Quarter keys, spec synthesis and amortized builds with a counting builder.
use std::sync::Arc;

use chrono::{TimeZone, Utc};
use swe_forge::envprofile::{derive_quarter_key, emit_build_recipe, ProfileKey, ProfileStore, RecordingBuilder, SpecSynthesizer};
use swe_forge::fixture::bugfix_scenario;
use swe_forge::ingest::{checkout_repo, enumerate_candidates, RepoSeed};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for month in [1, 4, 7, 10, 12] {
        let at = Utc.with_ymd_and_hms(2022, month, 1, 0, 0, 0).unwrap();
        println!("black {} -> {}", at.format("%Y-%m-%d"), derive_quarter_key("black", at).rendered);
    }

    let dir = tempfile::tempdir()?;
    let scenario = bugfix_scenario(dir.path().join("upstream"))?;
    let seed = RepoSeed::new("fixture/calc")?.with_source(scenario.repo.path().display().to_string());
    let checkout = checkout_repo(&seed, &dir.path().join("work"), None)?;

    let synth = SpecSynthesizer::default();
    let source = |key: &ProfileKey| synth.synthesize(&checkout, &scenario.fix, key.clone());
    let builder = Arc::new(RecordingBuilder::new());
    let store = ProfileStore::open(dir.path().join("profiles"), builder.clone())?;
    for pair in enumerate_candidates(&checkout)? {
        let env = store.resolve_environment(&pair, &seed.repo_key, &source)?;
        println!("{} uses {} ({})", &pair.merged_commit[..8], env.profile, env.image_ref);
    }
    println!("builds: {:?}", builder.calls());
    let record = store.records().remove(0);
    println!("\n{}", emit_build_recipe(&record.spec));
    Ok(())
}
