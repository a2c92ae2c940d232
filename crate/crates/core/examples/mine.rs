//! Mine first-parent candidate pairs from a throwaway fixture repository.
use swe_forge::fixture::bugfix_scenario;
use swe_forge::ingest::{checkout_repo, enumerate_candidates, RepoSeed};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let scenario = bugfix_scenario(dir.path().join("upstream"))?;
    let seed = RepoSeed::new("fixture/calc")?.with_source(scenario.repo.path().display().to_string());
    let checkout = checkout_repo(&seed, &dir.path().join("work"), None)?;
    for pair in enumerate_candidates(&checkout)? {
        println!(
            "{} -> {}  {}  {:?}  pr={}",
            &pair.base_commit[..8],
            &pair.merged_commit[..8],
            pair.merged_at.format("%Y-%m-%d"),
            pair.merge_kind,
            pair.pr_ref.as_deref().unwrap_or("-"),
        );
    }
    Ok(())
}
