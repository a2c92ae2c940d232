//! Execute setup and test phases for one pair in copy-on-start workspaces.
use std::sync::Arc;

use swe_forge::envprofile::ResolvedEnv;
use swe_forge::fixture::bugfix_scenario;
use swe_forge::ingest::{checkout_repo, enumerate_candidates, RepoSeed};
use swe_forge::runner::{LocalBackend, Runner};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let scenario = bugfix_scenario(dir.path().join("upstream"))?;
    let seed = RepoSeed::new("fixture/calc")?.with_source(scenario.repo.path().display().to_string());
    let checkout = checkout_repo(&seed, &dir.path().join("work"), None)?;
    let pair = enumerate_candidates(&checkout)?
        .into_iter()
        .find(|p| p.merged_commit == scenario.fix)
        .expect("fix commit is a candidate");

    let env = ResolvedEnv {
        profile: "host".into(),
        image_ref: "host".into(),
        fallback_used: false,
        spec_signature: String::new(),
        recipe: String::new(),
        environment_setup_commit: None,
    };
    let runner = Runner::new(Arc::new(LocalBackend::default()), dir.path().join("snapshots"));
    let records = runner.run_pair(&checkout, &pair, &env, "python3 --version", "python3 -m pytest -q -p no:cacheprovider")?;
    for (side, rec) in [("base", &records.base), ("merged", &records.merged)] {
        println!("{side}: setup rc={} test rc={} ({:.2}s)", rec.setup.return_code, rec.test.return_code, rec.test.duration);
        println!("{}", rec.test.stdout.lines().last().unwrap_or(""));
    }
    Ok(())
}
