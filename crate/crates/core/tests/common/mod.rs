#![allow(dead_code)]

use std::fs;
use std::path::PathBuf;

use swe_forge::fixture::{bugfix_scenario, Scenario};
use swe_forge::pipeline::{PipelineConfig, Stage};

pub struct Workspace {
    pub dir: tempfile::TempDir,
    pub scenario: Scenario,
    pub config: PipelineConfig,
}

/// Fixture repository plus a local-subprocess pipeline config pointing at it.
pub fn fixture_pipeline() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let scenario = bugfix_scenario(dir.path().join("upstream")).unwrap();
    let seeds = dir.path().join("seeds.txt");
    fs::write(
        &seeds,
        format!("fixture/calc\t{}\n", scenario.repo.path().display()),
    )
    .unwrap();
    let mut config = PipelineConfig::rooted(dir.path(), &seeds);
    config.worker_count = 2;
    config.timeouts.setup_secs = 60;
    config.timeouts.test_secs = 120;
    Workspace { dir, scenario, config }
}

pub fn path(ws: &Workspace, rel: &str) -> PathBuf {
    ws.dir.path().join(rel)
}

pub const THROUGH_PACKAGE: Stage = Stage::Package;

use chrono::{TimeZone, Utc};
use swe_forge::envprofile::{EnvError, ProfileKey, ProfileSpec};
use swe_forge::ingest::{CandidatePair, MergeKind};

/// `n` pairs spread round-robin over the first three quarters of 2023.
pub fn synthetic_pairs(n: usize) -> Vec<CandidatePair> {
    (0..n)
        .map(|i| {
            let month = [2, 5, 8][i % 3];
            CandidatePair {
                base_commit: fake_sha(2 * i + 1),
                merged_commit: fake_sha(2 * i + 2),
                merged_at: Utc.with_ymd_and_hms(2023, month, 1 + (i % 27) as u32, 12, 0, 0).unwrap(),
                merge_kind: MergeKind::LinearParent,
                pr_ref: None,
            }
        })
        .collect()
}

pub fn stub_spec(key: &ProfileKey) -> Result<ProfileSpec, EnvError> {
    Ok(ProfileSpec::new(key.clone(), Vec::new(), "3.11", Vec::new()))
}

/// Distinct in the leading 12 hex digits, so fallback keys do not collide.
pub fn fake_sha(n: usize) -> String {
    format!("{:012x}{}", n.wrapping_mul(0x9e37_79b9) & 0xffff_ffff_ffff, "0".repeat(28))
}
