mod common;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use swe_forge::envprofile::{EnvError, ProfileStatus, ProfileStore, RecordingBuilder};

const REPO: &str = "acme__widgets";

#[test]
fn one_build_per_quarter() {
    let dir = tempfile::tempdir().unwrap();
    let builder = Arc::new(RecordingBuilder::new());
    let store = ProfileStore::open(dir.path(), builder.clone()).unwrap();
    let pairs = common::synthetic_pairs(50);
    let mut per_profile = BTreeMap::<String, usize>::new();
    for pair in &pairs {
        let env = store.resolve_environment(pair, REPO, &common::stub_spec).unwrap();
        assert!(!env.fallback_used);
        *per_profile.entry(env.profile).or_default() += 1;
    }
    let mut calls = builder.calls();
    calls.sort();
    assert_eq!(calls, ["acme__widgets_2023Q1", "acme__widgets_2023Q2", "acme__widgets_2023Q3"]);
    assert_eq!(per_profile.values().sum::<usize>(), 50);
    assert_eq!(per_profile.len(), 3);

    // Reopening reuses the persisted builds.
    let again = ProfileStore::open(dir.path(), builder.clone()).unwrap();
    for pair in &pairs {
        again.resolve_environment(pair, REPO, &common::stub_spec).unwrap();
    }
    assert_eq!(builder.calls().len(), 3);
}

#[test]
fn failing_quarter_falls_back_per_commit() {
    let dir = tempfile::tempdir().unwrap();
    let builder = Arc::new(RecordingBuilder::failing(["acme__widgets_2023Q2".to_string()]));
    let store = ProfileStore::open(dir.path(), builder.clone()).unwrap();
    let pairs = common::synthetic_pairs(50);
    let in_q2 = pairs.iter().filter(|p| p.merged_at.format("%m").to_string() == "05").count();
    let mut fallbacks = 0;
    for pair in &pairs {
        let env = store.resolve_environment(pair, REPO, &common::stub_spec).unwrap();
        if env.fallback_used {
            fallbacks += 1;
            assert_eq!(env.profile, format!("{REPO}_commit_{}", &pair.merged_commit[..12]));
        }
    }
    assert_eq!(fallbacks, in_q2);
    let calls = builder.calls();
    assert_eq!(calls.iter().filter(|c| c.contains("_commit_")).count(), in_q2);
    assert_eq!(calls.iter().filter(|c| c.ends_with("2023Q2")).count(), 1, "failed quarter is not retried");
    assert_eq!(calls.len(), 3 + in_q2);

    let records = store.records();
    let failed: Vec<_> = records.iter().filter(|r| r.status == ProfileStatus::Failed).collect();
    assert_eq!(failed.len(), 1);
    assert!(failed[0].build_log_path.as_ref().unwrap().is_file());
}

#[test]
fn both_builds_failing_reports_both_logs() {
    let dir = tempfile::tempdir().unwrap();
    let builder = Arc::new(RecordingBuilder::failing(["acme__widgets_2023Q1".to_string()]).fail_fallbacks());
    let store = ProfileStore::open(dir.path(), builder).unwrap();
    let pair = &common::synthetic_pairs(1)[0];
    match store.resolve_environment(pair, REPO, &common::stub_spec) {
        Err(EnvError::BothFailed { profile, quarter_log, commit_log }) => {
            assert_eq!(profile, "acme__widgets_2023Q1");
            assert!(quarter_log.ends_with("build.log"));
            assert!(commit_log.contains("_commit_"));
        }
        other => panic!("expected BothFailed, got {other:?}"),
    }
}

#[test]
fn concurrent_requests_share_one_build() {
    let dir = tempfile::tempdir().unwrap();
    let builder = Arc::new(RecordingBuilder::new().with_delay(Duration::from_millis(100)));
    let store = ProfileStore::open(dir.path(), builder.clone()).unwrap();
    let pairs = common::synthetic_pairs(48);
    std::thread::scope(|s| {
        for chunk in pairs.chunks(6) {
            let store = &store;
            s.spawn(move || {
                for pair in chunk {
                    let env = store.resolve_environment(pair, REPO, &common::stub_spec).unwrap();
                    assert!(env.image_ref.starts_with("swe-forge-env:"));
                }
            });
        }
    });
    assert_eq!(builder.calls().len(), 3);
}
