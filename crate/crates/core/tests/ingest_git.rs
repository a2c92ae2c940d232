use std::fs;

use swe_forge::fixture::FixtureRepo;
use swe_forge::ingest::{checkout_repo, enumerate_candidates, IngestError, MergeKind, RepoSeed};

fn history(root: &std::path::Path) -> (FixtureRepo, Vec<String>) {
    let repo = FixtureRepo::init(root).unwrap();
    repo.write("pkg/a.py", "A = 1\n").unwrap();
    let c0 = repo.commit("Initial import", "2021-01-05T09:00:00Z").unwrap();
    repo.checkout("feature", true).unwrap();
    repo.write("pkg/a.py", "A = 2\n").unwrap();
    let f1 = repo.commit("Tweak A", "2021-02-01T09:00:00Z").unwrap();
    repo.write("pkg/b.py", "B = 1\n").unwrap();
    let f2 = repo.commit("Add B", "2021-02-02T09:00:00Z").unwrap();
    repo.checkout("main", false).unwrap();
    let merge = repo
        .merge_no_ff("feature", "Merge pull request #7 from someone/feature", "2021-02-03T09:00:00Z")
        .unwrap();
    repo.write("pkg/a.py", "A = 3\n").unwrap();
    let squash = repo.commit("Bump A (#8)", "2021-04-10T09:00:00Z").unwrap();
    (repo, vec![c0, f1, f2, merge, squash])
}

fn seed_for(repo: &FixtureRepo) -> RepoSeed {
    RepoSeed::new("someone/project")
        .unwrap()
        .with_source(repo.path().display().to_string())
}

#[test]
fn first_parent_pairs_newest_first() {
    let dir = tempfile::tempdir().unwrap();
    let (repo, ids) = history(&dir.path().join("up"));
    let checkout = checkout_repo(&seed_for(&repo), &dir.path().join("work"), None).unwrap();
    let pairs = enumerate_candidates(&checkout).unwrap();
    assert_eq!(pairs.len(), 2, "root skipped, feature-branch commits not mined");

    assert_eq!(pairs[0].merged_commit, ids[4]);
    assert_eq!(pairs[0].base_commit, ids[3]);
    assert_eq!(pairs[0].merge_kind, MergeKind::LinearParent);
    assert_eq!(pairs[0].pr_ref.as_deref(), Some("#8"));

    assert_eq!(pairs[1].merged_commit, ids[3]);
    assert_eq!(pairs[1].base_commit, ids[0], "base is the first parent");
    assert_eq!(pairs[1].merge_kind, MergeKind::MergeCommit);
    assert_eq!(pairs[1].pr_ref.as_deref(), Some("#7"));
    assert_eq!(pairs[1].merged_at.to_rfc3339(), "2021-02-03T09:00:00+00:00");
}

#[test]
fn refetch_picks_up_new_commits_and_sidecar_wins() {
    let dir = tempfile::tempdir().unwrap();
    let (repo, _) = history(&dir.path().join("up"));
    let work = dir.path().join("work");
    let seed = seed_for(&repo);
    assert_eq!(enumerate_candidates(&checkout_repo(&seed, &work, None).unwrap()).unwrap().len(), 2);

    repo.write("pkg/c.py", "C = 1\n").unwrap();
    let newest = repo.commit("Add C", "2021-05-01T09:00:00Z").unwrap();
    fs::create_dir_all(work.join("metadata")).unwrap();
    fs::write(
        work.join("metadata").join(format!("{}.pr.json", seed.repo_key)),
        format!("{{\"{newest}\": \"#42\"}}"),
    )
    .unwrap();

    let pairs = enumerate_candidates(&checkout_repo(&seed, &work, None).unwrap()).unwrap();
    assert_eq!(pairs.len(), 3);
    assert_eq!(pairs[0].merged_commit, newest);
    assert_eq!(pairs[0].pr_ref.as_deref(), Some("#42"));
}

#[test]
fn mirror_is_preferred_over_source_url() {
    let dir = tempfile::tempdir().unwrap();
    let seed = RepoSeed::new("someone/project")
        .unwrap()
        .with_source("/nonexistent/source.git");
    let mirror_root = dir.path().join("mirrors");
    let (_repo, _) = history(&mirror_root.join(&seed.repo_key));
    let checkout = checkout_repo(&seed, &dir.path().join("work"), Some(&mirror_root)).unwrap();
    assert_eq!(enumerate_candidates(&checkout).unwrap().len(), 2);

    let err = checkout_repo(&seed, &dir.path().join("work2"), None).unwrap_err();
    assert!(matches!(err, IngestError::Git { .. }), "{err}");
}

#[test]
fn empty_default_branch_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let repo = FixtureRepo::init(dir.path().join("up")).unwrap();
    let seed = seed_for(&repo);
    // Cloning an empty repository succeeds but leaves no branch.
    let checkout = checkout_repo(&seed, &dir.path().join("work"), None).unwrap();
    let err = enumerate_candidates(&checkout).unwrap_err();
    assert!(matches!(err, IngestError::EmptyBranch { .. }), "{err}");
}
