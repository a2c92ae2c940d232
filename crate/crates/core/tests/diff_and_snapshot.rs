use std::collections::BTreeMap;
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::process::Command;
use std::sync::Arc;
use std::time::Duration;

use swe_forge::diffkit::{compute_diff, parse_unified_diff, serialize, split_patch};
use swe_forge::envprofile::ResolvedEnv;
use swe_forge::fixture::FixtureRepo;
use swe_forge::ingest::{checkout_repo, RepoCheckout, RepoSeed};
use swe_forge::runner::{content_hash, materialize_snapshot, remove_tree, ExecutionBackend, LocalBackend, Phase};

fn git(dir: &std::path::Path, args: &[&str]) -> String {
    let out = Command::new("git").arg("-C").arg(dir).args(args).output().unwrap();
    assert!(out.status.success(), "git {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    repo: FixtureRepo,
    checkout: RepoCheckout,
    base: String,
    merged: String,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let repo = FixtureRepo::init(root.join("up")).unwrap();
    repo.write("src/pkg/core.py", "def f():\n    return 1\n\n\ndef g():\n    return 2\n").unwrap();
    repo.write("src/pkg/old.py", "OLD = True\n").unwrap();
    repo.write("src/pkg/noeol.py", "X = 1").unwrap();
    repo.write("tests/test_core.py", "from pkg.core import f\n\n\ndef test_f():\n    assert f() == 1\n").unwrap();
    repo.write("scripts/run.sh", "#!/bin/sh\necho run\n").unwrap();
    repo.write("docs/a b.md", "spaces in name\n").unwrap();
    let base = repo.commit("base", "2023-01-10T00:00:00Z").unwrap();

    repo.write("src/pkg/core.py", "def f():\n    return 10\n\n\ndef g():\n    return 2\n\n\ndef h():\n    return 3\n").unwrap();
    repo.remove("src/pkg/old.py").unwrap();
    repo.write("src/pkg/new.py", "NEW = True\n").unwrap();
    repo.write("src/pkg/noeol.py", "X = 2").unwrap();
    repo.write("tests/test_core.py", "from pkg.core import f, h\n\n\ndef test_f():\n    assert f() == 10\n\n\ndef test_h():\n    assert h() == 3\n").unwrap();
    fs::set_permissions(repo.path().join("scripts/run.sh"), fs::Permissions::from_mode(0o755)).unwrap();
    repo.write("docs/a b.md", "spaces in name, edited\n").unwrap();
    let merged = repo.commit("change", "2023-01-11T00:00:00Z").unwrap();

    let seed = RepoSeed::new("fixture/diffs").unwrap().with_source(repo.path().display().to_string());
    let checkout = checkout_repo(&seed, &root.join("work"), None).unwrap();
    Fixture {
        _dir: dir,
        root,
        repo,
        checkout,
        base,
        merged,
    }
}

/// Applies `patches` in order to a fresh worktree at `base`; returns the tree id.
fn apply_all(f: &Fixture, name: &str, patches: &[&str]) -> String {
    let wt = f.root.join(name);
    git(f.repo.path(), &["worktree", "add", "--detach", "--quiet", wt.to_str().unwrap(), &f.base]);
    for (i, patch) in patches.iter().enumerate() {
        if patch.is_empty() {
            continue;
        }
        let file = f.root.join(format!("{name}-{i}.patch"));
        fs::write(&file, patch).unwrap();
        git(&wt, &["apply", "--whitespace=nowarn", file.to_str().unwrap()]);
    }
    git(&wt, &["add", "-A"]);
    git(&wt, &["write-tree"]).trim().to_string()
}

#[test]
fn serialized_diff_applies_to_the_merged_tree() {
    let f = fixture();
    let text = compute_diff(&f.checkout, &f.base, &f.merged).unwrap();
    let diffs = parse_unified_diff(&text).unwrap();
    assert_eq!(serialize(&diffs), text, "lossless round trip");
    assert_eq!(diffs.len(), 7);

    let merged_tree = git(f.repo.path(), &["rev-parse", &format!("{}^{{tree}}", f.merged)]).trim().to_string();
    assert_eq!(apply_all(&f, "whole", &[&text]), merged_tree);

    let split = split_patch(&diffs);
    assert!(split.test_patch.contains("tests/test_core.py"));
    assert!(!split.code_patch.contains("tests/test_core.py"));
    assert_eq!(apply_all(&f, "split", &[&split.code_patch, &split.test_patch]), merged_tree);
}

#[test]
fn unknown_commit_is_an_error() {
    let f = fixture();
    assert!(compute_diff(&f.checkout, &f.base, "0123456789abcdef0123456789abcdef01234567").is_err());
    assert!(materialize_snapshot(&f.checkout, "not-a-commit", &f.root.join("snaps")).is_err());
}

#[test]
fn snapshot_matches_git_tree_listing() {
    let f = fixture();
    let snap = materialize_snapshot(&f.checkout, &f.merged, &f.root.join("snaps")).unwrap();

    let mut expected = BTreeMap::new();
    for line in git(&f.checkout.git_dir, &["ls-tree", "-r", &f.merged]).lines() {
        let (meta, path) = line.split_once('\t').unwrap();
        let parts: Vec<&str> = meta.split(' ').collect();
        expected.insert(path.to_string(), (parts[0].to_string(), parts[2].to_string()));
    }
    let mut actual = BTreeMap::new();
    for entry in walkdir::WalkDir::new(&snap).into_iter().map(Result::unwrap) {
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(&snap).unwrap().to_string_lossy().into_owned();
        let blob = git(f.repo.path(), &["hash-object", entry.path().to_str().unwrap()]).trim().to_string();
        let mode = entry.metadata().unwrap().permissions().mode();
        let git_mode = if mode & 0o111 != 0 { "100755" } else { "100644" };
        assert_eq!(mode & 0o222, 0, "{rel} should be read-only");
        actual.insert(rel, (git_mode.to_string(), blob));
    }
    assert_eq!(actual, expected);

    let again = materialize_snapshot(&f.checkout, &f.merged, &f.root.join("snaps")).unwrap();
    assert_eq!(again, snap);
    let fresh = materialize_snapshot(&f.checkout, &f.merged, &f.root.join("snaps2")).unwrap();
    assert_eq!(content_hash(&fresh).unwrap(), content_hash(&snap).unwrap());
    let other = materialize_snapshot(&f.checkout, &f.base, &f.root.join("snaps")).unwrap();
    assert_ne!(content_hash(&other).unwrap(), content_hash(&snap).unwrap());

    for s in [snap, fresh, other] {
        remove_tree(&s).unwrap();
    }
}

fn env() -> ResolvedEnv {
    ResolvedEnv {
        profile: "p".into(),
        image_ref: "host:x".into(),
        fallback_used: false,
        spec_signature: "s".into(),
        recipe: String::new(),
        environment_setup_commit: None,
    }
}

#[test]
fn concurrent_workspaces_are_isolated() {
    let f = fixture();
    let snap = materialize_snapshot(&f.checkout, &f.merged, &f.root.join("snaps")).unwrap();
    let before = content_hash(&snap).unwrap();
    let backend = Arc::new(LocalBackend::default());
    let handles: Vec<_> = (0..4)
        .map(|i| {
            let backend = backend.clone();
            let snap = snap.clone();
            std::thread::spawn(move || {
                let ws = backend.prepare(&snap, &env()).unwrap();
                let cmd = format!("echo {i} > mine.txt && sleep 0.2 && ls *.txt && cat mine.txt && rm src/pkg/core.py");
                backend.run(&ws, &cmd, Phase::Test, Duration::from_secs(20)).unwrap()
            })
        })
        .collect();
    for (i, h) in handles.into_iter().enumerate() {
        let rec = h.join().unwrap();
        assert_eq!(rec.return_code, 0, "{}", rec.stderr);
        assert_eq!(rec.stdout, format!("mine.txt\n{i}\n"));
    }
    assert_eq!(content_hash(&snap).unwrap(), before);
    assert!(snap.join("src/pkg/core.py").is_file());
    remove_tree(&snap).unwrap();
}
