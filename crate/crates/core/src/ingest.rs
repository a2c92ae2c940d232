//! Seed repositories, local checkouts, and merged-PR candidate pairs.
//!
//! Every first-parent step on the default branch is treated as one merged
//! event: a merge commit `m` yields `(first_parent(m), m)`, and a linear
//! commit `c` (squash or rebase merges look like this) yields `(parent(c), c)`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use chrono::{DateTime, TimeZone, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::git::{self, GitError};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("seed list line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid repository name {0:?}: expected owner/name")]
    InvalidName(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("git failed for {repo} (exit status {status:?}): {source}")]
    Git {
        repo: String,
        status: Option<i32>,
        #[source]
        source: GitError,
    },
    #[error("branch {branch:?} of {repo} has no commits")]
    EmptyBranch { repo: String, branch: String },
    #[error("malformed git log record for {repo}: {record:?}")]
    MalformedLog { repo: String, record: String },
}

impl IngestError {
    fn git(repo: &str, source: GitError) -> Self {
        IngestError::Git {
            repo: repo.to_string(),
            status: source.exit_status(),
            source,
        }
    }
}

/// One repository from the curated seed list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoSeed {
    pub full_name: String,
    pub repo_key: String,
    pub source_url: String,
    /// `HEAD` means "whatever the source's default branch is".
    pub default_branch: String,
}

impl RepoSeed {
    pub fn new(full_name: &str) -> Result<Self, IngestError> {
        validate_full_name(full_name)?;
        Ok(RepoSeed {
            full_name: full_name.to_string(),
            repo_key: repo_key(full_name),
            source_url: format!("https://github.com/{full_name}.git"),
            default_branch: "HEAD".to_string(),
        })
    }

    pub fn with_source(mut self, url: impl Into<String>) -> Self {
        self.source_url = url.into();
        self
    }

    /// The part after the slash.
    pub fn name(&self) -> &str {
        self.full_name.split_once('/').map(|(_, n)| n).unwrap_or(&self.full_name)
    }
}

fn validate_full_name(full_name: &str) -> Result<(), IngestError> {
    let bad = || IngestError::InvalidName(full_name.to_string());
    if full_name.matches('/').count() != 1 || full_name.chars().any(char::is_whitespace) {
        return Err(bad());
    }
    let (owner, name) = full_name.split_once('/').ok_or_else(bad)?;
    if owner.is_empty() || name.is_empty() {
        return Err(bad());
    }
    Ok(())
}

/// Filesystem-safe key: `/` becomes `__`, other bytes outside
/// `[A-Za-z0-9._-]` are written as `_xHH`.
pub fn repo_key(full_name: &str) -> String {
    let mut out = String::with_capacity(full_name.len() + 1);
    for ch in full_name.chars() {
        match ch {
            '/' => out.push_str("__"),
            c if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') => out.push(c),
            c => {
                let mut buf = [0u8; 4];
                for b in c.encode_utf8(&mut buf).bytes() {
                    out.push_str(&format!("_x{b:02X}"));
                }
            }
        }
    }
    out
}

/// Reads a seed list: one `owner/name[<TAB>clone_url]` per line, `#` comments.
pub fn load_seed_list(path: &Path) -> Result<Vec<RepoSeed>, IngestError> {
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_seed_list(&text)
}

pub fn parse_seed_list(text: &str) -> Result<Vec<RepoSeed>, IngestError> {
    let mut seen = HashSet::new();
    let mut seeds = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let name = fields.next().unwrap_or_default().trim();
        let url = fields.next().map(str::trim).filter(|u| !u.is_empty());
        if fields.next().is_some() {
            return Err(IngestError::Parse {
                line: line_no,
                message: "too many tab-separated fields".into(),
            });
        }
        let seed = RepoSeed::new(name).map_err(|_| IngestError::Parse {
            line: line_no,
            message: format!("{name:?} is not of the form owner/name"),
        })?;
        let seed = match url {
            Some(u) => seed.with_source(u),
            None => seed,
        };
        if seen.insert(seed.full_name.clone()) {
            seeds.push(seed);
        }
    }
    Ok(seeds)
}

/// A local bare clone of one seed repository.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepoCheckout {
    pub seed: RepoSeed,
    pub git_dir: PathBuf,
    /// Resolved default branch name.
    pub branch: String,
    /// Optional `<repo_key>.pr.json` sidecar mapping merged commit -> PR ref.
    pub metadata_path: Option<PathBuf>,
}

impl RepoCheckout {
    /// Opens an existing bare repository without cloning.
    pub fn open(seed: RepoSeed, git_dir: impl Into<PathBuf>) -> Result<Self, IngestError> {
        let git_dir = git_dir.into();
        let branch = resolve_branch(&seed, &git_dir)?;
        Ok(RepoCheckout {
            seed,
            git_dir,
            branch,
            metadata_path: None,
        })
    }

    pub fn git(&self, args: &[&str]) -> Result<String, GitError> {
        git::run(Some(&self.git_dir), args)
    }

    /// Resolves any revision to a full commit id.
    pub fn resolve(&self, rev: &str) -> Result<String, GitError> {
        let spec = format!("{rev}^{{commit}}");
        Ok(self.git(&["rev-parse", "--verify", "--quiet", &spec])?.trim().to_string())
    }

    /// All commits reachable from the default branch, newest first.
    pub fn commits(&self) -> Result<Vec<String>, IngestError> {
        let out = self
            .git(&["rev-list", &self.branch_ref()])
            .map_err(|e| IngestError::git(&self.seed.full_name, e))?;
        Ok(out.lines().map(str::to_string).collect())
    }

    pub fn branch_ref(&self) -> String {
        format!("refs/heads/{}", self.branch)
    }

    /// Commit message of `commit`.
    pub fn message(&self, commit: &str) -> Result<String, GitError> {
        self.git(&["log", "-1", "--format=%B", commit])
            .map(|m| m.trim_end().to_string())
    }
}

fn resolve_branch(seed: &RepoSeed, git_dir: &Path) -> Result<String, IngestError> {
    if seed.default_branch != "HEAD" {
        return Ok(seed.default_branch.clone());
    }
    let out = git::run(Some(git_dir), ["symbolic-ref", "--short", "HEAD"])
        .map_err(|e| IngestError::git(&seed.full_name, e))?;
    Ok(out.trim().to_string())
}

/// Clones (or refreshes) `seed` under `<workdir>/repos/<repo_key>/`.
///
/// When `mirror_root/<repo_key>` exists it is used as the clone source in
/// place of `source_url`.
pub fn checkout_repo(
    seed: &RepoSeed,
    workdir: &Path,
    mirror_root: Option<&Path>,
) -> Result<RepoCheckout, IngestError> {
    let dest = workdir.join("repos").join(&seed.repo_key);
    let source = mirror_root
        .map(|root| root.join(&seed.repo_key))
        .filter(|p| p.exists())
        .map(|p| p.to_string_lossy().into_owned())
        .unwrap_or_else(|| seed.source_url.clone());

    if dest.join("HEAD").is_file() {
        git::run(
            Some(&dest),
            ["fetch", "--quiet", "--prune", &source, "+refs/heads/*:refs/heads/*"],
        )
        .map_err(|e| IngestError::git(&seed.full_name, e))?;
    } else {
        let parent = dest.parent().expect("repos dir");
        fs::create_dir_all(parent).map_err(|source| IngestError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
        git::run(
            None,
            [
                "clone".as_ref(),
                "--bare".as_ref(),
                "--quiet".as_ref(),
                source.as_ref(),
                dest.as_os_str(),
            ],
        )
        .map_err(|e| IngestError::git(&seed.full_name, e))?;
    }

    let mut checkout = RepoCheckout::open(seed.clone(), &dest)?;
    let sidecar = workdir.join("metadata").join(format!("{}.pr.json", seed.repo_key));
    if sidecar.is_file() {
        checkout.metadata_path = Some(sidecar);
    }
    Ok(checkout)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MergeKind {
    MergeCommit,
    LinearParent,
}

/// A `(base, merged)` commit pair: the unit of mining.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub base_commit: String,
    pub merged_commit: String,
    pub merged_at: DateTime<Utc>,
    pub merge_kind: MergeKind,
    pub pr_ref: Option<String>,
}

/// Walks first-parent history of the default branch, newest first.
pub fn enumerate_candidates(checkout: &RepoCheckout) -> Result<Vec<CandidatePair>, IngestError> {
    let repo = &checkout.seed.full_name;
    let branch_ref = checkout.branch_ref();
    if checkout.resolve(&branch_ref).is_err() {
        return Err(IngestError::EmptyBranch {
            repo: repo.clone(),
            branch: checkout.branch.clone(),
        });
    }
    let log = checkout
        .git(&[
            "log",
            "--first-parent",
            "--format=%H%x1f%P%x1f%ct%x1f%s%x1e",
            &branch_ref,
        ])
        .map_err(|e| IngestError::git(repo, e))?;

    let sidecar = load_pr_sidecar(checkout)?;
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for record in log.split('\x1e') {
        let record = record.trim_start_matches('\n');
        if record.is_empty() {
            continue;
        }
        let fields: Vec<&str> = record.split('\x1f').collect();
        let malformed = || IngestError::MalformedLog {
            repo: repo.clone(),
            record: record.to_string(),
        };
        if fields.len() < 4 {
            return Err(malformed());
        }
        let merged = fields[0].to_string();
        let parents: Vec<&str> = fields[1].split_whitespace().collect();
        let Some(first_parent) = parents.first() else {
            continue; // root commit
        };
        let ts: i64 = fields[2].trim().parse().map_err(|_| malformed())?;
        let merged_at = Utc.timestamp_opt(ts, 0).single().ok_or_else(malformed)?;
        let merge_kind = if parents.len() > 1 {
            MergeKind::MergeCommit
        } else {
            MergeKind::LinearParent
        };
        let pr_ref = sidecar
            .get(&merged)
            .cloned()
            .or_else(|| pr_ref_from_subject(fields[3]));
        if seen.insert(merged.clone()) {
            pairs.push(CandidatePair {
                base_commit: first_parent.to_string(),
                merged_commit: merged,
                merged_at,
                merge_kind,
                pr_ref,
            });
        }
    }
    Ok(pairs)
}

fn load_pr_sidecar(checkout: &RepoCheckout) -> Result<BTreeMap<String, String>, IngestError> {
    let Some(path) = &checkout.metadata_path else {
        return Ok(BTreeMap::new());
    };
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| IngestError::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })
}

fn pr_ref_from_subject(subject: &str) -> Option<String> {
    static MERGE: OnceLock<Regex> = OnceLock::new();
    static SQUASH: OnceLock<Regex> = OnceLock::new();
    let merge = MERGE.get_or_init(|| Regex::new(r"^Merge pull request #(\d+)").unwrap());
    let squash = SQUASH.get_or_init(|| Regex::new(r"\(#(\d+)\)\s*$").unwrap());
    merge
        .captures(subject)
        .or_else(|| squash.captures(subject))
        .map(|c| format!("#{}", &c[1]))
}
