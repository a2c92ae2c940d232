//! Small synthetic git repositories for examples and tests.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use crate::git::GitError;

/// A non-bare working repository with deterministic author/committer data.
pub struct FixtureRepo {
    root: PathBuf,
}

impl FixtureRepo {
    pub fn init(root: impl Into<PathBuf>) -> Result<Self, GitError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let repo = FixtureRepo { root };
        repo.git(&["init", "--quiet", "--initial-branch=main"])?;
        Ok(repo)
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn git(&self, args: &[&str]) -> Result<String, GitError> {
        self.git_at(args, "2020-01-01T00:00:00Z")
    }

    fn git_at(&self, args: &[&str], date: &str) -> Result<String, GitError> {
        let out = Command::new("git")
            .arg("-C")
            .arg(&self.root)
            .args(args)
            .env("GIT_CONFIG_NOSYSTEM", "1")
            .env("GIT_AUTHOR_NAME", "Fixture Author")
            .env("GIT_AUTHOR_EMAIL", "fixture@example.com")
            .env("GIT_COMMITTER_NAME", "Fixture Author")
            .env("GIT_COMMITTER_EMAIL", "fixture@example.com")
            .env("GIT_AUTHOR_DATE", date)
            .env("GIT_COMMITTER_DATE", date)
            .output()?;
        if !out.status.success() {
            return Err(GitError::Status {
                args: args.join(" "),
                status: out.status.code(),
                stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
            });
        }
        Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
    }

    pub fn write(&self, rel: &str, contents: &str) -> std::io::Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, contents)
    }

    pub fn remove(&self, rel: &str) -> std::io::Result<()> {
        fs::remove_file(self.root.join(rel))
    }

    /// Stages everything and commits at `date` (RFC 3339). Returns the commit id.
    pub fn commit(&self, message: &str, date: &str) -> Result<String, GitError> {
        self.git_at(&["add", "-A"], date)?;
        self.git_at(&["commit", "--quiet", "--allow-empty", "-m", message], date)?;
        self.git_at(&["rev-parse", "HEAD"], date)
    }

    pub fn checkout(&self, branch: &str, create: bool) -> Result<(), GitError> {
        if create {
            self.git(&["checkout", "--quiet", "-b", branch])?;
        } else {
            self.git(&["checkout", "--quiet", branch])?;
        }
        Ok(())
    }

    /// `git merge --no-ff` of `branch` into the current branch.
    pub fn merge_no_ff(&self, branch: &str, message: &str, date: &str) -> Result<String, GitError> {
        self.git_at(&["merge", "--quiet", "--no-ff", "-m", message, branch], date)?;
        self.git_at(&["rev-parse", "HEAD"], date)
    }
}

pub const CALC_BUGGY: &str = "def add(a, b):\n    return a - b\n\n\ndef mul(a, b):\n    return a * b\n";
pub const CALC_FIXED: &str = "def add(a, b):\n    return a + b\n\n\ndef mul(a, b):\n    return a * b\n";
pub const CALC_TESTS: &str = "from calc import add, mul\n\n\ndef test_add():\n    assert add(2, 3) == 5\n\n\ndef test_mul():\n    assert mul(2, 3) == 6\n";
pub const CONFTEST: &str = "import os\nimport sys\n\nsys.path.insert(0, os.path.join(os.path.dirname(__file__), \"..\", \"src\"))\n";

/// Commit ids of the three-commit scenario.
pub struct Scenario {
    pub repo: FixtureRepo,
    pub introduce: String,
    pub docs: String,
    pub fix: String,
}

/// Builds the three-commit scenario: a failing test is introduced, then an
/// unrelated docs edit, then the fix. All commits fall in 2022Q2.
pub fn bugfix_scenario(root: impl Into<PathBuf>) -> Result<Scenario, GitError> {
    let repo = FixtureRepo::init(root)?;
    repo.write("src/calc.py", CALC_BUGGY)?;
    repo.write("tests/conftest.py", CONFTEST)?;
    repo.write("tests/test_calc.py", CALC_TESTS)?;
    repo.write("requirements.txt", "# runtime deps\n")?;
    repo.write("README.md", "# calc\n")?;
    let introduce = repo.commit("Add calc module and tests", "2022-05-01T10:00:00Z")?;
    repo.write("README.md", "# calc\n\nA tiny calculator.\n")?;
    let docs = repo.commit("Expand README", "2022-05-10T10:00:00Z")?;
    repo.write("src/calc.py", CALC_FIXED)?;
    let fix = repo.commit("Fix add returning a difference (#3)", "2022-06-15T10:00:00Z")?;
    Ok(Scenario {
        repo,
        introduce,
        docs,
        fix,
    })
}
