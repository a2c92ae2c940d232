//! Unified diffs: parsing, test/code classification, splitting, statistics.
//!
//! Parsing is lossless for canonical (newline-terminated) input: every
//! header and hunk line is kept verbatim, so [`serialize`] reproduces the
//! original bytes.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::git::GitError;
use crate::ingest::RepoCheckout;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("unresolvable commit {0}")]
    UnknownCommit(String),
    #[error(transparent)]
    Git(#[from] GitError),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("diff parse error at byte {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChangeKind {
    Added,
    Deleted,
    Modified,
    Renamed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LineKind {
    Context,
    Added,
    Removed,
    /// `\ No newline at end of file`
    NoNewline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HunkLine {
    pub kind: LineKind,
    /// The full line including its one-character prefix.
    pub raw: String,
}

impl HunkLine {
    pub fn text(&self) -> &str {
        self.raw.get(1..).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hunk {
    pub old_start: u64,
    pub old_len: u64,
    pub new_start: u64,
    pub new_len: u64,
    /// The raw `@@ ... @@ section` line.
    pub header: String,
    pub lines: Vec<HunkLine>,
}

impl Hunk {
    pub fn added(&self) -> usize {
        self.lines.iter().filter(|l| l.kind == LineKind::Added).count()
    }

    pub fn removed(&self) -> usize {
        self.lines.iter().filter(|l| l.kind == LineKind::Removed).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDiff {
    /// Empty when the file is added (`/dev/null`).
    pub old_path: String,
    /// Empty when the file is deleted (`/dev/null`).
    pub new_path: String,
    pub change_kind: ChangeKind,
    /// Raw header lines (`diff --git`, `index`, `---`, `+++`, ...).
    pub header: Vec<String>,
    pub hunks: Vec<Hunk>,
}

impl FileDiff {
    /// New path, or old path for deletions.
    pub fn path(&self) -> &str {
        if self.new_path.is_empty() {
            &self.old_path
        } else {
            &self.new_path
        }
    }

    pub fn added(&self) -> usize {
        self.hunks.iter().map(Hunk::added).sum()
    }

    pub fn removed(&self) -> usize {
        self.hunks.iter().map(Hunk::removed).sum()
    }

    fn write_to(&self, out: &mut String) {
        for line in &self.header {
            out.push_str(line);
            out.push('\n');
        }
        for hunk in &self.hunks {
            out.push_str(&hunk.header);
            out.push('\n');
            for line in &hunk.lines {
                out.push_str(&line.raw);
                out.push('\n');
            }
        }
    }
}

/// Canonical diff between two commits, rename detection off.
pub fn compute_diff(checkout: &RepoCheckout, base: &str, merged: &str) -> Result<String, DiffError> {
    for commit in [base, merged] {
        checkout
            .resolve(commit)
            .map_err(|_| DiffError::UnknownCommit(commit.to_string()))?;
    }
    Ok(checkout.git(&[
        "diff",
        "--no-renames",
        "--no-color",
        "--no-ext-diff",
        "--no-textconv",
        "--full-index",
        "--src-prefix=a/",
        "--dst-prefix=b/",
        base,
        merged,
    ])?)
}

fn hunk_header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@").unwrap())
}

struct Pending {
    file: FileDiff,
    saw_old_header: bool,
}

pub fn parse_unified_diff(text: &str) -> Result<Vec<FileDiff>, ParseError> {
    let mut files: Vec<FileDiff> = Vec::new();
    let mut current: Option<Pending> = None;
    // Remaining (old, new) line budget of the open hunk.
    let mut remaining: Option<(u64, u64)> = None;
    let mut offset = 0usize;

    let mut pieces: Vec<&str> = text.split('\n').collect();
    if text.ends_with('\n') || text.is_empty() {
        pieces.pop();
    }

    for line in pieces {
        let line_offset = offset;
        offset += line.len() + 1;
        let err = |message: String| ParseError {
            offset: line_offset,
            message,
        };

        if let Some((old, new)) = remaining {
            let pending = current.as_mut().expect("hunk implies file");
            let hunk = pending.file.hunks.last_mut().expect("open hunk");
            let (kind, next) = match line.as_bytes().first() {
                Some(b' ') | None if old > 0 && new > 0 => (LineKind::Context, (old - 1, new - 1)),
                Some(b'-') if old > 0 => (LineKind::Removed, (old - 1, new)),
                Some(b'+') if new > 0 => (LineKind::Added, (old, new - 1)),
                Some(b'\\') => (LineKind::NoNewline, (old, new)),
                _ => {
                    return Err(err(format!(
                        "unexpected line in hunk ({old} old / {new} new lines outstanding)"
                    )))
                }
            };
            hunk.lines.push(HunkLine {
                kind,
                raw: line.to_string(),
            });
            remaining = if next == (0, 0) { None } else { Some(next) };
            continue;
        }

        if line.starts_with('\\') {
            if let Some(hunk) = current.as_mut().and_then(|p| p.file.hunks.last_mut()) {
                hunk.lines.push(HunkLine {
                    kind: LineKind::NoNewline,
                    raw: line.to_string(),
                });
                continue;
            }
            return Err(err("no-newline marker outside a hunk".into()));
        }

        if line.starts_with("@@") {
            let pending = current
                .as_mut()
                .ok_or_else(|| err("hunk header before any file header".into()))?;
            let caps = hunk_header_re()
                .captures(line)
                .ok_or_else(|| err(format!("malformed hunk header {line:?}")))?;
            let num = |i: usize, default: u64| -> Result<u64, ParseError> {
                caps.get(i)
                    .map(|m| m.as_str().parse::<u64>())
                    .transpose()
                    .map(|v| v.unwrap_or(default))
                    .map_err(|_| err(format!("hunk header number out of range in {line:?}")))
            };
            let hunk = Hunk {
                old_start: num(1, 0)?,
                old_len: num(2, 1)?,
                new_start: num(3, 0)?,
                new_len: num(4, 1)?,
                header: line.to_string(),
                lines: Vec::new(),
            };
            if hunk.old_len > 0 || hunk.new_len > 0 {
                remaining = Some((hunk.old_len, hunk.new_len));
            }
            pending.file.hunks.push(hunk);
            continue;
        }

        let starts_file = line.starts_with("diff --git ")
            || (line.starts_with("--- ")
                && current
                    .as_ref()
                    .is_none_or(|p| !p.file.hunks.is_empty() || p.saw_old_header));
        if starts_file {
            if let Some(done) = current.take() {
                files.push(finish_file(done.file));
            }
            current = Some(Pending {
                saw_old_header: line.starts_with("--- "),
                file: FileDiff {
                    old_path: String::new(),
                    new_path: String::new(),
                    change_kind: ChangeKind::Modified,
                    header: vec![line.to_string()],
                    hunks: Vec::new(),
                },
            });
            continue;
        }

        match current.as_mut() {
            Some(p) if p.file.hunks.is_empty() => {
                if line.starts_with("--- ") {
                    p.saw_old_header = true;
                }
                p.file.header.push(line.to_string());
            }
            _ => return Err(err(format!("unexpected line {line:?}"))),
        }
    }

    if let Some((old, new)) = remaining {
        return Err(ParseError {
            offset: text.len(),
            message: format!("truncated hunk: {old} old / {new} new lines missing"),
        });
    }
    if let Some(done) = current.take() {
        files.push(finish_file(done.file));
    }
    Ok(files)
}

fn finish_file(mut file: FileDiff) -> FileDiff {
    let mut old = None;
    let mut new = None;
    let mut git_pair = None;
    let mut renamed = false;
    let mut added = false;
    let mut deleted = false;
    for line in &file.header {
        if let Some(rest) = line.strip_prefix("diff --git ") {
            git_pair = split_git_header(rest);
        } else if let Some(rest) = line.strip_prefix("--- ") {
            old = Some(header_path(rest, "a/"));
        } else if let Some(rest) = line.strip_prefix("+++ ") {
            new = Some(header_path(rest, "b/"));
        } else if let Some(rest) = line.strip_prefix("rename from ") {
            renamed = true;
            old = Some(unquote(rest));
        } else if let Some(rest) = line.strip_prefix("rename to ") {
            renamed = true;
            new = Some(unquote(rest));
        } else if line.starts_with("new file mode") {
            added = true;
        } else if line.starts_with("deleted file mode") {
            deleted = true;
        }
    }
    let (git_old, git_new) = git_pair.unwrap_or_default();
    let mut old_path = old.unwrap_or(git_old);
    let mut new_path = new.unwrap_or(git_new);
    if added {
        old_path.clear();
    }
    if deleted {
        new_path.clear();
    }
    file.change_kind = if old_path.is_empty() {
        ChangeKind::Added
    } else if new_path.is_empty() {
        ChangeKind::Deleted
    } else if renamed || old_path != new_path {
        ChangeKind::Renamed
    } else {
        ChangeKind::Modified
    };
    file.old_path = old_path;
    file.new_path = new_path;
    file
}

fn header_path(rest: &str, prefix: &str) -> String {
    // Plain diffs may append a tab and a timestamp.
    let raw = rest.split('\t').next().unwrap_or(rest);
    if raw == "/dev/null" {
        return String::new();
    }
    let path = unquote(raw);
    path.strip_prefix(prefix).map(str::to_string).unwrap_or(path)
}

fn split_git_header(rest: &str) -> Option<(String, String)> {
    if rest.starts_with('"') {
        let end = closing_quote(rest)?;
        let old = unquote(&rest[..=end]);
        let new = unquote(rest[end + 1..].trim_start());
        return Some((strip(&old, "a/"), strip(&new, "b/")));
    }
    // Prefer the split where both sides name the same path.
    let bytes = rest.as_bytes();
    if bytes.len() % 2 == 1 {
        let mid = bytes.len() / 2;
        if bytes[mid] == b' ' {
            let (a, b) = (&rest[..mid], &rest[mid + 1..]);
            if a.get(2..) == b.get(2..) {
                return Some((strip(a, "a/"), strip(b, "b/")));
            }
        }
    }
    let idx = rest.find(" b/")?;
    Some((strip(&rest[..idx], "a/"), strip(&unquote(&rest[idx + 1..]), "b/")))
}

fn strip(path: &str, prefix: &str) -> String {
    path.strip_prefix(prefix).unwrap_or(path).to_string()
}

fn closing_quote(s: &str) -> Option<usize> {
    let mut escaped = false;
    for (i, c) in s.char_indices().skip(1) {
        match c {
            '\\' if !escaped => escaped = true,
            '"' if !escaped => return Some(i),
            _ => escaped = false,
        }
    }
    None
}

/// Undoes git's C-style path quoting.
fn unquote(s: &str) -> String {
    let Some(inner) = s.strip_prefix('"').and_then(|r| r.strip_suffix('"')) else {
        return s.to_string();
    };
    let mut bytes = Vec::with_capacity(inner.len());
    let mut chars = inner.bytes().peekable();
    while let Some(b) = chars.next() {
        if b != b'\\' {
            bytes.push(b);
            continue;
        }
        match chars.next() {
            Some(b'n') => bytes.push(b'\n'),
            Some(b't') => bytes.push(b'\t'),
            Some(b'"') => bytes.push(b'"'),
            Some(b'\\') => bytes.push(b'\\'),
            Some(d @ b'0'..=b'7') => {
                let mut v = u32::from(d - b'0');
                for _ in 0..2 {
                    if let Some(&n @ b'0'..=b'7') = chars.peek() {
                        v = v * 8 + u32::from(n - b'0');
                        chars.next();
                    }
                }
                bytes.push(v as u8);
            }
            Some(other) => bytes.push(other),
            None => bytes.push(b'\\'),
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

pub fn serialize(diffs: &[FileDiff]) -> String {
    let mut out = String::new();
    for d in diffs {
        d.write_to(&mut out);
    }
    out
}

/// Path classification rules for test files.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestPathRules {
    /// Additional path prefixes that always count as test code.
    #[serde(default)]
    pub extra_test_roots: Vec<String>,
}

impl TestPathRules {
    pub fn is_test(&self, path: &str) -> bool {
        if path.is_empty() {
            return false;
        }
        let mut segments: Vec<&str> = path.split('/').collect();
        let file = segments.pop().unwrap_or_default();
        if segments.iter().any(|s| *s == "tests" || *s == "test") {
            return true;
        }
        if file == "tests" || file == "test" {
            return true;
        }
        if (file.starts_with("test_") && file.ends_with(".py")) || file.ends_with("_test.py") {
            return true;
        }
        self.extra_test_roots
            .iter()
            .filter(|r| !r.is_empty())
            .any(|root| path.starts_with(root.as_str()))
    }

    pub fn file_is_test(&self, diff: &FileDiff) -> bool {
        self.is_test(&diff.new_path) || self.is_test(&diff.old_path)
    }
}

pub fn is_test_path(path: &str) -> bool {
    TestPathRules::default().is_test(path)
}

/// Reference code patch and test patch of one commit pair.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSplit {
    pub code_patch: String,
    pub test_patch: String,
}

pub fn split_patch(diffs: &[FileDiff]) -> PatchSplit {
    split_patch_with(diffs, &TestPathRules::default())
}

pub fn split_patch_with(diffs: &[FileDiff], rules: &TestPathRules) -> PatchSplit {
    let (tests, code): (Vec<FileDiff>, Vec<FileDiff>) =
        diffs.iter().cloned().partition(|d| rules.file_is_test(d));
    PatchSplit {
        code_patch: serialize(&code),
        test_patch: serialize(&tests),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchStats {
    pub num_files: usize,
    pub num_test_files: usize,
    pub num_non_test_files: usize,
    /// Added plus removed lines in non-test files.
    pub num_non_test_edited_lines: usize,
    /// Character count of the whole diff, test files included.
    pub patch_length: usize,
    pub touches_only_python: bool,
    pub docs_only: bool,
}

pub fn is_docs_path(path: &str) -> bool {
    let lower = path.to_ascii_lowercase();
    let mut segments: Vec<&str> = lower.split('/').collect();
    let file = segments.pop().unwrap_or_default();
    segments.contains(&"docs")
        || file.ends_with(".md")
        || file.ends_with(".rst")
        || file.ends_with(".txt")
}

pub fn compute_stats(diffs: &[FileDiff]) -> PatchStats {
    compute_stats_with(diffs, &TestPathRules::default())
}

pub fn compute_stats_with(diffs: &[FileDiff], rules: &TestPathRules) -> PatchStats {
    let mut stats = PatchStats {
        num_files: diffs.len(),
        patch_length: serialize(diffs).chars().count(),
        touches_only_python: true,
        docs_only: !diffs.is_empty(),
        ..PatchStats::default()
    };
    for d in diffs {
        if !is_docs_path(d.path()) {
            stats.docs_only = false;
        }
        if rules.file_is_test(d) {
            stats.num_test_files += 1;
            continue;
        }
        stats.num_non_test_files += 1;
        stats.num_non_test_edited_lines += d.added() + d.removed();
        if !d.path().ends_with(".py") {
            stats.touches_only_python = false;
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Hand-counted: one hunk, 3 added, 2 removed, 2 context lines.
    const ONE_FILE: &str = "\
diff --git a/src/core.py b/src/core.py
index 1111111..2222222 100644
--- a/src/core.py
+++ b/src/core.py
@@ -1,4 +1,5 @@ def f():
 import os
-x = 1
-y = 2
+x = 10
+y = 20
+z = 30
 print(x)
";

    const MIXED: &str = "\
diff --git a/src/a.py b/src/a.py
--- a/src/a.py
+++ b/src/a.py
@@ -1 +1 @@
-a = 1
+a = 2
diff --git a/tests/test_a.py b/tests/test_a.py
new file mode 100644
--- /dev/null
+++ b/tests/test_a.py
@@ -0,0 +1,2 @@
+def test_a():
+    pass
";

    #[test]
    fn empty_text_parses_to_nothing() {
        assert!(parse_unified_diff("").unwrap().is_empty());
        assert_eq!(compute_stats(&[]), PatchStats {
            touches_only_python: true,
            ..PatchStats::default()
        });
    }

    #[test]
    fn single_hunk_counts_match_header() {
        let diffs = parse_unified_diff(ONE_FILE).unwrap();
        assert_eq!(diffs.len(), 1);
        let d = &diffs[0];
        assert_eq!(d.old_path, "src/core.py");
        assert_eq!(d.change_kind, ChangeKind::Modified);
        let h = &d.hunks[0];
        assert_eq!((h.old_start, h.old_len, h.new_start, h.new_len), (1, 4, 1, 5));
        assert_eq!(h.lines.len(), 7);
        assert_eq!((h.added(), h.removed()), (3, 2));
        assert_eq!(serialize(&diffs), ONE_FILE);
    }

    #[test]
    fn truncated_hunk_is_an_error() {
        let cut = &ONE_FILE[..ONE_FILE.len() - "+z = 30\n print(x)\n".len()];
        let err = parse_unified_diff(cut).unwrap_err();
        assert!(err.message.contains("truncated"), "{err}");
    }

    #[test]
    fn malformed_hunk_header_reports_offset() {
        let text = "--- a/x.py\n+++ b/x.py\n@@ nonsense @@\n";
        let err = parse_unified_diff(text).unwrap_err();
        assert_eq!(err.offset, "--- a/x.py\n+++ b/x.py\n".len());
    }

    #[test]
    fn added_and_deleted_files() {
        let diffs = parse_unified_diff(MIXED).unwrap();
        assert_eq!(diffs[1].change_kind, ChangeKind::Added);
        assert_eq!(diffs[1].old_path, "");
        assert_eq!(diffs[1].new_path, "tests/test_a.py");
        let del = "diff --git a/old.py b/old.py\ndeleted file mode 100644\n--- a/old.py\n+++ /dev/null\n@@ -1 +0,0 @@\n-x\n";
        let d = parse_unified_diff(del).unwrap();
        assert_eq!(d[0].change_kind, ChangeKind::Deleted);
        assert_eq!(d[0].path(), "old.py");
    }

    #[test]
    fn no_newline_marker_is_kept() {
        let text = "--- a/x\n+++ b/x\n@@ -1 +1 @@\n-a\n\\ No newline at end of file\n+b\n\\ No newline at end of file\n";
        let d = parse_unified_diff(text).unwrap();
        assert_eq!(d[0].hunks[0].lines.len(), 4);
        assert_eq!(serialize(&d), text);
    }

    #[test]
    fn removed_line_that_looks_like_a_header() {
        let text = "--- a/x\n+++ b/x\n@@ -1,2 +1 @@\n--- not a header\n-y\n+z\n";
        let d = parse_unified_diff(text).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].removed(), 2);
    }

    #[test]
    fn binary_and_mode_only_files() {
        let text = "diff --git a/img.png b/img.png\nindex 1..2 100644\nBinary files a/img.png and b/img.png differ\ndiff --git a/run.sh b/run.sh\nold mode 100644\nnew mode 100755\n";
        let d = parse_unified_diff(text).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].path(), "img.png");
        assert_eq!(d[1].path(), "run.sh");
        assert_eq!(serialize(&d), text);
    }

    #[test]
    fn quoted_paths() {
        let text = "diff --git \"a/sp ace.py\" \"b/sp ace.py\"\n--- \"a/sp ace.py\"\n+++ \"b/sp ace.py\"\n@@ -1 +1 @@\n-a\n+b\n";
        let d = parse_unified_diff(text).unwrap();
        assert_eq!(d[0].new_path, "sp ace.py");
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let text = format!("{ONE_FILE}garbage\n");
        assert!(parse_unified_diff(&text).is_err());
    }

    #[test]
    fn test_path_classification() {
        assert!(is_test_path("tests/test_io.py"));
        assert!(is_test_path("pkg/test/helpers.py"));
        assert!(is_test_path("pkg/core_test.py"));
        assert!(is_test_path("test_top.py"));
        assert!(!is_test_path("src/core.py"));
        assert!(!is_test_path("src/contest.py"));
        assert!(!is_test_path("src/testing.py"));
        assert!(!is_test_path("src/latest/x.py"));
        let rules = TestPathRules {
            extra_test_roots: vec!["r2e_tests/".into()],
        };
        assert!(rules.is_test("r2e_tests/check.py"));
    }

    #[test]
    fn split_only_tests() {
        let diffs = parse_unified_diff(&MIXED[MIXED.find("diff --git a/tests").unwrap()..]).unwrap();
        let split = split_patch(&diffs);
        assert!(split.code_patch.is_empty());
        assert!(!split.test_patch.is_empty());
    }

    #[test]
    fn split_mixed_one_file_each() {
        let diffs = parse_unified_diff(MIXED).unwrap();
        let split = split_patch(&diffs);
        let code = parse_unified_diff(&split.code_patch).unwrap();
        let tests = parse_unified_diff(&split.test_patch).unwrap();
        assert_eq!(code.len(), 1);
        assert_eq!(code[0].path(), "src/a.py");
        assert_eq!(tests.len(), 1);
        assert_eq!(tests[0].path(), "tests/test_a.py");
        assert_eq!(format!("{}{}", split.code_patch, split.test_patch), MIXED);
    }

    #[test]
    fn stats_hand_counted() {
        let stats = compute_stats(&parse_unified_diff(ONE_FILE).unwrap());
        assert_eq!(stats.num_non_test_files, 1);
        assert_eq!(stats.num_non_test_edited_lines, 5);
        assert!(stats.touches_only_python);
        assert!(!stats.docs_only);
        assert_eq!(stats.patch_length, ONE_FILE.chars().count());
    }

    #[test]
    fn stats_docs_only() {
        let text = "--- a/README.md\n+++ b/README.md\n@@ -1 +1,2 @@\n # x\n+more\n";
        let stats = compute_stats(&parse_unified_diff(text).unwrap());
        assert!(stats.docs_only);
        assert!(!stats.touches_only_python);
    }

    #[derive(Debug, Clone)]
    struct GenFile {
        path: String,
        hunks: Vec<Vec<(u8, String)>>,
    }

    fn gen_file() -> impl Strategy<Value = GenFile> {
        let line = (0u8..3, "[a-z =()]{0,12}");
        (
            "(src|tests|pkg)/[a-z]{1,6}\\.py",
            prop::collection::vec(prop::collection::vec(line, 1..6), 1..4),
        )
            .prop_map(|(path, hunks)| GenFile { path, hunks })
    }

    fn render(files: &[GenFile]) -> String {
        let mut out = String::new();
        for f in files {
            out.push_str(&format!("diff --git a/{0} b/{0}\n--- a/{0}\n+++ b/{0}\n", f.path));
            let mut start = 1u64;
            for hunk in &f.hunks {
                let old = hunk.iter().filter(|(k, _)| *k != 1).count();
                let new = hunk.iter().filter(|(k, _)| *k != 2).count();
                out.push_str(&format!("@@ -{start},{old} +{start},{new} @@\n"));
                for (k, text) in hunk {
                    let prefix = [' ', '+', '-'][*k as usize];
                    out.push(prefix);
                    out.push_str(text);
                    out.push('\n');
                }
                start += 100;
            }
        }
        out
    }

    proptest! {
        #[test]
        fn parse_serialize_round_trip(files in prop::collection::vec(gen_file(), 0..5)) {
            let text = render(&files);
            let parsed = parse_unified_diff(&text).unwrap();
            prop_assert_eq!(parsed.len(), files.len());
            prop_assert_eq!(serialize(&parsed), text);
        }

        #[test]
        fn split_is_a_partition(files in prop::collection::vec(gen_file(), 0..6)) {
            let parsed = parse_unified_diff(&render(&files)).unwrap();
            let split = split_patch(&parsed);
            let code = parse_unified_diff(&split.code_patch).unwrap();
            let tests = parse_unified_diff(&split.test_patch).unwrap();
            prop_assert_eq!(code.len() + tests.len(), parsed.len());
            prop_assert!(code.iter().all(|d| !is_test_path(d.path())));
            prop_assert!(tests.iter().all(|d| is_test_path(d.path())));
        }
    }
}
