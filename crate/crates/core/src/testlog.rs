//! Parse pytest-style plain-text reports into per-test outcomes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// `file::test` or `file::Class::test`. Bracketed parameter suffixes stay
/// part of `test_name`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TestId {
    pub file: String,
    pub class_name: Option<String>,
    pub test_name: String,
}

impl TestId {
    pub fn new(file: &str, class_name: Option<&str>, test_name: &str) -> Self {
        TestId {
            file: file.to_string(),
            class_name: class_name.map(str::to_string),
            test_name: test_name.to_string(),
        }
    }

    pub fn rendered(&self) -> String {
        self.to_string()
    }

    pub fn parse(s: &str) -> Option<TestId> {
        let parts = split_outside_brackets(s);
        if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
            return None;
        }
        let file = parts[0];
        let test_name = parts[parts.len() - 1];
        let class_name = (parts.len() > 2).then(|| parts[1..parts.len() - 1].join("::"));
        Some(TestId {
            file: file.to_string(),
            class_name,
            test_name: test_name.to_string(),
        })
    }
}

fn split_outside_brackets(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'[' => depth += 1,
            b']' => depth = depth.saturating_sub(1),
            b':' if depth == 0 && bytes.get(i + 1) == Some(&b':') => {
                parts.push(&s[start..i]);
                i += 2;
                start = i;
                continue;
            }
            _ => {}
        }
        i += 1;
    }
    parts.push(&s[start..]);
    parts
}

impl fmt::Display for TestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.class_name {
            Some(class) => write!(f, "{}::{}::{}", self.file, class, self.test_name),
            None => write!(f, "{}::{}", self.file, self.test_name),
        }
    }
}

impl FromStr for TestId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TestId::parse(s).ok_or_else(|| format!("not a test identifier: {s:?}"))
    }
}

impl PartialOrd for TestId {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TestId {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.rendered().cmp(&other.rendered())
    }
}

impl Serialize for TestId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.rendered())
    }
}

impl<'de> Deserialize<'de> for TestId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TestStatus {
    #[serde(rename = "PASSED")]
    Passed,
    #[serde(rename = "FAILED")]
    Failed,
    #[serde(rename = "ERROR")]
    Error,
    #[serde(rename = "SKIPPED")]
    Skipped,
    #[serde(rename = "XFAIL")]
    XFailed,
    #[serde(rename = "UNKNOWN")]
    Unknown,
}

impl TestStatus {
    pub fn is_passing(self) -> bool {
        self == TestStatus::Passed
    }

    pub fn is_failing(self) -> bool {
        matches!(self, TestStatus::Failed | TestStatus::Error)
    }

    /// Severity used when aggregating per file; higher is worse.
    pub fn severity(self) -> u8 {
        match self {
            TestStatus::Passed => 0,
            TestStatus::Skipped | TestStatus::XFailed => 1,
            TestStatus::Unknown => 2,
            TestStatus::Failed => 3,
            TestStatus::Error => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TestStatus::Passed => "PASSED",
            TestStatus::Failed => "FAILED",
            TestStatus::Error => "ERROR",
            TestStatus::Skipped => "SKIPPED",
            TestStatus::XFailed => "XFAIL",
            TestStatus::Unknown => "UNKNOWN",
        }
    }

    fn from_report_word(word: &str) -> TestStatus {
        match word {
            "PASSED" => TestStatus::Passed,
            "FAILED" => TestStatus::Failed,
            "ERROR" => TestStatus::Error,
            "SKIPPED" => TestStatus::Skipped,
            "XFAIL" => TestStatus::XFailed,
            // Unexpected passes are not treated as passing.
            _ => TestStatus::Unknown,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestOutcomeMap {
    pub outcomes: BTreeMap<TestId, TestStatus>,
    pub parse_ok: bool,
    #[serde(default)]
    pub raw_log_ref: Option<PathBuf>,
    /// Harness/environment problems found in the log (stdlib import errors,
    /// interpreter start failures, collection aborts).
    #[serde(default)]
    pub fatal_markers: Vec<String>,
}

impl TestOutcomeMap {
    pub fn status(&self, id: &TestId) -> Option<TestStatus> {
        self.outcomes.get(id).copied()
    }

    pub fn count(&self, status: TestStatus) -> usize {
        self.outcomes.values().filter(|s| **s == status).count()
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn has_failures(&self) -> bool {
        self.outcomes.values().any(|s| s.is_failing())
    }

    pub fn with_log_ref(mut self, path: impl Into<PathBuf>) -> Self {
        self.raw_log_ref = Some(path.into());
        self
    }
}

const STATUS: &str = "PASSED|FAILED|ERROR|SKIPPED|XFAIL|XPASS";

fn ansi_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\x1b\[[0-9;?]*[A-Za-z]").unwrap())
}

fn verbose_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(&format!(
            r"^(?P<id>[^\s:]\S*?::[^\s\[]+(?:\[.*?\])?)\s+(?P<st>{STATUS})(?:\s+\(.*\))?(?:\s+\[\s*\d+%\])?\s*$"
        ))
        .unwrap()
    })
}

fn xdist_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(&format!(
            r"^\[gw\d+\]\s+\[\s*\d+%\]\s+(?P<st>{STATUS})\s+(?P<id>[^\s:]\S*?::[^\s\[]+(?:\[.*?\])?)\s*$"
        ))
        .unwrap()
    })
}

fn summary_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(&format!(
            r"^(?P<st>{STATUS})\s+(?P<id>[^\s:]\S*?::[^\s\[]+(?:\[.*?\])?)(?:\s+-\s+.*)?\s*$"
        ))
        .unwrap()
    })
}

/// Parses a test-runner report. Never fails: an unrecognisable log yields
/// `parse_ok = false` and an empty map.
pub fn parse_test_log(stdout: &str, stderr: &str) -> TestOutcomeMap {
    let mut outcomes = BTreeMap::new();
    for raw in stdout.lines() {
        let line = ansi_re().replace_all(raw, "");
        let line = line.trim_end();
        let caps = summary_re()
            .captures(line)
            .or_else(|| xdist_re().captures(line))
            .or_else(|| verbose_re().captures(line));
        let Some(caps) = caps else { continue };
        let Some(id) = TestId::parse(caps["id"].trim()) else {
            continue;
        };
        // Last occurrence wins (rerun plugins report the final state last).
        outcomes.insert(id, TestStatus::from_report_word(&caps["st"]));
    }
    let mut fatal_markers = detect_fatal_markers(stdout);
    for marker in detect_fatal_markers(stderr) {
        if !fatal_markers.contains(&marker) {
            fatal_markers.push(marker);
        }
    }
    TestOutcomeMap {
        parse_ok: !outcomes.is_empty(),
        outcomes,
        raw_log_ref: None,
        fatal_markers,
    }
}

/// Per-file aggregate: `Passed` iff every test passed, else the worst status.
pub fn group_by_file(map: &TestOutcomeMap) -> BTreeMap<String, TestStatus> {
    let mut files: BTreeMap<String, TestStatus> = BTreeMap::new();
    for (id, status) in &map.outcomes {
        files
            .entry(id.file.clone())
            .and_modify(|agg| {
                if status.severity() > agg.severity() {
                    *agg = *status;
                }
            })
            .or_insert(*status);
    }
    files
}

/// Counts from the runner's own final summary line.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryCounts {
    pub passed: usize,
    pub failed: usize,
    pub errors: usize,
    pub skipped: usize,
    pub xfailed: usize,
    pub xpassed: usize,
}

impl SummaryCounts {
    pub fn total(&self) -> usize {
        self.passed + self.failed + self.errors + self.skipped + self.xfailed + self.xpassed
    }
}

pub fn parse_summary_counts(stdout: &str) -> Option<SummaryCounts> {
    static LINE: OnceLock<Regex> = OnceLock::new();
    static PART: OnceLock<Regex> = OnceLock::new();
    let line_re = LINE.get_or_init(|| Regex::new(r"^(?:=+ )?(?P<body>\d+ (?:passed|failed|errors?|skipped|xfailed|xpassed|deselected|warnings?)\b.*?) in [\d.]+s(?: \([^)]*\))?(?: =+)?$").unwrap());
    let part_re = PART.get_or_init(|| Regex::new(r"(\d+) (passed|failed|errors?|skipped|xfailed|xpassed)").unwrap());
    let line = stdout
        .lines()
        .map(|l| ansi_re().replace_all(l, "").trim().to_string())
        .rfind(|l| line_re.is_match(l))?;
    let body = line_re.captures(&line)?["body"].to_string();
    let mut counts = SummaryCounts::default();
    for caps in part_re.captures_iter(&body) {
        let n: usize = caps[1].parse().ok()?;
        match &caps[2] {
            "passed" => counts.passed += n,
            "failed" => counts.failed += n,
            "error" | "errors" => counts.errors += n,
            "skipped" => counts.skipped += n,
            "xfailed" => counts.xfailed += n,
            "xpassed" => counts.xpassed += n,
            _ => {}
        }
    }
    Some(counts)
}

/// Top-level standard-library modules; an import failure of one of these
/// points at a broken interpreter rather than at the repository.
const STDLIB_MODULES: &[&str] = &[
    "abc", "argparse", "array", "ast", "asyncio", "base64", "binascii", "bisect", "builtins",
    "bz2", "calendar", "cmath", "codecs", "collections", "concurrent", "configparser",
    "contextlib", "contextvars", "copy", "copyreg", "csv", "ctypes", "dataclasses", "datetime",
    "dbm", "decimal", "difflib", "dis", "email", "encodings", "enum", "errno", "faulthandler",
    "fcntl", "filecmp", "fnmatch", "fractions", "functools", "gc", "getopt", "getpass",
    "gettext", "glob", "graphlib", "gzip", "hashlib", "heapq", "hmac", "html", "http",
    "importlib", "inspect", "io", "ipaddress", "itertools", "json", "keyword", "linecache",
    "locale", "logging", "lzma", "marshal", "math", "mimetypes", "mmap", "multiprocessing",
    "numbers", "operator", "os", "pathlib", "pickle", "pkgutil", "platform", "plistlib",
    "posix", "pprint", "queue", "random", "re", "readline", "reprlib", "resource", "sched",
    "secrets", "select", "selectors", "shelve", "shlex", "shutil", "signal", "site", "socket",
    "sqlite3", "ssl", "stat", "statistics", "string", "struct", "subprocess", "symtable",
    "sys", "sysconfig", "tarfile", "tempfile", "textwrap", "threading", "time", "timeit",
    "tkinter", "token", "tokenize", "tomllib", "traceback", "types", "typing", "unicodedata",
    "unittest", "urllib", "uuid", "venv", "warnings", "weakref", "xml", "zipfile", "zipimport",
    "zlib", "zoneinfo", "_ctypes", "_ssl", "_sqlite3", "_lzma", "_bz2",
];

pub fn is_stdlib_module(name: &str) -> bool {
    let top = name.split('.').next().unwrap_or(name);
    STDLIB_MODULES.contains(&top)
}

/// Harness/environment failure markers found in a log.
pub fn detect_fatal_markers(log: &str) -> Vec<String> {
    static MISSING: OnceLock<Regex> = OnceLock::new();
    static CANNOT: OnceLock<Regex> = OnceLock::new();
    static NOT_FOUND: OnceLock<Regex> = OnceLock::new();
    static COLLECTION: OnceLock<Regex> = OnceLock::new();
    let missing = MISSING.get_or_init(|| Regex::new(r"ModuleNotFoundError: No module named '([\w.]+)'").unwrap());
    let cannot = CANNOT.get_or_init(|| Regex::new(r"ImportError: cannot import name '\w+' from '([\w.]+)'").unwrap());
    let not_found = NOT_FOUND.get_or_init(|| {
        Regex::new(r"\b(python[\d.]*|pytest|py\.test)\b:? (?:command )?not found|No module named '?pytest'?$").unwrap()
    });
    let collection = COLLECTION.get_or_init(|| {
        Regex::new(r"Interrupted: \d+ errors? during collection|^INTERNALERROR>").unwrap()
    });

    let mut markers = Vec::new();
    let mut push = |m: String| {
        if !markers.contains(&m) {
            markers.push(m);
        }
    };
    for raw in log.lines() {
        let line = ansi_re().replace_all(raw, "");
        let line = line.trim();
        for caps in missing.captures_iter(line).chain(cannot.captures_iter(line)) {
            if is_stdlib_module(&caps[1]) {
                push(format!("stdlib import failure: {}", &caps[1]));
            }
        }
        if line.contains("Fatal Python error") {
            push("interpreter start failure: Fatal Python error".into());
        }
        if not_found.is_match(line) {
            push(format!("interpreter start failure: {line}"));
        }
        if collection.is_match(line) {
            push(format!("collection abort: {line}"));
        }
    }
    markers
}
