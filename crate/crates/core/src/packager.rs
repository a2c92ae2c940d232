//! Released task instances: problem statements, the JSONL row format and
//! per-instance sidecar artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::diffkit::{FileDiff, PatchSplit, TestPathRules};
use crate::envprofile::ResolvedEnv;
use crate::ingest::{CandidatePair, RepoSeed};
use crate::runner::{self, ExecutionRecord, PairRecords};
use crate::testlog::TestOutcomeMap;
use crate::verdict::{ExecType, VerifiedLabels};

/// One JSONL row. Field order here is the serialization order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskInstance {
    pub repo: String,
    pub repo_name: String,
    pub repo_key: String,
    pub instance_id: String,
    pub base_commit: String,
    pub commit_hash: String,
    pub created_at: DateTime<Utc>,
    pub patch: String,
    pub test_patch: String,
    pub problem_statement: String,
    pub hints_text: String,
    #[serde(rename = "FAIL_TO_PASS")]
    pub fail_to_pass: Vec<String>,
    #[serde(rename = "PASS_TO_PASS")]
    pub pass_to_pass: Vec<String>,
    pub exec_type: String,
    pub environment_setup_commit: String,
    pub docker_image: String,
    pub dockerfile: String,
    pub version: Option<String>,
    pub difficulty: Option<String>,
    pub prompt: String,
    pub parsed_commit_content: String,
    pub execution_result_content: String,
    pub expected_output_json: String,
}

/// Every key a row must carry, in serialization order.
pub const FIELDS: [&str; 23] = [
    "repo",
    "repo_name",
    "repo_key",
    "instance_id",
    "base_commit",
    "commit_hash",
    "created_at",
    "patch",
    "test_patch",
    "problem_statement",
    "hints_text",
    "FAIL_TO_PASS",
    "PASS_TO_PASS",
    "exec_type",
    "environment_setup_commit",
    "docker_image",
    "dockerfile",
    "version",
    "difficulty",
    "prompt",
    "parsed_commit_content",
    "execution_result_content",
    "expected_output_json",
];

fn required_fields() -> impl Iterator<Item = &'static str> {
    FIELDS.iter().copied()
}

impl TaskInstance {
    pub fn labels(&self) -> VerifiedLabels {
        VerifiedLabels {
            fail_to_pass: self.fail_to_pass.clone(),
            pass_to_pass: self.pass_to_pass.clone(),
        }
    }

    /// Expected merged-commit status per test id.
    pub fn expected_outcomes(&self) -> Result<BTreeMap<String, String>, serde_json::Error> {
        serde_json::from_str(&self.expected_output_json)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatementSource {
    Template,
    GeneratorHook,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueStatement {
    pub text: String,
    pub source: StatementSource,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExtractError {
    #[error("no [ISSUE] block found")]
    NoBlock,
    #[error("[ISSUE] block is not closed")]
    Unclosed,
}

#[derive(Debug, thiserror::Error)]
pub enum PackagingError {
    #[error("problem statement leaks test identifier {0:?}")]
    Leak(String),
    #[error("statement generator: {0}")]
    Generator(String),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error("missing artifact: {0}")]
    MissingArtifact(&'static str),
    #[error("inconsistent labels: {0}")]
    InvalidLabels(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Runner(#[from] runner::RunnerError),
}

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("line {line}: {message}")]
    Row { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

const OPEN: &str = "[ISSUE]";
const CLOSE: &str = "[/ISSUE]";

/// Trimmed content of the first `[ISSUE] ... [/ISSUE]` block.
pub fn extract_issue_block(text: &str) -> Result<String, ExtractError> {
    let start = text.find(OPEN).ok_or(ExtractError::NoBlock)? + OPEN.len();
    let len = text[start..].find(CLOSE).ok_or(ExtractError::Unclosed)?;
    Ok(text[start..start + len].trim().to_string())
}

/// Optional text-in/text-out replacement for the default template, e.g. a
/// language model wrapper. Its output must contain an `[ISSUE]` block.
pub trait StatementGenerator: Send + Sync {
    fn generate(&self, prompt: &str) -> Result<String, String>;
}

impl<F> StatementGenerator for F
where
    F: Fn(&str) -> Result<String, String> + Send + Sync,
{
    fn generate(&self, prompt: &str) -> Result<String, String> {
        self(prompt)
    }
}

/// First label identifier that occurs in `text`.
pub fn find_leak<'a>(text: &str, labels: &'a VerifiedLabels) -> Option<&'a str> {
    labels.all().find(|id| !id.is_empty() && text.contains(id.as_str())).map(String::as_str)
}

/// What statement rendering may look at.
#[derive(Debug, Clone, Copy)]
pub struct StatementInputs<'a> {
    pub base_test_log: &'a str,
    pub code_files: &'a [String],
    pub commit_subject: &'a str,
    pub labels: &'a VerifiedLabels,
}

const EXCERPT_LINES: usize = 6;
const EXCERPT_WIDTH: usize = 160;

fn mentions_test_location(line: &str, labels: &VerifiedLabels) -> bool {
    if line.contains("::") {
        return true;
    }
    labels.all().any(|id| {
        let file = id.split("::").next().unwrap_or(id);
        let name = id.rsplit("::").next().unwrap_or(id);
        line.contains(file) || line.contains(name.split('[').next().unwrap_or(name))
    })
}

/// Assertion and exception lines from the base run, minus anything that
/// names a test.
pub fn failure_excerpt(log: &str, labels: &VerifiedLabels) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in log.lines() {
        let Some(body) = line.strip_prefix("E ") else { continue };
        let body = body.trim();
        if body.is_empty() || mentions_test_location(body, labels) {
            continue;
        }
        let mut short: String = body.chars().take(EXCERPT_WIDTH).collect();
        if short.len() < body.len() {
            short.push_str("...");
        }
        let body = short;
        if !out.contains(&body) {
            out.push(body);
        }
        if out.len() == EXCERPT_LINES {
            break;
        }
    }
    out
}

/// The statement-generation input stored in the instance's `prompt` field.
pub fn statement_prompt(inputs: &StatementInputs) -> String {
    let mut out = String::new();
    out.push_str(
        "Write a short GitHub issue for the change below. Cover: Observed failure (what breaks on the \
         base commit), Expected behavior (what should happen after the fix), Relevant constraints \
         (only hints supported by the diff or logs). Do not name test files or test functions. \
         Reply with a single [ISSUE] ... [/ISSUE] block.\n\n",
    );
    out.push_str(&format!("Commit subject: {}\n", inputs.commit_subject.trim()));
    out.push_str(&format!("Changed source files: {}\n", inputs.code_files.join(", ")));
    out.push_str("Failure excerpt from the base commit:\n");
    for line in failure_excerpt(inputs.base_test_log, inputs.labels) {
        out.push_str(&format!("    {line}\n"));
    }
    out
}

fn template_statement(inputs: &StatementInputs) -> String {
    let excerpt = failure_excerpt(inputs.base_test_log, inputs.labels);
    let count = inputs.labels.fail_to_pass.len();
    let mut out = String::from("Observed failure:\n");
    if count == 1 {
        out.push_str("A check of existing behavior fails on the current code.");
    } else {
        out.push_str(&format!("{count} checks of existing behavior fail on the current code."));
    }
    if excerpt.is_empty() {
        out.push('\n');
    } else {
        out.push_str(" The run reports:\n\n");
        for line in &excerpt {
            out.push_str(&format!("    {line}\n"));
        }
    }
    out.push_str("\nExpected behavior:\n");
    out.push_str("These checks should pass, and behavior that already works should stay unchanged.\n");
    out.push_str("\nRelevant constraints:\n");
    if inputs.code_files.is_empty() {
        out.push_str("No constraint beyond the failure above is known.\n");
    } else {
        out.push_str("The fix belongs in the library code, not the tests. Files involved:\n");
        for f in inputs.code_files {
            out.push_str(&format!("- {f}\n"));
        }
    }
    out
}

/// Default template, or `generator` when given. Either way the result is
/// leak-checked against both label lists.
pub fn render_problem_statement(
    inputs: &StatementInputs,
    generator: Option<&dyn StatementGenerator>,
) -> Result<IssueStatement, PackagingError> {
    let statement = match generator {
        None => IssueStatement {
            text: template_statement(inputs),
            source: StatementSource::Template,
        },
        Some(g) => {
            let raw = g.generate(&statement_prompt(inputs)).map_err(PackagingError::Generator)?;
            IssueStatement {
                text: extract_issue_block(&raw)?,
                source: StatementSource::GeneratorHook,
            }
        }
    };
    if let Some(id) = find_leak(&statement.text, inputs.labels) {
        return Err(PackagingError::Leak(id.to_string()));
    }
    Ok(statement)
}

pub fn instance_id(repo_key: &str, base: &str, merged: &str) -> String {
    let short = |c: &str| c.chars().take(12).collect::<String>();
    format!("{repo_key}__{}_{}", short(base), short(merged))
}

/// Everything one NewCommitBetter candidate contributes to its instance.
#[derive(Debug, Clone, Copy)]
pub struct CandidateArtifacts<'a> {
    pub seed: &'a RepoSeed,
    pub pair: &'a CandidatePair,
    pub commit_message: &'a str,
    pub diffs: &'a [FileDiff],
    pub split: &'a PatchSplit,
    pub labels: &'a VerifiedLabels,
    pub env: &'a ResolvedEnv,
    pub records: &'a PairRecords,
    pub merged_map: &'a TestOutcomeMap,
    pub test_rules: &'a TestPathRules,
}

fn record_json(r: &ExecutionRecord) -> serde_json::Value {
    json!({
        "return_code": r.return_code,
        "timed_out": r.timed_out,
        "duration": r.duration,
        "stdout": r.stdout,
        "stderr": r.stderr,
    })
}

pub fn build_instance(
    art: &CandidateArtifacts,
    generator: Option<&dyn StatementGenerator>,
) -> Result<TaskInstance, PackagingError> {
    if art.labels.fail_to_pass.is_empty() {
        return Err(PackagingError::InvalidLabels("FAIL_TO_PASS is empty".into()));
    }
    if art.split.code_patch.is_empty() {
        return Err(PackagingError::MissingArtifact("code patch"));
    }
    if art.env.image_ref.is_empty() {
        return Err(PackagingError::MissingArtifact("docker_image"));
    }
    let setup_commit = art
        .env
        .environment_setup_commit
        .clone()
        .ok_or(PackagingError::MissingArtifact("environment_setup_commit"))?;

    let expected: BTreeMap<String, &str> = art
        .merged_map
        .outcomes
        .iter()
        .map(|(id, s)| (id.rendered(), s.as_str()))
        .collect();
    for id in &art.labels.fail_to_pass {
        if expected.get(id) != Some(&"PASSED") {
            return Err(PackagingError::InvalidLabels(format!("{id} is not PASSED on the merged commit")));
        }
    }

    let code_files: Vec<String> = art
        .diffs
        .iter()
        .filter(|d| !art.test_rules.file_is_test(d))
        .map(|d| d.path().to_string())
        .collect();
    let test_files: BTreeSet<String> = art
        .diffs
        .iter()
        .filter(|d| art.test_rules.file_is_test(d))
        .map(|d| d.path().to_string())
        .collect();
    let subject = art.commit_message.lines().next().unwrap_or("");
    let inputs = StatementInputs {
        base_test_log: &art.records.base.test.stdout,
        code_files: &code_files,
        commit_subject: subject,
        labels: art.labels,
    };
    let statement = render_problem_statement(&inputs, generator)?;

    let file_diffs: Vec<serde_json::Value> = art
        .diffs
        .iter()
        .map(|d| {
            json!({
                "path": d.path(),
                "old_path": d.old_path,
                "new_path": d.new_path,
                "change_kind": d.change_kind,
                "is_test": art.test_rules.file_is_test(d),
                "added": d.added(),
                "removed": d.removed(),
                "diff": crate::diffkit::serialize(std::slice::from_ref(d)),
            })
        })
        .collect();
    let parsed_commit = json!({
        "base_commit": art.pair.base_commit,
        "commit_hash": art.pair.merged_commit,
        "message": art.commit_message,
        "date": art.pair.merged_at,
        "merge_kind": art.pair.merge_kind,
        "pr_ref": art.pair.pr_ref,
        "file_diffs": file_diffs,
    });
    let execution = json!({
        "base": {
            "setup": record_json(&art.records.base.setup),
            "test": record_json(&art.records.base.test),
        },
        "merged": {
            "setup": record_json(&art.records.merged.setup),
            "test": record_json(&art.records.merged.test),
        },
        "environment_profile": art.env.profile,
        "fallback_used": art.env.fallback_used,
        "test_files": test_files,
    });

    Ok(TaskInstance {
        repo: art.seed.full_name.clone(),
        repo_name: art.seed.full_name.replace('/', "__"),
        repo_key: art.seed.repo_key.clone(),
        instance_id: instance_id(&art.seed.repo_key, &art.pair.base_commit, &art.pair.merged_commit),
        base_commit: art.pair.base_commit.clone(),
        commit_hash: art.pair.merged_commit.clone(),
        created_at: art.pair.merged_at,
        patch: art.split.code_patch.clone(),
        test_patch: art.split.test_patch.clone(),
        problem_statement: statement.text,
        hints_text: String::new(),
        fail_to_pass: art.labels.fail_to_pass.clone(),
        pass_to_pass: art.labels.pass_to_pass.clone(),
        exec_type: ExecType::NewCommitBetter.as_str().to_string(),
        environment_setup_commit: setup_commit,
        docker_image: art.env.image_ref.clone(),
        dockerfile: art.env.recipe.clone(),
        version: None,
        difficulty: None,
        prompt: statement_prompt(&inputs),
        parsed_commit_content: parsed_commit.to_string(),
        execution_result_content: execution.to_string(),
        expected_output_json: serde_json::to_string(&expected).expect("string map serializes"),
    })
}

/// `<dir>/dockerfile`, `<dir>/parsed_commit.json`, `<dir>/exec/...`.
pub fn write_sidecars(dir: &Path, instance: &TaskInstance, records: &PairRecords) -> Result<(), PackagingError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PackagingError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let dockerfile = dir.join("dockerfile");
    fs::write(&dockerfile, &instance.dockerfile).map_err(io(&dockerfile))?;
    let parsed = dir.join("parsed_commit.json");
    fs::write(&parsed, &instance.parsed_commit_content).map_err(io(&parsed))?;
    let expected = dir.join("expected_output.json");
    fs::write(&expected, &instance.expected_output_json).map_err(io(&expected))?;
    runner::persist_records(&dir.join("exec"), records)?;
    Ok(())
}

fn check_unique<'a>(ids: impl Iterator<Item = (usize, &'a str)>) -> Result<(), (usize, String)> {
    let mut seen = BTreeSet::new();
    for (line, id) in ids {
        if !seen.insert(id) {
            return Err((line, format!("duplicate instance_id {id:?}")));
        }
    }
    Ok(())
}

pub fn to_jsonl(instances: &[TaskInstance]) -> Result<String, SchemaError> {
    check_unique(instances.iter().enumerate().map(|(i, t)| (i + 1, t.instance_id.as_str())))
        .map_err(|(line, message)| SchemaError::Row { line, message })?;
    let mut out = String::new();
    for inst in instances {
        out.push_str(&serde_json::to_string(inst).expect("instance serializes"));
        out.push('\n');
    }
    Ok(out)
}

/// Writes through a temporary file so readers never see a partial release.
pub fn write_jsonl(instances: &[TaskInstance], path: &Path) -> Result<(), SchemaError> {
    let io = |source| SchemaError::Io {
        path: path.to_path_buf(),
        source,
    };
    let text = to_jsonl(instances)?;
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(io)?;
    tmp.write_all(text.as_bytes()).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn parse_jsonl(text: &str) -> Result<Vec<TaskInstance>, SchemaError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let err = |message: String| SchemaError::Row { line: line_no, message };
        if line.trim().is_empty() {
            return Err(err("blank line".into()));
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| err(format!("invalid JSON: {e}")))?;
        let obj = value.as_object().ok_or_else(|| err("row is not a JSON object".into()))?;
        if let Some(missing) = required_fields().find(|f| !obj.contains_key(*f)) {
            return Err(err(format!("missing required field {missing:?}")));
        }
        let inst: TaskInstance = serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
        out.push(inst);
    }
    check_unique(out.iter().enumerate().map(|(i, t)| (i + 1, t.instance_id.as_str())))
        .map_err(|(line, message)| SchemaError::Row { line, message })?;
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TaskInstance>, SchemaError> {
    let text = fs::read_to_string(path).map_err(|source| SchemaError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_jsonl(&text)
}
