//! Trajectory-side contracts: prompt assembly without label leakage, event
//! recording under a step budget, submission gating and outcome buckets.
//!
//! The agent loop itself lives elsewhere. Rollouts arrive either through a
//! [`TrajectoryRecorder`] or as replayed JSON files.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffkit::{parse_unified_diff, split_patch_with, TestPathRules};
use crate::packager::{find_leak, TaskInstance};
use crate::pipeline::format_percent;
use crate::testlog::{parse_test_log, TestId, TestOutcomeMap, TestStatus};
use crate::verdict::VerifiedLabels;

pub const DEFAULT_STEP_BUDGET: u32 = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    ToolCall,
    Observation,
    FileEdit,
    TestRun,
    ReproRun,
    Finish,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryEvent {
    pub step: u32,
    pub kind: EventKind,
    pub payload: String,
    /// Parsed (or parse-failed) outcome of a TestRun.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_outcome_excerpt: Option<TestOutcomeMap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EndedBy {
    Finish,
    BudgetExhausted,
    RuntimeAbort,
}

/// Raw output of the final verification run, for replayed rollouts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationLog {
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub stderr: String,
}

impl VerificationLog {
    pub fn parse(&self) -> TestOutcomeMap {
        parse_test_log(&self.stdout, &self.stderr)
    }
}

fn default_budget() -> u32 {
    DEFAULT_STEP_BUDGET
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub instance_id: String,
    pub events: Vec<TrajectoryEvent>,
    #[serde(default)]
    pub final_diff: String,
    #[serde(default = "default_budget")]
    pub step_budget: u32,
    pub ended_by: EndedBy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_verification: Option<VerificationLog>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TrajectoryError {
    #[error("step budget of {0} exhausted")]
    BudgetExhausted(u32),
    #[error("trajectory already ended ({0:?})")]
    Ended(EndedBy),
    #[error("TestRun event at step {0} has no outcome excerpt")]
    MissingExcerpt(u32),
    #[error("step {step} does not increase (previous {previous})")]
    StepOrder { step: u32, previous: u32 },
    #[error("{events} events exceed the step budget of {budget}")]
    OverBudget { events: usize, budget: u32 },
}

impl Trajectory {
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if self.events.len() > self.step_budget as usize {
            return Err(TrajectoryError::OverBudget {
                events: self.events.len(),
                budget: self.step_budget,
            });
        }
        let mut previous = 0;
        for e in &self.events {
            if e.step <= previous {
                return Err(TrajectoryError::StepOrder { step: e.step, previous });
            }
            previous = e.step;
            if e.kind == EventKind::TestRun && e.test_outcome_excerpt.is_none() {
                return Err(TrajectoryError::MissingExcerpt(e.step));
            }
        }
        Ok(())
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn has(&self, kind: EventKind) -> bool {
        self.count(kind) > 0
    }
}

/// Single-owner event log for one rollout. A `Finish` event is recorded
/// like any other; a denied submission lets the agent keep going.
#[derive(Debug, Clone)]
pub struct TrajectoryRecorder {
    instance_id: String,
    events: Vec<TrajectoryEvent>,
    step_budget: u32,
    max_payload_bytes: Option<usize>,
    ended: Option<EndedBy>,
}

const TRUNCATION_MARK: &str = "\n[truncated]";

impl TrajectoryRecorder {
    pub fn new(instance_id: impl Into<String>) -> Self {
        TrajectoryRecorder {
            instance_id: instance_id.into(),
            events: Vec::new(),
            step_budget: DEFAULT_STEP_BUDGET,
            max_payload_bytes: None,
            ended: None,
        }
    }

    pub fn with_budget(mut self, step_budget: u32) -> Self {
        self.step_budget = step_budget;
        self
    }

    /// Caps each event payload; longer payloads are cut at a char boundary.
    pub fn with_max_payload(mut self, bytes: usize) -> Self {
        self.max_payload_bytes = Some(bytes);
        self
    }

    pub fn ended(&self) -> Option<EndedBy> {
        self.ended
    }

    pub fn events(&self) -> &[TrajectoryEvent] {
        &self.events
    }

    /// Appends an event and returns its step number. Once the budget is
    /// spent the next append fails and ends the trajectory.
    pub fn record(
        &mut self,
        kind: EventKind,
        payload: impl Into<String>,
        excerpt: Option<TestOutcomeMap>,
    ) -> Result<u32, TrajectoryError> {
        if let Some(ended) = self.ended {
            return Err(TrajectoryError::Ended(ended));
        }
        if self.events.len() >= self.step_budget as usize {
            self.ended = Some(EndedBy::BudgetExhausted);
            return Err(TrajectoryError::BudgetExhausted(self.step_budget));
        }
        let step = self.events.len() as u32 + 1;
        if kind == EventKind::TestRun && excerpt.is_none() {
            return Err(TrajectoryError::MissingExcerpt(step));
        }
        let mut payload = payload.into();
        if let Some(max) = self.max_payload_bytes {
            if payload.len() > max {
                let mut cut = max;
                while !payload.is_char_boundary(cut) {
                    cut -= 1;
                }
                payload.truncate(cut);
                payload.push_str(TRUNCATION_MARK);
            }
        }
        self.events.push(TrajectoryEvent {
            step,
            kind,
            payload,
            test_outcome_excerpt: excerpt,
        });
        Ok(step)
    }

    /// Records a test command, parsing its output into the excerpt.
    pub fn record_test_run(&mut self, command: &str, stdout: &str, stderr: &str) -> Result<u32, TrajectoryError> {
        let excerpt = parse_test_log(stdout, stderr);
        self.record(EventKind::TestRun, format!("$ {command}\n{stdout}{stderr}"), Some(excerpt))
    }

    pub fn end(&mut self, how: EndedBy) {
        if self.ended.is_none() {
            self.ended = Some(how);
        }
    }

    /// Closes the log. A recorder that was never ended counts as aborted.
    pub fn into_trajectory(self, final_diff: impl Into<String>) -> Trajectory {
        Trajectory {
            instance_id: self.instance_id,
            events: self.events,
            final_diff: final_diff.into(),
            step_budget: self.step_budget,
            ended_by: self.ended.unwrap_or(EndedBy::RuntimeAbort),
            final_verification: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("instance {0} has an empty problem statement")]
    EmptyStatement(String),
    #[error("problem statement leaks test identifier {0:?}")]
    Leak(String),
}

/// Agent-facing prompt: repository orientation plus the problem statement.
/// Test lists, expected outputs and reference patches are never included.
pub fn assemble_prompt(instance: &TaskInstance) -> Result<String, PromptError> {
    let statement = instance.problem_statement.trim();
    if statement.is_empty() {
        return Err(PromptError::EmptyStatement(instance.instance_id.clone()));
    }
    let prompt = format!(
        "Repository: {repo}\n\
         The repository is checked out at /testbed at commit {base}. Its environment is already \
         installed; run commands from /testbed.\n\n\
         Issue:\n{statement}\n\n\
         Resolve the issue by editing the repository's source code. Reproduce the problem first, \
         then verify your change by running tests. Submission is only accepted once the working \
         tree has a non-empty code change and at least one test command has been run.\n",
        repo = instance.repo,
        base = instance.base_commit,
    );
    if let Some(id) = find_leak(&prompt, &instance.labels()) {
        return Err(PromptError::Leak(id.to_string()));
    }
    Ok(prompt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GateReason {
    EmptyCodeDiff,
    NoTestCommand,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateDecision {
    pub allowed: bool,
    pub reasons: BTreeSet<GateReason>,
}

pub fn check_submit_gate(traj: &Trajectory) -> GateDecision {
    check_submit_gate_with(traj, &TestPathRules::default())
}

/// Denies unless the final diff has a non-test part and at least one
/// TestRun event exists. An unparseable diff counts as empty.
pub fn check_submit_gate_with(traj: &Trajectory, rules: &TestPathRules) -> GateDecision {
    let mut reasons = BTreeSet::new();
    let code_empty = match parse_unified_diff(&traj.final_diff) {
        Ok(diffs) => split_patch_with(&diffs, rules).code_patch.is_empty(),
        Err(_) => true,
    };
    if code_empty {
        reasons.insert(GateReason::EmptyCodeDiff);
    }
    if !traj.has(EventKind::TestRun) {
        reasons.insert(GateReason::NoTestCommand);
    }
    GateDecision {
        allowed: reasons.is_empty(),
        reasons,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FailureBucket {
    ResidualEnvHarness,
    SubmitGatingNoValidDiff,
    SearchLocalization,
    PatchQuality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrajectoryBucket {
    CleanSuccess,
    RecoverySuccess,
    Failure(FailureBucket),
}

impl TrajectoryBucket {
    pub fn is_success(self) -> bool {
        !matches!(self, TrajectoryBucket::Failure(_))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrajectoryBucket::CleanSuccess => "clean_success",
            TrajectoryBucket::RecoverySuccess => "recovery_success",
            TrajectoryBucket::Failure(FailureBucket::ResidualEnvHarness) => "residual_env_harness",
            TrajectoryBucket::Failure(FailureBucket::SubmitGatingNoValidDiff) => "submit_gating_no_valid_diff",
            TrajectoryBucket::Failure(FailureBucket::SearchLocalization) => "search_localization",
            TrajectoryBucket::Failure(FailureBucket::PatchQuality) => "patch_quality",
        }
    }
}

fn expected_status(verification: &TestOutcomeMap, id: &str) -> Option<TestStatus> {
    TestId::parse(id).and_then(|t| verification.status(&t))
}

/// Success needs an allowed gate and every expected test Passed. Failures
/// are checked in order: environment markers, gating, missing expected
/// tests, failing expected tests.
pub fn classify_trajectory(
    traj: &Trajectory,
    verification: &TestOutcomeMap,
    expected: &VerifiedLabels,
) -> TrajectoryBucket {
    classify_trajectory_with(traj, verification, expected, &TestPathRules::default())
}

pub fn classify_trajectory_with(
    traj: &Trajectory,
    verification: &TestOutcomeMap,
    expected: &VerifiedLabels,
    rules: &TestPathRules,
) -> TrajectoryBucket {
    let gate = check_submit_gate_with(traj, rules);
    let statuses: Vec<Option<TestStatus>> = expected.all().map(|id| expected_status(verification, id)).collect();
    let all_pass = statuses.iter().all(|s| *s == Some(TestStatus::Passed));

    if gate.allowed && all_pass {
        let saw_failure = traj
            .events
            .iter()
            .filter(|e| e.kind == EventKind::TestRun)
            .filter_map(|e| e.test_outcome_excerpt.as_ref())
            .filter(|m| m.parse_ok)
            .any(|m| m.has_failures());
        return if !saw_failure && traj.has(EventKind::FileEdit) {
            TrajectoryBucket::CleanSuccess
        } else {
            TrajectoryBucket::RecoverySuccess
        };
    }
    let bucket = if !verification.fatal_markers.is_empty() {
        FailureBucket::ResidualEnvHarness
    } else if !gate.allowed {
        FailureBucket::SubmitGatingNoValidDiff
    } else if statuses.iter().any(Option::is_none) {
        FailureBucket::SearchLocalization
    } else {
        FailureBucket::PatchQuality
    };
    TrajectoryBucket::Failure(bucket)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvidenceStats {
    pub total: u64,
    pub ran_test: u64,
    pub ran_repro: u64,
    pub edited_files: u64,
    pub reached_finish: u64,
    pub budget_exhausted: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StatsError {
    #[error("no trajectories to aggregate")]
    Empty,
}

impl EvidenceStats {
    /// `(label, "xx.x%")` rows in a fixed order.
    pub fn rendered(&self) -> Vec<(&'static str, String)> {
        let pct = |n| format_percent(n, self.total);
        vec![
            ("ran at least one test", pct(self.ran_test)),
            ("ran a reproduction script", pct(self.ran_repro)),
            ("edited repository files", pct(self.edited_files)),
            ("reached finish", pct(self.reached_finish)),
            ("hit the step budget", pct(self.budget_exhausted)),
        ]
    }
}

pub fn aggregate_evidence_stats<'a>(
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
) -> Result<EvidenceStats, StatsError> {
    let mut s = EvidenceStats::default();
    for t in trajectories {
        s.total += 1;
        s.ran_test += u64::from(t.has(EventKind::TestRun));
        s.ran_repro += u64::from(t.has(EventKind::ReproRun));
        s.edited_files += u64::from(t.has(EventKind::FileEdit));
        s.reached_finish += u64::from(t.has(EventKind::Finish));
        s.budget_exhausted += u64::from(t.ended_by == EndedBy::BudgetExhausted);
    }
    if s.total == 0 {
        return Err(StatsError::Empty);
    }
    Ok(s)
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Invalid {
        path: PathBuf,
        #[source]
        source: TrajectoryError,
    },
}

fn file_name_for(instance_id: &str) -> String {
    let safe: String = instance_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect();
    format!("{safe}.json")
}

/// Writes `<dir>/<instance_id>.json` and returns the path.
pub fn write_trajectory(dir: &Path, traj: &Trajectory) -> Result<PathBuf, ReplayError> {
    let path = dir.join(file_name_for(&traj.instance_id));
    let io = |source| ReplayError::Io {
        path: path.clone(),
        source,
    };
    fs::create_dir_all(dir).map_err(io)?;
    let text = serde_json::to_string_pretty(traj).expect("trajectory serializes");
    fs::write(&path, text + "\n").map_err(io)?;
    Ok(path)
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, ReplayError> {
    let text = fs::read_to_string(path).map_err(|source| ReplayError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let traj: Trajectory = serde_json::from_str(&text).map_err(|source| ReplayError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    traj.validate().map_err(|source| ReplayError::Invalid {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(traj)
}

/// Every `*.json` trajectory in `dir`, sorted by file name.
pub fn load_trajectories(dir: &Path) -> Result<Vec<Trajectory>, ReplayError> {
    let io = |source| ReplayError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_trajectory(p)).collect()
}
