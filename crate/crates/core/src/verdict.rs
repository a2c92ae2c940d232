//! Base/merged comparison and the four-way execution type.
//!
//! Only `Passed` counts as passing. A test is *improved* when it is
//! non-passing on the base commit and passing on the merged commit, and
//! *regressed* in the opposite direction. A candidate is
//! [`ExecType::NewCommitBetter`] iff it has at least one improvement and no
//! regressions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::runner::CommitRecords;
use crate::testlog::{group_by_file, TestOutcomeMap, TestStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchLevel {
    FullyQualified,
    FileLevel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// Rendered test ids (or file paths at `FileLevel`).
    pub common_tests: BTreeSet<String>,
    pub improved: BTreeSet<String>,
    pub regressed: BTreeSet<String>,
    pub match_level: MatchLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExecType {
    SetupFailure,
    TestRunFailure,
    NewCommitNotBetter,
    NewCommitBetter,
}

impl ExecType {
    pub const ALL: [ExecType; 4] = [
        ExecType::NewCommitBetter,
        ExecType::NewCommitNotBetter,
        ExecType::SetupFailure,
        ExecType::TestRunFailure,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExecType::SetupFailure => "SETUP_FAILURE",
            ExecType::TestRunFailure => "TEST_RUN_FAILURE",
            ExecType::NewCommitNotBetter => "NEW_COMMIT_NOT_BETTER",
            ExecType::NewCommitBetter => "NEW_COMMIT_BETTER",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VerifiedLabels {
    pub fail_to_pass: Vec<String>,
    pub pass_to_pass: Vec<String>,
}

impl VerifiedLabels {
    /// FAIL_TO_PASS followed by PASS_TO_PASS.
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.fail_to_pass.iter().chain(self.pass_to_pass.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VerdictError {
    #[error("outcome map is not parseable; classify as TestRunFailure first")]
    Unparsed,
    #[error("per-test labels unavailable: comparison only matched at file level")]
    LabelsUnavailable,
    #[error("labels requested for a candidate that is not NewCommitBetter")]
    NotBetter,
}

fn diff_sets(
    base: &BTreeMap<String, TestStatus>,
    merged: &BTreeMap<String, TestStatus>,
    match_level: MatchLevel,
) -> ComparisonReport {
    let mut report = ComparisonReport {
        common_tests: BTreeSet::new(),
        improved: BTreeSet::new(),
        regressed: BTreeSet::new(),
        match_level,
    };
    for (id, before) in base {
        let Some(after) = merged.get(id) else { continue };
        report.common_tests.insert(id.clone());
        match (before.is_passing(), after.is_passing()) {
            (false, true) => {
                report.improved.insert(id.clone());
            }
            (true, false) => {
                report.regressed.insert(id.clone());
            }
            _ => {}
        }
    }
    report
}

/// Compares on fully-qualified ids, falling back to per-file aggregates when
/// no id is common to both runs.
pub fn compare_runs(base: &TestOutcomeMap, merged: &TestOutcomeMap) -> Result<ComparisonReport, VerdictError> {
    if !base.parse_ok || !merged.parse_ok {
        return Err(VerdictError::Unparsed);
    }
    let render = |m: &TestOutcomeMap| -> BTreeMap<String, TestStatus> {
        m.outcomes.iter().map(|(id, s)| (id.rendered(), *s)).collect()
    };
    let qualified = diff_sets(&render(base), &render(merged), MatchLevel::FullyQualified);
    if !qualified.common_tests.is_empty() {
        return Ok(qualified);
    }
    Ok(diff_sets(&group_by_file(base), &group_by_file(merged), MatchLevel::FileLevel))
}

fn setup_failed(records: &CommitRecords) -> bool {
    records.setup.return_code != 0 || records.setup.timed_out
}

/// Decision order: setup failure, then test-run failure, then better/not better.
pub fn classify(
    base_records: &CommitRecords,
    merged_records: &CommitRecords,
    base_map: &TestOutcomeMap,
    merged_map: &TestOutcomeMap,
    report: Option<&ComparisonReport>,
) -> ExecType {
    if setup_failed(base_records) || setup_failed(merged_records) {
        return ExecType::SetupFailure;
    }
    if base_records.test.timed_out || merged_records.test.timed_out {
        return ExecType::TestRunFailure;
    }
    let Some(report) = report.filter(|_| base_map.parse_ok && merged_map.parse_ok) else {
        return ExecType::TestRunFailure;
    };
    if report.common_tests.is_empty() {
        return ExecType::TestRunFailure;
    }
    if !report.improved.is_empty() && report.regressed.is_empty() {
        ExecType::NewCommitBetter
    } else {
        ExecType::NewCommitNotBetter
    }
}

pub fn derive_labels(
    base_map: &TestOutcomeMap,
    merged_map: &TestOutcomeMap,
    report: &ComparisonReport,
) -> Result<VerifiedLabels, VerdictError> {
    if report.match_level == MatchLevel::FileLevel {
        return Err(VerdictError::LabelsUnavailable);
    }
    if report.improved.is_empty() || !report.regressed.is_empty() {
        return Err(VerdictError::NotBetter);
    }
    let passing = |m: &TestOutcomeMap| -> BTreeSet<String> {
        m.outcomes
            .iter()
            .filter(|(_, s)| s.is_passing())
            .map(|(id, _)| id.rendered())
            .collect()
    };
    let base_pass = passing(base_map);
    let merged_pass = passing(merged_map);
    let pass_to_pass = report
        .common_tests
        .iter()
        .filter(|t| base_pass.contains(*t) && merged_pass.contains(*t))
        .cloned()
        .collect();
    Ok(VerifiedLabels {
        fail_to_pass: report.improved.iter().cloned().collect(),
        pass_to_pass,
    })
}

/// Everything decided about one executed candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evaluation {
    pub exec_type: ExecType,
    pub report: Option<ComparisonReport>,
    pub labels: Option<VerifiedLabels>,
}

pub fn evaluate(
    base_records: &CommitRecords,
    merged_records: &CommitRecords,
    base_map: &TestOutcomeMap,
    merged_map: &TestOutcomeMap,
) -> Evaluation {
    let report = compare_runs(base_map, merged_map).ok();
    let exec_type = classify(base_records, merged_records, base_map, merged_map, report.as_ref());
    let labels = match (&report, exec_type) {
        (Some(r), ExecType::NewCommitBetter) => derive_labels(base_map, merged_map, r).ok(),
        _ => None,
    };
    Evaluation {
        exec_type,
        report,
        labels,
    }
}
