//! One test per acceptance criterion. Each prints a `PASS` or `FAIL` line
//! straight to stdout so the verdicts show up even under output capture.

mod common;

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{TimeZone, Utc};
use proptest::collection::btree_map;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use swe_forge::envprofile::{
    derive_quarter_key, estimate_storage, format_decimal_bytes, ProfileStore, RecordingBuilder, MB,
};
use swe_forge::gate::{
    assemble_prompt, check_submit_gate, classify_trajectory, EndedBy, EventKind, FailureBucket, GateReason,
    TrajectoryBucket, TrajectoryRecorder, VerificationLog,
};
use swe_forge::ingest::{repo_key, RepoCheckout, RepoSeed};
use swe_forge::packager::{find_leak, parse_jsonl, read_jsonl, to_jsonl, write_jsonl, SchemaError, TaskInstance, FIELDS};
use swe_forge::pipeline::{compute_report, Pipeline, Stage, VerdictRow};
use swe_forge::prefilter::RejectReason;
use swe_forge::runner::{content_hash, materialize_snapshot};
use swe_forge::testlog::{parse_summary_counts, parse_test_log, TestId, TestOutcomeMap, TestStatus};
use swe_forge::runner::{CommitRecords, ExecutionRecord, Phase};
use swe_forge::verdict::{compare_runs, evaluate, ExecType, MatchLevel, VerifiedLabels};

fn criterion(n: u32, name: &str, body: impl FnOnce()) {
    let outcome = catch_unwind(AssertUnwindSafe(body));
    let verdict = if outcome.is_ok() { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{verdict} criterion {n:>2}: {name}");
    let _ = out.flush();
    if let Err(panic) = outcome {
        resume_unwind(panic);
    }
}

fn release(p: &Pipeline) -> Vec<TaskInstance> {
    read_jsonl(&p.config.release_path).unwrap()
}

#[test]
fn criterion_01_fixture_end_to_end() {
    criterion(1, "fixture end-to-end", || {
        let started = Instant::now();
        let ws = common::fixture_pipeline();
        let p = Pipeline::new(ws.config.clone());
        p.run_stage(Stage::Mine).unwrap();
        p.run_stage(Stage::Filter).unwrap();

        let filtered = fs::read_to_string(p.filtered_path()).unwrap();
        let docs_only = filtered
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
            .filter(|r| r["decision"]["reject_reason"] == serde_json::to_value(RejectReason::DocsOnly).unwrap())
            .count();
        assert_eq!(docs_only, 1);

        // Materialize the merged snapshot up front so it can be hashed around execution.
        let seed = RepoSeed::new("fixture/calc").unwrap();
        let checkout = RepoCheckout::open(seed, ws.config.workdir.join("repos").join(repo_key("fixture/calc"))).unwrap();
        let snap = materialize_snapshot(&checkout, &ws.scenario.fix, &p.snapshots_dir()).unwrap();
        let pre = content_hash(&snap).unwrap();

        for s in [Stage::BuildEnv, Stage::Execute, Stage::Classify, Stage::Package] {
            p.run_stage(s).unwrap();
        }
        assert_eq!(content_hash(&snap).unwrap(), pre, "snapshot changed during execution");

        let instances = release(&p);
        assert_eq!(instances.len(), 1);
        let inst = &instances[0];
        assert_eq!(inst.exec_type, ExecType::NewCommitBetter.as_str());
        assert_eq!(inst.commit_hash, ws.scenario.fix);
        assert_eq!(inst.fail_to_pass, ["tests/test_calc.py::test_add"]);
        assert!(started.elapsed() < Duration::from_secs(60), "took {:?}", started.elapsed());
    });
}

fn status_strategy() -> impl Strategy<Value = TestStatus> {
    prop_oneof![
        4 => Just(TestStatus::Passed),
        2 => Just(TestStatus::Failed),
        1 => Just(TestStatus::Error),
        1 => Just(TestStatus::Skipped),
        1 => Just(TestStatus::XFailed),
        1 => Just(TestStatus::Unknown),
    ]
}

fn map_strategy() -> impl Strategy<Value = BTreeMap<String, TestStatus>> {
    // 24 names over 3 files; maps hold at most 20 tests.
    btree_map(
        (0..3usize, 0..8usize).prop_map(|(f, t)| format!("tests/test_f{f}.py::test_{t}")),
        status_strategy(),
        0..=20,
    )
}

fn outcome_map(m: &BTreeMap<String, TestStatus>) -> TestOutcomeMap {
    TestOutcomeMap {
        outcomes: m.iter().map(|(id, s)| (TestId::parse(id).unwrap(), *s)).collect(),
        parse_ok: !m.is_empty(),
        ..TestOutcomeMap::default()
    }
}

fn file_of(id: &str) -> String {
    id.split("::").next().unwrap().to_string()
}

/// Exhaustive reference: walk every key of the union and decide by hand.
fn brute_force(
    base: &BTreeMap<String, TestStatus>,
    merged: &BTreeMap<String, TestStatus>,
) -> (BTreeSet<String>, BTreeSet<String>, bool) {
    let pass = |s: &TestStatus| *s == TestStatus::Passed;
    let union: BTreeSet<&String> = base.keys().chain(merged.keys()).collect();
    let common: Vec<&String> = union.into_iter().filter(|k| base.contains_key(*k) && merged.contains_key(*k)).collect();
    if !common.is_empty() {
        let improved = common.iter().filter(|k| !pass(&base[**k]) && pass(&merged[**k])).map(|k| (*k).clone()).collect();
        let regressed = common.iter().filter(|k| pass(&base[**k]) && !pass(&merged[**k])).map(|k| (*k).clone()).collect();
        return (improved, regressed, false);
    }
    // File level: a file passes only if every one of its tests passed.
    let files = |m: &BTreeMap<String, TestStatus>| -> BTreeMap<String, bool> {
        let mut out = BTreeMap::new();
        for (id, s) in m {
            let e = out.entry(file_of(id)).or_insert(true);
            *e = *e && pass(s);
        }
        out
    };
    let (bf, mf) = (files(base), files(merged));
    let mut improved = BTreeSet::new();
    let mut regressed = BTreeSet::new();
    for (f, b) in &bf {
        match (b, mf.get(f)) {
            (false, Some(true)) => {
                improved.insert(f.clone());
            }
            (true, Some(false)) => {
                regressed.insert(f.clone());
            }
            _ => {}
        }
    }
    (improved, regressed, true)
}

fn ok_records() -> CommitRecords {
    CommitRecords {
        setup: ExecutionRecord::synthetic(Phase::Setup, 0),
        test: ExecutionRecord::synthetic(Phase::Test, 0),
    }
}

#[test]
fn criterion_02_verdict_oracle() {
    criterion(2, "verdict oracle (1000 random pairs)", || {
        let mut runner = TestRunner::new(Config {
            cases: 1000,
            failure_persistence: None,
            ..Config::default()
        });
        let file_level_cases = Cell::new(0usize);
        let better_cases = Cell::new(0usize);
        runner
            .run(&(map_strategy(), map_strategy()), |(base, merged)| {
                let (b, m) = (outcome_map(&base), outcome_map(&merged));
                if base.is_empty() || merged.is_empty() {
                    prop_assert!(compare_runs(&b, &m).is_err());
                    let eval = evaluate(&ok_records(), &ok_records(), &b, &m);
                    prop_assert_eq!(eval.exec_type, ExecType::TestRunFailure);
                    return Ok(());
                }
                let report = compare_runs(&b, &m).map_err(|e| TestCaseError::fail(e.to_string()))?;
                let (improved, regressed, file_level) = brute_force(&base, &merged);
                prop_assert_eq!(&report.improved, &improved);
                prop_assert_eq!(&report.regressed, &regressed);
                prop_assert_eq!(report.match_level == MatchLevel::FileLevel, file_level);
                file_level_cases.set(file_level_cases.get() + usize::from(file_level));

                let eval = evaluate(&ok_records(), &ok_records(), &b, &m);
                let better = !improved.is_empty() && regressed.is_empty();
                prop_assert_eq!(eval.exec_type == ExecType::NewCommitBetter, better);
                better_cases.set(better_cases.get() + usize::from(better));
                if better && !file_level {
                    let labels = eval.labels.unwrap();
                    prop_assert_eq!(labels.fail_to_pass.iter().cloned().collect::<BTreeSet<_>>(), improved);
                    for t in &labels.pass_to_pass {
                        prop_assert!(base[t] == TestStatus::Passed && merged[t] == TestStatus::Passed);
                    }
                }
                Ok(())
            })
            .unwrap();
        // The generator must exercise both branches of the rule.
        assert!(better_cases.get() > 0);
        assert!(file_level_cases.get() > 0);
    });
}

#[test]
fn criterion_03_quarter_keys() {
    criterion(3, "quarter-key table", || {
        for month in 1..=12u32 {
            let at = Utc.with_ymd_and_hms(2021, month, 15, 0, 0, 0).unwrap();
            let expected = (month - 1) / 3 + 1;
            assert_eq!(derive_quarter_key("r", at).rendered, format!("r_2021Q{expected}"));
        }
        for (month, day, q) in [(3, 31, 1), (4, 1, 2), (6, 30, 2), (7, 1, 3), (9, 30, 3), (10, 1, 4), (12, 31, 4), (1, 1, 1)] {
            let at = Utc.with_ymd_and_hms(2021, month, day, 23, 59, 59).unwrap();
            assert_eq!(derive_quarter_key("r", at).quarter, q);
        }
        let black = Utc.with_ymd_and_hms(2022, 5, 1, 0, 0, 0).unwrap();
        assert_eq!(derive_quarter_key("black", black).rendered, "black_2022Q2");
    });
}

#[test]
fn criterion_04_amortization() {
    criterion(4, "quarter-profile amortization", || {
        let pairs = common::synthetic_pairs(50);
        let dir = tempfile::tempdir().unwrap();
        let builder = Arc::new(RecordingBuilder::new());
        let store = ProfileStore::open(dir.path(), builder.clone()).unwrap();
        for pair in &pairs {
            store.resolve_environment(pair, "r", &common::stub_spec).unwrap();
        }
        assert_eq!(builder.calls().len(), 3);

        let dir = tempfile::tempdir().unwrap();
        let builder = Arc::new(RecordingBuilder::failing(["r_2023Q3".to_string()]));
        let store = ProfileStore::open(dir.path(), builder.clone()).unwrap();
        let mut fallback_for = BTreeSet::new();
        for pair in &pairs {
            let env = store.resolve_environment(pair, "r", &common::stub_spec).unwrap();
            if env.fallback_used {
                fallback_for.insert(pair.merged_commit.clone());
            }
        }
        let q3: BTreeSet<String> = pairs
            .iter()
            .filter(|p| derive_quarter_key("r", p.merged_at).rendered == "r_2023Q3")
            .map(|p| p.merged_commit.clone())
            .collect();
        assert!(!q3.is_empty());
        assert_eq!(fallback_for, q3);
        let quarter_builds = builder.calls().iter().filter(|c| !c.contains("_commit_")).count();
        assert_eq!(quarter_builds, 3);
    });
}

#[test]
fn criterion_05_storage_estimate() {
    criterion(5, "storage estimator", || {
        assert_eq!(format_decimal_bytes(estimate_storage(102_582, 300 * MB)), "30.8 TB");
    });
}

#[test]
fn criterion_06_yield_report() {
    criterion(6, "yield report", || {
        let at = Utc.with_ymd_and_hms(2023, 1, 1, 0, 0, 0).unwrap();
        let split = [
            (ExecType::NewCommitBetter, 2308),
            (ExecType::NewCommitNotBetter, 76_423),
            (ExecType::SetupFailure, 2565),
            (ExecType::TestRunFailure, 21_286),
        ];
        let mut rows = Vec::new();
        for (t, n) in split {
            for i in 0..n {
                rows.push(VerdictRow::new(&format!("{t:?}{i}"), "o/r", "2023Q1", at, t));
            }
        }
        assert_eq!(rows.len(), 102_582);
        let r = compute_report(&rows, &[]);
        assert_eq!(r.yield_percent, "2.2%");
        assert_eq!(r.exec_type_percentages[&ExecType::NewCommitBetter], "2.2%");
        assert_eq!(r.exec_type_percentages[&ExecType::NewCommitNotBetter], "74.5%");
        assert_eq!(r.exec_type_percentages[&ExecType::SetupFailure], "2.5%");
        assert_eq!(r.exec_type_percentages[&ExecType::TestRunFailure], "20.8%");
    });
}

const CODE_DIFF: &str = "\
diff --git a/src/calc.py b/src/calc.py
--- a/src/calc.py
+++ b/src/calc.py
@@ -1,2 +1,2 @@
 def add(a, b):
-    return a - b
+    return a + b
";
const TEST_DIFF: &str = "\
diff --git a/tests/test_calc.py b/tests/test_calc.py
--- a/tests/test_calc.py
+++ b/tests/test_calc.py
@@ -1 +1,2 @@
 from calc import add, mul
+import pytest
";

fn gated(diff: &str, test_runs: usize) -> swe_forge::gate::Trajectory {
    let mut r = TrajectoryRecorder::new("t");
    r.record(EventKind::ToolCall, "open src/calc.py", None).unwrap();
    for _ in 0..test_runs {
        r.record_test_run("pytest -q", "tests/test_calc.py::test_add PASSED\n", "").unwrap();
    }
    r.record(EventKind::Finish, "submit", None).unwrap();
    r.end(EndedBy::Finish);
    r.into_trajectory(diff)
}

#[test]
fn criterion_07_gate_suite() {
    criterion(7, "submission gate and prompt leak scan", || {
        let reasons = |d: &str, n| check_submit_gate(&gated(d, n)).reasons.into_iter().collect::<Vec<_>>();
        assert_eq!(reasons("", 1), [GateReason::EmptyCodeDiff]);
        assert_eq!(reasons(TEST_DIFF, 1), [GateReason::EmptyCodeDiff]);
        assert_eq!(reasons(CODE_DIFF, 0), [GateReason::NoTestCommand]);
        assert_eq!(reasons("", 0), [GateReason::EmptyCodeDiff, GateReason::NoTestCommand]);
        assert!(check_submit_gate(&gated(CODE_DIFF, 1)).allowed);
        assert!(check_submit_gate(&gated(&format!("{CODE_DIFF}{TEST_DIFF}"), 2)).allowed);

        let ws = common::fixture_pipeline();
        let p = Pipeline::new(ws.config.clone());
        p.run_through(Stage::Package).unwrap();
        let instances = release(&p);
        assert!(!instances.is_empty());
        for inst in &instances {
            let prompt = assemble_prompt(inst).unwrap();
            assert!(prompt.contains(inst.problem_statement.trim()));
            assert!(!prompt.contains(&inst.expected_output_json));
            assert_eq!(find_leak(&prompt, &inst.labels()), None);
            assert_eq!(find_leak(&inst.problem_statement, &inst.labels()), None);
            assert!(!prompt.contains(inst.patch.trim()));
            assert!(inst.test_patch.is_empty() || !prompt.contains(inst.test_patch.trim()));
        }
    });
}

fn labels(f2p: &[&str], p2p: &[&str]) -> VerifiedLabels {
    VerifiedLabels {
        fail_to_pass: f2p.iter().map(|s| s.to_string()).collect(),
        pass_to_pass: p2p.iter().map(|s| s.to_string()).collect(),
    }
}

fn verification(stdout: &str, stderr: &str) -> TestOutcomeMap {
    VerificationLog {
        stdout: stdout.into(),
        stderr: stderr.into(),
    }
    .parse()
}

#[test]
fn criterion_08_failure_taxonomy() {
    criterion(8, "failure taxonomy case studies", || {
        // Residual env/harness: code edited, but a stdlib import still fails.
        let expected = labels(&["tests/test_pex.py::test_standard_library_is_included"], &[]);
        let mut r = TrajectoryRecorder::new("pex");
        r.record(EventKind::ToolCall, "open pex/pex.py", None).unwrap();
        r.record(EventKind::FileEdit, "edit pex/pex.py", None).unwrap();
        r.record_test_run("./run_tests.sh", "", "").unwrap();
        r.end(EndedBy::BudgetExhausted);
        let t = r.into_trajectory(CODE_DIFF.replace("src/calc.py", "pex/pex.py"));
        let v = verification(
            "tests/test_pex.py::test_standard_library_is_included FAILED\nE   ModuleNotFoundError: No module named 'contextvars'\n",
            "",
        );
        assert_eq!(
            classify_trajectory(&t, &v, &expected),
            TrajectoryBucket::Failure(FailureBucket::ResidualEnvHarness)
        );

        // Submit gating: reached finish with only a textual summary, no diff.
        let ids: Vec<String> = (0..19).map(|i| format!("tests/test_validators.py::test_c{i}")).collect();
        let expected = VerifiedLabels {
            fail_to_pass: ids[..8].to_vec(),
            pass_to_pass: ids[8..].to_vec(),
        };
        let mut log = String::new();
        for (i, id) in ids.iter().enumerate() {
            log.push_str(&format!("{id} {}\n", if i < 8 { "FAILED" } else { "PASSED" }));
        }
        let mut r = TrajectoryRecorder::new("yamale");
        r.record(EventKind::ToolCall, "open yamale/validators/validators.py", None).unwrap();
        r.record(EventKind::ToolCall, "open yamale/validators/constraints.py", None).unwrap();
        r.record_test_run("pytest -q", &log, "").unwrap();
        r.record(EventKind::ToolCall, "cat run_tests.sh", None).unwrap();
        r.record(EventKind::Finish, "The string constraints ignore case flags.", None).unwrap();
        r.end(EndedBy::Finish);
        let t = r.into_trajectory("");
        let v = verification(&log, "");
        assert_eq!(v.len(), 19);
        assert_eq!(v.count(TestStatus::Passed), 11);
        assert_eq!(
            classify_trajectory(&t, &v, &expected),
            TrajectoryBucket::Failure(FailureBucket::SubmitGatingNoValidDiff)
        );

        // Search/localization: 5 expected tests pass, 4 never show up.
        let ids: Vec<String> = (0..9).map(|i| format!("tests/test_passFailStatus.py::test_pf{i}")).collect();
        let expected = labels(&ids.iter().map(String::as_str).collect::<Vec<_>>(), &[]);
        let seen: String = ids[..5].iter().map(|id| format!("{id} PASSED\n")).collect();
        let mut r = TrajectoryRecorder::new("taurus-pf");
        r.record(EventKind::ToolCall, "open bzt/modules/passfail.py", None).unwrap();
        r.record(EventKind::FileEdit, "edit aggregated_second", None).unwrap();
        r.record(EventKind::ReproRun, "python reproduce_issue.py", None).unwrap();
        r.record_test_run("pytest tests/test_passFailStatus.py", &seen, "").unwrap();
        r.record_test_run("./run_tests.sh", &seen, "").unwrap();
        r.end(EndedBy::BudgetExhausted);
        let t = r.into_trajectory(CODE_DIFF.replace("src/calc.py", "bzt/modules/passfail.py"));
        let v = verification(&seen, "");
        assert_eq!(
            classify_trajectory(&t, &v, &expected),
            TrajectoryBucket::Failure(FailureBucket::SearchLocalization)
        );

        // Patch quality: all 6 targets are present, one still fails.
        let ids: Vec<String> = (0..6).map(|i| format!("tests/test_aggregator.py::test_kpi{i}")).collect();
        let expected = labels(&ids.iter().map(String::as_str).collect::<Vec<_>>(), &[]);
        let log: String = ids
            .iter()
            .enumerate()
            .map(|(i, id)| format!("{id} {}\n", if i == 2 { "FAILED" } else { "PASSED" }))
            .collect();
        let mut r = TrajectoryRecorder::new("taurus-kpi");
        r.record(EventKind::ToolCall, "open bzt/modules/aggregator.py", None).unwrap();
        r.record(EventKind::FileEdit, "edit KPISet", None).unwrap();
        r.record(EventKind::ReproRun, "python reproduce_issue.py", None).unwrap();
        r.record_test_run("./run_tests.sh", &log, "").unwrap();
        r.record(EventKind::Finish, "submit", None).unwrap();
        r.end(EndedBy::Finish);
        let t = r.into_trajectory(CODE_DIFF.replace("src/calc.py", "bzt/modules/aggregator.py"));
        let v = verification(&log, "");
        assert_eq!(
            classify_trajectory(&t, &v, &expected),
            TrajectoryBucket::Failure(FailureBucket::PatchQuality)
        );
    });
}

fn fixture_log(name: &str) -> String {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/logs").join(name);
    String::from_utf8_lossy(&fs::read(path).unwrap()).into_owned()
}

#[test]
fn criterion_09_parser_goldens() {
    criterion(9, "parser goldens", || {
        for name in ["verbose_ra.log", "verbose.log", "verbose_color.log"] {
            let text = fixture_log(name);
            let map = parse_test_log(&text, "");
            let summary = parse_summary_counts(&text).unwrap();
            assert!(map.parse_ok, "{name}");
            assert_eq!(map.count(TestStatus::Passed), summary.passed, "{name}");
            assert_eq!(map.count(TestStatus::Failed), summary.failed, "{name}");
            assert_eq!(map.count(TestStatus::Error), summary.errors, "{name}");
            assert_eq!(map.count(TestStatus::Skipped), summary.skipped, "{name}");
            assert_eq!(map.count(TestStatus::XFailed), summary.xfailed, "{name}");
            assert_eq!(map.len(), summary.total(), "{name}");
            for status in [TestStatus::Passed, TestStatus::Failed, TestStatus::Error, TestStatus::Skipped] {
                assert!(map.count(status) > 0, "{name} lacks {status:?}");
            }
            assert!(map.outcomes.keys().any(|id| id.test_name.contains('[')), "{name} lacks params");
        }
        for name in ["empty.log", "garbage.log"] {
            let map = parse_test_log(&fixture_log(name), "");
            assert!(!map.parse_ok, "{name}");
            assert!(map.is_empty(), "{name}");
        }
        assert!(!parse_test_log("", "").parse_ok);
    });
}

#[test]
fn criterion_10_schema_round_trip() {
    criterion(10, "release schema round trip", || {
        let ws = common::fixture_pipeline();
        let p = Pipeline::new(ws.config.clone());
        p.run_through(Stage::Package).unwrap();
        let base = release(&p).remove(0);
        let three: Vec<TaskInstance> = (0..3)
            .map(|i| {
                let mut t = base.clone();
                t.instance_id = format!("{}_{i}", base.instance_id);
                t.difficulty = (i == 1).then(|| "easy".to_string());
                t
            })
            .collect();

        let first = ws.dir.path().join("first.jsonl");
        write_jsonl(&three, &first).unwrap();
        let back = read_jsonl(&first).unwrap();
        assert_eq!(back, three);
        let second = ws.dir.path().join("second.jsonl");
        write_jsonl(&back, &second).unwrap();
        assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
        assert_eq!(to_jsonl(&back).unwrap(), fs::read_to_string(&first).unwrap());

        let text = fs::read_to_string(&first).unwrap();
        for field in FIELDS {
            let mut lines: Vec<String> = text.lines().map(String::from).collect();
            let mut row: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&lines[1]).unwrap();
            assert!(row.remove(field).is_some(), "{field}");
            lines[1] = serde_json::to_string(&row).unwrap();
            match parse_jsonl(&lines.join("\n")) {
                Err(SchemaError::Row { line, message }) => {
                    assert_eq!(line, 2, "{field}");
                    assert!(message.contains(field), "{field}: {message}");
                }
                other => panic!("{field}: expected a row error, got {other:?}"),
            }
        }
    });
}
