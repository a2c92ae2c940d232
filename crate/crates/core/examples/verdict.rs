//! Compare base and merged outcome maps and derive labels.
use swe_forge::runner::{CommitRecords, ExecutionRecord, Phase};
use swe_forge::testlog::parse_test_log;
use swe_forge::verdict::evaluate;

fn main() {
    let base = parse_test_log(
        "tests/t.py::test_add FAILED\ntests/t.py::test_mul PASSED\ntests/t.py::test_pow SKIPPED\n",
        "",
    );
    let merged = parse_test_log(
        "tests/t.py::test_add PASSED\ntests/t.py::test_mul PASSED\ntests/t.py::test_pow PASSED\n",
        "",
    );
    let ok = || CommitRecords {
        setup: ExecutionRecord::synthetic(Phase::Setup, 0),
        test: ExecutionRecord::synthetic(Phase::Test, 0),
    };
    let eval = evaluate(&ok(), &ok(), &base, &merged);
    println!("exec_type: {}", eval.exec_type.as_str());
    if let Some(report) = &eval.report {
        println!("improved:  {:?}", report.improved);
        println!("regressed: {:?}", report.regressed);
    }
    if let Some(labels) = &eval.labels {
        println!("FAIL_TO_PASS: {:?}", labels.fail_to_pass);
        println!("PASS_TO_PASS: {:?}", labels.pass_to_pass);
    }
}
