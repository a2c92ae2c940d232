//! Record a trajectory, check the submit gate and bucket the outcome.
use swe_forge::gate::{check_submit_gate, classify_trajectory, EndedBy, EventKind, TrajectoryRecorder};
use swe_forge::testlog::parse_test_log;
use swe_forge::verdict::VerifiedLabels;

const FIX: &str = "\
diff --git a/src/calc.py b/src/calc.py
--- a/src/calc.py
+++ b/src/calc.py
@@ -1,2 +1,2 @@
 def add(a, b):
-    return a - b
+    return a + b
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let labels = VerifiedLabels {
        fail_to_pass: vec!["tests/test_calc.py::test_add".into()],
        pass_to_pass: vec![],
    };
    let mut rec = TrajectoryRecorder::new("fixture__calc__demo").with_budget(10);
    rec.record(EventKind::ToolCall, "grep -n 'def add' -r src", None)?;
    rec.record(EventKind::ReproRun, "python -c 'from calc import add; print(add(2, 3))'", None)?;
    rec.record_test_run("pytest -v", "tests/test_calc.py::test_add FAILED\n", "")?;
    rec.record(EventKind::FileEdit, "edit src/calc.py", None)?;
    rec.record_test_run("pytest -v", "tests/test_calc.py::test_add PASSED\n", "")?;
    rec.record(EventKind::Finish, "submit", None)?;
    rec.end(EndedBy::Finish);
    let traj = rec.into_trajectory(FIX);

    println!("gate: {:?}", check_submit_gate(&traj));
    let verification = parse_test_log("tests/test_calc.py::test_add PASSED\n", "");
    println!("bucket: {}", classify_trajectory(&traj, &verification, &labels).as_str());

    let mut empty = traj.clone();
    empty.final_diff.clear();
    println!("without a diff: {:?}", check_submit_gate(&empty).reasons);
    Ok(())
}
