//! Parse a pytest report from a file (or a built-in sample) into outcomes.
use swe_forge::testlog::{parse_summary_counts, parse_test_log};

const SAMPLE: &str = "\
============================= test session starts ==============================
tests/test_calc.py::test_add FAILED                                      [ 33%]
tests/test_calc.py::test_mul PASSED                                      [ 66%]
tests/test_calc.py::test_div[0-1] SKIPPED (no zero division)             [100%]
=========================== short test summary info ============================
FAILED tests/test_calc.py::test_add - assert -1 == 5
==================== 1 failed, 1 passed, 1 skipped in 0.03s ====================
";

fn main() -> std::io::Result<()> {
    let text = match std::env::args().nth(1) {
        Some(path) => std::fs::read_to_string(path)?,
        None => SAMPLE.to_string(),
    };
    let map = parse_test_log(&text, "");
    println!("parse_ok={}", map.parse_ok);
    for (id, status) in &map.outcomes {
        println!("{:<8} {}", status.as_str(), id.rendered());
    }
    if let Some(counts) = parse_summary_counts(&text) {
        println!("summary line: {counts:?}");
    }
    for marker in &map.fatal_markers {
        println!("fatal: {marker}");
    }
    Ok(())
}
