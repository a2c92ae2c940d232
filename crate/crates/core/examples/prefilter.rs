//! Run the commit-level heuristics over a few synthetic diffs.
use swe_forge::diffkit::{compute_stats, parse_unified_diff};
use swe_forge::prefilter::{apply_prefilters, PrefilterConfig};

fn diff_for(path: &str, lines: usize) -> String {
    let body: String = (0..lines).map(|i| format!("+line {i}\n")).collect();
    format!("diff --git a/{path} b/{path}\n--- a/{path}\n+++ b/{path}\n@@ -0,0 +1,{lines} @@\n{body}")
}

fn main() {
    let config = PrefilterConfig::default();
    let cases = [
        ("python fix", diff_for("src/pkg/mod.py", 4)),
        ("docs only", diff_for("docs/index.md", 3)),
        ("javascript", diff_for("web/app.js", 3)),
        ("large", diff_for("src/pkg/big.py", 250)),
        ("test only", diff_for("tests/test_mod.py", 5)),
    ];
    for (name, diff) in cases {
        let stats = compute_stats(&parse_unified_diff(&diff).unwrap());
        let decision = apply_prefilters(&stats, &config);
        println!("{name:<12} keep={:<5} reason={:?}", decision.keep, decision.reject_reason);
    }
}
