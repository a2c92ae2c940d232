//! Parse a unified diff and split it into code and test patches.
use swe_forge::diffkit::{compute_stats, parse_unified_diff, serialize, split_patch};

const DIFF: &str = "\
diff --git a/src/calc.py b/src/calc.py
index 1111111..2222222 100644
--- a/src/calc.py
+++ b/src/calc.py
@@ -1,2 +1,2 @@
 def add(a, b):
-    return a - b
+    return a + b
diff --git a/tests/test_calc.py b/tests/test_calc.py
index 3333333..4444444 100644
--- a/tests/test_calc.py
+++ b/tests/test_calc.py
@@ -3,0 +4,3 @@ def test_add():
+
+def test_add_negative():
+    assert add(-1, -2) == -3
";

fn main() {
    let diffs = parse_unified_diff(DIFF).expect("valid diff");
    assert_eq!(serialize(&diffs), DIFF);
    let split = split_patch(&diffs);
    println!("--- code patch ---\n{}", split.code_patch);
    println!("--- test patch ---\n{}", split.test_patch);
    println!("{:#?}", compute_stats(&diffs));
}
