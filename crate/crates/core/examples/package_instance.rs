//! Problem statements from the template and from a generator hook.
use swe_forge::packager::{find_leak, render_problem_statement, StatementInputs};
use swe_forge::verdict::VerifiedLabels;

const BASE_LOG: &str = "\
tests/test_calc.py::test_add FAILED
    def test_add():
>       assert add(2, 3) == 5
E       assert -1 == 5
E        +  where -1 = add(2, 3)
";

fn main() {
    let labels = VerifiedLabels {
        fail_to_pass: vec!["tests/test_calc.py::test_add".into()],
        pass_to_pass: vec!["tests/test_calc.py::test_mul".into()],
    };
    let code_files = vec!["src/calc.py".to_string()];
    let inputs = StatementInputs {
        base_test_log: BASE_LOG,
        code_files: &code_files,
        commit_subject: "Fix add returning a difference (#3)",
        labels: &labels,
    };

    let template = render_problem_statement(&inputs, None).unwrap();
    println!("[{:?}]\n{}\n", template.source, template.text);

    let generator = |_prompt: &str| -> Result<String, String> {
        Ok("Sure.\n[ISSUE]\nadd(2, 3) returns -1 instead of 5.\n[/ISSUE]".into())
    };
    let generated = render_problem_statement(&inputs, Some(&generator)).unwrap();
    println!("[{:?}]\n{}\n", generated.source, generated.text);

    let leaky = |_: &str| -> Result<String, String> { Ok("[ISSUE]tests/test_calc.py::test_add fails[/ISSUE]".into()) };
    println!("leaky generator: {}", render_problem_statement(&inputs, Some(&leaky)).unwrap_err());
    println!("leak scan on template: {:?}", find_leak(&template.text, &labels));
}
