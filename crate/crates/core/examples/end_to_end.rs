//! Run every stage on the fixture repository and print the report.
use std::fs;

use swe_forge::fixture::bugfix_scenario;
use swe_forge::packager::read_jsonl;
use swe_forge::pipeline::{Pipeline, PipelineConfig, Stage};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let scenario = bugfix_scenario(dir.path().join("upstream"))?;
    let seeds = dir.path().join("seeds.txt");
    fs::write(&seeds, format!("fixture/calc\t{}\n", scenario.repo.path().display()))?;

    let pipeline = Pipeline::new(PipelineConfig::rooted(dir.path(), &seeds));
    for summary in pipeline.run_through(Stage::Package)? {
        println!("{:<10} {}", summary.stage, summary.message);
    }
    let (_, report) = pipeline.report()?;
    print!("\n{}", report.message);

    for inst in read_jsonl(&pipeline.config.release_path)? {
        println!("\n{}  FAIL_TO_PASS={:?}", inst.instance_id, inst.fail_to_pass);
        println!("{}", inst.problem_statement);
    }
    Ok(())
}
