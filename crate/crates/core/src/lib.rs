//! Mine merged-PR commit pairs from git repositories into execution-verified
//! software-engineering task instances.
//!
//! The crate is organised as one module per pipeline layer:
//!
//! - [`ingest`]: seed lists, local checkouts, candidate commit pairs
//! - [`diffkit`]: unified-diff parsing, test/code splitting, patch statistics
//! - [`prefilter`]: cheap commit-level heuristics applied before execution
//! - [`envprofile`]: repo-quarter environment profiles, build recipes, the profile store
//! - [`runner`]: copy-on-start workspaces and setup/test execution
//! - [`testlog`]: pytest-style log parsing into per-test outcomes
//! - [`verdict`]: base/merged comparison, execution types, FAIL_TO_PASS / PASS_TO_PASS
//! - [`packager`]: problem statements and the JSONL release format
//! - [`gate`]: trajectory recording, submit gating, success/failure buckets
//! - [`pipeline`]: configuration, resumable stages, run reports
//!
//! Runnable walkthroughs of each layer live in the crate's `examples/`
//! directory (`cargo run -p swe-forge --example <name>`).

pub mod diffkit;
pub mod envprofile;
pub mod fixture;
pub mod gate;
pub mod git;
pub mod ingest;
pub mod packager;
pub mod pipeline;
pub mod prefilter;
pub mod runner;
pub mod testlog;
pub mod verdict;

pub use diffkit::{FileDiff, PatchSplit, PatchStats};
pub use envprofile::{ProfileSpec, ProfileStore, QuarterKey};
pub use ingest::{CandidatePair, RepoCheckout, RepoSeed};
pub use packager::TaskInstance;
pub use testlog::{TestId, TestOutcomeMap, TestStatus};
pub use verdict::{ComparisonReport, ExecType, VerifiedLabels};
