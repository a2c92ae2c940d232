//! Commit-level heuristics applied before any execution.

use serde::{Deserialize, Serialize};

use crate::diffkit::PatchStats;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrefilterConfig {
    pub max_num_non_test_files: usize,
    pub max_num_non_test_edited_lines: usize,
    pub max_patch_length: usize,
    pub keep_only_python_commits: bool,
    pub keep_only_small_commits: bool,
}

impl Default for PrefilterConfig {
    fn default() -> Self {
        PrefilterConfig {
            max_num_non_test_files: 5,
            max_num_non_test_edited_lines: 200,
            max_patch_length: 10_000,
            keep_only_python_commits: true,
            keep_only_small_commits: true,
        }
    }
}

impl PrefilterConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, value) in [
            ("max_num_non_test_files", self.max_num_non_test_files),
            ("max_num_non_test_edited_lines", self.max_num_non_test_edited_lines),
            ("max_patch_length", self.max_patch_length),
        ] {
            if value == 0 {
                return Err(format!("prefilter.{name} must be > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    EmptyDiff,
    DocsOnly,
    NonPython,
    TooManyFiles,
    TooManyLines,
    PatchTooLong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub keep: bool,
    pub reject_reason: Option<RejectReason>,
}

impl FilterDecision {
    pub const KEEP: FilterDecision = FilterDecision {
        keep: true,
        reject_reason: None,
    };

    fn reject(reason: RejectReason) -> Self {
        FilterDecision {
            keep: false,
            reject_reason: Some(reason),
        }
    }
}

/// Runs the checks in a fixed order and records the first failure. Caps
/// are inclusive: a value equal to its maximum is kept.
pub fn apply_prefilters(stats: &PatchStats, config: &PrefilterConfig) -> FilterDecision {
    use RejectReason::*;
    if stats.num_files == 0 || stats.patch_length == 0 {
        return FilterDecision::reject(EmptyDiff);
    }
    if stats.docs_only {
        return FilterDecision::reject(DocsOnly);
    }
    if config.keep_only_python_commits && !stats.touches_only_python {
        return FilterDecision::reject(NonPython);
    }
    if config.keep_only_small_commits {
        if stats.num_non_test_files > config.max_num_non_test_files {
            return FilterDecision::reject(TooManyFiles);
        }
        if stats.num_non_test_edited_lines > config.max_num_non_test_edited_lines {
            return FilterDecision::reject(TooManyLines);
        }
        if stats.patch_length > config.max_patch_length {
            return FilterDecision::reject(PatchTooLong);
        }
    }
    FilterDecision::KEEP
}

/// Stable ordering that puts candidates touching test files first.
pub fn prioritize<T>(items: &mut [T], stats: impl Fn(&T) -> &PatchStats) {
    items.sort_by_key(|item| stats(item).num_test_files == 0);
}
