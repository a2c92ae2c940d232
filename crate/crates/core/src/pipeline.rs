//! Configuration, resumable stages and run reports.
//!
//! Stages read and write files under `artifacts_dir`:
//!
//! | stage         | reads                              | writes                              |
//! |---------------|------------------------------------|-------------------------------------|
//! | `mine`        | seed list                          | `candidates.jsonl`                  |
//! | `filter`      | `candidates.jsonl`                 | `filtered.jsonl`                    |
//! | `build-env`   | `filtered.jsonl`                   | `profiles/`, manifest               |
//! | `execute`     | manifest (`build-env`)             | `exec/<id>/`, `snapshots/`, manifest|
//! | `classify`    | `filtered.jsonl`, `exec/`          | `verdicts.jsonl`                    |
//! | `package`     | `verdicts.jsonl`                   | release JSONL, `instances/<id>/`    |
//! | `gate-replay` | release JSONL, trajectories        | `gate_report.json`                  |
//! | `report`      | `verdicts.jsonl`, `profiles/`      | `report.json`                       |
//!
//! Per-candidate stages (`build-env`, `execute`) append one line per finished
//! candidate to `manifest.jsonl` and skip candidates already listed there,
//! unless forced. The other stages rewrite their output wholesale and are
//! skipped when it already exists.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffkit::{self, compute_stats_with, parse_unified_diff, split_patch_with, PatchStats, TestPathRules};
use crate::envprofile::{
    derive_quarter_key, ContainerImageBuilder, EnvError, HostEnvironment, ImageBuilder, ProfileKey,
    ProfileRecord, ProfileStatus, ProfileStore, ResolvedEnv, SpecSynthesizer,
};
use crate::gate::{self, aggregate_evidence_stats, classify_trajectory_with, TrajectoryBucket};
use crate::ingest::{self, CandidatePair, RepoCheckout, RepoSeed};
use crate::packager::{self, CandidateArtifacts, StatementGenerator};
use crate::prefilter::{apply_prefilters, FilterDecision, PrefilterConfig};
use crate::runner::{self, ContainerBackend, ExecutionBackend, LocalBackend, Runner, Timeouts};
use crate::testlog::{parse_test_log, TestOutcomeMap};
use crate::verdict::{evaluate, ExecType, MatchLevel, VerifiedLabels};

type Checkouts = HashMap<String, RepoCheckout>;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error in {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{stage}: missing upstream artifact {path}")]
    MissingArtifact { stage: Stage, path: PathBuf },
    #[error("{stage}: {message}")]
    Stage { stage: Stage, message: String },
}

impl PipelineError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config { .. } => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Mine,
    Filter,
    BuildEnv,
    Execute,
    Classify,
    Package,
    GateReplay,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Mine,
        Stage::Filter,
        Stage::BuildEnv,
        Stage::Execute,
        Stage::Classify,
        Stage::Package,
        Stage::GateReplay,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Mine => "mine",
            Stage::Filter => "filter",
            Stage::BuildEnv => "build-env",
            Stage::Execute => "execute",
            Stage::Classify => "classify",
            Stage::Package => "package",
            Stage::GateReplay => "gate-replay",
            Stage::Report => "report",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Stage::ALL.iter().map(|s| s.as_str()).collect();
                format!("unknown stage {s:?}; expected one of {}", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Container,
    #[default]
    LocalSubprocess,
}

fn default_workers() -> usize {
    1
}

fn default_setup_command() -> String {
    "python3 --version".into()
}

fn default_test_command() -> String {
    "python3 -m pytest -v -rA -p no:cacheprovider".into()
}

/// The TOML configuration file. Relative paths are resolved against the
/// directory containing the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed_list: PathBuf,
    pub workdir: PathBuf,
    pub artifacts_dir: PathBuf,
    pub release_path: PathBuf,
    #[serde(default)]
    pub prefilter: PrefilterConfig,
    #[serde(default = "default_workers")]
    pub worker_count: usize,
    #[serde(default)]
    pub timeouts: Timeouts,
    #[serde(default)]
    pub backend: BackendKind,
    /// Local mirrors laid out as `<mirror_root>/<repo_key>`.
    #[serde(default)]
    pub mirror_root: Option<PathBuf>,
    /// Per-repository `<repo_key>.toml` environment overrides.
    #[serde(default)]
    pub overrides_dir: Option<PathBuf>,
    /// Shared environment linked into each local workspace (e.g. a venv).
    #[serde(default)]
    pub local_env_dir: Option<PathBuf>,
    #[serde(default)]
    pub trajectories_dir: Option<PathBuf>,
    #[serde(default = "default_setup_command")]
    pub setup_command: String,
    #[serde(default = "default_test_command")]
    pub test_command: String,
    /// Recorded test commands per repository (`owner/name`).
    #[serde(default)]
    pub test_commands: BTreeMap<String, String>,
    #[serde(default)]
    pub extra_test_roots: Vec<String>,
    #[serde(default)]
    pub default_interpreter: Option<String>,
}

impl PipelineConfig {
    /// Minimal config rooted at `root`, with every other field defaulted.
    pub fn rooted(root: &Path, seed_list: &Path) -> Self {
        PipelineConfig {
            seed_list: seed_list.to_path_buf(),
            workdir: root.join("work"),
            artifacts_dir: root.join("artifacts"),
            release_path: root.join("release").join("dataset.jsonl"),
            prefilter: PrefilterConfig::default(),
            worker_count: 1,
            timeouts: Timeouts::default(),
            backend: BackendKind::LocalSubprocess,
            mirror_root: None,
            overrides_dir: None,
            local_env_dir: None,
            trajectories_dir: None,
            setup_command: default_setup_command(),
            test_command: default_test_command(),
            test_commands: BTreeMap::new(),
            extra_test_roots: Vec::new(),
            default_interpreter: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let err = |message: String| PipelineError::Config {
            path: path.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut config: PipelineConfig = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate().map_err(err)?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.seed_list);
        fix(&mut self.workdir);
        fix(&mut self.artifacts_dir);
        fix(&mut self.release_path);
        for p in [
            &mut self.mirror_root,
            &mut self.overrides_dir,
            &mut self.local_env_dir,
            &mut self.trajectories_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.worker_count == 0 {
            return Err("worker_count must be >= 1".into());
        }
        let paths = [
            ("seed_list", &self.seed_list),
            ("workdir", &self.workdir),
            ("artifacts_dir", &self.artifacts_dir),
            ("release_path", &self.release_path),
        ];
        for (i, (a, pa)) in paths.iter().enumerate() {
            for (b, pb) in &paths[i + 1..] {
                if pa == pb {
                    return Err(format!("{a} and {b} must be distinct paths"));
                }
            }
        }
        if self.setup_command.trim().is_empty() || self.test_command.trim().is_empty() {
            return Err("setup_command and test_command must be non-empty".into());
        }
        if self.timeouts.setup_secs == 0 || self.timeouts.test_secs == 0 {
            return Err("timeouts must be > 0 seconds".into());
        }
        self.prefilter.validate()
    }

    pub fn test_rules(&self) -> TestPathRules {
        TestPathRules {
            extra_test_roots: self.extra_test_roots.clone(),
        }
    }

    pub fn test_command_for(&self, repo: &str) -> &str {
        self.test_commands.get(repo).map(String::as_str).unwrap_or(&self.test_command)
    }

    pub fn trajectories_path(&self) -> PathBuf {
        self.trajectories_dir
            .clone()
            .unwrap_or_else(|| self.artifacts_dir.join("trajectories"))
    }
}

/// `num / den` as a percentage with one decimal, rounded half up.
pub fn format_percent(num: u64, den: u64) -> String {
    if den == 0 {
        return "n/a".into();
    }
    let tenths = (u128::from(num) * 2000 / u128::from(den)).div_ceil(2);
    format!("{}.{}%", tenths / 10, tenths % 10)
}

/// One mined candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub id: String,
    pub seed: RepoSeed,
    pub pair: CandidatePair,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRow {
    pub candidate: CandidateRow,
    pub stats: PatchStats,
    pub decision: FilterDecision,
}

/// Classification of one candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub id: String,
    pub repo: String,
    pub quarter: String,
    pub merged_at: DateTime<Utc>,
    pub exec_type: ExecType,
    #[serde(default)]
    pub match_level: Option<MatchLevel>,
    #[serde(default)]
    pub labels: Option<VerifiedLabels>,
    #[serde(default)]
    pub env_profile: Option<String>,
    #[serde(default)]
    pub note: Option<String>,
}

impl VerdictRow {
    pub fn new(id: &str, repo: &str, quarter: &str, merged_at: DateTime<Utc>, exec_type: ExecType) -> Self {
        VerdictRow {
            id: id.into(),
            repo: repo.into(),
            quarter: quarter.into(),
            merged_at,
            exec_type,
            match_level: None,
            labels: None,
            env_profile: None,
            note: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: Stage,
    pub id: String,
    pub status: String,
    #[serde(default)]
    pub detail: Option<String>,
    #[serde(default)]
    pub digests: BTreeMap<String, String>,
}

/// Append-only completion log shared by all workers.
pub struct Manifest {
    file: Mutex<File>,
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let entries = match fs::read_to_string(path) {
            // A torn final line from a killed run is ignored.
            Ok(text) => text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e),
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Manifest {
            file: Mutex::new(file),
            entries,
        })
    }

    /// Latest entry per candidate for `stage`, as loaded at open time.
    pub fn completed(&self, stage: Stage) -> BTreeMap<String, ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.stage == stage)
            .map(|e| (e.id.clone(), e.clone()))
            .collect()
    }

    pub fn append(&self, entry: &ManifestEntry) -> std::io::Result<()> {
        let mut line = serde_json::to_string(entry).expect("manifest entry serializes");
        line.push('\n');
        let mut file = self.file.lock().unwrap();
        file.write_all(line.as_bytes())?;
        file.flush()
    }
}

fn digest_dir(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name().into_iter().flatten() {
        if entry.file_type().is_file() {
            if let Ok(bytes) = fs::read(entry.path()) {
                let rel = entry.path().strip_prefix(dir).unwrap_or(entry.path());
                out.insert(rel.to_string_lossy().into_owned(), hex::encode(Sha256::digest(&bytes)));
            }
        }
    }
    out
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> std::io::Result<()> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).expect("row serializes"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Runs `f` over `items` on up to `workers` threads, in item order.
fn for_each_parallel<T: Sync>(items: &[T], workers: usize, f: impl Fn(&T) + Sync) {
    let next = AtomicUsize::new(0);
    let workers = workers.clamp(1, items.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                f(item);
            });
        }
    });
}

/// Round-robin across quarter groups, so every quarter's first candidate
/// (and hence its profile build) is scheduled before any second one.
pub fn schedule_by_quarter<T>(items: Vec<T>, quarter: impl Fn(&T) -> String) -> Vec<T> {
    let mut groups: Vec<(String, Vec<T>)> = Vec::new();
    for item in items {
        let key = quarter(&item);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(item),
            None => groups.push((key, vec![item])),
        }
    }
    let mut queues: Vec<std::collections::VecDeque<T>> = groups.into_iter().map(|(_, g)| g.into()).collect();
    let mut out = Vec::new();
    loop {
        let mut any = false;
        for q in &mut queues {
            if let Some(item) = q.pop_front() {
                out.push(item);
                any = true;
            }
        }
        if !any {
            break;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub candidates_executed: u64,
    pub exec_type_counts: BTreeMap<ExecType, u64>,
    pub exec_type_percentages: BTreeMap<ExecType, String>,
    pub yield_fraction: f64,
    pub yield_percent: String,
    pub unique_repos_in_final: u64,
    pub profiles_built: u64,
    pub fallback_profiles_built: u64,
    pub unique_env_signatures: u64,
    pub quarters_covered: u64,
    pub first_merged_at: Option<DateTime<Utc>>,
    pub last_merged_at: Option<DateTime<Utc>>,
}

pub fn compute_report(verdicts: &[VerdictRow], profiles: &[ProfileRecord]) -> RunReport {
    let total = verdicts.len() as u64;
    let mut counts: BTreeMap<ExecType, u64> = ExecType::ALL.iter().map(|t| (*t, 0)).collect();
    for v in verdicts {
        *counts.entry(v.exec_type).or_default() += 1;
    }
    let better = counts[&ExecType::NewCommitBetter];
    let built: Vec<&ProfileRecord> = profiles.iter().filter(|p| p.status == ProfileStatus::Built).collect();
    RunReport {
        candidates_executed: total,
        exec_type_percentages: counts.iter().map(|(t, n)| (*t, format_percent(*n, total))).collect(),
        exec_type_counts: counts,
        yield_fraction: if total == 0 { 0.0 } else { better as f64 / total as f64 },
        yield_percent: format_percent(better, total),
        unique_repos_in_final: verdicts
            .iter()
            .filter(|v| v.exec_type == ExecType::NewCommitBetter)
            .map(|v| v.repo.as_str())
            .collect::<BTreeSet<_>>()
            .len() as u64,
        profiles_built: built.iter().filter(|p| !p.fallback_used).count() as u64,
        fallback_profiles_built: built.iter().filter(|p| p.fallback_used).count() as u64,
        unique_env_signatures: built
            .iter()
            .map(|p| p.spec.spec_signature.as_str())
            .collect::<BTreeSet<_>>()
            .len() as u64,
        quarters_covered: verdicts.iter().map(|v| v.quarter.as_str()).collect::<BTreeSet<_>>().len() as u64,
        first_merged_at: verdicts.iter().map(|v| v.merged_at).min(),
        last_merged_at: verdicts.iter().map(|v| v.merged_at).max(),
    }
}

pub fn render_report_table(r: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<28} {:>10} {:>8}", "metric", "count", "share");
    let _ = writeln!(out, "{}", "-".repeat(48));
    let _ = writeln!(out, "{:<28} {:>10}", "candidates executed", r.candidates_executed);
    for t in ExecType::ALL {
        let _ = writeln!(
            out,
            "{:<28} {:>10} {:>8}",
            t.as_str(),
            r.exec_type_counts.get(&t).copied().unwrap_or(0),
            r.exec_type_percentages.get(&t).map(String::as_str).unwrap_or("n/a"),
        );
    }
    let _ = writeln!(out, "{:<28} {:>10} {:>8}", "yield", "", r.yield_percent);
    let _ = writeln!(out, "{:<28} {:>10}", "unique repos in final", r.unique_repos_in_final);
    let _ = writeln!(out, "{:<28} {:>10}", "quarter profiles built", r.profiles_built);
    let _ = writeln!(out, "{:<28} {:>10}", "fallback profiles built", r.fallback_profiles_built);
    let _ = writeln!(out, "{:<28} {:>10}", "unique env signatures", r.unique_env_signatures);
    let _ = writeln!(out, "{:<28} {:>10}", "quarters covered", r.quarters_covered);
    if let (Some(a), Some(b)) = (r.first_merged_at, r.last_merged_at) {
        let _ = writeln!(out, "{:<28} {} .. {}", "merge dates", a.date_naive(), b.date_naive());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub processed: usize,
    pub skipped: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub buckets: BTreeMap<String, TrajectoryBucket>,
    pub bucket_counts: BTreeMap<String, u64>,
    pub evidence: BTreeMap<String, String>,
    pub unmatched_trajectories: Vec<String>,
}

/// A configured pipeline. Builders, backends and statement generators can
/// be swapped for tests or custom deployments.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub force: bool,
    pub limit: Option<usize>,
    builder: Option<Arc<dyn ImageBuilder>>,
    backend: Option<Arc<dyn ExecutionBackend>>,
    generator: Option<Arc<dyn StatementGenerator>>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Self {
        Pipeline {
            config,
            force: false,
            limit: None,
            builder: None,
            backend: None,
            generator: None,
        }
    }

    pub fn with_builder(mut self, builder: Arc<dyn ImageBuilder>) -> Self {
        self.builder = Some(builder);
        self
    }

    pub fn with_backend(mut self, backend: Arc<dyn ExecutionBackend>) -> Self {
        self.backend = Some(backend);
        self
    }

    pub fn with_generator(mut self, generator: Arc<dyn StatementGenerator>) -> Self {
        self.generator = Some(generator);
        self
    }

    fn art(&self, rel: &str) -> PathBuf {
        self.config.artifacts_dir.join(rel)
    }

    pub fn candidates_path(&self) -> PathBuf {
        self.art("candidates.jsonl")
    }
    pub fn filtered_path(&self) -> PathBuf {
        self.art("filtered.jsonl")
    }
    pub fn manifest_path(&self) -> PathBuf {
        self.art("manifest.jsonl")
    }
    pub fn profiles_dir(&self) -> PathBuf {
        self.art("profiles")
    }
    pub fn snapshots_dir(&self) -> PathBuf {
        self.art("snapshots")
    }
    pub fn exec_dir(&self, id: &str) -> PathBuf {
        self.art("exec").join(id)
    }
    pub fn verdicts_path(&self) -> PathBuf {
        self.art("verdicts.jsonl")
    }
    pub fn instances_dir(&self) -> PathBuf {
        self.art("instances")
    }
    pub fn gate_report_path(&self) -> PathBuf {
        self.art("gate_report.json")
    }
    pub fn report_path(&self) -> PathBuf {
        self.art("report.json")
    }

    fn stage_err(stage: Stage) -> impl Fn(String) -> PipelineError {
        move |message| PipelineError::Stage { stage, message }
    }

    fn read_rows<T: DeserializeOwned>(&self, stage: Stage, path: &Path) -> Result<Vec<T>, PipelineError> {
        if !path.is_file() {
            return Err(PipelineError::MissingArtifact {
                stage,
                path: path.to_path_buf(),
            });
        }
        let text = fs::read_to_string(path).map_err(|e| Self::stage_err(stage)(format!("{}: {e}", path.display())))?;
        text.lines()
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Self::stage_err(stage)(format!("{}:{}: {e}", path.display(), i + 1)))
            })
            .collect()
    }

    fn builder(&self) -> Arc<dyn ImageBuilder> {
        self.builder.clone().unwrap_or_else(|| match self.config.backend {
            BackendKind::Container => Arc::new(ContainerImageBuilder::default()),
            BackendKind::LocalSubprocess => Arc::new(HostEnvironment),
        })
    }

    fn backend(&self) -> Arc<dyn ExecutionBackend> {
        self.backend.clone().unwrap_or_else(|| match self.config.backend {
            BackendKind::Container => Arc::new(ContainerBackend {
                artifacts_dir: Some(self.config.artifacts_dir.clone()),
                ..ContainerBackend::default()
            }),
            BackendKind::LocalSubprocess => Arc::new(LocalBackend {
                env_dir: self.config.local_env_dir.clone(),
                scratch_dir: Some(self.config.workdir.join("scratch")),
            }),
        })
    }

    fn synthesizer(&self) -> SpecSynthesizer {
        let mut s = SpecSynthesizer {
            overrides_dir: self.config.overrides_dir.clone(),
            ..SpecSynthesizer::default()
        };
        if let Some(v) = &self.config.default_interpreter {
            s.default_interpreter = v.clone();
        }
        s
    }

    fn open_checkout(&self, seed: &RepoSeed) -> Result<RepoCheckout, ingest::IngestError> {
        RepoCheckout::open(seed.clone(), self.config.workdir.join("repos").join(&seed.repo_key))
    }

    /// Runs one stage. Wall-clock time is recorded in `timings.json`.
    pub fn run_stage(&self, stage: Stage) -> Result<StageSummary, PipelineError> {
        let started = Instant::now();
        fs::create_dir_all(&self.config.artifacts_dir)
            .map_err(|e| Self::stage_err(stage)(format!("{}: {e}", self.config.artifacts_dir.display())))?;
        let summary = match stage {
            Stage::Mine => self.mine(),
            Stage::Filter => self.filter(),
            Stage::BuildEnv => self.build_env(),
            Stage::Execute => self.execute(),
            Stage::Classify => self.classify(),
            Stage::Package => self.package(),
            Stage::GateReplay => self.gate_replay(),
            Stage::Report => self.report().map(|(_, s)| s),
        }?;
        self.record_timing(stage, started.elapsed().as_secs_f64());
        log::info!("{stage}: {}", summary.message);
        Ok(summary)
    }

    /// Runs `mine` through `last` in order.
    pub fn run_through(&self, last: Stage) -> Result<Vec<StageSummary>, PipelineError> {
        Stage::ALL
            .into_iter()
            .filter(|s| *s <= last && *s != Stage::GateReplay)
            .map(|s| self.run_stage(s))
            .collect()
    }

    fn record_timing(&self, stage: Stage, secs: f64) {
        let path = self.art("timings.json");
        let mut timings: BTreeMap<String, f64> = fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        timings.insert(stage.as_str().to_string(), secs);
        let _ = write_atomic(&path, serde_json::to_string_pretty(&timings).unwrap().as_bytes());
    }

    fn skip_existing(&self, stage: Stage, output: &Path) -> Option<StageSummary> {
        (!self.force && output.is_file()).then(|| StageSummary {
            stage,
            processed: 0,
            skipped: 1,
            message: format!("{} exists; use --force to rebuild", output.display()),
        })
    }

    fn mine(&self) -> Result<StageSummary, PipelineError> {
        let stage = Stage::Mine;
        let out_path = self.candidates_path();
        if let Some(s) = self.skip_existing(stage, &out_path) {
            return Ok(s);
        }
        let err = Self::stage_err(stage);
        if !self.config.seed_list.is_file() {
            return Err(PipelineError::MissingArtifact {
                stage,
                path: self.config.seed_list.clone(),
            });
        }
        let seeds = ingest::load_seed_list(&self.config.seed_list).map_err(|e| err(e.to_string()))?;
        let mut rows = Vec::new();
        let mut failed = 0;
        for seed in &seeds {
            let checkout = match ingest::checkout_repo(seed, &self.config.workdir, self.config.mirror_root.as_deref()) {
                Ok(c) => c,
                Err(e) => {
                    log::warn!("mine: skipping {}: {e}", seed.full_name);
                    failed += 1;
                    continue;
                }
            };
            let pairs = match ingest::enumerate_candidates(&checkout) {
                Ok(p) => p,
                Err(e) => {
                    log::warn!("mine: skipping {}: {e}", seed.full_name);
                    failed += 1;
                    continue;
                }
            };
            for pair in pairs {
                rows.push(CandidateRow {
                    id: packager::instance_id(&seed.repo_key, &pair.base_commit, &pair.merged_commit),
                    seed: seed.clone(),
                    pair,
                });
            }
        }
        if let Some(limit) = self.limit {
            rows.truncate(limit);
        }
        write_rows(&out_path, &rows).map_err(|e| err(e.to_string()))?;
        Ok(StageSummary {
            stage,
            processed: rows.len(),
            skipped: failed,
            message: format!("{} candidates from {} repositories ({failed} unavailable)", rows.len(), seeds.len()),
        })
    }

    fn filter(&self) -> Result<StageSummary, PipelineError> {
        let stage = Stage::Filter;
        let out_path = self.filtered_path();
        if let Some(s) = self.skip_existing(stage, &out_path) {
            return Ok(s);
        }
        let err = Self::stage_err(stage);
        let candidates: Vec<CandidateRow> = self.read_rows(stage, &self.candidates_path())?;
        let rules = self.config.test_rules();
        let mut checkouts: HashMap<String, RepoCheckout> = HashMap::new();
        let mut rows = Vec::new();
        for c in candidates {
            if !checkouts.contains_key(&c.seed.repo_key) {
                let checkout = self.open_checkout(&c.seed).map_err(|e| err(e.to_string()))?;
                checkouts.insert(c.seed.repo_key.clone(), checkout);
            }
            let checkout = &checkouts[&c.seed.repo_key];
            let text = diffkit::compute_diff(checkout, &c.pair.base_commit, &c.pair.merged_commit)
                .map_err(|e| err(format!("{}: {e}", c.id)))?;
            let diffs = parse_unified_diff(&text).map_err(|e| err(format!("{}: {e}", c.id)))?;
            let stats = compute_stats_with(&diffs, &rules);
            let decision = apply_prefilters(&stats, &self.config.prefilter);
            rows.push(FilterRow {
                candidate: c,
                stats,
                decision,
            });
        }
        write_rows(&out_path, &rows).map_err(|e| err(e.to_string()))?;
        let kept = rows.iter().filter(|r| r.decision.keep).count();
        Ok(StageSummary {
            stage,
            processed: rows.len(),
            skipped: rows.len() - kept,
            message: format!("kept {kept} of {} candidates", rows.len()),
        })
    }

    fn kept(&self, stage: Stage) -> Result<Vec<CandidateRow>, PipelineError> {
        let rows: Vec<FilterRow> = self.read_rows(stage, &self.filtered_path())?;
        let mut kept: Vec<FilterRow> = rows.into_iter().filter(|r| r.decision.keep).collect();
        crate::prefilter::prioritize(&mut kept, |r| &r.stats);
        Ok(kept.into_iter().map(|r| r.candidate).collect())
    }

    fn quarter_of(c: &CandidateRow) -> String {
        derive_quarter_key(&c.seed.repo_key, c.pair.merged_at).rendered
    }

    fn open_store(&self, stage: Stage) -> Result<ProfileStore, PipelineError> {
        ProfileStore::open(self.profiles_dir(), self.builder()).map_err(|e| Self::stage_err(stage)(e.to_string()))
    }

    /// Per-repository checkouts plus the representative commit for each
    /// quarter: the earliest kept candidate in it.
    fn env_inputs(
        &self,
        stage: Stage,
        kept: &[CandidateRow],
    ) -> Result<(Checkouts, HashMap<String, String>), PipelineError> {
        let mut checkouts = HashMap::new();
        let mut reps: HashMap<String, (DateTime<Utc>, String)> = HashMap::new();
        for c in kept {
            if !checkouts.contains_key(&c.seed.repo_key) {
                let checkout = self.open_checkout(&c.seed).map_err(|e| Self::stage_err(stage)(e.to_string()))?;
                checkouts.insert(c.seed.repo_key.clone(), checkout);
            }
            let q = Self::quarter_of(c);
            let entry = reps.entry(q).or_insert((c.pair.merged_at, c.pair.merged_commit.clone()));
            if (c.pair.merged_at, &c.pair.merged_commit) < (entry.0, &entry.1) {
                *entry = (c.pair.merged_at, c.pair.merged_commit.clone());
            }
        }
        Ok((checkouts, reps.into_iter().map(|(q, (_, commit))| (q, commit)).collect()))
    }

    fn resolve_env(
        store: &ProfileStore,
        synth: &SpecSynthesizer,
        checkout: &RepoCheckout,
        reps: &HashMap<String, String>,
        c: &CandidateRow,
    ) -> Result<ResolvedEnv, EnvError> {
        let source = |key: &ProfileKey| {
            let commit = match key {
                ProfileKey::Quarter(q) => reps.get(&q.rendered).cloned().unwrap_or_else(|| c.pair.merged_commit.clone()),
                ProfileKey::Commit { commit, .. } => commit.clone(),
            };
            synth.synthesize(checkout, &commit, key.clone())
        };
        store.resolve_environment(&c.pair, &c.seed.repo_key, &source)
    }

    fn pending(&self, stage: Stage, manifest: &Manifest, items: Vec<CandidateRow>) -> (Vec<CandidateRow>, usize) {
        let done = if self.force { BTreeMap::new() } else { manifest.completed(stage) };
        let before = items.len();
        let mut todo: Vec<CandidateRow> = items.into_iter().filter(|c| !done.contains_key(&c.id)).collect();
        let skipped = before - todo.len();
        todo = schedule_by_quarter(todo, Self::quarter_of);
        if let Some(limit) = self.limit {
            todo.truncate(limit);
        }
        (todo, skipped)
    }

    fn open_manifest(&self, stage: Stage) -> Result<Manifest, PipelineError> {
        Manifest::open(&self.manifest_path()).map_err(|e| Self::stage_err(stage)(e.to_string()))
    }

    fn build_env(&self) -> Result<StageSummary, PipelineError> {
        let stage = Stage::BuildEnv;
        let kept = self.kept(stage)?;
        let (checkouts, reps) = self.env_inputs(stage, &kept)?;
        let store = self.open_store(stage)?;
        let synth = self.synthesizer();
        let manifest = self.open_manifest(stage)?;
        let (todo, skipped) = self.pending(stage, &manifest, kept);
        let failures = Mutex::new(Vec::new());
        for_each_parallel(&todo, self.config.worker_count, |c| {
            let checkout = &checkouts[&c.seed.repo_key];
            let entry = match Self::resolve_env(&store, &synth, checkout, &reps, c) {
                Ok(env) => ManifestEntry {
                    stage,
                    id: c.id.clone(),
                    status: "ok".into(),
                    detail: Some(env.profile),
                    digests: BTreeMap::new(),
                },
                Err(e) => ManifestEntry {
                    stage,
                    id: c.id.clone(),
                    status: "failed".into(),
                    detail: Some(e.to_string()),
                    digests: BTreeMap::new(),
                },
            };
            if let Err(e) = manifest.append(&entry) {
                failures.lock().unwrap().push(e.to_string());
            }
        });
        if let Some(e) = failures.into_inner().unwrap().into_iter().next() {
            return Err(Self::stage_err(stage)(e));
        }
        let records = store.records();
        let built = records.iter().filter(|r| r.status == ProfileStatus::Built).count();
        Ok(StageSummary {
            stage,
            processed: todo.len(),
            skipped,
            message: format!("{} candidates resolved; {built} of {} profiles built", todo.len(), records.len()),
        })
    }

    fn execute(&self) -> Result<StageSummary, PipelineError> {
        let stage = Stage::Execute;
        let manifest = self.open_manifest(stage)?;
        let envs = manifest.completed(Stage::BuildEnv);
        if envs.is_empty() {
            return Err(PipelineError::MissingArtifact {
                stage,
                path: self.manifest_path(),
            });
        }
        let kept: Vec<CandidateRow> = self
            .kept(stage)?
            .into_iter()
            .filter(|c| envs.get(&c.id).is_some_and(|e| e.status == "ok"))
            .collect();
        let (checkouts, reps) = self.env_inputs(stage, &kept)?;
        let store = self.open_store(stage)?;
        let synth = self.synthesizer();
        let (todo, skipped) = self.pending(stage, &manifest, kept);
        let mut runner = Runner::new(self.backend(), self.snapshots_dir());
        runner.timeouts = self.config.timeouts;
        let errors = Mutex::new(Vec::new());
        for_each_parallel(&todo, self.config.worker_count, |c| {
            let checkout = &checkouts[&c.seed.repo_key];
            let result = Self::resolve_env(&store, &synth, checkout, &reps, c)
                .map_err(|e| e.to_string())
                .and_then(|env| {
                    runner
                        .run_pair(
                            checkout,
                            &c.pair,
                            &env,
                            &self.config.setup_command,
                            self.config.test_command_for(&c.seed.full_name),
                        )
                        .map_err(|e| e.to_string())
                })
                .and_then(|records| {
                    let dir = self.exec_dir(&c.id);
                    runner::persist_records(&dir, &records).map_err(|e| e.to_string())?;
                    Ok(digest_dir(&dir))
                });
            match result {
                Ok(digests) => {
                    let entry = ManifestEntry {
                        stage,
                        id: c.id.clone(),
                        status: "ok".into(),
                        detail: None,
                        digests,
                    };
                    if let Err(e) = manifest.append(&entry) {
                        errors.lock().unwrap().push(e.to_string());
                    }
                }
                // Infrastructure failures leave no manifest line, so the
                // candidate is retried on the next run.
                Err(e) => errors.lock().unwrap().push(format!("{}: {e}", c.id)),
            }
        });
        let errors = errors.into_inner().unwrap();
        if !errors.is_empty() {
            return Err(Self::stage_err(stage)(format!(
                "{} of {} candidates failed: {}",
                errors.len(),
                todo.len(),
                errors[0]
            )));
        }
        Ok(StageSummary {
            stage,
            processed: todo.len(),
            skipped,
            message: format!("executed {} candidate pairs ({skipped} already done)", todo.len()),
        })
    }

    fn load_maps(dir: &Path) -> Result<(runner::PairRecords, TestOutcomeMap, TestOutcomeMap), runner::RunnerError> {
        let records = runner::load_records(dir)?;
        let base = parse_test_log(&records.base.test.stdout, &records.base.test.stderr)
            .with_log_ref(dir.join("base").join("test.stdout"));
        let merged = parse_test_log(&records.merged.test.stdout, &records.merged.test.stderr)
            .with_log_ref(dir.join("merged").join("test.stdout"));
        Ok((records, base, merged))
    }

    fn classify(&self) -> Result<StageSummary, PipelineError> {
        let stage = Stage::Classify;
        let manifest = self.open_manifest(stage)?;
        let envs = manifest.completed(Stage::BuildEnv);
        let executed = manifest.completed(Stage::Execute);
        let kept = self.kept(stage)?;
        let mut rows = Vec::new();
        let mut pending = 0;
        for c in &kept {
            let quarter = Self::quarter_of(c);
            let mut row = VerdictRow::new(&c.id, &c.seed.full_name, &quarter, c.pair.merged_at, ExecType::SetupFailure);
            match envs.get(&c.id) {
                Some(e) if e.status != "ok" => {
                    row.note = Some(format!("environment build failed: {}", e.detail.clone().unwrap_or_default()));
                    rows.push(row);
                    continue;
                }
                Some(e) => row.env_profile = e.detail.clone(),
                None => {
                    pending += 1;
                    continue;
                }
            }
            if !executed.contains_key(&c.id) {
                pending += 1;
                continue;
            }
            let dir = self.exec_dir(&c.id);
            let (records, base, merged) = Self::load_maps(&dir).map_err(|e| PipelineError::Stage {
                stage,
                message: format!("{}: {e}", c.id),
            })?;
            let eval = evaluate(&records.base, &records.merged, &base, &merged);
            row.exec_type = eval.exec_type;
            row.match_level = eval.report.as_ref().map(|r| r.match_level);
            row.labels = eval.labels;
            if row.exec_type == ExecType::NewCommitBetter && row.labels.is_none() {
                row.note = Some("file-level match only; not releasable".into());
            }
            rows.push(row);
        }
        if rows.is_empty() && !kept.is_empty() {
            return Err(PipelineError::MissingArtifact {
                stage,
                path: self.art("exec"),
            });
        }
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        write_rows(&self.verdicts_path(), &rows).map_err(|e| Self::stage_err(stage)(e.to_string()))?;
        let better = rows.iter().filter(|r| r.exec_type == ExecType::NewCommitBetter).count();
        Ok(StageSummary {
            stage,
            processed: rows.len(),
            skipped: pending,
            message: format!("{better} of {} candidates are NEW_COMMIT_BETTER ({pending} not yet executed)", rows.len()),
        })
    }

    fn package(&self) -> Result<StageSummary, PipelineError> {
        let stage = Stage::Package;
        if let Some(s) = self.skip_existing(stage, &self.config.release_path) {
            return Ok(s);
        }
        let err = Self::stage_err(stage);
        let verdicts: Vec<VerdictRow> = self.read_rows(stage, &self.verdicts_path())?;
        let filtered: Vec<FilterRow> = self.read_rows(stage, &self.filtered_path())?;
        let by_id: HashMap<&str, &CandidateRow> = filtered.iter().map(|r| (r.candidate.id.as_str(), &r.candidate)).collect();
        let store = self.open_store(stage)?;
        let rules = self.config.test_rules();
        let mut instances = Vec::new();
        let mut rejected = 0;
        for v in verdicts.iter().filter(|v| v.exec_type == ExecType::NewCommitBetter) {
            let Some(labels) = &v.labels else {
                rejected += 1;
                continue;
            };
            let c = by_id
                .get(v.id.as_str())
                .ok_or_else(|| err(format!("{} missing from filtered.jsonl", v.id)))?;
            let checkout = self.open_checkout(&c.seed).map_err(|e| err(e.to_string()))?;
            let text = diffkit::compute_diff(&checkout, &c.pair.base_commit, &c.pair.merged_commit)
                .map_err(|e| err(e.to_string()))?;
            let diffs = parse_unified_diff(&text).map_err(|e| err(e.to_string()))?;
            let split = split_patch_with(&diffs, &rules);
            let profile = v.env_profile.as_deref().ok_or_else(|| err(format!("{}: no environment", v.id)))?;
            let record = store
                .record(profile)
                .ok_or_else(|| err(format!("{}: profile {profile} not in store", v.id)))?;
            let env = ResolvedEnv {
                profile: profile.to_string(),
                image_ref: record.image_ref.clone().unwrap_or_default(),
                fallback_used: record.fallback_used,
                spec_signature: record.spec.spec_signature.clone(),
                recipe: crate::envprofile::emit_build_recipe(&record.spec),
                environment_setup_commit: record.spec.source_commit.clone(),
            };
            let (records, _, merged) = Self::load_maps(&self.exec_dir(&v.id)).map_err(|e| err(e.to_string()))?;
            let message = checkout.message(&c.pair.merged_commit).map_err(|e| err(e.to_string()))?;
            let art = CandidateArtifacts {
                seed: &c.seed,
                pair: &c.pair,
                commit_message: &message,
                diffs: &diffs,
                split: &split,
                labels,
                env: &env,
                records: &records,
                merged_map: &merged,
                test_rules: &rules,
            };
            match packager::build_instance(&art, self.generator.as_deref()) {
                Ok(inst) => {
                    packager::write_sidecars(&self.instances_dir().join(&inst.instance_id), &inst, &records)
                        .map_err(|e| err(e.to_string()))?;
                    instances.push(inst);
                }
                Err(e) => {
                    log::warn!("package: dropping {}: {e}", v.id);
                    rejected += 1;
                }
            }
        }
        packager::write_jsonl(&instances, &self.config.release_path).map_err(|e| err(e.to_string()))?;
        Ok(StageSummary {
            stage,
            processed: instances.len(),
            skipped: rejected,
            message: format!(
                "released {} instances to {} ({rejected} dropped)",
                instances.len(),
                self.config.release_path.display()
            ),
        })
    }

    fn gate_replay(&self) -> Result<StageSummary, PipelineError> {
        let stage = Stage::GateReplay;
        let err = Self::stage_err(stage);
        if !self.config.release_path.is_file() {
            return Err(PipelineError::MissingArtifact {
                stage,
                path: self.config.release_path.clone(),
            });
        }
        let dir = self.config.trajectories_path();
        if !dir.is_dir() {
            return Err(PipelineError::MissingArtifact { stage, path: dir });
        }
        let instances = packager::read_jsonl(&self.config.release_path).map_err(|e| err(e.to_string()))?;
        let by_id: HashMap<&str, &packager::TaskInstance> =
            instances.iter().map(|i| (i.instance_id.as_str(), i)).collect();
        let trajectories = gate::load_trajectories(&dir).map_err(|e| err(e.to_string()))?;
        let rules = self.config.test_rules();
        let mut report = GateReport {
            buckets: BTreeMap::new(),
            bucket_counts: BTreeMap::new(),
            evidence: BTreeMap::new(),
            unmatched_trajectories: Vec::new(),
        };
        let mut matched = Vec::new();
        for t in &trajectories {
            let Some(inst) = by_id.get(t.instance_id.as_str()) else {
                report.unmatched_trajectories.push(t.instance_id.clone());
                continue;
            };
            let verification = t.final_verification.as_ref().map(|v| v.parse()).unwrap_or_default();
            let bucket = classify_trajectory_with(t, &verification, &inst.labels(), &rules);
            *report.bucket_counts.entry(bucket.as_str().to_string()).or_default() += 1;
            report.buckets.insert(t.instance_id.clone(), bucket);
            matched.push(t);
        }
        if let Ok(stats) = aggregate_evidence_stats(matched.iter().copied()) {
            report.evidence = stats.rendered().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        }
        let text = serde_json::to_string_pretty(&report).expect("gate report serializes");
        write_atomic(&self.gate_report_path(), text.as_bytes()).map_err(|e| err(e.to_string()))?;
        Ok(StageSummary {
            stage,
            processed: matched.len(),
            skipped: report.unmatched_trajectories.len(),
            message: format!("classified {} trajectories", matched.len()),
        })
    }

    /// Computes and writes `report.json`; returns the report as well.
    pub fn report(&self) -> Result<(RunReport, StageSummary), PipelineError> {
        let stage = Stage::Report;
        let verdicts: Vec<VerdictRow> = self.read_rows(stage, &self.verdicts_path())?;
        let profiles = self.open_store(stage)?.records();
        let report = compute_report(&verdicts, &profiles);
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        write_atomic(&self.report_path(), text.as_bytes()).map_err(|e| Self::stage_err(stage)(e.to_string()))?;
        Ok((
            report.clone(),
            StageSummary {
                stage,
                processed: verdicts.len(),
                skipped: 0,
                message: render_report_table(&report),
            },
        ))
    }
}
