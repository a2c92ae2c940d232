//! Reusable repo-quarter environment profiles.
//!
//! Commits of one repository that land in the same calendar quarter share a
//! single environment image. The [`ProfileStore`] builds each profile at most
//! once (concurrent requests for the same key wait for the first build) and
//! falls back to a per-commit profile when a quarter build fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Condvar, Mutex};

use chrono::{DateTime, Datelike, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::git::GitError;
use crate::ingest::{CandidatePair, RepoCheckout};

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Git(#[from] GitError),
    #[error("invalid override file {path}: {message}")]
    Override { path: PathBuf, message: String },
    #[error("environment for {profile} failed; quarter build log: {quarter_log}; per-commit build log: {commit_log}")]
    BothFailed {
        profile: String,
        quarter_log: String,
        commit_log: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EnvError + '_ {
    move |source| EnvError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QuarterKey {
    pub repo_key: String,
    pub year: i32,
    pub quarter: u8,
    pub rendered: String,
}

impl QuarterKey {
    pub fn new(repo_key: &str, year: i32, quarter: u8) -> Self {
        assert!((1..=4).contains(&quarter), "quarter out of range: {quarter}");
        QuarterKey {
            repo_key: repo_key.to_string(),
            year,
            quarter,
            rendered: format!("{repo_key}_{year}Q{quarter}"),
        }
    }

    /// Calendar label without the repository, e.g. `2022Q2`.
    pub fn calendar(&self) -> String {
        format!("{}Q{}", self.year, self.quarter)
    }
}

pub fn derive_quarter_key(repo_key: &str, timestamp: DateTime<Utc>) -> QuarterKey {
    let quarter = (timestamp.month() - 1) / 3 + 1;
    QuarterKey::new(repo_key, timestamp.year(), quarter as u8)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProfileKey {
    Quarter(QuarterKey),
    Commit { repo_key: String, commit: String },
}

impl ProfileKey {
    pub fn rendered(&self) -> String {
        match self {
            ProfileKey::Quarter(q) => q.rendered.clone(),
            ProfileKey::Commit { repo_key, commit } => {
                format!("{repo_key}_commit_{}", &commit[..commit.len().min(12)])
            }
        }
    }

    pub fn is_fallback(&self) -> bool {
        matches!(self, ProfileKey::Commit { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Dependency {
    pub name: String,
    /// Version specifier such as `==2.0` or `>=1,<2`; empty means unpinned.
    pub spec: String,
}

impl Dependency {
    pub fn new(name: &str, spec: &str) -> Self {
        Dependency {
            name: normalize_name(name),
            spec: spec.to_string(),
        }
    }

    fn requirement(&self) -> String {
        format!("{}{}", self.name, self.spec)
    }
}

/// PEP 503 style normalisation: lowercase, runs of `-_.` become `-`.
pub fn normalize_name(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    let mut last_sep = false;
    for c in name.trim().chars() {
        if matches!(c, '-' | '_' | '.') {
            if !last_sep {
                out.push('-');
            }
            last_sep = true;
        } else {
            out.push(c.to_ascii_lowercase());
            last_sep = false;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileSpec {
    pub key: ProfileKey,
    /// Commit whose metadata seeded this spec. Not part of the signature.
    pub source_commit: Option<String>,
    pub system_packages: BTreeSet<String>,
    pub interpreter_version: String,
    pub pinned_dependencies: Vec<Dependency>,
    pub spec_signature: String,
}

impl ProfileSpec {
    pub fn new(
        key: ProfileKey,
        system_packages: impl IntoIterator<Item = String>,
        interpreter_version: &str,
        dependencies: impl IntoIterator<Item = Dependency>,
    ) -> Self {
        let mut spec = ProfileSpec {
            key,
            source_commit: None,
            system_packages: system_packages.into_iter().collect(),
            interpreter_version: interpreter_version.to_string(),
            pinned_dependencies: Vec::new(),
            spec_signature: String::new(),
        };
        spec.set_dependencies(dependencies);
        spec
    }

    fn set_dependencies(&mut self, deps: impl IntoIterator<Item = Dependency>) {
        // Later entries win per package name.
        let merged: BTreeMap<String, Dependency> =
            deps.into_iter().map(|d| (d.name.clone(), d)).collect();
        self.pinned_dependencies = merged.into_values().collect();
        self.spec_signature = self.compute_signature();
    }

    fn compute_signature(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(format!("interpreter {}\n", self.interpreter_version));
        for pkg in &self.system_packages {
            hasher.update(format!("system {pkg}\n"));
        }
        let mut deps = self.pinned_dependencies.clone();
        deps.sort();
        for dep in deps {
            hasher.update(format!("dep {} {}\n", dep.name, dep.spec));
        }
        hex::encode(hasher.finalize())
    }

    pub fn apply(&self, delta: &SpecDelta) -> ProfileSpec {
        let mut next = self.clone();
        next.system_packages.extend(delta.add_system_packages.iter().cloned());
        if let Some(version) = &delta.interpreter_version {
            next.interpreter_version = version.clone();
        }
        let deps: Vec<Dependency> = self
            .pinned_dependencies
            .iter()
            .chain(delta.add_dependencies.iter())
            .cloned()
            .collect();
        next.set_dependencies(deps);
        next
    }
}

/// Spec refinement proposed after reading a failed build log.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecDelta {
    pub add_system_packages: Vec<String>,
    pub add_dependencies: Vec<Dependency>,
    pub interpreter_version: Option<String>,
}

impl SpecDelta {
    pub fn is_empty(&self) -> bool {
        self.add_system_packages.is_empty()
            && self.add_dependencies.is_empty()
            && self.interpreter_version.is_none()
    }
}

/// Hook for build-log driven refinement (e.g. a language model).
pub trait SpecRefiner: Send + Sync {
    fn refine(&self, spec: &ProfileSpec, build_log: &str) -> Option<SpecDelta>;
}

pub struct NoRefinement;

impl SpecRefiner for NoRefinement {
    fn refine(&self, _: &ProfileSpec, _: &str) -> Option<SpecDelta> {
        None
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OverrideFile {
    interpreter_version: Option<String>,
    #[serde(default)]
    system_packages: Vec<String>,
    #[serde(default)]
    dependencies: BTreeMap<String, String>,
}

/// Infers a [`ProfileSpec`] from repository metadata at one commit.
#[derive(Debug, Clone)]
pub struct SpecSynthesizer {
    pub default_interpreter: String,
    pub base_system_packages: Vec<String>,
    pub test_runner: Dependency,
    /// Directory holding `<repo_key>.toml` override files.
    pub overrides_dir: Option<PathBuf>,
}

impl Default for SpecSynthesizer {
    fn default() -> Self {
        SpecSynthesizer {
            default_interpreter: "3.11".into(),
            base_system_packages: vec!["build-essential".into(), "git".into()],
            test_runner: Dependency::new("pytest", "==8.3.3"),
            overrides_dir: None,
        }
    }
}

impl SpecSynthesizer {
    pub fn synthesize(
        &self,
        checkout: &RepoCheckout,
        commit: &str,
        key: ProfileKey,
    ) -> Result<ProfileSpec, EnvError> {
        let listing = checkout.git(&["ls-tree", "--name-only", commit])?;
        let root_files: BTreeSet<&str> = listing.lines().collect();
        let read = |path: &str| -> Result<String, EnvError> {
            Ok(checkout.git(&["show", &format!("{commit}:{path}")])?)
        };

        let mut deps: Vec<Dependency> = Vec::new();
        for name in root_files
            .iter()
            .filter(|f| f.starts_with("requirements") && f.ends_with(".txt"))
        {
            deps.extend(parse_requirements(&read(name)?));
        }
        if root_files.contains("pyproject.toml") {
            deps.extend(parse_pyproject(&read("pyproject.toml")?));
        }
        if root_files.contains("setup.cfg") {
            deps.extend(parse_setup_cfg(&read("setup.cfg")?));
        }

        let mut interpreter = self.default_interpreter.clone();
        if root_files.contains(".python-version") {
            let pinned = read(".python-version")?;
            if let Some(v) = pinned.lines().next().map(str::trim).filter(|v| !v.is_empty()) {
                interpreter = v.to_string();
            }
        }

        let mut system: Vec<String> = self.base_system_packages.clone();
        let repo_key = &checkout.seed.repo_key;
        if let Some(path) = self.overrides_dir.as_ref().map(|d| d.join(format!("{repo_key}.toml"))) {
            if path.is_file() {
                let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                let ov: OverrideFile = toml::from_str(&text).map_err(|e| EnvError::Override {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                if let Some(v) = ov.interpreter_version {
                    interpreter = v;
                }
                system.extend(ov.system_packages);
                deps.extend(ov.dependencies.iter().map(|(n, s)| Dependency::new(n, s)));
            }
        }
        if !deps.iter().any(|d| d.name == self.test_runner.name) {
            deps.push(self.test_runner.clone());
        }

        let mut spec = ProfileSpec::new(key, system, &interpreter, deps);
        spec.source_commit = Some(commit.to_string());
        Ok(spec)
    }
}

/// Parses one PEP 508 requirement; returns `None` for options, URLs and blanks.
pub fn parse_requirement(line: &str) -> Option<Dependency> {
    let line = line.split(" #").next().unwrap_or(line).trim();
    if line.is_empty() || line.starts_with('#') || line.starts_with('-') || line.contains("://") {
        return None;
    }
    let line = line.split(';').next().unwrap_or(line).trim();
    let name_end = line
        .find(|c: char| !(c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')))
        .unwrap_or(line.len());
    let name = &line[..name_end];
    if name.is_empty() {
        return None;
    }
    let mut rest = line[name_end..].trim();
    if rest.starts_with('[') {
        rest = rest.find(']').map(|i| rest[i + 1..].trim()).unwrap_or("");
    }
    let spec: String = rest
        .trim_start_matches('(')
        .trim_end_matches(')')
        .chars()
        .filter(|c| !c.is_whitespace())
        .collect();
    Some(Dependency::new(name, &spec))
}

pub fn parse_requirements(text: &str) -> Vec<Dependency> {
    text.lines().filter_map(parse_requirement).collect()
}

fn parse_pyproject(text: &str) -> Vec<Dependency> {
    let Ok(doc) = text.parse::<toml::Table>() else {
        return Vec::new();
    };
    doc.get("project")
        .and_then(|p| p.get("dependencies"))
        .and_then(|d| d.as_array())
        .map(|arr| {
            arr.iter()
                .filter_map(|v| v.as_str())
                .filter_map(parse_requirement)
                .collect()
        })
        .unwrap_or_default()
}

fn parse_setup_cfg(text: &str) -> Vec<Dependency> {
    let mut in_options = false;
    let mut in_requires = false;
    let mut deps = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            in_options = trimmed == "[options]";
            in_requires = false;
            continue;
        }
        if !in_options {
            continue;
        }
        let indented = line.starts_with([' ', '\t']);
        if let Some(value) = trimmed.strip_prefix("install_requires") {
            let value = value.trim_start().trim_start_matches('=').trim();
            in_requires = true;
            deps.extend(parse_requirement(value));
        } else if in_requires && indented {
            deps.extend(parse_requirement(trimmed));
        } else {
            in_requires = false;
        }
    }
    deps
}

/// Dockerfile-compatible recipe. Contains no repository source and names no
/// commit, so identical specs give byte-identical recipes.
pub fn emit_build_recipe(spec: &ProfileSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# swe-forge environment profile");
    let _ = writeln!(out, "# spec-signature: {}", spec.spec_signature);
    let _ = writeln!(out, "FROM python:{}-slim", spec.interpreter_version);
    let _ = writeln!(out, "ENV DEBIAN_FRONTEND=noninteractive PIP_NO_CACHE_DIR=1 PYTHONDONTWRITEBYTECODE=1");
    if !spec.system_packages.is_empty() {
        let _ = writeln!(out, "RUN apt-get update \\");
        let _ = writeln!(out, " && apt-get install -y --no-install-recommends \\");
        for pkg in &spec.system_packages {
            let _ = writeln!(out, "      {pkg} \\");
        }
        let _ = writeln!(out, " && rm -rf /var/lib/apt/lists/*");
    }
    let _ = writeln!(out, "RUN python -m venv /opt/env");
    let _ = writeln!(out, "ENV VIRTUAL_ENV=/opt/env PATH=/opt/env/bin:$PATH");
    let _ = writeln!(out, "RUN python -m pip install --upgrade pip");
    if !spec.pinned_dependencies.is_empty() {
        let _ = writeln!(out, "RUN python -m pip install \\");
        let n = spec.pinned_dependencies.len();
        for (i, dep) in spec.pinned_dependencies.iter().enumerate() {
            let cont = if i + 1 == n { "" } else { " \\" };
            let _ = writeln!(out, "      '{}'{cont}", dep.requirement());
        }
    }
    let _ = writeln!(out, "WORKDIR /testbed");
    out
}

/// Optional per-commit final image layered on a profile image.
pub fn emit_final_image_recipe(base_image: &str) -> String {
    format!("FROM {base_image}\nCOPY . /testbed\nWORKDIR /testbed\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProfileStatus {
    Unbuilt,
    Building,
    Built,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub spec: ProfileSpec,
    pub status: ProfileStatus,
    pub image_ref: Option<String>,
    pub build_log_path: Option<PathBuf>,
    pub fallback_used: bool,
}

/// Builds container images from recipes.
pub trait ImageBuilder: Send + Sync {
    /// Returns the image reference, or a short failure description. The full
    /// log should be written to `log_path`.
    fn build(&self, spec: &ProfileSpec, recipe: &str, log_path: &Path) -> Result<String, String>;
}

pub fn image_tag(spec: &ProfileSpec) -> String {
    format!("swe-forge-env:{}", spec.key.rendered().to_ascii_lowercase())
}

/// Shells out to a container build tool (`docker build`).
pub struct ContainerImageBuilder {
    pub program: String,
}

impl Default for ContainerImageBuilder {
    fn default() -> Self {
        ContainerImageBuilder {
            program: "docker".into(),
        }
    }
}

impl ImageBuilder for ContainerImageBuilder {
    fn build(&self, spec: &ProfileSpec, recipe: &str, log_path: &Path) -> Result<String, String> {
        let ctx = tempfile::tempdir().map_err(|e| e.to_string())?;
        let recipe_path = ctx.path().join("Dockerfile");
        fs::write(&recipe_path, recipe).map_err(|e| e.to_string())?;
        let tag = image_tag(spec);
        let out = Command::new(&self.program)
            .arg("build")
            .arg("-t")
            .arg(&tag)
            .arg("-f")
            .arg(&recipe_path)
            .arg(ctx.path())
            .output()
            .map_err(|e| format!("cannot run {}: {e}", self.program))?;
        let mut log = out.stdout;
        log.extend_from_slice(&out.stderr);
        let _ = fs::write(log_path, &log);
        if out.status.success() {
            Ok(tag)
        } else {
            Err(format!("{} build exited with {:?}", self.program, out.status.code()))
        }
    }
}

/// For the local-subprocess backend: the host interpreter is the environment.
pub struct HostEnvironment;

impl ImageBuilder for HostEnvironment {
    fn build(&self, spec: &ProfileSpec, _: &str, log_path: &Path) -> Result<String, String> {
        let _ = fs::write(log_path, "host environment; nothing to build\n");
        Ok(format!("host:{}", &spec.spec_signature[..12]))
    }
}

/// Counting stub builder for tests and dry runs.
#[derive(Default)]
pub struct RecordingBuilder {
    calls: Mutex<Vec<String>>,
    failing: Mutex<BTreeSet<String>>,
    fail_fallbacks: bool,
    delay: Option<std::time::Duration>,
}

impl RecordingBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds for the given rendered profile keys fail.
    pub fn failing(keys: impl IntoIterator<Item = String>) -> Self {
        RecordingBuilder {
            failing: Mutex::new(keys.into_iter().collect()),
            ..Self::default()
        }
    }

    /// Per-commit fallback builds fail too.
    pub fn fail_fallbacks(mut self) -> Self {
        self.fail_fallbacks = true;
        self
    }

    pub fn with_delay(mut self, delay: std::time::Duration) -> Self {
        self.delay = Some(delay);
        self
    }

    /// Rendered keys of every build invocation, in call order.
    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().unwrap().clone()
    }
}

impl ImageBuilder for RecordingBuilder {
    fn build(&self, spec: &ProfileSpec, _: &str, log_path: &Path) -> Result<String, String> {
        let rendered = spec.key.rendered();
        self.calls.lock().unwrap().push(rendered.clone());
        if let Some(d) = self.delay {
            std::thread::sleep(d);
        }
        let fail = self.failing.lock().unwrap().contains(&rendered)
            || (self.fail_fallbacks && spec.key.is_fallback());
        if fail {
            let _ = fs::write(log_path, format!("stub failure for {rendered}\n"));
            Err(format!("stub failure for {rendered}"))
        } else {
            let _ = fs::write(log_path, format!("stub build of {rendered}\n"));
            Ok(image_tag(spec))
        }
    }
}

/// Supplies specs for profile keys on demand.
pub trait SpecSource {
    fn spec_for(&self, key: &ProfileKey) -> Result<ProfileSpec, EnvError>;
}

impl<F> SpecSource for F
where
    F: Fn(&ProfileKey) -> Result<ProfileSpec, EnvError>,
{
    fn spec_for(&self, key: &ProfileKey) -> Result<ProfileSpec, EnvError> {
        self(key)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedEnv {
    pub profile: String,
    pub image_ref: String,
    pub fallback_used: bool,
    pub spec_signature: String,
    pub recipe: String,
    pub environment_setup_commit: Option<String>,
}

struct Slot {
    record: Mutex<ProfileRecord>,
    ready: Condvar,
}

/// Shared profile store persisted under `<artifacts>/profiles/<rendered>/`.
pub struct ProfileStore {
    root: PathBuf,
    builder: Arc<dyn ImageBuilder>,
    refiner: Box<dyn SpecRefiner>,
    slots: Mutex<HashMap<String, Arc<Slot>>>,
}

impl ProfileStore {
    /// Opens (and creates) a store rooted at `root`, loading persisted records.
    pub fn open(root: impl Into<PathBuf>, builder: Arc<dyn ImageBuilder>) -> Result<Self, EnvError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let mut slots = HashMap::new();
        for entry in fs::read_dir(&root).map_err(io_err(&root))? {
            let entry = entry.map_err(io_err(&root))?;
            let path = entry.path().join("record.json");
            if !path.is_file() {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let Ok(mut record) = serde_json::from_str::<ProfileRecord>(&text) else {
                continue;
            };
            if record.status == ProfileStatus::Building {
                // Interrupted build.
                record.status = ProfileStatus::Unbuilt;
            }
            slots.insert(
                record.spec.key.rendered(),
                Arc::new(Slot {
                    record: Mutex::new(record),
                    ready: Condvar::new(),
                }),
            );
        }
        Ok(ProfileStore {
            root,
            builder,
            refiner: Box::new(NoRefinement),
            slots: Mutex::new(slots),
        })
    }

    pub fn with_refiner(mut self, refiner: Box<dyn SpecRefiner>) -> Self {
        self.refiner = refiner;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn record(&self, rendered: &str) -> Option<ProfileRecord> {
        let slot = self.slots.lock().unwrap().get(rendered).cloned()?;
        let record = slot.record.lock().unwrap().clone();
        Some(record)
    }

    /// Snapshot of all records, sorted by rendered key.
    pub fn records(&self) -> Vec<ProfileRecord> {
        let slots: Vec<Arc<Slot>> = self.slots.lock().unwrap().values().cloned().collect();
        let mut records: Vec<ProfileRecord> =
            slots.iter().map(|s| s.record.lock().unwrap().clone()).collect();
        records.sort_by_key(|r| r.spec.key.rendered());
        records
    }

    fn slot(&self, key: &ProfileKey, source: &dyn SpecSource) -> Result<Arc<Slot>, EnvError> {
        let rendered = key.rendered();
        if let Some(slot) = self.slots.lock().unwrap().get(&rendered) {
            return Ok(slot.clone());
        }
        // Synthesis happens outside the map lock; a racing insert wins.
        let spec = source.spec_for(key)?;
        let mut slots = self.slots.lock().unwrap();
        let slot = slots.entry(rendered).or_insert_with(|| {
            Arc::new(Slot {
                record: Mutex::new(ProfileRecord {
                    fallback_used: spec.key.is_fallback(),
                    spec,
                    status: ProfileStatus::Unbuilt,
                    image_ref: None,
                    build_log_path: None,
                }),
                ready: Condvar::new(),
            })
        });
        Ok(slot.clone())
    }

    /// Returns the built record, or the failed record as `Err`. Exactly one
    /// caller builds a given key; others block until it resolves.
    pub fn ensure_built(
        &self,
        key: &ProfileKey,
        source: &dyn SpecSource,
    ) -> Result<Result<ProfileRecord, ProfileRecord>, EnvError> {
        let slot = self.slot(key, source)?;
        let spec = {
            let mut record = slot.record.lock().unwrap();
            loop {
                match record.status {
                    ProfileStatus::Built => return Ok(Ok(record.clone())),
                    ProfileStatus::Failed => return Ok(Err(record.clone())),
                    ProfileStatus::Building => record = slot.ready.wait(record).unwrap(),
                    ProfileStatus::Unbuilt => {
                        record.status = ProfileStatus::Building;
                        break record.spec.clone();
                    }
                }
            }
        };

        let outcome = self.build(spec);
        let mut record = slot.record.lock().unwrap();
        let (spec, status, image_ref, log_path) = match outcome {
            Ok(BuildOutcome { spec, image_ref, log_path }) => {
                (spec, ProfileStatus::Built, Some(image_ref), log_path)
            }
            Err(BuildFailure { spec, log_path }) => (spec, ProfileStatus::Failed, None, log_path),
        };
        record.spec = spec;
        record.status = status;
        record.image_ref = image_ref;
        record.build_log_path = Some(log_path);
        let snapshot = record.clone();
        let persisted = self.persist(&snapshot);
        slot.ready.notify_all();
        drop(record);
        persisted?;
        Ok(if snapshot.status == ProfileStatus::Built {
            Ok(snapshot)
        } else {
            Err(snapshot)
        })
    }

    fn profile_dir(&self, spec: &ProfileSpec) -> PathBuf {
        self.root.join(spec.key.rendered())
    }

    #[allow(clippy::result_large_err)]
    fn build(&self, spec: ProfileSpec) -> Result<BuildOutcome, BuildFailure> {
        let dir = self.profile_dir(&spec);
        let log_path = dir.join("build.log");
        if fs::create_dir_all(&dir).is_err() {
            return Err(BuildFailure { spec, log_path });
        }
        let attempt = |spec: &ProfileSpec| -> Result<String, String> {
            let recipe = emit_build_recipe(spec);
            fs::write(dir.join("build_recipe"), &recipe).map_err(|e| e.to_string())?;
            self.builder.build(spec, &recipe, &log_path)
        };
        match attempt(&spec) {
            Ok(image_ref) => Ok(BuildOutcome { spec, image_ref, log_path }),
            Err(summary) => {
                let log = fs::read_to_string(&log_path).unwrap_or(summary);
                match self.refiner.refine(&spec, &log).filter(|d| !d.is_empty()) {
                    Some(delta) => {
                        let refined = spec.apply(&delta);
                        match attempt(&refined) {
                            Ok(image_ref) => Ok(BuildOutcome {
                                spec: refined,
                                image_ref,
                                log_path,
                            }),
                            Err(_) => Err(BuildFailure { spec: refined, log_path }),
                        }
                    }
                    None => Err(BuildFailure { spec, log_path }),
                }
            }
        }
    }

    fn persist(&self, record: &ProfileRecord) -> Result<(), EnvError> {
        let dir = self.profile_dir(&record.spec);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let recipe_path = dir.join("build_recipe");
        fs::write(&recipe_path, emit_build_recipe(&record.spec)).map_err(io_err(&recipe_path))?;
        let path = dir.join("record.json");
        let json = serde_json::to_string_pretty(record).expect("record serializes");
        fs::write(&path, json).map_err(io_err(&path))
    }

    /// Quarter image for `pair`, building it on first use; on quarter failure
    /// a per-commit profile keyed by the merged commit is built instead.
    pub fn resolve_environment(
        &self,
        pair: &CandidatePair,
        repo_key: &str,
        source: &dyn SpecSource,
    ) -> Result<ResolvedEnv, EnvError> {
        let quarter = ProfileKey::Quarter(derive_quarter_key(repo_key, pair.merged_at));
        let quarter_failure = match self.ensure_built(&quarter, source)? {
            Ok(record) => return Ok(resolved(&record)),
            Err(failed) => failed,
        };
        let commit = ProfileKey::Commit {
            repo_key: repo_key.to_string(),
            commit: pair.merged_commit.clone(),
        };
        match self.ensure_built(&commit, source)? {
            Ok(record) => Ok(resolved(&record)),
            Err(failed) => Err(EnvError::BothFailed {
                profile: quarter.rendered(),
                quarter_log: log_ref(&quarter_failure),
                commit_log: log_ref(&failed),
            }),
        }
    }
}

struct BuildOutcome {
    spec: ProfileSpec,
    image_ref: String,
    log_path: PathBuf,
}

struct BuildFailure {
    spec: ProfileSpec,
    log_path: PathBuf,
}

fn log_ref(record: &ProfileRecord) -> String {
    record
        .build_log_path
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "<none>".into())
}

fn resolved(record: &ProfileRecord) -> ResolvedEnv {
    ResolvedEnv {
        profile: record.spec.key.rendered(),
        image_ref: record.image_ref.clone().unwrap_or_default(),
        fallback_used: record.fallback_used,
        spec_signature: record.spec.spec_signature.clone(),
        recipe: emit_build_recipe(&record.spec),
        environment_setup_commit: record.spec.source_commit.clone(),
    }
}

/// Bytes needed to store one image per environment.
pub fn estimate_storage(num_environments: u64, per_image_bytes: u64) -> u128 {
    u128::from(num_environments) * u128::from(per_image_bytes)
}

/// Renders bytes in decimal units with one decimal place (`30.8 TB`).
pub fn format_decimal_bytes(bytes: u128) -> String {
    const UNITS: [(&str, f64); 5] = [("PB", 1e15), ("TB", 1e12), ("GB", 1e9), ("MB", 1e6), ("KB", 1e3)];
    let value = bytes as f64;
    for (unit, scale) in UNITS {
        if value >= scale {
            return format!("{:.1} {unit}", value / scale);
        }
    }
    format!("{bytes} B")
}

pub const MB: u64 = 1_000_000;
