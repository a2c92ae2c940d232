//! Copy-on-start execution of setup and test commands.
//!
//! A commit's tree is materialised once as a read-only snapshot. Every run
//! gets a fresh writable copy of it, so no execution can modify the
//! snapshot, and concurrent runs never see each other's writes.

use std::fs;
use std::io::Read;
use std::os::unix::fs::{symlink, PermissionsExt};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envprofile::ResolvedEnv;
use crate::git::{self, GitError};
use crate::ingest::{CandidatePair, RepoCheckout};

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error("cannot read commit {commit}: {source}")]
    Checkout {
        commit: String,
        #[source]
        source: GitError,
    },
    #[error("corrupt object stream from git cat-file: {0}")]
    Corrupt(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("execution backend unavailable: {0}")]
    BackendUnavailable(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Setup,
    Test,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Setup => "setup",
            Phase::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub phase: Phase,
    pub return_code: i32,
    pub stdout: String,
    pub stderr: String,
    /// Wall-clock seconds.
    pub duration: f64,
    pub timed_out: bool,
}

impl Eq for ExecutionRecord {}

impl ExecutionRecord {
    /// A record with empty streams; handy for tests and placeholders.
    pub fn synthetic(phase: Phase, return_code: i32) -> Self {
        ExecutionRecord {
            phase,
            return_code,
            stdout: String::new(),
            stderr: String::new(),
            duration: 0.0,
            timed_out: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRecords {
    pub setup: ExecutionRecord,
    pub test: ExecutionRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecords {
    pub base: CommitRecords,
    pub merged: CommitRecords,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Timeouts {
    pub setup_secs: u64,
    pub test_secs: u64,
}

impl Default for Timeouts {
    fn default() -> Self {
        Timeouts {
            setup_secs: 600,
            test_secs: 900,
        }
    }
}

impl Timeouts {
    pub fn for_phase(&self, phase: Phase) -> Duration {
        Duration::from_secs(match phase {
            Phase::Setup => self.setup_secs,
            Phase::Test => self.test_secs,
        })
    }
}

/// Writes the exact tree of `commit` under `<root>/<repo_key>/<commit>` and
/// marks it read-only. Reuses an existing complete snapshot.
pub fn materialize_snapshot(checkout: &RepoCheckout, commit: &str, root: &Path) -> Result<PathBuf, RunnerError> {
    let checkout_err = |source| RunnerError::Checkout {
        commit: commit.to_string(),
        source,
    };
    let full = checkout.resolve(commit).map_err(checkout_err)?;
    let parent = root.join(&checkout.seed.repo_key);
    let dest = parent.join(&full);
    let done = parent.join(format!("{full}.done"));
    if done.is_file() && dest.is_dir() {
        return Ok(dest);
    }
    let staging = parent.join(format!("{full}.partial"));
    if staging.exists() {
        remove_tree(&staging)?;
    }
    if dest.exists() {
        remove_tree(&dest)?;
    }
    fs::create_dir_all(&staging).map_err(io_err(&staging))?;

    let listing = git::run_bytes(Some(&checkout.git_dir), ["ls-tree", "-r", "-z", "--full-tree", &full])
        .map_err(checkout_err)?;
    let mut entries = Vec::new();
    for raw in listing.split(|b| *b == 0).filter(|r| !r.is_empty()) {
        let text = String::from_utf8_lossy(raw);
        let (meta, path) = text
            .split_once('\t')
            .ok_or_else(|| RunnerError::Corrupt(format!("bad ls-tree entry {text:?}")))?;
        let mut meta = meta.split(' ');
        let (mode, kind, oid) = (meta.next(), meta.next(), meta.next());
        match (mode, kind, oid) {
            (Some(mode), Some("blob"), Some(oid)) => {
                entries.push((mode.to_string(), oid.to_string(), path.to_string()))
            }
            // Submodules are not materialised.
            (Some(_), Some("commit"), Some(_)) => {}
            _ => return Err(RunnerError::Corrupt(format!("bad ls-tree entry {text:?}"))),
        }
    }

    let request: String = entries.iter().map(|(_, oid, _)| format!("{oid}\n")).collect();
    let blobs = git::run_with_input(Some(&checkout.git_dir), ["cat-file", "--batch"], request.as_bytes())
        .map_err(checkout_err)?;
    let mut cursor = 0usize;
    for (mode, oid, path) in &entries {
        let header_end = blobs[cursor..]
            .iter()
            .position(|b| *b == b'\n')
            .map(|p| cursor + p)
            .ok_or_else(|| RunnerError::Corrupt("truncated cat-file header".into()))?;
        let header = String::from_utf8_lossy(&blobs[cursor..header_end]).into_owned();
        let mut parts = header.split(' ');
        if parts.next() != Some(oid.as_str()) {
            return Err(RunnerError::Corrupt(format!("unexpected object header {header:?}")));
        }
        let size: usize = parts
            .nth(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| RunnerError::Corrupt(format!("bad size in {header:?}")))?;
        let start = header_end + 1;
        let end = start + size;
        if end > blobs.len() {
            return Err(RunnerError::Corrupt("truncated blob".into()));
        }
        let content = &blobs[start..end];
        cursor = end + 1;

        let target = staging.join(path);
        if let Some(dir) = target.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        if mode == "120000" {
            let link = String::from_utf8_lossy(content).into_owned();
            symlink(&link, &target).map_err(io_err(&target))?;
        } else {
            fs::write(&target, content).map_err(io_err(&target))?;
            let perm = if mode == "100755" { 0o555 } else { 0o444 };
            fs::set_permissions(&target, fs::Permissions::from_mode(perm)).map_err(io_err(&target))?;
        }
    }
    set_dirs_read_only(&staging)?;
    fs::rename(&staging, &dest).map_err(io_err(&dest))?;
    fs::write(&done, &full).map_err(io_err(&done))?;
    Ok(dest)
}

fn set_dirs_read_only(root: &Path) -> Result<(), RunnerError> {
    // Children before parents so traversal keeps working.
    for entry in walkdir::WalkDir::new(root).contents_first(true) {
        let entry = entry.map_err(|e| RunnerError::Io {
            path: root.to_path_buf(),
            source: e.into(),
        })?;
        if entry.file_type().is_dir() {
            fs::set_permissions(entry.path(), fs::Permissions::from_mode(0o555)).map_err(io_err(entry.path()))?;
        }
    }
    Ok(())
}

/// Removes a tree even if it was marked read-only.
pub fn remove_tree(root: &Path) -> Result<(), RunnerError> {
    for entry in walkdir::WalkDir::new(root).into_iter().flatten() {
        if entry.file_type().is_dir() {
            let _ = fs::set_permissions(entry.path(), fs::Permissions::from_mode(0o755));
        }
    }
    fs::remove_dir_all(root).map_err(io_err(root))
}

/// Order-independent digest of a directory tree: paths, kinds, exec bits, contents.
pub fn content_hash(root: &Path) -> Result<String, RunnerError> {
    let mut hasher = Sha256::new();
    let walker = walkdir::WalkDir::new(root).sort_by_file_name().follow_links(false);
    for entry in walker {
        let entry = entry.map_err(|e| RunnerError::Io {
            path: root.to_path_buf(),
            source: e.into(),
        })?;
        let rel = entry.path().strip_prefix(root).unwrap_or(entry.path());
        if rel.as_os_str().is_empty() {
            continue;
        }
        let rel = rel.to_string_lossy();
        let ft = entry.file_type();
        if ft.is_symlink() {
            let target = fs::read_link(entry.path()).map_err(io_err(entry.path()))?;
            hasher.update(format!("L {rel} {}\n", target.display()));
        } else if ft.is_dir() {
            hasher.update(format!("D {rel}\n"));
        } else {
            let meta = entry.metadata().map_err(|e| RunnerError::Io {
                path: entry.path().to_path_buf(),
                source: e.into(),
            })?;
            let exec = meta.permissions().mode() & 0o111 != 0;
            let bytes = fs::read(entry.path()).map_err(io_err(entry.path()))?;
            hasher.update(format!("F {rel} {exec} {}\n", hex::encode(Sha256::digest(&bytes))));
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

fn copy_tree(from: &Path, to: &Path) -> Result<(), RunnerError> {
    fs::create_dir_all(to).map_err(io_err(to))?;
    for entry in walkdir::WalkDir::new(from).follow_links(false) {
        let entry = entry.map_err(|e| RunnerError::Io {
            path: from.to_path_buf(),
            source: e.into(),
        })?;
        let rel = entry.path().strip_prefix(from).expect("walk stays under root");
        if rel.as_os_str().is_empty() {
            continue;
        }
        let target = to.join(rel);
        let ft = entry.file_type();
        if ft.is_dir() {
            fs::create_dir_all(&target).map_err(io_err(&target))?;
        } else if ft.is_symlink() {
            let link = fs::read_link(entry.path()).map_err(io_err(entry.path()))?;
            symlink(link, &target).map_err(io_err(&target))?;
        } else {
            fs::copy(entry.path(), &target).map_err(io_err(&target))?;
            let exec = fs::metadata(entry.path()).map_err(io_err(entry.path()))?.permissions().mode() & 0o111;
            let perm = if exec != 0 { 0o755 } else { 0o644 };
            fs::set_permissions(&target, fs::Permissions::from_mode(perm)).map_err(io_err(&target))?;
        }
    }
    Ok(())
}

/// One run's writable copy of a snapshot. Dropping it deletes the copy
/// (and the container, for the container backend).
pub struct Workspace {
    pub snapshot_path: PathBuf,
    pub work_path: PathBuf,
    pub env_link: Option<PathBuf>,
    container: Option<(String, String)>,
    _dir: Option<tempfile::TempDir>,
}

impl Drop for Workspace {
    fn drop(&mut self) {
        if let Some((program, name)) = &self.container {
            let _ = Command::new(program)
                .args(["rm", "-f", name])
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .status();
        }
    }
}

/// Name of the link to the shared environment inside each workspace.
pub const ENV_LINK_NAME: &str = ".swe-env";

pub trait ExecutionBackend: Send + Sync {
    fn prepare(&self, snapshot: &Path, env: &ResolvedEnv) -> Result<Workspace, RunnerError>;
    fn run(&self, ws: &Workspace, command: &str, phase: Phase, timeout: Duration) -> Result<ExecutionRecord, RunnerError>;
}

pub fn prepare_workspace(
    backend: &dyn ExecutionBackend,
    snapshot: &Path,
    env: &ResolvedEnv,
) -> Result<Workspace, RunnerError> {
    backend.prepare(snapshot, env)
}

pub fn run_phase(
    backend: &dyn ExecutionBackend,
    ws: &Workspace,
    command: &str,
    phase: Phase,
    timeout: Duration,
) -> Result<ExecutionRecord, RunnerError> {
    backend.run(ws, command, phase, timeout)
}

/// Runs commands as host subprocesses inside a copied workspace.
#[derive(Debug, Clone, Default)]
pub struct LocalBackend {
    /// Directory of a shared environment (e.g. a virtualenv). Linked into
    /// each workspace and put first on `PATH`.
    pub env_dir: Option<PathBuf>,
    /// Parent for workspaces; the system temp dir when unset.
    pub scratch_dir: Option<PathBuf>,
}

impl ExecutionBackend for LocalBackend {
    fn prepare(&self, snapshot: &Path, _env: &ResolvedEnv) -> Result<Workspace, RunnerError> {
        let dir = match &self.scratch_dir {
            Some(parent) => {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
                tempfile::Builder::new().prefix("ws-").tempdir_in(parent)
            }
            None => tempfile::Builder::new().prefix("swe-forge-ws-").tempdir(),
        }
        .map_err(io_err(snapshot))?;
        let work_path = dir.path().join("repo");
        copy_tree(snapshot, &work_path)?;
        let env_link = match &self.env_dir {
            Some(env_dir) => {
                let link = work_path.join(ENV_LINK_NAME);
                symlink(env_dir, &link).map_err(io_err(&link))?;
                Some(link)
            }
            None => None,
        };
        Ok(Workspace {
            snapshot_path: snapshot.to_path_buf(),
            work_path,
            env_link,
            container: None,
            _dir: Some(dir),
        })
    }

    fn run(&self, ws: &Workspace, command: &str, phase: Phase, timeout: Duration) -> Result<ExecutionRecord, RunnerError> {
        let mut cmd = Command::new("sh");
        cmd.arg("-c").arg(command).current_dir(&ws.work_path);
        cmd.env("PYTHONDONTWRITEBYTECODE", "1");
        if let Some(link) = &ws.env_link {
            let path = std::env::var_os("PATH").unwrap_or_default();
            let mut parts = vec![link.join("bin")];
            parts.extend(std::env::split_paths(&path));
            cmd.env("PATH", std::env::join_paths(parts).unwrap_or(path));
            cmd.env("VIRTUAL_ENV", link);
        }
        run_with_timeout(cmd, phase, timeout)
            .map_err(|e| RunnerError::BackendUnavailable(format!("cannot spawn sh: {e}")))
    }
}

/// Runs each workspace in its own container from the resolved image: the
/// snapshot is bind-mounted read-only at `/snapshot` and copied to `/testbed`
/// when the container starts.
#[derive(Debug, Clone)]
pub struct ContainerBackend {
    pub program: String,
    /// Host directory mounted at `/artifacts`.
    pub artifacts_dir: Option<PathBuf>,
}

impl Default for ContainerBackend {
    fn default() -> Self {
        ContainerBackend {
            program: "docker".into(),
            artifacts_dir: None,
        }
    }
}

static CONTAINER_SEQ: AtomicU64 = AtomicU64::new(0);

impl ExecutionBackend for ContainerBackend {
    fn prepare(&self, snapshot: &Path, env: &ResolvedEnv) -> Result<Workspace, RunnerError> {
        let name = format!(
            "swe-forge-{}-{}",
            std::process::id(),
            CONTAINER_SEQ.fetch_add(1, Ordering::Relaxed)
        );
        let mut cmd = Command::new(&self.program);
        cmd.args(["run", "-d", "--name", &name])
            .arg("-v")
            .arg(format!("{}:/snapshot:ro", snapshot.display()));
        if let Some(artifacts) = &self.artifacts_dir {
            cmd.arg("-v").arg(format!("{}:/artifacts", artifacts.display()));
        }
        cmd.args([&env.image_ref, "sleep", "infinity"]);
        let unavailable = |e: String| RunnerError::BackendUnavailable(format!("{}: {e}", self.program));
        let out = cmd.output().map_err(|e| unavailable(e.to_string()))?;
        if !out.status.success() {
            return Err(unavailable(String::from_utf8_lossy(&out.stderr).into_owned()));
        }
        let ws = Workspace {
            snapshot_path: snapshot.to_path_buf(),
            work_path: PathBuf::from("/testbed"),
            env_link: Some(PathBuf::from("/testbed").join(ENV_LINK_NAME)),
            container: Some((self.program.clone(), name.clone())),
            _dir: None,
        };
        let init = format!(
            "mkdir -p /testbed && cp -a /snapshot/. /testbed/ && ln -sfn \"${{VIRTUAL_ENV:-/opt/env}}\" /testbed/{ENV_LINK_NAME}"
        );
        let status = Command::new(&self.program)
            .args(["exec", &name, "sh", "-c", &init])
            .status()
            .map_err(|e| unavailable(e.to_string()))?;
        if !status.success() {
            return Err(unavailable("copy-on-start failed".into()));
        }
        Ok(ws)
    }

    fn run(&self, ws: &Workspace, command: &str, phase: Phase, timeout: Duration) -> Result<ExecutionRecord, RunnerError> {
        let Some((program, name)) = &ws.container else {
            return Err(RunnerError::BackendUnavailable("workspace has no container".into()));
        };
        let mut cmd = Command::new(program);
        cmd.args(["exec", "-w", "/testbed", name, "sh", "-c", command]);
        run_with_timeout(cmd, phase, timeout)
            .map_err(|e| RunnerError::BackendUnavailable(format!("{program}: {e}")))
    }
}

/// Runs `cmd` in its own process group, capturing both streams. On timeout
/// the whole group is killed and the record reports 128 + SIGKILL.
pub fn run_with_timeout(mut cmd: Command, phase: Phase, timeout: Duration) -> std::io::Result<ExecutionRecord> {
    cmd.stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    let start = Instant::now();
    let mut child = cmd.spawn()?;
    let pid = child.id() as i32;
    let mut out = child.stdout.take().expect("piped stdout");
    let mut err = child.stderr.take().expect("piped stderr");
    let out_reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = out.read_to_end(&mut buf);
        buf
    });
    let err_reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = err.read_to_end(&mut buf);
        buf
    });

    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if start.elapsed() >= timeout {
            timed_out = true;
            // SAFETY: plain syscall on a process group we created.
            unsafe {
                libc::kill(-pid, libc::SIGKILL);
            }
            break child.wait()?;
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    if !timed_out {
        // Reap stragglers that still hold the pipes open.
        unsafe {
            libc::kill(-pid, libc::SIGKILL);
        }
    }
    let stdout = out_reader.join().unwrap_or_default();
    let stderr = err_reader.join().unwrap_or_default();
    let return_code = if timed_out {
        128 + libc::SIGKILL
    } else {
        status.code().unwrap_or_else(|| 128 + status.signal().unwrap_or(0))
    };
    Ok(ExecutionRecord {
        phase,
        return_code,
        stdout: String::from_utf8_lossy(&stdout).into_owned(),
        stderr: String::from_utf8_lossy(&stderr).into_owned(),
        duration: start.elapsed().as_secs_f64(),
        timed_out,
    })
}

/// Snapshots, workspaces and commands for candidate pairs.
#[derive(Clone)]
pub struct Runner {
    pub backend: Arc<dyn ExecutionBackend>,
    pub snapshots_root: PathBuf,
    pub timeouts: Timeouts,
}

impl Runner {
    pub fn new(backend: Arc<dyn ExecutionBackend>, snapshots_root: impl Into<PathBuf>) -> Self {
        Runner {
            backend,
            snapshots_root: snapshots_root.into(),
            timeouts: Timeouts::default(),
        }
    }

    /// Fresh workspace, then setup, then test. Both phases always run.
    pub fn run_commit(
        &self,
        checkout: &RepoCheckout,
        commit: &str,
        env: &ResolvedEnv,
        setup_command: &str,
        test_command: &str,
    ) -> Result<CommitRecords, RunnerError> {
        let snapshot = materialize_snapshot(checkout, commit, &self.snapshots_root)?;
        let ws = prepare_workspace(self.backend.as_ref(), &snapshot, env)?;
        let setup = run_phase(
            self.backend.as_ref(),
            &ws,
            setup_command,
            Phase::Setup,
            self.timeouts.for_phase(Phase::Setup),
        )?;
        let test = run_phase(
            self.backend.as_ref(),
            &ws,
            test_command,
            Phase::Test,
            self.timeouts.for_phase(Phase::Test),
        )?;
        Ok(CommitRecords { setup, test })
    }

    pub fn run_pair(
        &self,
        checkout: &RepoCheckout,
        pair: &CandidatePair,
        env: &ResolvedEnv,
        setup_command: &str,
        test_command: &str,
    ) -> Result<PairRecords, RunnerError> {
        Ok(PairRecords {
            base: self.run_commit(checkout, &pair.base_commit, env, setup_command, test_command)?,
            merged: self.run_commit(checkout, &pair.merged_commit, env, setup_command, test_command)?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    duration: f64,
    timed_out: bool,
}

/// Writes `<dir>/{base,merged}/{setup,test}.{rc,stdout,stderr}` plus a
/// `.meta.json` with duration and timeout flag.
pub fn persist_records(dir: &Path, records: &PairRecords) -> Result<(), RunnerError> {
    for (side, commit) in [("base", &records.base), ("merged", &records.merged)] {
        let side_dir = dir.join(side);
        fs::create_dir_all(&side_dir).map_err(io_err(&side_dir))?;
        for rec in [&commit.setup, &commit.test] {
            let stem = side_dir.join(rec.phase.as_str());
            let write = |ext: &str, data: &str| {
                let path = stem.with_extension(ext);
                fs::write(&path, data).map_err(io_err(&path))
            };
            write("rc", &format!("{}\n", rec.return_code))?;
            write("stdout", &rec.stdout)?;
            write("stderr", &rec.stderr)?;
            let meta = serde_json::to_string(&RecordMeta {
                duration: rec.duration,
                timed_out: rec.timed_out,
            })
            .expect("meta serializes");
            write("meta.json", &meta)?;
        }
    }
    Ok(())
}

pub fn load_records(dir: &Path) -> Result<PairRecords, RunnerError> {
    let load_side = |side: &str| -> Result<CommitRecords, RunnerError> {
        let load = |phase: Phase| -> Result<ExecutionRecord, RunnerError> {
            let stem = dir.join(side).join(phase.as_str());
            let read = |ext: &str| {
                let path = stem.with_extension(ext);
                fs::read_to_string(&path).map_err(io_err(&path))
            };
            let rc_path = stem.with_extension("rc");
            let return_code = read("rc")?.trim().parse().map_err(|_| RunnerError::Io {
                path: rc_path.clone(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, "bad return code"),
            })?;
            let meta: RecordMeta = read("meta.json")
                .ok()
                .and_then(|m| serde_json::from_str(&m).ok())
                .unwrap_or(RecordMeta {
                    duration: 0.0,
                    timed_out: false,
                });
            Ok(ExecutionRecord {
                phase,
                return_code,
                stdout: read("stdout")?,
                stderr: read("stderr")?,
                duration: meta.duration,
                timed_out: meta.timed_out,
            })
        };
        Ok(CommitRecords {
            setup: load(Phase::Setup)?,
            test: load(Phase::Test)?,
        })
    };
    Ok(PairRecords {
        base: load_side("base")?,
        merged: load_side("merged")?,
    })
}
