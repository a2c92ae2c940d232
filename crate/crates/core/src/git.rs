//! Thin wrapper over the `git` command-line tool.

use std::ffi::OsStr;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};

#[derive(Debug, thiserror::Error)]
pub enum GitError {
    #[error("failed to spawn git: {0}")]
    Spawn(#[from] std::io::Error),
    #[error("git {args} exited with status {status:?}: {stderr}")]
    Status {
        args: String,
        status: Option<i32>,
        stderr: String,
    },
    #[error("git produced non-UTF-8 output for {0}")]
    Utf8(String),
}

impl GitError {
    /// Exit status reported by git, if the process ran at all.
    pub fn exit_status(&self) -> Option<i32> {
        match self {
            GitError::Status { status, .. } => *status,
            _ => None,
        }
    }
}

fn base_command(git_dir: Option<&Path>) -> Command {
    let mut cmd = Command::new("git");
    if let Some(dir) = git_dir {
        cmd.arg("--git-dir").arg(dir);
    }
    // Keep output stable regardless of the user's configuration.
    cmd.env("GIT_CONFIG_NOSYSTEM", "1")
        .env("LC_ALL", "C")
        .env("GIT_TERMINAL_PROMPT", "0")
        .arg("-c")
        .arg("core.quotepath=off")
        .arg("-c")
        .arg("diff.noprefix=false")
        .arg("-c")
        .arg("color.ui=never");
    cmd
}

/// Runs git and returns raw stdout bytes.
pub fn run_bytes<I, S>(git_dir: Option<&Path>, args: I) -> Result<Vec<u8>, GitError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    let args: Vec<_> = args.into_iter().map(|a| a.as_ref().to_os_string()).collect();
    let out = base_command(git_dir)
        .args(&args)
        .stdin(Stdio::null())
        .output()?;
    if !out.status.success() {
        return Err(GitError::Status {
            args: render_args(&args),
            status: out.status.code(),
            stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        });
    }
    Ok(out.stdout)
}

/// Runs git and returns stdout as UTF-8 text.
pub fn run<I, S>(git_dir: Option<&Path>, args: I) -> Result<String, GitError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    let args: Vec<_> = args.into_iter().map(|a| a.as_ref().to_os_string()).collect();
    let label = render_args(&args);
    let bytes = run_bytes(git_dir, &args)?;
    String::from_utf8(bytes).map_err(|_| GitError::Utf8(label))
}

/// Runs git with `input` on stdin.
pub fn run_with_input<I, S>(git_dir: Option<&Path>, args: I, input: &[u8]) -> Result<Vec<u8>, GitError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    let args: Vec<_> = args.into_iter().map(|a| a.as_ref().to_os_string()).collect();
    let mut child = base_command(git_dir)
        .args(&args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()?;
    let mut stdin = child.stdin.take().expect("piped stdin");
    let input = input.to_vec();
    let writer = std::thread::spawn(move || {
        let _ = stdin.write_all(&input);
    });
    let out = child.wait_with_output()?;
    let _ = writer.join();
    if !out.status.success() {
        return Err(GitError::Status {
            args: render_args(&args),
            status: out.status.code(),
            stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        });
    }
    Ok(out.stdout)
}

fn render_args(args: &[std::ffi::OsString]) -> String {
    args.iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join(" ")
}

/// True when `s` looks like a full 40-character hex object id.
pub fn is_full_oid(s: &str) -> bool {
    s.len() == 40 && s.bytes().all(|b| b.is_ascii_hexdigit())
}
