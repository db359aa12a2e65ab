//! Runs one task as an external process in its own working directory.

use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use log::warn;
use thiserror::Error;

use crate::types::{TaskId, TaskSpec, RC_SPAWN_FAILURE};

pub const RESULTS_FILE: &str = "_results.txt";
pub const STDOUT_FILE: &str = "_stdout.txt";
pub const STDERR_FILE: &str = "_stderr.txt";
pub const TASK_ID_ENV: &str = "CARAVAN_TASK_ID";

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionOutcome {
    pub rc: i32,
    pub results: Vec<f64>,
    pub workdir: PathBuf,
    pub stdout_path: PathBuf,
    pub stderr_path: PathBuf,
    /// Set when the process ran but `_results.txt` could not be used.
    pub warning: Option<String>,
}

#[derive(Debug, Error)]
pub enum ExecutorError {
    #[error("cannot prepare work directory {path}: {source}")]
    WorkDir {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Error, PartialEq)]
pub enum ResultsParseError {
    #[error("non-numeric token {token:?} in results file")]
    BadToken { token: String },
    #[error("cannot read results file: {0}")]
    Io(String),
}

/// `w` followed by the id zero-padded to ten digits.
pub fn workdir_name(id: TaskId) -> String {
    format!("w{:010}", id.0)
}

/// Reads `_results.txt`-style content: every whitespace separated token must
/// be a finite decimal number. A missing file yields an empty list.
pub fn parse_results(path: &Path) -> Result<Vec<f64>, ResultsParseError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(ResultsParseError::Io(e.to_string())),
    };
    parse_results_str(&text)
}

pub fn parse_results_str(text: &str) -> Result<Vec<f64>, ResultsParseError> {
    text.split_whitespace()
        .map(|tok| match tok.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(ResultsParseError::BadToken {
                token: tok.to_string(),
            }),
        })
        .collect()
}

/// Creates `work_root/w<id>`, runs the command through `sh -c` inside it and
/// collects the exit code and parsed results. The directory is left in place.
pub fn execute_task(spec: &TaskSpec, work_root: &Path) -> Result<ExecutionOutcome, ExecutorError> {
    let workdir = work_root.join(workdir_name(spec.id));
    let wrap = |source| ExecutorError::WorkDir {
        path: workdir.clone(),
        source,
    };
    fs::create_dir_all(&workdir).map_err(wrap)?;
    let stdout_path = workdir.join(STDOUT_FILE);
    let stderr_path = workdir.join(STDERR_FILE);
    let stdout = File::create(&stdout_path).map_err(wrap)?;
    let stderr = File::create(&stderr_path).map_err(wrap)?;

    let status = Command::new("sh")
        .arg("-c")
        .arg(&spec.command)
        .current_dir(&workdir)
        .env(TASK_ID_ENV, spec.id.0.to_string())
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .status();

    let rc = match status {
        Ok(status) => status.code().unwrap_or_else(|| {
            // killed by a signal; follow the shell convention
            #[cfg(unix)]
            {
                use std::os::unix::process::ExitStatusExt;
                128 + status.signal().unwrap_or(0)
            }
            #[cfg(not(unix))]
            {
                RC_SPAWN_FAILURE
            }
        }),
        Err(e) => {
            warn!("task {}: spawn failed: {e}", spec.id);
            return Ok(ExecutionOutcome {
                rc: RC_SPAWN_FAILURE,
                results: Vec::new(),
                workdir,
                stdout_path,
                stderr_path,
                warning: Some(format!("spawn failed: {e}")),
            });
        }
    };

    let (results, warning) = match parse_results(&workdir.join(RESULTS_FILE)) {
        Ok(r) => (r, None),
        Err(e) => {
            warn!("task {}: {e}", spec.id);
            (Vec::new(), Some(e.to_string()))
        }
    };
    Ok(ExecutionOutcome {
        rc,
        results,
        workdir,
        stdout_path,
        stderr_path,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(id: u64, cmd: &str) -> TaskSpec {
        TaskSpec::new(TaskId(id), cmd).unwrap()
    }

    #[test]
    fn results_file_is_parsed() {
        let root = tempfile::tempdir().unwrap();
        let out = execute_task(&spec(0, "echo 1.5 > _results.txt"), root.path()).unwrap();
        assert_eq!(out.rc, 0);
        assert_eq!(out.results, vec![1.5]);
        assert!(out.warning.is_none());
    }

    #[test]
    fn exit_code_is_reported() {
        let root = tempfile::tempdir().unwrap();
        let out = execute_task(&spec(1, "exit 3"), root.path()).unwrap();
        assert_eq!(out.rc, 3);
        assert!(out.results.is_empty());
    }

    #[test]
    fn workdir_layout() {
        assert_eq!(workdir_name(TaskId(7)), "w0000000007");
        let root = tempfile::tempdir().unwrap();
        let out = execute_task(
            &spec(7, "echo out; echo err >&2; echo $CARAVAN_TASK_ID > id.txt"),
            root.path(),
        )
        .unwrap();
        assert!(out.workdir.ends_with("w0000000007"));
        assert_eq!(fs::read_to_string(&out.stdout_path).unwrap(), "out\n");
        assert_eq!(fs::read_to_string(&out.stderr_path).unwrap(), "err\n");
        assert_eq!(fs::read_to_string(out.workdir.join("id.txt")).unwrap(), "7\n");
    }

    #[test]
    fn malformed_results_keep_rc() {
        let root = tempfile::tempdir().unwrap();
        let out = execute_task(&spec(2, "echo '1.0 abc' > _results.txt"), root.path()).unwrap();
        assert_eq!(out.rc, 0);
        assert!(out.results.is_empty());
        assert!(out.warning.unwrap().contains("abc"));
    }

    #[test]
    fn unwritable_root_is_hard_error() {
        let root = tempfile::tempdir().unwrap();
        let file = root.path().join("plain-file");
        fs::write(&file, "x").unwrap();
        let err = execute_task(&spec(3, "true"), &file).unwrap_err();
        assert!(matches!(err, ExecutorError::WorkDir { .. }));
    }

    #[test]
    fn parse_examples() {
        assert_eq!(
            parse_results_str("1.0 2.5\n-3e-2\n").unwrap(),
            vec![1.0, 2.5, -0.03]
        );
        let missing = tempfile::tempdir().unwrap();
        assert_eq!(parse_results(&missing.path().join(RESULTS_FILE)).unwrap(), Vec::<f64>::new());
        assert_eq!(
            parse_results_str("1.0 abc"),
            Err(ResultsParseError::BadToken {
                token: "abc".into()
            })
        );
        assert!(parse_results_str("nan").is_err());
    }

    proptest! {
        #[test]
        fn write_then_parse_is_identity(values in prop::collection::vec(-1e300f64..1e300, 0..50)) {
            let text = values.iter().map(|v| crate::types::render_number(*v)).collect::<Vec<_>>().join(" ");
            prop_assert_eq!(parse_results_str(&text).unwrap(), values);
        }
    }
}
