//! Domain types shared by the scheduler, the engine and the optimizers.
//!
//! Nothing in here performs I/O. Timestamps are monotonic-clock readings in
//! seconds relative to a per-run epoch (see [`Clock`]).

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identity of a task. Assigned sequentially from 0 by the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identity of a scheduler role. `0` is the producer, `1..=B` are buffers and
/// `B+1..` are consumers; the mapping is owned by [`crate::scheduler::Topology`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WorkerId(pub u32);

impl WorkerId {
    pub const PRODUCER: WorkerId = WorkerId(0);
}

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A single simulator execution as handed to the scheduler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub command: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub input: Vec<f64>,
}

impl TaskSpec {
    pub fn new(id: TaskId, command: impl Into<String>) -> Result<Self, SpecError> {
        Self::with_input(id, command, Vec::new())
    }

    pub fn with_input(
        id: TaskId,
        command: impl Into<String>,
        input: Vec<f64>,
    ) -> Result<Self, SpecError> {
        let command = command.into();
        if command.trim().is_empty() {
            return Err(SpecError::EmptyCommand);
        }
        Ok(Self { id, command, input })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("task command is empty")]
    EmptyCommand,
    #[error("placeholder index {index} out of range (input has {len} values)")]
    PlaceholderOutOfRange { index: usize, len: usize },
    #[error("unterminated placeholder at byte {0}")]
    Unterminated(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskState {
    Created,
    Dispatched,
    Running,
    Finished,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("illegal task transition {from:?} -> {to:?}")]
pub struct TransitionError {
    pub from: TaskState,
    pub to: TaskState,
}

impl TaskState {
    pub const ALL: [TaskState; 5] = [
        TaskState::Created,
        TaskState::Dispatched,
        TaskState::Running,
        TaskState::Finished,
        TaskState::Failed,
    ];

    pub fn can_transition(self, to: TaskState) -> bool {
        use TaskState::*;
        matches!(
            (self, to),
            (Created, Dispatched) | (Dispatched, Running) | (Running, Finished) | (Running, Failed)
        )
    }

    pub fn transition(self, to: TaskState) -> Result<TaskState, TransitionError> {
        if self.can_transition(to) {
            Ok(to)
        } else {
            Err(TransitionError { from: self, to })
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Finished | TaskState::Failed)
    }
}

/// Reserved return code for tasks that never produced an exit status
/// (spawn failure, lost consumer).
pub const RC_SPAWN_FAILURE: i32 = -1;

/// The full lifecycle record of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub spec: TaskSpec,
    pub state: TaskState,
    #[serde(default)]
    pub rc: Option<i32>,
    #[serde(default)]
    pub results: Vec<f64>,
    #[serde(default)]
    pub start_at: Option<f64>,
    #[serde(default)]
    pub finish_at: Option<f64>,
    #[serde(default)]
    pub place: Option<WorkerId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl TaskRecord {
    pub fn created(spec: TaskSpec) -> Self {
        Self {
            spec,
            state: TaskState::Created,
            rc: None,
            results: Vec::new(),
            start_at: None,
            finish_at: None,
            place: None,
            warning: None,
        }
    }

    /// Builds a terminal record from an exit code. `rc == 0` is `Finished`.
    pub fn completed(
        spec: TaskSpec,
        rc: i32,
        results: Vec<f64>,
        start_at: f64,
        finish_at: f64,
        place: WorkerId,
    ) -> Self {
        Self {
            spec,
            state: if rc == 0 {
                TaskState::Finished
            } else {
                TaskState::Failed
            },
            rc: Some(rc),
            results,
            start_at: Some(start_at),
            finish_at: Some(finish_at.max(start_at)),
            place: Some(place),
            warning: None,
        }
    }

    pub fn id(&self) -> TaskId {
        self.spec.id
    }

    pub fn duration(&self) -> Option<f64> {
        Some(self.finish_at? - self.start_at?)
    }
}

/// Monotonic clock reporting seconds since its creation.
#[derive(Debug, Clone, Copy)]
pub struct Clock {
    epoch: Instant,
}

impl Clock {
    pub fn new() -> Self {
        Self {
            epoch: Instant::now(),
        }
    }

    pub fn now(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64()
    }

    pub fn instant_at(&self, t: f64) -> Instant {
        self.epoch + std::time::Duration::from_secs_f64(t.max(0.0))
    }
}

impl Default for Clock {
    fn default() -> Self {
        Self::new()
    }
}

/// Renders a number the way it is placed on a command line: the shortest
/// decimal that round-trips, so `2.0` becomes `2`.
pub fn render_number(x: f64) -> String {
    format!("{x}")
}

/// Substitutes `{0}`, `{1}`, ... with `input` values and `{seed}` with the
/// seed. Any other brace sequence is left untouched so shell syntax such as
/// `${HOME}` or awk programs survive.
pub fn render_command(template: &str, input: &[f64], seed: u64) -> Result<String, SpecError> {
    let mut out = String::with_capacity(template.len() + input.len() * 8);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        let close = tail.find('}');
        let key = close.map(|c| &tail[..c]);
        match key {
            Some("seed") => {
                out.push_str(&seed.to_string());
                rest = &tail[4 + 1..];
            }
            Some(k) if !k.is_empty() && k.bytes().all(|b| b.is_ascii_digit()) => {
                let index: usize = k.parse().map_err(|_| SpecError::PlaceholderOutOfRange {
                    index: usize::MAX,
                    len: input.len(),
                })?;
                let value = input.get(index).ok_or(SpecError::PlaceholderOutOfRange {
                    index,
                    len: input.len(),
                })?;
                out.push_str(&render_number(*value));
                rest = &tail[k.len() + 1..];
            }
            _ => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}
