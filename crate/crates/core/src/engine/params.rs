//! Parameter sets: one point in the search space evaluated by several runs
//! that differ only in their seed.

use super::EngineError;
use crate::types::{TaskId, TaskRecord, TaskState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Run {
    pub seed: u64,
    pub task: TaskId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub id: u64,
    pub params: Vec<f64>,
    pub runs: Vec<Run>,
}

impl ParameterSet {
    pub fn task_ids(&self) -> Vec<TaskId> {
        self.runs.iter().map(|r| r.task).collect()
    }
}

/// Element-wise mean over the runs' result vectors. Every run must have
/// finished and all result vectors must have the same length.
pub fn average_run_results(
    ps: &ParameterSet,
    lookup: impl Fn(TaskId) -> Option<TaskRecord>,
) -> Result<Vec<f64>, EngineError> {
    if ps.runs.is_empty() {
        return Err(EngineError::NoRuns);
    }
    let mut sum: Option<Vec<f64>> = None;
    for run in &ps.runs {
        let rec = lookup(run.task).ok_or(EngineError::UnknownTask(run.task))?;
        match rec.state {
            TaskState::Finished => {}
            TaskState::Failed => return Err(EngineError::RunFailed { task: run.task }),
            _ => return Err(EngineError::RunIncomplete { task: run.task }),
        }
        match &mut sum {
            None => sum = Some(rec.results.clone()),
            Some(s) => {
                if s.len() != rec.results.len() {
                    return Err(EngineError::LengthMismatch {
                        task: run.task,
                        expected: s.len(),
                        got: rec.results.len(),
                    });
                }
                for (a, b) in s.iter_mut().zip(&rec.results) {
                    *a += b;
                }
            }
        }
    }
    let n = ps.runs.len() as f64;
    Ok(sum.unwrap_or_default().into_iter().map(|x| x / n).collect())
}
