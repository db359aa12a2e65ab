//! Bookkeeping for every task the engine has created.

use log::warn;

use super::EngineError;
use crate::scheduler::SchedulerEvent;
use crate::types::{TaskId, TaskRecord, TaskSpec, TaskState, RC_SPAWN_FAILURE};

#[derive(Debug, Default)]
pub struct TaskTable {
    records: Vec<TaskRecord>,
    outbox: Vec<TaskId>,
    closed: bool,
    finished: usize,
    failed: usize,
}

impl TaskTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create(&mut self, command: String, input: Vec<f64>) -> Result<TaskId, EngineError> {
        if self.closed {
            return Err(EngineError::ShutDown);
        }
        let id = TaskId(self.records.len() as u64);
        let spec = TaskSpec::with_input(id, command, input)?;
        self.records.push(TaskRecord::created(spec));
        self.outbox.push(id);
        Ok(id)
    }

    /// Specs created since the last call; they are now `Dispatched`.
    pub fn take_outbox(&mut self) -> Vec<TaskSpec> {
        let ids = std::mem::take(&mut self.outbox);
        ids.into_iter()
            .map(|id| {
                let rec = &mut self.records[id.0 as usize];
                rec.state = rec
                    .state
                    .transition(TaskState::Dispatched)
                    .expect("outbox holds only created tasks");
                rec.spec.clone()
            })
            .collect()
    }

    pub fn has_outbox(&self) -> bool {
        !self.outbox.is_empty()
    }

    /// Applies a scheduler event. Returns the id when the task just became
    /// terminal.
    pub fn apply(&mut self, event: SchedulerEvent) -> Option<TaskId> {
        match event {
            SchedulerEvent::Started { id, worker, at } => {
                let rec = self.records.get_mut(id.0 as usize)?;
                if rec.state == TaskState::Dispatched {
                    rec.state = TaskState::Running;
                    rec.start_at = Some(at);
                    rec.place = Some(worker);
                }
                None
            }
            SchedulerEvent::Done(done) => {
                let id = done.spec.id;
                let Some(rec) = self.records.get_mut(id.0 as usize) else {
                    warn!("completion for unknown task {id}");
                    return None;
                };
                if rec.state.is_terminal() {
                    warn!("duplicate completion for task {id}");
                    return None;
                }
                if rec.state == TaskState::Dispatched {
                    rec.state = TaskState::Running;
                }
                let target = match done.state {
                    TaskState::Finished if done.rc == Some(0) => TaskState::Finished,
                    _ => TaskState::Failed,
                };
                rec.state = rec.state.transition(target).ok()?;
                rec.rc = done.rc.or(Some(RC_SPAWN_FAILURE));
                rec.results = done.results;
                rec.start_at = done.start_at.or(rec.start_at);
                rec.finish_at = done.finish_at;
                rec.place = done.place.or(rec.place);
                rec.warning = done.warning;
                match target {
                    TaskState::Finished => self.finished += 1,
                    _ => self.failed += 1,
                }
                Some(id)
            }
        }
    }

    pub fn get(&self, id: TaskId) -> Option<&TaskRecord> {
        self.records.get(id.0 as usize)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn finished(&self) -> usize {
        self.finished
    }

    pub fn failed(&self) -> usize {
        self.failed
    }

    /// Created but not yet terminal.
    pub fn in_flight(&self) -> usize {
        self.records.len() - self.finished - self.failed
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn records(&self) -> &[TaskRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<TaskRecord> {
        self.records
    }
}
