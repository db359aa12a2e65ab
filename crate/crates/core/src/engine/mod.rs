//! Search-engine runtime.
//!
//! User code runs inside a single-threaded event loop. It creates tasks,
//! attaches completion callbacks and awaits results from `async` activities.
//! The loop hands new tasks to a [`Backend`] (a running scheduler or the
//! virtual-time simulator) and feeds completions back.
//!
//! ```no_run
//! # use caravan::engine::{Backend, Engine};
//! # fn demo(backend: &mut dyn Backend) {
//! let report = Engine::new().run(backend, |server| async move {
//!     for i in 0..10 {
//!         server.create_task(format!("echo hello caravan {i}"))?;
//!     }
//!     Ok(())
//! });
//! assert_eq!(report.finished, 10);
//! # }
//! ```
//!
//! Callbacks and activity segments never run concurrently; a callback that
//! computes for a long time stalls the whole loop.

mod params;
mod table;

use std::cell::RefCell;
use std::collections::{HashMap, HashSet, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::task::{Context, Poll, Wake, Waker};
use std::time::{Duration, Instant};

use log::{error, warn};
use thiserror::Error;

use crate::scheduler::{SchedulerError, SchedulerEvent, Topology};
use crate::types::{SpecError, TaskId, TaskRecord, TaskSpec};

pub use params::{average_run_results, ParameterSet, Run};
pub use table::TaskTable;

/// What the engine needs from a scheduler.
pub trait Backend {
    /// Current time on the scheduler's clock, in seconds.
    fn now(&self) -> f64;
    fn submit(&mut self, tasks: Vec<TaskSpec>) -> Result<(), SchedulerError>;
    /// Blocks until at least one event is available. With a timeout, an empty
    /// vector means nothing arrived in time.
    fn wait(&mut self, timeout: Option<Duration>) -> Result<Vec<SchedulerEvent>, SchedulerError>;
    fn shutdown(&mut self) -> Result<(), SchedulerError>;
    fn topology(&self) -> Option<&Topology> {
        None
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("engine is shutting down")]
    ShutDown,
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("task {0} can never complete")]
    Deadlock(TaskId),
    #[error("a parameter set needs at least one run")]
    NoRuns,
    #[error("run {task} did not finish successfully")]
    RunFailed { task: TaskId },
    #[error("run {task} is not complete")]
    RunIncomplete { task: TaskId },
    #[error("run {task} has {got} results, expected {expected}")]
    LengthMismatch {
        task: TaskId,
        expected: usize,
        got: usize,
    },
}

/// One step of engine-visible behaviour, recorded when tracing is enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    Created(TaskId),
    Callback(TaskId),
    Resumed(usize),
    ActivityDone(usize),
}

#[derive(Debug, Clone, Default)]
pub struct ExitReport {
    pub created: usize,
    pub finished: usize,
    pub failed: usize,
    pub wall_time: Duration,
    /// Backend clock at exit (virtual seconds for the simulator).
    pub end_time: f64,
    pub program_error: Option<String>,
    pub activity_errors: Vec<String>,
    pub scheduler_error: Option<String>,
    pub abnormal: bool,
    pub callbacks_run: u64,
    pub reentrancy_violations: u64,
    pub records: Vec<TaskRecord>,
    pub trace: Vec<TraceEvent>,
}

impl ExitReport {
    pub fn is_success(&self) -> bool {
        self.failed == 0
            && self.program_error.is_none()
            && self.activity_errors.is_empty()
            && self.scheduler_error.is_none()
            && !self.abnormal
    }
}

type Callback = Box<dyn FnOnce(&TaskRecord)>;
type Activity = Pin<Box<dyn Future<Output = anyhow::Result<()>>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Job {
    Activity(usize),
    Callback,
}

#[derive(Default)]
struct ReadyQueue {
    jobs: VecDeque<Job>,
    scheduled: HashSet<usize>,
}

impl ReadyQueue {
    fn push_activity(&mut self, id: usize) {
        if self.scheduled.insert(id) {
            self.jobs.push_back(Job::Activity(id));
        }
    }
}

#[derive(Default)]
struct SharedReady {
    queue: Mutex<ReadyQueue>,
    wakeup: Condvar,
}

impl SharedReady {
    fn lock(&self) -> MutexGuard<'_, ReadyQueue> {
        self.queue.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Blocks until something is ready or `timeout` passes.
    fn wait(&self, timeout: Duration) {
        let q = self.lock();
        if q.jobs.is_empty() {
            let _ = self.wakeup.wait_timeout(q, timeout);
        }
    }
}

struct ActivityWaker {
    id: usize,
    ready: Arc<SharedReady>,
}

impl Wake for ActivityWaker {
    fn wake(self: Arc<Self>) {
        self.wake_by_ref();
    }

    fn wake_by_ref(self: &Arc<Self>) {
        self.ready.lock().push_activity(self.id);
        self.ready.wakeup.notify_one();
    }
}

struct Inner {
    table: TaskTable,
    callbacks: HashMap<TaskId, Vec<Callback>>,
    ready_callbacks: VecDeque<(TaskId, Callback)>,
    waiters: HashMap<TaskId, Vec<Waker>>,
    activities: Vec<Option<Activity>>,
    activity_errors: Vec<String>,
    program_error: Option<String>,
    trace: Option<Vec<TraceEvent>>,
    now: f64,
    next_parameter_set: u64,
    draining: bool,
    in_user_code: bool,
    reentrancy_violations: u64,
    callbacks_run: u64,
}

impl Inner {
    fn trace(&mut self, ev: TraceEvent) {
        if let Some(t) = &mut self.trace {
            t.push(ev);
        }
    }
}

/// Handle through which user code talks to the running engine. Cheap to
/// clone; only usable on the engine's thread.
#[derive(Clone)]
pub struct Server {
    inner: Rc<RefCell<Inner>>,
    ready: Arc<SharedReady>,
    holds: Arc<AtomicUsize>,
}

/// Keeps the event loop alive while an activity waits on something other
/// than a task (see [`Server::hold`]). Released on drop.
pub struct Hold(Arc<AtomicUsize>);

impl Drop for Hold {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Identifies an activity started with [`Server::spawn`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActivityHandle(pub usize);

impl Server {
    fn new(trace: bool) -> Self {
        Self {
            inner: Rc::new(RefCell::new(Inner {
                table: TaskTable::new(),
                callbacks: HashMap::new(),
                ready_callbacks: VecDeque::new(),
                waiters: HashMap::new(),
                activities: Vec::new(),
                activity_errors: Vec::new(),
                program_error: None,
                trace: trace.then(Vec::new),
                now: 0.0,
                next_parameter_set: 0,
                draining: false,
                in_user_code: false,
                reentrancy_violations: 0,
                callbacks_run: 0,
            })),
            ready: Arc::new(SharedReady::default()),
            holds: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// Tells the loop that some activity will be woken from outside (another
    /// thread), so an idle loop must keep polling instead of concluding that
    /// the remaining activities are stuck.
    pub fn hold(&self) -> Hold {
        self.holds.fetch_add(1, Ordering::SeqCst);
        Hold(self.holds.clone())
    }

    /// A waker that schedules the given activity; usable from any thread.
    pub fn waker_for(&self, activity: ActivityHandle) -> Waker {
        Waker::from(Arc::new(ActivityWaker {
            id: activity.0,
            ready: self.ready.clone(),
        }))
    }

    fn held(&self) -> bool {
        self.holds.load(Ordering::SeqCst) > 0
    }

    /// Creates a task. It is handed to the scheduler at the end of the
    /// current loop turn.
    pub fn create_task(&self, command: impl Into<String>) -> Result<TaskId, EngineError> {
        self.create_task_with_input(command, Vec::new())
    }

    pub fn create_task_with_input(
        &self,
        command: impl Into<String>,
        input: Vec<f64>,
    ) -> Result<TaskId, EngineError> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.table.create(command.into(), input)?;
        inner.trace(TraceEvent::Created(id));
        Ok(id)
    }

    /// Registers `cb` to run once the task is finished or failed. Callbacks
    /// on a task run in registration order; registering on a task that is
    /// already complete runs `cb` on the next loop turn.
    pub fn add_callback(
        &self,
        task: TaskId,
        cb: impl FnOnce(&TaskRecord) + 'static,
    ) -> Result<(), EngineError> {
        let mut inner = self.inner.borrow_mut();
        let rec = inner.table.get(task).ok_or(EngineError::UnknownTask(task))?;
        if rec.state.is_terminal() {
            inner.ready_callbacks.push_back((task, Box::new(cb)));
            drop(inner);
            self.ready.lock().jobs.push_back(Job::Callback);
        } else {
            inner.callbacks.entry(task).or_default().push(Box::new(cb));
        }
        Ok(())
    }

    /// Resolves with the task's record once it is complete.
    pub fn await_task(&self, task: TaskId) -> impl Future<Output = Result<TaskRecord, EngineError>> {
        let wait = AwaitTasks {
            server: self.clone(),
            tasks: vec![task],
        };
        async move { wait.await.map(|mut v| v.pop().expect("one record")) }
    }

    /// Resolves once every listed task is complete. Records come back in
    /// argument order.
    pub fn await_all_tasks(&self, tasks: Vec<TaskId>) -> AwaitTasks {
        AwaitTasks {
            server: self.clone(),
            tasks,
        }
    }

    /// Starts an activity on the next loop turn. Activities interleave only
    /// at `.await` points.
    pub fn spawn(
        &self,
        activity: impl Future<Output = anyhow::Result<()>> + 'static,
    ) -> ActivityHandle {
        let id = {
            let mut inner = self.inner.borrow_mut();
            inner.activities.push(Some(Box::pin(activity)));
            inner.activities.len() - 1
        };
        self.ready.lock().push_activity(id);
        ActivityHandle(id)
    }

    pub fn activity_finished(&self, handle: ActivityHandle) -> bool {
        matches!(self.inner.borrow().activities.get(handle.0), Some(None))
    }

    /// Snapshot of a task's record.
    pub fn task(&self, id: TaskId) -> Option<TaskRecord> {
        self.inner.borrow().table.get(id).cloned()
    }

    /// Scheduler clock at the last completion the loop processed.
    pub fn now(&self) -> f64 {
        self.inner.borrow().now
    }

    pub fn tasks_created(&self) -> usize {
        self.inner.borrow().table.len()
    }

    pub fn tasks_in_flight(&self) -> usize {
        self.inner.borrow().table.in_flight()
    }

    /// Creates `num_runs` tasks from `command_template`, one per seed in
    /// `seed_base..seed_base + num_runs`.
    pub fn create_parameter_set(
        &self,
        params: Vec<f64>,
        command_template: &str,
        num_runs: usize,
        seed_base: u64,
    ) -> Result<ParameterSet, EngineError> {
        if num_runs == 0 {
            return Err(EngineError::NoRuns);
        }
        let commands = (0..num_runs as u64)
            .map(|k| crate::types::render_command(command_template, &params, seed_base + k))
            .collect::<Result<Vec<_>, _>>()?;
        let mut runs = Vec::with_capacity(num_runs);
        for (k, command) in commands.into_iter().enumerate() {
            let task = self.create_task_with_input(command, params.clone())?;
            runs.push(Run {
                seed: seed_base + k as u64,
                task,
            });
        }
        let id = {
            let mut inner = self.inner.borrow_mut();
            inner.next_parameter_set += 1;
            inner.next_parameter_set - 1
        };
        Ok(ParameterSet { id, params, runs })
    }

    /// Element-wise mean of the runs' results.
    pub fn average_results(&self, ps: &ParameterSet) -> Result<Vec<f64>, EngineError> {
        let inner = self.inner.borrow();
        average_run_results(ps, |id| inner.table.get(id).cloned())
    }

    fn run_ready(&self) {
        loop {
            let job = self.ready.lock().jobs.pop_front();
            let Some(job) = job else { break };
            match job {
                Job::Callback => self.run_callback(),
                Job::Activity(id) => self.poll_activity(id),
            }
        }
    }

    fn enter_user_code(&self) {
        let mut inner = self.inner.borrow_mut();
        if inner.in_user_code {
            inner.reentrancy_violations += 1;
            error!("engine re-entered user code");
        }
        inner.in_user_code = true;
    }

    fn leave_user_code(&self) {
        self.inner.borrow_mut().in_user_code = false;
    }

    fn run_callback(&self) {
        let (task, cb, record) = {
            let mut inner = self.inner.borrow_mut();
            let Some((task, cb)) = inner.ready_callbacks.pop_front() else {
                return;
            };
            let record = inner.table.get(task).cloned().expect("callback task exists");
            inner.trace(TraceEvent::Callback(task));
            inner.callbacks_run += 1;
            (task, cb, record)
        };
        debug_assert_eq!(task, record.id());
        self.enter_user_code();
        cb(&record);
        self.leave_user_code();
    }

    fn poll_activity(&self, id: usize) {
        self.ready.lock().scheduled.remove(&id);
        let fut = {
            let mut inner = self.inner.borrow_mut();
            let fut = inner.activities.get_mut(id).and_then(Option::take);
            if fut.is_some() {
                inner.trace(TraceEvent::Resumed(id));
            }
            fut
        };
        let Some(mut fut) = fut else { return };
        let waker = Waker::from(Arc::new(ActivityWaker {
            id,
            ready: self.ready.clone(),
        }));
        let mut cx = Context::from_waker(&waker);
        self.enter_user_code();
        let poll = fut.as_mut().poll(&mut cx);
        self.leave_user_code();
        let mut inner = self.inner.borrow_mut();
        match poll {
            Poll::Pending => inner.activities[id] = Some(fut),
            Poll::Ready(result) => {
                inner.trace(TraceEvent::ActivityDone(id));
                if let Err(e) = result {
                    if id == 0 {
                        inner.program_error = Some(format!("{e:#}"));
                    } else {
                        inner.activity_errors.push(format!("activity {id}: {e:#}"));
                    }
                }
            }
        }
    }

    fn complete(&self, events: Vec<SchedulerEvent>) {
        let mut woken = Vec::new();
        {
            let mut inner = self.inner.borrow_mut();
            for ev in events {
                let Some(id) = inner.table.apply(ev) else { continue };
                if let Some(cbs) = inner.callbacks.remove(&id) {
                    let mut ready = self.ready.lock();
                    for cb in cbs {
                        inner.ready_callbacks.push_back((id, cb));
                        ready.jobs.push_back(Job::Callback);
                    }
                }
                if let Some(ws) = inner.waiters.remove(&id) {
                    woken.extend(ws);
                }
            }
        }
        for w in woken {
            w.wake();
        }
    }

    fn pending_activities(&self) -> Vec<usize> {
        self.inner
            .borrow()
            .activities
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.as_ref().map(|_| i))
            .collect()
    }

    fn has_ready(&self) -> bool {
        !self.ready.lock().jobs.is_empty()
    }
}

/// Future returned by [`Server::await_all_tasks`].
pub struct AwaitTasks {
    server: Server,
    tasks: Vec<TaskId>,
}

impl Future for AwaitTasks {
    type Output = Result<Vec<TaskRecord>, EngineError>;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        let this = self.get_mut();
        let mut inner = this.server.inner.borrow_mut();
        let mut pending = None;
        for &id in &this.tasks {
            let rec = match inner.table.get(id) {
                Some(r) => r,
                None => return Poll::Ready(Err(EngineError::UnknownTask(id))),
            };
            if !rec.state.is_terminal() {
                pending = Some(id);
                break;
            }
        }
        match pending {
            None => Poll::Ready(Ok(this
                .tasks
                .iter()
                .map(|id| inner.table.get(*id).cloned().expect("checked above"))
                .collect())),
            Some(id) if inner.draining => Poll::Ready(Err(EngineError::Deadlock(id))),
            Some(id) => {
                inner.waiters.entry(id).or_default().push(cx.waker().clone());
                Poll::Pending
            }
        }
    }
}

/// Engine configuration and entry point.
#[derive(Debug, Clone)]
pub struct Engine {
    trace: bool,
    poll_interval: Duration,
}

impl Default for Engine {
    fn default() -> Self {
        Self {
            trace: false,
            poll_interval: Duration::from_millis(2),
        }
    }
}

impl Engine {
    pub fn new() -> Self {
        Self::default()
    }

    /// How often the loop checks for outside wake-ups while a [`Hold`] is
    /// active.
    pub fn poll_interval(mut self, interval: Duration) -> Self {
        self.poll_interval = interval;
        self
    }

    /// Record creations, callback invocations and activity resumptions in
    /// [`ExitReport::trace`].
    pub fn trace(mut self, on: bool) -> Self {
        self.trace = on;
        self
    }

    /// Runs `program` inside the event loop and keeps the loop going until
    /// every task is complete and every callback and activity has run. Then
    /// shuts the backend down.
    pub fn run<F, Fut>(&self, backend: &mut dyn Backend, program: F) -> ExitReport
    where
        F: FnOnce(Server) -> Fut,
        Fut: Future<Output = anyhow::Result<()>> + 'static,
    {
        let started = Instant::now();
        let server = Server::new(self.trace);
        server.inner.borrow_mut().now = backend.now();
        server.spawn(program(server.clone()));
        let mut scheduler_error = None;

        loop {
            server.run_ready();
            let specs = server.inner.borrow_mut().table.take_outbox();
            if !specs.is_empty() {
                if let Err(e) = backend.submit(specs) {
                    scheduler_error = Some(e.to_string());
                    break;
                }
            }
            if server.has_ready() {
                continue;
            }
            let held = server.held();
            if server.tasks_in_flight() == 0 && held {
                server.ready.wait(self.poll_interval);
                continue;
            }
            if server.tasks_in_flight() == 0 {
                let stuck = server.pending_activities();
                let draining = server.inner.borrow().draining;
                if stuck.is_empty() || draining {
                    if !stuck.is_empty() {
                        warn!("{} activities never completed", stuck.len());
                        let mut inner = server.inner.borrow_mut();
                        for id in stuck {
                            inner
                                .activity_errors
                                .push(format!("activity {id}: never completed"));
                        }
                    }
                    break;
                }
                server.inner.borrow_mut().draining = true;
                let mut ready = server.ready.lock();
                for id in stuck {
                    ready.push_activity(id);
                }
                continue;
            }
            let polled_at = Instant::now();
            match backend.wait(held.then_some(self.poll_interval)) {
                Ok(events) if events.is_empty() => {
                    // A virtual-time backend returns at once; pace the poll
                    // in real time so outside wake-ups get a chance to land.
                    let spent = polled_at.elapsed();
                    if spent < self.poll_interval {
                        server.ready.wait(self.poll_interval - spent);
                    }
                }
                Ok(events) => {
                    server.inner.borrow_mut().now = backend.now();
                    server.complete(events);
                }
                Err(e) => {
                    scheduler_error = Some(e.to_string());
                    break;
                }
            }
        }

        server.inner.borrow_mut().table.close();
        if let Err(e) = backend.shutdown() {
            scheduler_error.get_or_insert(e.to_string());
        }
        let end_time = backend.now();
        // Drop user closures (which hold Server clones) before unwrapping.
        {
            let mut inner = server.inner.borrow_mut();
            inner.callbacks.clear();
            inner.ready_callbacks.clear();
            inner.waiters.clear();
            inner.activities.clear();
        }
        let mut inner = server.inner.borrow_mut();
        let table = std::mem::take(&mut inner.table);
        ExitReport {
            created: table.len(),
            finished: table.finished(),
            failed: table.failed(),
            wall_time: started.elapsed(),
            end_time,
            program_error: inner.program_error.take(),
            activity_errors: std::mem::take(&mut inner.activity_errors),
            abnormal: scheduler_error.is_some(),
            scheduler_error,
            callbacks_run: inner.callbacks_run,
            reentrancy_violations: inner.reentrancy_violations,
            trace: inner.trace.take().unwrap_or_default(),
            records: table.into_records(),
        }
    }
}

/// Runs `program` with default engine options.
pub fn server_start<F, Fut>(backend: &mut dyn Backend, program: F) -> ExitReport
where
    F: FnOnce(Server) -> Fut,
    Fut: Future<Output = anyhow::Result<()>> + 'static,
{
    Engine::new().run(backend, program)
}
