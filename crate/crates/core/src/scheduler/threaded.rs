//! Runs every role on its own OS thread on top of a [`TransportHandle`].

use std::collections::HashSet;
use std::path::PathBuf;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use log::{debug, error, warn};

use super::executor::execute_task;
use super::transport::{Endpoint, Inbound, Peer, TransportHandle};
use super::{
    Buffer, BufferConfig, Diagnostics, Message, Producer, SchedulerError, SchedulerEvent,
    Topology,
};
use crate::engine::Backend;
use crate::types::{Clock, TaskRecord, TaskSpec, WorkerId, RC_SPAWN_FAILURE};

#[derive(Debug, Clone)]
pub struct SchedulerConfig {
    pub buffer: BufferConfig,
    pub work_root: PathBuf,
    /// Fault injection: this consumer exits without reporting once it has
    /// executed the given number of tasks.
    pub kill_consumer: Option<(WorkerId, usize)>,
}

impl SchedulerConfig {
    pub fn new(work_root: impl Into<PathBuf>) -> Self {
        Self {
            buffer: BufferConfig::default(),
            work_root: work_root.into(),
            kill_consumer: None,
        }
    }
}

/// A running topology. Implements [`Backend`] so the engine can drive it.
pub struct SchedulerHandle {
    topology: Topology,
    clock: Clock,
    engine_link: Sender<Inbound>,
    events: Receiver<Message>,
    threads: Vec<JoinHandle<Diagnostics>>,
    diagnostics: Diagnostics,
    closed: bool,
}

pub fn start_topology(
    config: SchedulerConfig,
    transport: TransportHandle,
) -> Result<SchedulerHandle, SchedulerError> {
    let TransportHandle {
        topology,
        producer,
        engine_link,
        buffers,
        consumers,
    } = transport;
    std::fs::create_dir_all(&config.work_root)
        .map_err(|e| SchedulerError::Spawn(std::io::Error::new(e.kind(), format!("work root: {e}"))))?;
    let clock = Clock::new();
    let (to_engine, events) = unbounded();
    let mut threads = Vec::new();

    let spawn = |name: String, f: Box<dyn FnOnce() -> Diagnostics + Send>| {
        thread::Builder::new()
            .name(name)
            .spawn(f)
            .map_err(SchedulerError::Spawn)
    };

    // Consumers first so that nothing waits on a role that failed to start.
    for ep in consumers {
        let root = config.work_root.clone();
        let kill = config.kill_consumer;
        let name = format!("consumer-{}", ep.me());
        threads.push(spawn(name, Box::new(move || consumer_loop(ep, clock, root, kill)))?);
    }
    for ep in buffers {
        let members = topology.consumers_of(ep.me());
        let buffer = Buffer::new(ep.me(), members, config.buffer);
        let name = format!("buffer-{}", ep.me());
        threads.push(spawn(name, Box::new(move || buffer_loop(ep, buffer, clock)))?);
    }
    {
        let producer_state = Producer::new(topology.clone());
        let buffers: HashSet<WorkerId> = topology.buffers().collect();
        threads.push(spawn(
            "producer".into(),
            Box::new(move || producer_loop(producer, producer_state, buffers, to_engine)),
        )?);
    }

    Ok(SchedulerHandle {
        topology,
        clock,
        engine_link,
        events,
        threads,
        diagnostics: Diagnostics::default(),
        closed: false,
    })
}

/// Producer role. Exits once shutdown has been propagated and every buffer
/// link has closed, so late results are still forwarded.
pub fn producer_loop(
    ep: Box<dyn Endpoint>,
    mut producer: Producer,
    mut open_buffers: HashSet<WorkerId>,
    to_engine: Sender<Message>,
) -> Diagnostics {
    let mut out = Vec::new();
    loop {
        match ep.recv(None) {
            Ok(Some(Inbound::Message { from, msg })) => producer.handle(from, msg, &mut out),
            Ok(Some(Inbound::Lost(Peer::Worker(w)))) => {
                if !producer.is_shut_down() {
                    warn!("producer lost buffer {w}");
                }
                open_buffers.remove(&w);
            }
            Ok(_) => {}
            Err(e) => {
                debug!("producer inbox: {e}");
                break;
            }
        }
        for (to, msg) in out.drain(..) {
            match to {
                Peer::Engine => {
                    let _ = to_engine.send(msg);
                }
                Peer::Worker(w) => {
                    if let Err(e) = ep.send(w, msg) {
                        warn!("producer -> {w}: {e}");
                    }
                }
            }
        }
        if producer.is_shut_down() && open_buffers.is_empty() {
            break;
        }
    }
    producer.diagnostics().clone()
}

pub fn buffer_loop(ep: Box<dyn Endpoint>, mut buffer: Buffer, clock: Clock) -> Diagnostics {
    let mut out = Vec::new();
    buffer.start(&mut out);
    loop {
        for (to, msg) in out.drain(..) {
            if let Peer::Worker(w) = to {
                if let Err(e) = ep.send(w, msg) {
                    warn!("buffer {} -> {w}: {e}", buffer.id());
                }
            }
        }
        if buffer.is_finished() {
            break;
        }
        let deadline = buffer.deadline().map(|t| clock.instant_at(t));
        match ep.recv(deadline) {
            Ok(Some(Inbound::Message { from, msg })) => buffer.handle(clock.now(), from, msg, &mut out),
            Ok(Some(Inbound::Lost(Peer::Worker(WorkerId::PRODUCER)))) => {
                error!("buffer {}: producer link lost", buffer.id());
                break;
            }
            Ok(Some(Inbound::Lost(Peer::Worker(c)))) => buffer.consumer_lost(clock.now(), c, &mut out),
            Ok(Some(Inbound::Lost(Peer::Engine))) => {}
            Ok(None) => buffer.poll(clock.now(), &mut out),
            Err(_) => break,
        }
    }
    buffer.diagnostics().clone()
}

/// Consumer role: one task at a time, start and completion reported to the
/// owning buffer.
pub fn consumer_loop(
    ep: Box<dyn Endpoint>,
    clock: Clock,
    work_root: PathBuf,
    kill: Option<(WorkerId, usize)>,
) -> Diagnostics {
    let me = ep.me();
    let mut executed = 0usize;
    loop {
        let (from, msg) = match ep.recv(None) {
            Ok(Some(Inbound::Message {
                from: Peer::Worker(from),
                msg,
            })) => (from, msg),
            Ok(Some(Inbound::Lost(_))) | Err(_) => break,
            Ok(_) => continue,
        };
        match msg {
            Message::Dispatch { task } => {
                let record = run_one(&*ep, from, &task, &clock, &work_root);
                executed += 1;
                if kill == Some((me, executed)) {
                    warn!("consumer {me}: injected death");
                    break;
                }
                let _ = ep.send(from, Message::TaskDone { record });
            }
            Message::NoMoreTasks => break,
            other => warn!("consumer {me} ignored {}", other.kind()),
        }
    }
    Diagnostics::default()
}

fn run_one(
    ep: &dyn Endpoint,
    buffer: WorkerId,
    task: &TaskSpec,
    clock: &Clock,
    work_root: &std::path::Path,
) -> TaskRecord {
    let me = ep.me();
    let start = clock.now();
    let _ = ep.send(
        buffer,
        Message::TaskStarted {
            id: task.id,
            worker: me,
            start_at: start,
        },
    );
    match execute_task(task, work_root) {
        Ok(outcome) => {
            let mut rec =
                TaskRecord::completed(task.clone(), outcome.rc, outcome.results, start, clock.now(), me);
            rec.warning = outcome.warning;
            rec
        }
        Err(e) => {
            let mut rec =
                TaskRecord::completed(task.clone(), RC_SPAWN_FAILURE, Vec::new(), start, clock.now(), me);
            rec.warning = Some(e.to_string());
            rec
        }
    }
}

impl SchedulerHandle {
    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    /// Sends `NoMoreTasks` and waits for every role to exit.
    pub fn shutdown(&mut self) -> Result<(), SchedulerError> {
        if self.closed {
            return Ok(());
        }
        self.closed = true;
        let _ = self.engine_link.send(Inbound::Message {
            from: Peer::Engine,
            msg: Message::NoMoreTasks,
        });
        let mut panicked = false;
        for t in self.threads.drain(..) {
            match t.join() {
                Ok(d) => self.diagnostics.merge(&d),
                Err(_) => panicked = true,
            }
        }
        if panicked {
            Err(SchedulerError::RolePanicked)
        } else {
            Ok(())
        }
    }
}

impl Backend for SchedulerHandle {
    fn now(&self) -> f64 {
        self.clock.now()
    }

    fn submit(&mut self, tasks: Vec<TaskSpec>) -> Result<(), SchedulerError> {
        if self.closed {
            return Err(SchedulerError::Closed);
        }
        self.engine_link
            .send(Inbound::Message {
                from: Peer::Engine,
                msg: Message::EnqueueTasks { tasks },
            })
            .map_err(|_| SchedulerError::Closed)
    }

    fn wait(&mut self, timeout: Option<Duration>) -> Result<Vec<SchedulerEvent>, SchedulerError> {
        let first = match timeout {
            None => self.events.recv().map_err(|_| SchedulerError::Closed)?,
            Some(t) => match self.events.recv_deadline(Instant::now() + t) {
                Ok(m) => m,
                Err(RecvTimeoutError::Timeout) => return Ok(Vec::new()),
                Err(RecvTimeoutError::Disconnected) => return Err(SchedulerError::Closed),
            },
        };
        let mut events = SchedulerEvent::from_message(first);
        while let Ok(m) = self.events.try_recv() {
            events.extend(SchedulerEvent::from_message(m));
        }
        Ok(events)
    }

    fn shutdown(&mut self) -> Result<(), SchedulerError> {
        SchedulerHandle::shutdown(self)
    }

    fn topology(&self) -> Option<&Topology> {
        Some(&self.topology)
    }
}

impl Drop for SchedulerHandle {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}
