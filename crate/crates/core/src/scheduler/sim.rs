//! Discrete-event simulation of the whole worker tree in virtual time.
//!
//! The producer and buffer state machines are the same ones the threaded
//! scheduler uses; only message delivery, timers and task execution are
//! simulated. Every message takes `latency` virtual seconds, and messages
//! sent at the same instant arrive in send order.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet, VecDeque};
use std::time::Duration;

use log::debug;

use super::transport::Peer;
use super::{
    Buffer, BufferConfig, Diagnostics, Message, Producer, SchedulerError, SchedulerEvent,
    Topology,
};
use crate::engine::Backend;
use crate::types::{TaskId, TaskRecord, TaskSpec, WorkerId};

/// Outcome of one simulated execution.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualRun {
    pub duration: f64,
    pub rc: i32,
    pub results: Vec<f64>,
}

impl VirtualRun {
    pub fn ok(duration: f64) -> Self {
        Self {
            duration,
            rc: 0,
            results: Vec::new(),
        }
    }
}

/// Decides how long a task takes and what it returns, without running it.
pub trait VirtualExecutor {
    fn run(&mut self, spec: &TaskSpec) -> VirtualRun;
}

impl<F: FnMut(&TaskSpec) -> VirtualRun> VirtualExecutor for F {
    fn run(&mut self, spec: &TaskSpec) -> VirtualRun {
        self(spec)
    }
}

/// Treats `sleep X` as taking X seconds; any other command takes no time.
/// Always succeeds.
#[derive(Debug, Clone, Copy, Default)]
pub struct SleepExecutor;

impl VirtualExecutor for SleepExecutor {
    fn run(&mut self, spec: &TaskSpec) -> VirtualRun {
        VirtualRun::ok(sleep_duration(&spec.command).unwrap_or(0.0))
    }
}

/// Parses the duration out of a command starting with `sleep <seconds>`.
pub fn sleep_duration(command: &str) -> Option<f64> {
    let mut words = command.split_whitespace();
    if words.next()? != "sleep" {
        return None;
    }
    words
        .next()?
        .trim_end_matches(';')
        .parse::<f64>()
        .ok()
        .filter(|d| d.is_finite() && *d >= 0.0)
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub buffer: BufferConfig,
    /// One-way message latency in seconds.
    pub latency: f64,
    /// Fixed cost each consumer adds to every task.
    pub overhead: f64,
    /// Consumers to kill and the virtual time at which they die.
    pub kills: Vec<(WorkerId, f64)>,
    /// Record every (sender, receiver) pair.
    pub tap: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            buffer: BufferConfig::default(),
            latency: 1e-4,
            overhead: 0.0,
            kills: Vec::new(),
            tap: false,
        }
    }
}

#[derive(Debug)]
enum EventKind {
    Deliver { from: Peer, to: Peer, msg: Message },
    Finish { consumer: WorkerId, task: TaskId },
    Timer { buffer: WorkerId },
    Kill { consumer: WorkerId },
    Lost { buffer: WorkerId, consumer: WorkerId },
}

#[derive(Debug)]
struct Event {
    at: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed: BinaryHeap is a max-heap and we want the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .at
            .total_cmp(&self.at)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Default)]
struct VirtualConsumer {
    dead: bool,
    released: bool,
    current: Option<(TaskSpec, f64, VirtualRun)>,
    pending: VecDeque<TaskSpec>,
    busy: Vec<(f64, f64)>,
}

/// Virtual-time scheduler. Implements [`Backend`].
pub struct VirtualScheduler {
    topology: Topology,
    config: SimConfig,
    executor: Box<dyn VirtualExecutor>,
    now: f64,
    seq: u64,
    events: BinaryHeap<Event>,
    producer: Producer,
    buffers: Vec<Buffer>,
    timers: Vec<Option<f64>>,
    consumers: Vec<VirtualConsumer>,
    inbox: Vec<SchedulerEvent>,
    executed: Vec<TaskId>,
    contacts: HashSet<(Peer, Peer)>,
    queue_trace: Vec<(f64, usize)>,
    messages: u64,
    closed: bool,
}

impl VirtualScheduler {
    pub fn new(
        topology: Topology,
        config: SimConfig,
        executor: impl VirtualExecutor + 'static,
    ) -> Self {
        let buffers: Vec<Buffer> = topology
            .buffers()
            .map(|b| Buffer::new(b, topology.consumers_of(b), config.buffer))
            .collect();
        let mut sim = Self {
            producer: Producer::new(topology.clone()),
            timers: vec![None; buffers.len()],
            consumers: (0..topology.num_consumers())
                .map(|_| VirtualConsumer::default())
                .collect(),
            buffers,
            topology,
            executor: Box::new(executor),
            now: 0.0,
            seq: 0,
            events: BinaryHeap::new(),
            inbox: Vec::new(),
            executed: Vec::new(),
            contacts: HashSet::new(),
            queue_trace: vec![(0.0, 0)],
            messages: 0,
            closed: false,
            config,
        };
        for (c, at) in sim.config.kills.clone() {
            sim.push(at, EventKind::Kill { consumer: c });
        }
        for i in 0..sim.buffers.len() {
            let mut out = Vec::new();
            sim.buffers[i].start(&mut out);
            let id = sim.buffers[i].id();
            sim.route(Peer::Worker(id), out);
        }
        sim
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// Task ids in the order consumers started executing them, including
    /// executions lost to a consumer death.
    pub fn executed(&self) -> &[TaskId] {
        &self.executed
    }

    /// Every distinct (sender, receiver) pair seen. Empty unless `tap` is set.
    pub fn contacts(&self) -> &HashSet<(Peer, Peer)> {
        &self.contacts
    }

    /// Producer queue length after each change, as (time, length).
    pub fn producer_queue_trace(&self) -> &[(f64, usize)] {
        &self.queue_trace
    }

    /// Busy intervals of each consumer, indexed by consumer position.
    pub fn busy_intervals(&self) -> Vec<&[(f64, f64)]> {
        self.consumers.iter().map(|c| c.busy.as_slice()).collect()
    }

    pub fn messages_sent(&self) -> u64 {
        self.messages
    }

    pub fn latency(&self) -> f64 {
        self.config.latency
    }

    pub fn batch_delay(&self) -> f64 {
        self.config.buffer.batching.max_delay.as_secs_f64()
    }

    pub fn diagnostics(&self) -> Diagnostics {
        let mut d = self.producer.diagnostics().clone();
        for b in &self.buffers {
            d.merge(b.diagnostics());
        }
        d
    }

    /// True once every buffer has drained and released its consumers.
    pub fn is_finished(&self) -> bool {
        self.buffers.iter().all(Buffer::is_finished)
    }

    fn push(&mut self, at: f64, kind: EventKind) {
        self.seq += 1;
        self.events.push(Event {
            at,
            seq: self.seq,
            kind,
        });
    }

    fn send(&mut self, from: Peer, to: Peer, msg: Message) {
        self.messages += 1;
        if self.config.tap {
            self.contacts.insert((from, to));
        }
        let at = self.now + self.config.latency;
        self.push(at, EventKind::Deliver { from, to, msg });
    }

    fn route(&mut self, from: Peer, out: Vec<(Peer, Message)>) {
        for (to, msg) in out {
            self.send(from, to, msg);
        }
    }

    fn consumer_index(&self, id: WorkerId) -> usize {
        id.0 as usize - 1 - self.topology.num_buffers()
    }

    fn buffer_index(&self, id: WorkerId) -> usize {
        id.0 as usize - 1
    }

    fn arm_timer(&mut self, b: usize) {
        let deadline = self.buffers[b].deadline();
        if let Some(at) = deadline.filter(|_| deadline != self.timers[b]) {
            self.timers[b] = deadline;
            let buffer = self.buffers[b].id();
            self.push(at, EventKind::Timer { buffer });
        }
    }

    fn step(&mut self) -> bool {
        let Some(ev) = self.events.pop() else {
            return false;
        };
        debug_assert!(ev.at >= self.now);
        self.now = ev.at;
        match ev.kind {
            EventKind::Deliver { from, to, msg } => self.deliver(from, to, msg),
            EventKind::Finish { consumer, task } => self.finish(consumer, task),
            EventKind::Timer { buffer } => {
                let b = self.buffer_index(buffer);
                self.timers[b] = None;
                let mut out = Vec::new();
                self.buffers[b].poll(self.now, &mut out);
                self.route(Peer::Worker(buffer), out);
                self.arm_timer(b);
            }
            EventKind::Kill { consumer } => {
                let i = self.consumer_index(consumer);
                let c = &mut self.consumers[i];
                if !c.dead {
                    debug!("virtual consumer {consumer} killed at {}", self.now);
                    c.dead = true;
                    if let Some((_, start, _)) = c.current.take() {
                        c.busy.push((start, self.now));
                    }
                    let buffer = self.topology.buffer_of(consumer).expect("consumer has a buffer");
                    let at = self.now + self.config.latency;
                    self.push(at, EventKind::Lost { buffer, consumer });
                }
            }
            EventKind::Lost { buffer, consumer } => {
                let b = self.buffer_index(buffer);
                let mut out = Vec::new();
                self.buffers[b].consumer_lost(self.now, consumer, &mut out);
                self.route(Peer::Worker(buffer), out);
                self.arm_timer(b);
            }
        }
        true
    }

    fn deliver(&mut self, from: Peer, to: Peer, msg: Message) {
        match to {
            Peer::Engine => self.inbox.extend(SchedulerEvent::from_message(msg)),
            Peer::Worker(WorkerId::PRODUCER) => {
                let mut out = Vec::new();
                self.producer.handle(from, msg, &mut out);
                self.route(Peer::Worker(WorkerId::PRODUCER), out);
                let len = self.producer.queue_len();
                if self.queue_trace.last().map(|e| e.1) != Some(len) {
                    self.queue_trace.push((self.now, len));
                }
            }
            Peer::Worker(w) if self.topology.is_buffer(w) => {
                let b = self.buffer_index(w);
                let mut out = Vec::new();
                self.buffers[b].handle(self.now, from, msg, &mut out);
                self.route(to, out);
                self.arm_timer(b);
            }
            Peer::Worker(w) => {
                let i = self.consumer_index(w);
                if self.consumers[i].dead {
                    return;
                }
                match msg {
                    Message::Dispatch { task } => {
                        self.consumers[i].pending.push_back(task);
                        self.start_next(w);
                    }
                    Message::NoMoreTasks => self.consumers[i].released = true,
                    other => debug!("virtual consumer {w} ignored {}", other.kind()),
                }
            }
        }
    }

    fn start_next(&mut self, consumer: WorkerId) {
        let i = self.consumer_index(consumer);
        if self.consumers[i].current.is_some() {
            return;
        }
        let Some(spec) = self.consumers[i].pending.pop_front() else {
            return;
        };
        let run = self.executor.run(&spec);
        let end = self.now + self.config.overhead + run.duration.max(0.0);
        let id = spec.id;
        self.executed.push(id);
        self.consumers[i].current = Some((spec, self.now, run));
        let buffer = Peer::Worker(self.topology.buffer_of(consumer).expect("consumer has a buffer"));
        self.send(
            Peer::Worker(consumer),
            buffer,
            Message::TaskStarted {
                id,
                worker: consumer,
                start_at: self.now,
            },
        );
        self.push(end, EventKind::Finish { consumer, task: id });
    }

    fn finish(&mut self, consumer: WorkerId, task: TaskId) {
        let i = self.consumer_index(consumer);
        let c = &mut self.consumers[i];
        if c.dead || c.current.as_ref().map(|cur| cur.0.id) != Some(task) {
            return;
        }
        let (spec, start, run) = c.current.take().expect("checked");
        c.busy.push((start, self.now));
        let mut record = TaskRecord::completed(spec, run.rc, run.results, start, self.now, consumer);
        if run.rc != 0 {
            record.warning = None;
        }
        let buffer = Peer::Worker(self.topology.buffer_of(consumer).expect("consumer has a buffer"));
        self.send(Peer::Worker(consumer), buffer, Message::TaskDone { record });
        self.start_next(consumer);
    }

    /// Runs the simulation until the event queue is empty.
    pub fn run_to_completion(&mut self) {
        while self.step() {}
    }
}

impl Backend for VirtualScheduler {
    fn now(&self) -> f64 {
        self.now
    }

    fn submit(&mut self, tasks: Vec<TaskSpec>) -> Result<(), SchedulerError> {
        if self.closed {
            return Err(SchedulerError::Closed);
        }
        self.send(
            Peer::Engine,
            Peer::Worker(WorkerId::PRODUCER),
            Message::EnqueueTasks { tasks },
        );
        Ok(())
    }

    /// A timeout bounds real waiting, and the simulation never waits: it runs
    /// until it has something to report. Only when no events remain at all
    /// does the clock jump forward by the timeout.
    fn wait(&mut self, timeout: Option<Duration>) -> Result<Vec<SchedulerEvent>, SchedulerError> {
        while self.inbox.is_empty() {
            if !self.step() {
                match timeout {
                    None => return Err(SchedulerError::Closed),
                    Some(t) => {
                        self.now += t.as_secs_f64();
                        break;
                    }
                }
            }
        }
        Ok(std::mem::take(&mut self.inbox))
    }

    fn shutdown(&mut self) -> Result<(), SchedulerError> {
        if self.closed {
            return Ok(());
        }
        self.closed = true;
        self.send(Peer::Engine, Peer::Worker(WorkerId::PRODUCER), Message::NoMoreTasks);
        self.run_to_completion();
        Ok(())
    }

    fn topology(&self) -> Option<&Topology> {
        Some(&self.topology)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(i: u64, d: f64) -> TaskSpec {
        TaskSpec::new(TaskId(i), format!("sleep {d}")).unwrap()
    }

    fn collect_done(sim: &mut VirtualScheduler, n: usize) -> Vec<TaskRecord> {
        let mut done = Vec::new();
        while done.len() < n {
            for ev in sim.wait(None).unwrap() {
                if let SchedulerEvent::Done(r) = ev {
                    done.push(r);
                }
            }
        }
        done
    }

    #[test]
    fn sleep_parsing() {
        assert_eq!(sleep_duration("sleep 0.25"), Some(0.25));
        assert_eq!(sleep_duration("sleep 2; echo x"), Some(2.0));
        assert_eq!(sleep_duration("echo sleep 2"), None);
        assert_eq!(sleep_duration("sleep -1"), None);
    }

    #[test]
    fn single_consumer_runs_sequentially() {
        let topo = Topology::new(1, 384).unwrap();
        let mut sim = VirtualScheduler::new(topo, SimConfig::default(), SleepExecutor);
        sim.submit((0..5).map(|i| spec(i, 1.0)).collect()).unwrap();
        let mut done = collect_done(&mut sim, 5);
        done.sort_by(|a, b| a.start_at.unwrap().total_cmp(&b.start_at.unwrap()));
        for w in done.windows(2) {
            assert!(w[0].finish_at.unwrap() <= w[1].start_at.unwrap());
        }
        sim.shutdown().unwrap();
        assert!(sim.is_finished());
    }

    #[test]
    fn kill_requeues_in_flight_task() {
        let topo = Topology::new(2, 384).unwrap();
        let config = SimConfig {
            kills: vec![(WorkerId(2), 0.5)],
            ..SimConfig::default()
        };
        let mut sim = VirtualScheduler::new(topo, config, SleepExecutor);
        sim.submit((0..6).map(|i| spec(i, 1.0)).collect()).unwrap();
        let done = collect_done(&mut sim, 6);
        let mut ids: Vec<u64> = done.iter().map(|r| r.id().0).collect();
        ids.sort();
        assert_eq!(ids, (0..6).collect::<Vec<_>>());
        assert!(done.iter().all(|r| r.rc == Some(0)));
        assert_eq!(sim.executed().len(), 7);
        assert_eq!(sim.diagnostics().requeued_tasks, 1);
    }

    #[test]
    fn all_consumers_dead_fails_remaining_tasks() {
        let topo = Topology::new(1, 384).unwrap();
        let config = SimConfig {
            kills: vec![(WorkerId(2), 0.5)],
            ..SimConfig::default()
        };
        let mut sim = VirtualScheduler::new(topo, config, SleepExecutor);
        sim.submit((0..4).map(|i| spec(i, 1.0)).collect()).unwrap();
        let done = collect_done(&mut sim, 4);
        assert!(done.iter().all(|r| r.rc == Some(-1)));
    }

    #[test]
    fn timeout_advances_virtual_clock() {
        let topo = Topology::new(1, 384).unwrap();
        let mut sim = VirtualScheduler::new(topo, SimConfig::default(), SleepExecutor);
        let t0 = sim.now();
        assert!(sim.wait(Some(Duration::from_secs(3))).unwrap().is_empty());
        assert!(sim.now() >= t0 + 3.0);
    }
}
