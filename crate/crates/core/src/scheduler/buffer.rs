//! Middle layer of the worker tree. Each buffer pulls tasks from the producer
//! to keep a local queue above its watermark, feeds its consumers one task at
//! a time and batches their results before sending them upward.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

use log::{debug, warn};

use super::transport::Peer;
use super::{BufferConfig, Diagnostics, FlushReason, Message, ResultBatch};
use crate::types::{TaskRecord, TaskSpec, TaskState, WorkerId, RC_SPAWN_FAILURE};

#[derive(Debug)]
struct InFlight {
    spec: TaskSpec,
    started_at: Option<f64>,
}

#[derive(Debug)]
pub struct Buffer {
    id: WorkerId,
    consumers: BTreeSet<WorkerId>,
    alive: BTreeSet<WorkerId>,
    idle: VecDeque<WorkerId>,
    queue: VecDeque<TaskSpec>,
    requested: usize,
    low_watermark: usize,
    in_flight: HashMap<WorkerId, InFlight>,
    retried: HashSet<crate::types::TaskId>,
    batch: Vec<TaskRecord>,
    batch_opened_at: Option<f64>,
    config: BufferConfig,
    draining: bool,
    finished: bool,
    diagnostics: Diagnostics,
}

impl Buffer {
    pub fn new(id: WorkerId, consumers: Vec<WorkerId>, config: BufferConfig) -> Self {
        let low_watermark = (config.watermark_factor * consumers.len()).max(1);
        Self {
            id,
            alive: consumers.iter().copied().collect(),
            idle: consumers.iter().copied().collect(),
            consumers: consumers.into_iter().collect(),
            queue: VecDeque::new(),
            requested: 0,
            low_watermark,
            in_flight: HashMap::new(),
            retried: HashSet::new(),
            batch: Vec::new(),
            batch_opened_at: None,
            config,
            draining: false,
            finished: false,
            diagnostics: Diagnostics::default(),
        }
    }

    pub fn id(&self) -> WorkerId {
        self.id
    }

    pub fn low_watermark(&self) -> usize {
        self.low_watermark
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn idle_consumers(&self) -> usize {
        self.idle.len()
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    /// Issues the initial task request. Call once when the loop starts.
    pub fn start(&mut self, out: &mut Vec<(Peer, Message)>) {
        self.refill(out);
    }

    /// Earliest time at which [`Buffer::poll`] has work to do.
    pub fn deadline(&self) -> Option<f64> {
        self.batch_opened_at
            .map(|t| t + self.config.batching.max_delay.as_secs_f64())
    }

    /// Time-triggered flush.
    pub fn poll(&mut self, now: f64, out: &mut Vec<(Peer, Message)>) {
        if let Some(deadline) = self.deadline() {
            if now >= deadline {
                self.flush(FlushReason::TimeThreshold, out);
            }
        }
    }

    pub fn handle(&mut self, now: f64, from: Peer, msg: Message, out: &mut Vec<(Peer, Message)>) {
        match (from, msg) {
            (Peer::Worker(WorkerId::PRODUCER), Message::EnqueueTasks { tasks }) => {
                self.requested = self.requested.saturating_sub(tasks.len());
                if self.alive.is_empty() {
                    for spec in tasks {
                        self.fail_unstarted(spec, now, "no live consumers");
                    }
                } else {
                    self.queue.extend(tasks);
                }
            }
            (Peer::Worker(WorkerId::PRODUCER), Message::NoMoreTasks) => {
                self.draining = true;
            }
            (Peer::Worker(c), msg) if self.alive.contains(&c) => match msg {
                Message::TaskStarted {
                    id,
                    worker,
                    start_at,
                } => {
                    if let Some(f) = self.in_flight.get_mut(&c) {
                        f.started_at = Some(start_at);
                    }
                    out.push((
                        Peer::Worker(WorkerId::PRODUCER),
                        Message::TaskStarted {
                            id,
                            worker,
                            start_at,
                        },
                    ));
                }
                Message::TaskDone { record } => {
                    if self.in_flight.remove(&c).is_none() {
                        warn!("buffer {}: unexpected TaskDone from {c}", self.id);
                    }
                    self.idle.push_back(c);
                    self.push_result(record, now, out);
                }
                other => self.drop_message(from, &other),
            },
            (from, other) => self.drop_message(from, &other),
        }
        self.step(now, out);
    }

    /// A consumer's link closed. Its in-flight task is retried once locally;
    /// a second loss of the same task is reported as a failure.
    pub fn consumer_lost(&mut self, now: f64, consumer: WorkerId, out: &mut Vec<(Peer, Message)>) {
        if !self.alive.remove(&consumer) {
            return;
        }
        debug!("buffer {}: consumer {consumer} lost", self.id);
        self.idle.retain(|c| *c != consumer);
        if let Some(f) = self.in_flight.remove(&consumer) {
            if self.retried.insert(f.spec.id) {
                self.diagnostics.requeued_tasks += 1;
                self.queue.push_front(f.spec);
            } else {
                let start = f.started_at.unwrap_or(now);
                let mut record =
                    TaskRecord::completed(f.spec, RC_SPAWN_FAILURE, Vec::new(), start, now, consumer);
                record.warning = Some("consumer lost twice while running this task".into());
                self.diagnostics.synthesized_failures += 1;
                self.push_result(record, now, out);
            }
        }
        if self.alive.is_empty() {
            let stranded: Vec<TaskSpec> = self.queue.drain(..).collect();
            for spec in stranded {
                self.fail_unstarted(spec, now, "no live consumers");
            }
        }
        self.step(now, out);
    }

    fn fail_unstarted(&mut self, spec: TaskSpec, now: f64, why: &str) {
        let mut record = TaskRecord::completed(spec, RC_SPAWN_FAILURE, Vec::new(), now, now, self.id);
        record.state = TaskState::Failed;
        record.warning = Some(why.to_string());
        self.diagnostics.synthesized_failures += 1;
        if self.batch.is_empty() {
            self.batch_opened_at = Some(now);
        }
        self.batch.push(record);
    }

    fn push_result(&mut self, record: TaskRecord, now: f64, out: &mut Vec<(Peer, Message)>) {
        if self.batch.is_empty() {
            self.batch_opened_at = Some(now);
        }
        self.batch.push(record);
        if self.batch.len() >= self.config.batching.max_batch {
            self.flush(FlushReason::SizeThreshold, out);
        }
    }

    fn drop_message(&mut self, from: Peer, msg: &Message) {
        warn!("buffer {} dropped {} from {:?}", self.id, msg.kind(), from);
        self.diagnostics.dropped_messages += 1;
    }

    fn step(&mut self, now: f64, out: &mut Vec<(Peer, Message)>) {
        self.dispatch_idle(out);
        self.refill(out);
        self.check_finished(now, out);
    }

    fn dispatch_idle(&mut self, out: &mut Vec<(Peer, Message)>) {
        while !self.queue.is_empty() {
            let Some(consumer) = self.idle.pop_front() else {
                break;
            };
            let spec = self.queue.pop_front().expect("queue checked non-empty");
            self.in_flight.insert(
                consumer,
                InFlight {
                    spec: spec.clone(),
                    started_at: None,
                },
            );
            out.push((Peer::Worker(consumer), Message::Dispatch { task: spec }));
        }
    }

    // A buffer whose consumers are all gone keeps pulling: the tasks it
    // receives are reported as failed instead of stranding in the producer.
    fn refill(&mut self, out: &mut Vec<(Peer, Message)>) {
        if self.draining {
            return;
        }
        let have = self.queue.len() + self.requested;
        if have < self.low_watermark {
            let capacity = self.low_watermark - have;
            self.requested += capacity;
            out.push((
                Peer::Worker(WorkerId::PRODUCER),
                Message::RequestTasks {
                    buffer: self.id,
                    capacity,
                },
            ));
        }
    }

    fn check_finished(&mut self, _now: f64, out: &mut Vec<(Peer, Message)>) {
        if self.finished || !self.draining || !self.queue.is_empty() || !self.in_flight.is_empty() {
            return;
        }
        self.flush(FlushReason::Shutdown, out);
        for c in &self.alive {
            out.push((Peer::Worker(*c), Message::NoMoreTasks));
        }
        self.finished = true;
    }

    fn flush(&mut self, reason: FlushReason, out: &mut Vec<(Peer, Message)>) {
        self.batch_opened_at = None;
        if self.batch.is_empty() {
            return;
        }
        let records = std::mem::take(&mut self.batch);
        self.diagnostics.batches_flushed += 1;
        out.push((
            Peer::Worker(WorkerId::PRODUCER),
            Message::ResultBatch {
                batch: ResultBatch {
                    records,
                    flush_reason: reason,
                },
            },
        ));
    }

    /// All consumers this buffer was configured with, dead or alive.
    pub fn consumers(&self) -> impl Iterator<Item = &WorkerId> {
        self.consumers.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::BatchConfig;
    use crate::types::TaskId;
    use std::time::Duration;

    const P: Peer = Peer::Worker(WorkerId::PRODUCER);

    fn spec(i: u64) -> TaskSpec {
        TaskSpec::new(TaskId(i), "true").unwrap()
    }

    fn buffer(n: u32, max_batch: usize) -> Buffer {
        let consumers = (10..10 + n).map(WorkerId).collect();
        Buffer::new(
            WorkerId(1),
            consumers,
            BufferConfig {
                batching: BatchConfig {
                    max_batch,
                    max_delay: Duration::from_millis(100),
                },
                watermark_factor: 2,
            },
        )
    }

    fn done(b: &mut Buffer, now: f64, c: u32, id: u64, out: &mut Vec<(Peer, Message)>) {
        let rec = TaskRecord::completed(spec(id), 0, vec![], now - 1.0, now, WorkerId(c));
        b.handle(now, Peer::Worker(WorkerId(c)), Message::TaskDone { record: rec }, out);
    }

    fn batches(out: &[(Peer, Message)]) -> Vec<(usize, FlushReason)> {
        out.iter()
            .filter_map(|(_, m)| match m {
                Message::ResultBatch { batch } => Some((batch.records.len(), batch.flush_reason)),
                _ => None,
            })
            .collect()
    }

    fn dispatched(out: &[(Peer, Message)]) -> Vec<(WorkerId, u64)> {
        out.iter()
            .filter_map(|(to, m)| match (to, m) {
                (Peer::Worker(w), Message::Dispatch { task }) => Some((*w, task.id.0)),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn initial_request_fills_to_watermark() {
        let mut b = buffer(4, 8);
        let mut out = Vec::new();
        b.start(&mut out);
        assert_eq!(b.low_watermark(), 8);
        assert_eq!(
            out,
            vec![(
                P,
                Message::RequestTasks {
                    buffer: WorkerId(1),
                    capacity: 8
                }
            )]
        );
    }

    #[test]
    fn requests_only_below_watermark() {
        let mut b = buffer(4, 8);
        let mut out = Vec::new();
        b.start(&mut out);
        out.clear();
        b.handle(0.0, P, Message::EnqueueTasks { tasks: (0..8).map(spec).collect() }, &mut out);
        // four dispatched, four left queued: 4 < 8 so ask for 4 more
        assert_eq!(dispatched(&out).len(), 4);
        assert_eq!(b.queue_len(), 4);
        let requests: Vec<_> = out
            .iter()
            .filter(|(_, m)| matches!(m, Message::RequestTasks { capacity: 4, .. }))
            .collect();
        assert_eq!(requests.len(), 1);
        out.clear();
        b.handle(0.0, P, Message::EnqueueTasks { tasks: (8..12).map(spec).collect() }, &mut out);
        assert_eq!(b.queue_len(), 8);
        assert!(out.is_empty(), "at watermark, nothing to request: {out:?}");
    }

    #[test]
    fn size_trigger() {
        let mut b = buffer(8, 8);
        let mut out = Vec::new();
        b.handle(0.0, P, Message::EnqueueTasks { tasks: (0..8).map(spec).collect() }, &mut out);
        out.clear();
        for (i, c) in (10..18).enumerate() {
            done(&mut b, 1.0, c, i as u64, &mut out);
        }
        assert_eq!(batches(&out), vec![(8, FlushReason::SizeThreshold)]);
    }

    #[test]
    fn time_trigger() {
        let mut b = buffer(8, 8);
        let mut out = Vec::new();
        b.handle(0.0, P, Message::EnqueueTasks { tasks: (0..3).map(spec).collect() }, &mut out);
        out.clear();
        for (i, c) in (10..13).enumerate() {
            done(&mut b, 1.0, c, i as u64, &mut out);
        }
        assert!(batches(&out).is_empty());
        assert!((b.deadline().unwrap() - 1.1).abs() < 1e-12);
        b.poll(1.05, &mut out);
        assert!(batches(&out).is_empty());
        b.poll(1.1, &mut out);
        assert_eq!(batches(&out), vec![(3, FlushReason::TimeThreshold)]);
        assert_eq!(b.deadline(), None);
    }

    #[test]
    fn lost_consumer_requeues_once_then_fails() {
        let mut b = buffer(2, 64);
        let mut out = Vec::new();
        b.handle(0.0, P, Message::EnqueueTasks { tasks: vec![spec(7)] }, &mut out);
        assert_eq!(dispatched(&out), vec![(WorkerId(10), 7)]);
        out.clear();
        b.consumer_lost(1.0, WorkerId(10), &mut out);
        // re-queued and handed to the survivor
        assert_eq!(dispatched(&out), vec![(WorkerId(11), 7)]);
        out.clear();
        b.handle(
            1.5,
            Peer::Worker(WorkerId(11)),
            Message::TaskStarted {
                id: TaskId(7),
                worker: WorkerId(11),
                start_at: 1.5,
            },
            &mut out,
        );
        b.consumer_lost(2.0, WorkerId(11), &mut out);
        b.poll(10.0, &mut out);
        let failures: Vec<_> = out
            .iter()
            .filter_map(|(_, m)| match m {
                Message::ResultBatch { batch } => Some(batch.records.clone()),
                _ => None,
            })
            .flatten()
            .collect();
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].state, TaskState::Failed);
        assert_eq!(failures[0].start_at, Some(1.5));
        assert_eq!(b.diagnostics().requeued_tasks, 1);
    }

    #[test]
    fn shutdown_flushes_and_releases_consumers() {
        let mut b = buffer(2, 64);
        let mut out = Vec::new();
        b.handle(0.0, P, Message::EnqueueTasks { tasks: vec![spec(0)] }, &mut out);
        b.handle(0.0, P, Message::NoMoreTasks, &mut out);
        assert!(!b.is_finished());
        out.clear();
        done(&mut b, 2.0, 10, 0, &mut out);
        assert!(b.is_finished());
        assert_eq!(batches(&out), vec![(1, FlushReason::Shutdown)]);
        let stops = out
            .iter()
            .filter(|(_, m)| matches!(m, Message::NoMoreTasks))
            .count();
        assert_eq!(stops, 2);
    }

    #[test]
    fn started_is_forwarded_upward() {
        let mut b = buffer(1, 64);
        let mut out = Vec::new();
        b.handle(0.0, P, Message::EnqueueTasks { tasks: vec![spec(3)] }, &mut out);
        out.clear();
        let started = Message::TaskStarted {
            id: TaskId(3),
            worker: WorkerId(10),
            start_at: 0.25,
        };
        b.handle(0.25, Peer::Worker(WorkerId(10)), started.clone(), &mut out);
        assert_eq!(out, vec![(P, started)]);
    }
}
