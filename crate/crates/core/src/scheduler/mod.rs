//! Producer → buffer → consumer task distribution.
//!
//! The role logic ([`Producer`], [`Buffer`]) is written as plain state
//! machines that consume messages and emit messages. Two drivers run them:
//! [`threaded`] puts every role on its own thread behind a [`transport`]
//! and executes real processes, [`sim`] replays the same state machines in
//! virtual time for large deterministic runs.

pub mod buffer;
pub mod executor;
pub mod producer;
pub mod sim;
pub mod tcp;
pub mod threaded;
pub mod transport;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{TaskId, TaskRecord, TaskSpec, WorkerId};

pub use buffer::Buffer;
pub use executor::{execute_task, parse_results, ExecutionOutcome, ExecutorError};
pub use producer::Producer;
pub use sim::{VirtualExecutor, VirtualRun, VirtualScheduler};
pub use threaded::{start_topology, SchedulerConfig, SchedulerHandle};
pub use tcp::transport_tcp;
pub use transport::{transport_inprocess, Peer, TransportHandle};

pub const DEFAULT_FANOUT: usize = 384;

/// Shape of the worker tree: one producer, `ceil(C / F)` buffers and `C`
/// consumers spread over the buffers as evenly as possible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    num_consumers: usize,
    consumers_per_buffer: usize,
    loads: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("topology needs at least one consumer")]
    NoConsumers,
    #[error("consumers per buffer must be positive")]
    ZeroFanout,
}

/// Role of a [`WorkerId`] within a topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Producer,
    Buffer,
    Consumer,
}

impl Topology {
    pub fn new(num_consumers: usize, consumers_per_buffer: usize) -> Result<Self, TopologyError> {
        if num_consumers == 0 {
            return Err(TopologyError::NoConsumers);
        }
        if consumers_per_buffer == 0 {
            return Err(TopologyError::ZeroFanout);
        }
        let buffers = num_consumers.div_ceil(consumers_per_buffer);
        let base = num_consumers / buffers;
        let extra = num_consumers % buffers;
        let loads = (0..buffers)
            .map(|b| base + usize::from(b < extra))
            .collect();
        Ok(Self {
            num_consumers,
            consumers_per_buffer,
            loads,
        })
    }

    pub fn with_default_fanout(num_consumers: usize) -> Result<Self, TopologyError> {
        Self::new(num_consumers, DEFAULT_FANOUT)
    }

    pub fn num_consumers(&self) -> usize {
        self.num_consumers
    }

    pub fn consumers_per_buffer(&self) -> usize {
        self.consumers_per_buffer
    }

    pub fn num_buffers(&self) -> usize {
        self.loads.len()
    }

    /// Number of consumers attached to each buffer, in buffer order.
    pub fn buffer_loads(&self) -> &[usize] {
        &self.loads
    }

    /// Total number of scheduler processes: producer, buffers and consumers.
    pub fn num_processes(&self) -> usize {
        1 + self.num_buffers() + self.num_consumers
    }

    pub fn buffers(&self) -> impl Iterator<Item = WorkerId> + '_ {
        (1..=self.num_buffers()).map(|b| WorkerId(b as u32))
    }

    pub fn consumers(&self) -> impl Iterator<Item = WorkerId> + '_ {
        let first = 1 + self.num_buffers();
        (first..first + self.num_consumers).map(|c| WorkerId(c as u32))
    }

    pub fn role(&self, id: WorkerId) -> Option<Role> {
        let i = id.0 as usize;
        if i == 0 {
            Some(Role::Producer)
        } else if i <= self.num_buffers() {
            Some(Role::Buffer)
        } else if i <= self.num_buffers() + self.num_consumers {
            Some(Role::Consumer)
        } else {
            None
        }
    }

    pub fn is_buffer(&self, id: WorkerId) -> bool {
        self.role(id) == Some(Role::Buffer)
    }

    /// Consumers owned by `buffer` (contiguous block).
    pub fn consumers_of(&self, buffer: WorkerId) -> Vec<WorkerId> {
        if !self.is_buffer(buffer) {
            return Vec::new();
        }
        let b = buffer.0 as usize - 1;
        let offset: usize = self.loads[..b].iter().sum();
        let first = 1 + self.num_buffers() + offset;
        (first..first + self.loads[b])
            .map(|c| WorkerId(c as u32))
            .collect()
    }

    /// Buffer that owns `consumer`.
    pub fn buffer_of(&self, consumer: WorkerId) -> Option<WorkerId> {
        if self.role(consumer) != Some(Role::Consumer) {
            return None;
        }
        let mut idx = consumer.0 as usize - 1 - self.num_buffers();
        for (b, load) in self.loads.iter().enumerate() {
            if idx < *load {
                return Some(WorkerId(b as u32 + 1));
            }
            idx -= load;
        }
        None
    }
}

/// Why a buffer sent its accumulated results upward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlushReason {
    SizeThreshold,
    TimeThreshold,
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBatch {
    pub records: Vec<TaskRecord>,
    pub flush_reason: FlushReason,
}

/// Everything that travels between the engine, the producer, the buffers and
/// the consumers. On TCP each message is one frame holding a JSON object whose
/// `"type"` field names the variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Message {
    /// Engine → producer, producer → buffer.
    EnqueueTasks { tasks: Vec<TaskSpec> },
    /// Buffer → producer.
    RequestTasks { buffer: WorkerId, capacity: usize },
    /// Buffer → consumer.
    Dispatch { task: TaskSpec },
    /// Consumer → buffer → producer → engine.
    TaskStarted {
        id: TaskId,
        worker: WorkerId,
        start_at: f64,
    },
    /// Consumer → buffer.
    TaskDone { record: TaskRecord },
    /// Buffer → producer → engine.
    ResultBatch { batch: ResultBatch },
    /// Shutdown, travelling downward.
    NoMoreTasks,
    /// First frame on every TCP connection; names the connecting worker.
    Hello { worker: WorkerId },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::EnqueueTasks { .. } => "EnqueueTasks",
            Message::RequestTasks { .. } => "RequestTasks",
            Message::Dispatch { .. } => "Dispatch",
            Message::TaskStarted { .. } => "TaskStarted",
            Message::TaskDone { .. } => "TaskDone",
            Message::ResultBatch { .. } => "ResultBatch",
            Message::NoMoreTasks => "NoMoreTasks",
            Message::Hello { .. } => "Hello",
        }
    }
}

/// Result batching thresholds for buffers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchConfig {
    pub max_batch: usize,
    pub max_delay: Duration,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            max_batch: 64,
            max_delay: Duration::from_millis(100),
        }
    }
}

/// Buffer tuning: batching plus the refill watermark, expressed as a
/// multiple of the buffer's consumer count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BufferConfig {
    pub batching: BatchConfig,
    pub watermark_factor: usize,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self {
            batching: BatchConfig::default(),
            watermark_factor: 2,
        }
    }
}

/// What the engine sees of the scheduler.
#[derive(Debug, Clone, PartialEq)]
pub enum SchedulerEvent {
    Started {
        id: TaskId,
        worker: WorkerId,
        at: f64,
    },
    Done(TaskRecord),
}

impl SchedulerEvent {
    /// Unpacks an engine-bound message from the producer.
    pub fn from_message(msg: Message) -> Vec<SchedulerEvent> {
        match msg {
            Message::TaskStarted {
                id,
                worker,
                start_at,
            } => vec![SchedulerEvent::Started {
                id,
                worker,
                at: start_at,
            }],
            Message::TaskDone { record } => vec![SchedulerEvent::Done(record)],
            Message::ResultBatch { batch } => {
                batch.records.into_iter().map(SchedulerEvent::Done).collect()
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("transport: {0}")]
    Transport(#[from] transport::TransportError),
    #[error("scheduler has shut down")]
    Closed,
    #[error("failed to start role thread: {0}")]
    Spawn(#[source] std::io::Error),
    #[error("topology: {0}")]
    Topology(#[from] TopologyError),
    #[error("a scheduler role panicked")]
    RolePanicked,
}

/// Counters collected while the scheduler ran.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Diagnostics {
    pub dropped_messages: u64,
    pub requeued_tasks: u64,
    pub synthesized_failures: u64,
    pub batches_flushed: u64,
}

impl Diagnostics {
    pub fn merge(&mut self, other: &Diagnostics) {
        self.dropped_messages += other.dropped_messages;
        self.requeued_tasks += other.requeued_tasks;
        self.synthesized_failures += other.synthesized_failures;
        self.batches_flushed += other.batches_flushed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Balanced assignment oracle: hand consumers out one at a time to the
    /// least-loaded buffer.
    fn greedy_loads(c: usize, f: usize) -> Vec<usize> {
        let b = c.div_ceil(f);
        let mut loads = vec![0; b];
        for _ in 0..c {
            let i = (0..b).min_by_key(|&i| (loads[i], i)).unwrap();
            loads[i] += 1;
        }
        loads
    }

    #[test]
    fn buffer_counts() {
        let t = Topology::new(4, 384).unwrap();
        assert_eq!((t.num_buffers(), t.num_consumers()), (1, 4));
        assert_eq!(Topology::new(768, 384).unwrap().num_buffers(), 2);
        let t = Topology::new(769, 384).unwrap();
        assert_eq!(t.buffer_loads(), &[257, 256, 256]);
        assert_eq!(t.buffer_loads(), greedy_loads(769, 384).as_slice());
    }

    #[test]
    fn loads_match_greedy_oracle() {
        for c in 1..200 {
            for f in [1, 2, 3, 7, 16, 384] {
                let t = Topology::new(c, f).unwrap();
                let mut loads = t.buffer_loads().to_vec();
                let mut oracle = greedy_loads(c, f);
                loads.sort();
                oracle.sort();
                assert_eq!(loads, oracle, "c={c} f={f}");
                assert!(t.buffer_loads().iter().all(|&l| l <= f));
            }
        }
    }

    #[test]
    fn every_consumer_has_one_buffer() {
        let t = Topology::new(37, 5).unwrap();
        let mut seen = Vec::new();
        for b in t.buffers() {
            for c in t.consumers_of(b) {
                assert_eq!(t.buffer_of(c), Some(b));
                seen.push(c);
            }
        }
        let all: Vec<_> = t.consumers().collect();
        assert_eq!(seen, all);
        assert_eq!(t.role(WorkerId(0)), Some(Role::Producer));
        assert_eq!(t.role(WorkerId(1 + 8 + 37)), None);
    }

    #[test]
    fn invalid_topologies() {
        assert_eq!(Topology::new(0, 4), Err(TopologyError::NoConsumers));
        assert_eq!(Topology::new(4, 0), Err(TopologyError::ZeroFanout));
    }
}
