//! Role-addressed message delivery.
//!
//! Each role owns one [`Endpoint`]: an inbox plus routes to its direct
//! neighbours in the tree. The producer can reach buffers, a buffer can reach
//! the producer and its own consumers, a consumer can reach its buffer.
//! Anything else is [`TransportError::NoRoute`].

use std::collections::HashMap;
use std::time::Instant;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use thiserror::Error;

use super::{Message, Topology};
use crate::types::WorkerId;

/// Either the engine (which sits next to the producer) or a worker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Peer {
    Engine,
    Worker(WorkerId),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Inbound {
    Message { from: Peer, msg: Message },
    /// The link to this peer is gone.
    Lost(Peer),
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("no route from {from} to {to}")]
    NoRoute { from: WorkerId, to: WorkerId },
    #[error("link to {0} is closed")]
    Closed(WorkerId),
    #[error("inbox closed")]
    InboxClosed,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("frame: {0}")]
    Frame(#[from] super::tcp::FrameError),
    #[error("handshake: {0}")]
    Handshake(String),
}

pub trait Endpoint: Send {
    fn me(&self) -> WorkerId;
    fn send(&self, to: WorkerId, msg: Message) -> Result<(), TransportError>;
    /// Blocks until a message arrives or `deadline` passes (`Ok(None)`).
    fn recv(&self, deadline: Option<Instant>) -> Result<Option<Inbound>, TransportError>;
}

/// One observed send, for tests that audit who talks to whom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapRecord {
    pub from: WorkerId,
    pub to: WorkerId,
    pub kind: &'static str,
}

/// A fully wired set of endpoints, ready for [`super::start_topology`].
pub struct TransportHandle {
    pub(crate) topology: Topology,
    pub(crate) producer: Box<dyn Endpoint>,
    pub(crate) engine_link: Sender<Inbound>,
    pub(crate) buffers: Vec<Box<dyn Endpoint>>,
    pub(crate) consumers: Vec<Box<dyn Endpoint>>,
}

impl TransportHandle {
    pub fn topology(&self) -> &Topology {
        &self.topology
    }
}

/// Channel-backed endpoint used for the in-process transport.
pub(crate) struct ChannelEndpoint {
    me: WorkerId,
    inbox: Receiver<Inbound>,
    routes: HashMap<WorkerId, Sender<Inbound>>,
    tap: Option<Sender<TapRecord>>,
}

impl Endpoint for ChannelEndpoint {
    fn me(&self) -> WorkerId {
        self.me
    }

    fn send(&self, to: WorkerId, msg: Message) -> Result<(), TransportError> {
        let route = self.routes.get(&to).ok_or(TransportError::NoRoute {
            from: self.me,
            to,
        })?;
        if let Some(tap) = &self.tap {
            let _ = tap.send(TapRecord {
                from: self.me,
                to,
                kind: msg.kind(),
            });
        }
        route
            .send(Inbound::Message {
                from: Peer::Worker(self.me),
                msg,
            })
            .map_err(|_| TransportError::Closed(to))
    }

    fn recv(&self, deadline: Option<Instant>) -> Result<Option<Inbound>, TransportError> {
        match deadline {
            None => self
                .inbox
                .recv()
                .map(Some)
                .map_err(|_| TransportError::InboxClosed),
            Some(d) => match self.inbox.recv_deadline(d) {
                Ok(m) => Ok(Some(m)),
                Err(RecvTimeoutError::Timeout) => Ok(None),
                Err(RecvTimeoutError::Disconnected) => Err(TransportError::InboxClosed),
            },
        }
    }
}

impl Drop for ChannelEndpoint {
    fn drop(&mut self) {
        for route in self.routes.values() {
            let _ = route.send(Inbound::Lost(Peer::Worker(self.me)));
        }
    }
}

pub fn transport_inprocess(topology: &Topology) -> TransportHandle {
    build_inprocess(topology, None)
}

/// In-process transport that reports every worker-to-worker send on the
/// returned channel.
pub fn transport_inprocess_tapped(topology: &Topology) -> (TransportHandle, Receiver<TapRecord>) {
    let (tx, rx) = unbounded();
    (build_inprocess(topology, Some(tx)), rx)
}

fn build_inprocess(topology: &Topology, tap: Option<Sender<TapRecord>>) -> TransportHandle {
    let mut senders = HashMap::new();
    let mut receivers = HashMap::new();
    let all = std::iter::once(WorkerId::PRODUCER)
        .chain(topology.buffers())
        .chain(topology.consumers());
    for w in all {
        let (tx, rx) = unbounded();
        senders.insert(w, tx);
        receivers.insert(w, rx);
    }
    let endpoint = |me: WorkerId, peers: Vec<WorkerId>, receivers: &mut HashMap<_, _>| {
        Box::new(ChannelEndpoint {
            me,
            inbox: receivers.remove(&me).expect("inbox exists"),
            routes: peers.into_iter().map(|p| (p, senders[&p].clone())).collect(),
            tap: tap.clone(),
        }) as Box<dyn Endpoint>
    };
    let engine_link = senders[&WorkerId::PRODUCER].clone();
    let producer = endpoint(
        WorkerId::PRODUCER,
        topology.buffers().collect(),
        &mut receivers,
    );
    let buffers = topology
        .buffers()
        .map(|b| {
            let mut peers = vec![WorkerId::PRODUCER];
            peers.extend(topology.consumers_of(b));
            endpoint(b, peers, &mut receivers)
        })
        .collect();
    let consumers = topology
        .consumers()
        .map(|c| {
            let parent = topology.buffer_of(c).expect("consumer has a buffer");
            endpoint(c, vec![parent], &mut receivers)
        })
        .collect();
    TransportHandle {
        topology: topology.clone(),
        producer,
        engine_link,
        buffers,
        consumers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{TaskId, TaskSpec};

    #[test]
    fn routes_follow_the_tree() {
        let topo = Topology::new(3, 2).unwrap();
        let t = transport_inprocess(&topo);
        let consumer = &t.consumers[0];
        assert!(matches!(
            consumer.send(WorkerId::PRODUCER, Message::NoMoreTasks),
            Err(TransportError::NoRoute { .. })
        ));
        let b1 = WorkerId(1);
        consumer
            .send(
                b1,
                Message::TaskStarted {
                    id: TaskId(0),
                    worker: consumer.me(),
                    start_at: 0.0,
                },
            )
            .unwrap();
        let got = t.buffers[0].recv(None).unwrap().unwrap();
        assert!(matches!(got, Inbound::Message { from: Peer::Worker(w), .. } if w == consumer.me()));
        assert!(t.producer.send(consumer.me(), Message::NoMoreTasks).is_err());
    }

    #[test]
    fn round_trip_preserves_message() {
        let topo = Topology::new(1, 1).unwrap();
        let t = transport_inprocess(&topo);
        let msg = Message::EnqueueTasks {
            tasks: vec![TaskSpec::with_input(TaskId(4), "sim {0}", vec![0.5]).unwrap()],
        };
        t.producer.send(WorkerId(1), msg.clone()).unwrap();
        assert_eq!(
            t.buffers[0].recv(None).unwrap(),
            Some(Inbound::Message {
                from: Peer::Worker(WorkerId::PRODUCER),
                msg
            })
        );
    }

    #[test]
    fn dropping_an_endpoint_reports_loss() {
        let topo = Topology::new(2, 2).unwrap();
        let mut t = transport_inprocess(&topo);
        let c = t.consumers.remove(0);
        let id = c.me();
        drop(c);
        assert_eq!(
            t.buffers[0].recv(None).unwrap(),
            Some(Inbound::Lost(Peer::Worker(id)))
        );
    }

    #[test]
    fn recv_times_out() {
        let topo = Topology::new(1, 1).unwrap();
        let t = transport_inprocess(&topo);
        let deadline = Instant::now() + std::time::Duration::from_millis(5);
        assert_eq!(t.consumers[0].recv(Some(deadline)).unwrap(), None);
    }
}
