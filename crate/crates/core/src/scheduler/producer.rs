//! Root of the worker tree. Holds the global FIFO of pending tasks and hands
//! slices of it to buffers on request. Talks only to the engine and buffers.

use std::collections::VecDeque;

use log::warn;

use super::transport::Peer;
use super::{Diagnostics, Message, Topology};
use crate::types::{TaskSpec, WorkerId};

#[derive(Debug)]
pub struct Producer {
    topology: Topology,
    queue: VecDeque<TaskSpec>,
    /// Unmet buffer demand in arrival order.
    demand: VecDeque<(WorkerId, usize)>,
    draining: bool,
    shutdown_sent: bool,
    diagnostics: Diagnostics,
}

impl Producer {
    pub fn new(topology: Topology) -> Self {
        Self {
            topology,
            queue: VecDeque::new(),
            demand: VecDeque::new(),
            draining: false,
            shutdown_sent: false,
            diagnostics: Diagnostics::default(),
        }
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn pending_demand(&self) -> usize {
        self.demand.iter().map(|(_, k)| k).sum()
    }

    /// True once `NoMoreTasks` has been propagated to every buffer.
    pub fn is_shut_down(&self) -> bool {
        self.shutdown_sent
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    pub fn handle(&mut self, from: Peer, msg: Message, out: &mut Vec<(Peer, Message)>) {
        match (from, msg) {
            (Peer::Engine, Message::EnqueueTasks { tasks }) => {
                self.queue.extend(tasks);
                self.serve(out);
            }
            (Peer::Engine, Message::NoMoreTasks) => {
                self.draining = true;
            }
            (Peer::Worker(w), msg) if self.topology.is_buffer(w) => match msg {
                Message::RequestTasks { buffer, capacity } if buffer == w => {
                    if capacity > 0 {
                        match self.demand.iter_mut().find(|(b, _)| *b == w) {
                            Some(entry) => entry.1 += capacity,
                            None => self.demand.push_back((w, capacity)),
                        }
                    }
                    self.serve(out);
                }
                m @ (Message::TaskStarted { .. }
                | Message::TaskDone { .. }
                | Message::ResultBatch { .. }) => out.push((Peer::Engine, m)),
                other => self.drop_message(from, &other),
            },
            (from, other) => self.drop_message(from, &other),
        }
        self.maybe_shutdown(out);
    }

    fn drop_message(&mut self, from: Peer, msg: &Message) {
        warn!("producer dropped {} from {:?}", msg.kind(), from);
        self.diagnostics.dropped_messages += 1;
    }

    fn serve(&mut self, out: &mut Vec<(Peer, Message)>) {
        while !self.queue.is_empty() {
            let Some((buffer, wanted)) = self.demand.front_mut() else {
                break;
            };
            let n = (*wanted).min(self.queue.len());
            let tasks: Vec<TaskSpec> = self.queue.drain(..n).collect();
            *wanted -= n;
            let buffer = *buffer;
            if *wanted == 0 {
                self.demand.pop_front();
            }
            out.push((Peer::Worker(buffer), Message::EnqueueTasks { tasks }));
        }
    }

    fn maybe_shutdown(&mut self, out: &mut Vec<(Peer, Message)>) {
        if self.draining && self.queue.is_empty() && !self.shutdown_sent {
            self.shutdown_sent = true;
            for b in self.topology.buffers() {
                out.push((Peer::Worker(b), Message::NoMoreTasks));
            }
        }
    }
}
