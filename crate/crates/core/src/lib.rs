//! Task farming for parameter sweeps and simulation-based optimization.
//!
//! A *search engine* decides which simulator runs to perform; a tree-shaped
//! *scheduler* (one producer, a layer of buffers, many consumers) executes
//! them as external processes and streams results back.

pub mod bench;
pub mod cli;
pub mod demo;
pub mod engine;
pub mod moea;
pub mod protocol;
pub mod scheduler;
pub mod types;

pub use engine::{server_start, Backend, Engine, ExitReport, Server};
pub use types::{TaskId, TaskRecord, TaskSpec, TaskState, WorkerId};
