//! Line protocol that lets an external process act as the search engine.
//!
//! The child writes one JSON command per line on its stdout and reads one
//! JSON event per line on its stdin:
//!
//! ```text
//! child → engine  {"cmd":"create_task","command":"echo hi"}
//! engine → child  {"event":"task_created","id":0}
//! engine → child  {"event":"task_done","id":0,"rc":0,"results":[],"start_at":0.1,"finish_at":0.2,"place":2}
//! child → engine  {"cmd":"finish"}
//! engine → child  {"event":"exit","finished":1,"failed":0}
//! ```

use std::cell::{Cell, RefCell};
use std::future::Future;
use std::io::{BufRead, BufReader, Write};
use std::pin::Pin;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::rc::Rc;
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Waker};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::Context as _;
use crossbeam_channel::{unbounded, Receiver, TryRecvError};
use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::engine::{Backend, Engine, ExitReport, Server};
use crate::types::TaskRecord;

pub const PROTOCOL_VERSION_ENV: &str = "CARAVAN_PROTOCOL_VERSION";
pub const PROTOCOL_VERSION: &str = "1";

/// Child → engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum EngineMessage {
    CreateTask { command: String },
    /// Creations are always dispatched at the end of the current loop turn,
    /// so this is accepted but has nothing left to force.
    Flush,
    Finish,
}

/// Engine → child.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EngineEvent {
    TaskCreated {
        id: u64,
    },
    TaskDone {
        id: u64,
        rc: i32,
        results: Vec<f64>,
        start_at: f64,
        finish_at: f64,
        place: u32,
    },
    Exit {
        finished: usize,
        failed: usize,
    },
    ProtocolError {
        message: String,
    },
}

impl EngineEvent {
    pub fn done(rec: &TaskRecord) -> Self {
        EngineEvent::TaskDone {
            id: rec.id().0,
            rc: rec.rc.unwrap_or(crate::types::RC_SPAWN_FAILURE),
            results: rec.results.clone(),
            start_at: rec.start_at.unwrap_or(0.0),
            finish_at: rec.finish_at.unwrap_or(0.0),
            place: rec.place.map_or(0, |p| p.0),
        }
    }
}

pub fn encode_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("protocol values always serialize")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    FromChild,
    ToChild,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptLine {
    pub direction: Direction,
    pub line: String,
}

#[derive(Debug)]
pub struct BridgeReport {
    pub exit: ExitReport,
    pub transcript: Vec<TranscriptLine>,
    /// Child exit status, if it exited on its own.
    pub child_status: Option<i32>,
}

struct Link {
    stdin: Option<ChildStdin>,
    transcript: Vec<TranscriptLine>,
}

impl Link {
    fn send(&mut self, ev: &EngineEvent) {
        let line = encode_line(ev);
        self.transcript.push(TranscriptLine {
            direction: Direction::ToChild,
            line: line.clone(),
        });
        if let Some(stdin) = &mut self.stdin {
            let r = writeln!(stdin, "{line}").and_then(|_| stdin.flush());
            if let Err(e) = r {
                debug!("child stdin closed: {e}");
                self.stdin = None;
            }
        }
    }
}

/// Next line from the reader thread; `None` at end of stream.
struct NextLine<'a> {
    rx: &'a Receiver<String>,
    waker: &'a Mutex<Option<Waker>>,
}

impl Future for NextLine<'_> {
    type Output = Option<String>;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        match self.rx.try_recv() {
            Ok(line) => return Poll::Ready(Some(line)),
            Err(TryRecvError::Disconnected) => return Poll::Ready(None),
            Err(TryRecvError::Empty) => {}
        }
        *self.waker.lock().unwrap_or_else(|e| e.into_inner()) = Some(cx.waker().clone());
        // A line may have arrived between the first check and storing the waker.
        match self.rx.try_recv() {
            Ok(line) => Poll::Ready(Some(line)),
            Err(TryRecvError::Disconnected) => Poll::Ready(None),
            Err(TryRecvError::Empty) => Poll::Pending,
        }
    }
}

fn spawn_reader(
    stdout: std::process::ChildStdout,
) -> (Receiver<String>, Arc<Mutex<Option<Waker>>>, thread::JoinHandle<()>) {
    let (tx, rx) = unbounded();
    let waker: Arc<Mutex<Option<Waker>>> = Arc::default();
    let w = waker.clone();
    let handle = thread::spawn(move || {
        let wake = || {
            if let Some(w) = w.lock().unwrap_or_else(|e| e.into_inner()).take() {
                w.wake();
            }
        };
        for line in BufReader::new(stdout).lines() {
            match line {
                Ok(line) => {
                    if tx.send(line).is_err() {
                        break;
                    }
                    wake();
                }
                Err(e) => {
                    warn!("reading from engine child: {e}");
                    break;
                }
            }
        }
        drop(tx);
        wake();
    });
    (rx, waker, handle)
}

fn handle_line(server: &Server, link: &Rc<RefCell<Link>>, line: &str) -> bool {
    let msg = match serde_json::from_str::<EngineMessage>(line) {
        Ok(m) => m,
        Err(e) => {
            link.borrow_mut().send(&EngineEvent::ProtocolError {
                message: format!("malformed line: {e}"),
            });
            return false;
        }
    };
    match msg {
        EngineMessage::CreateTask { command } => match server.create_task(command) {
            Ok(id) => {
                link.borrow_mut().send(&EngineEvent::TaskCreated { id: id.0 });
                let l = link.clone();
                server
                    .add_callback(id, move |rec| l.borrow_mut().send(&EngineEvent::done(rec)))
                    .expect("task was just created");
            }
            Err(e) => link.borrow_mut().send(&EngineEvent::ProtocolError {
                message: e.to_string(),
            }),
        },
        EngineMessage::Flush => {}
        EngineMessage::Finish => return true,
    }
    false
}

fn reap(child: &mut Child, grace: Duration) -> Option<i32> {
    let deadline = Instant::now() + grace;
    loop {
        match child.try_wait() {
            Ok(Some(status)) => return status.code(),
            Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(5)),
            _ => {
                warn!("engine child did not exit; killing it");
                let _ = child.kill();
                return child.wait().ok().and_then(|s| s.code());
            }
        }
    }
}

/// Runs `child_command` under `sh -c` as the search engine, serving its
/// requests with `backend` until it sends `finish` (or exits) and every task
/// has completed.
pub fn bridge_run(child_command: &str, backend: &mut dyn Backend) -> anyhow::Result<BridgeReport> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(child_command)
        .env(PROTOCOL_VERSION_ENV, PROTOCOL_VERSION)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .with_context(|| format!("spawning engine child `{child_command}`"))?;
    let stdout = child.stdout.take().expect("stdout is piped");
    let link = Rc::new(RefCell::new(Link {
        stdin: child.stdin.take(),
        transcript: Vec::new(),
    }));
    let (rx, waker, reader) = spawn_reader(stdout);
    let abnormal = Rc::new(Cell::new(false));

    let (l, ab) = (link.clone(), abnormal.clone());
    let mut exit = Engine::new().run(backend, move |server| async move {
        let _hold = server.hold();
        loop {
            let next = NextLine {
                rx: &rx,
                waker: &waker,
            }
            .await;
            let Some(line) = next else {
                warn!("engine child closed its output before finishing");
                ab.set(true);
                break;
            };
            l.borrow_mut().transcript.push(TranscriptLine {
                direction: Direction::FromChild,
                line: line.clone(),
            });
            if line.trim().is_empty() {
                continue;
            }
            if handle_line(&server, &l, &line) {
                break;
            }
        }
        Ok(())
    });
    exit.abnormal |= abnormal.get();
    link.borrow_mut().send(&EngineEvent::Exit {
        finished: exit.finished,
        failed: exit.failed,
    });
    link.borrow_mut().stdin = None;
    let child_status = reap(&mut child, Duration::from_secs(10));
    let _ = reader.join();
    let transcript = std::mem::take(&mut link.borrow_mut().transcript);
    Ok(BridgeReport {
        exit,
        transcript,
        child_status,
    })
}
