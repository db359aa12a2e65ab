use std::path::Path;

use caravan::protocol::{bridge_run, Direction, EngineEvent};
use caravan::scheduler::sim::{SimConfig, SleepExecutor};
use caravan::scheduler::{
    start_topology, transport_inprocess, SchedulerConfig, Topology, VirtualScheduler,
};

fn script(dir: &Path, body: &str) -> String {
    let path = dir.join("engine.py");
    std::fs::write(&path, body).unwrap();
    format!("python3 -u {}", path.display())
}

fn sim(c: usize) -> VirtualScheduler {
    VirtualScheduler::new(Topology::new(c, 384).unwrap(), SimConfig::default(), SleepExecutor)
}

fn events_to_child(t: &[caravan::protocol::TranscriptLine]) -> Vec<EngineEvent> {
    t.iter()
        .filter(|l| l.direction == Direction::ToChild)
        .map(|l| serde_json::from_str(&l.line).unwrap())
        .collect()
}

const PRELUDE: &str = r#"
import json, sys
def send(**kw):
    sys.stdout.write(json.dumps(kw) + "\n"); sys.stdout.flush()
def recv():
    return json.loads(sys.stdin.readline())
"#;

#[test]
fn three_tasks_then_finish() {
    let dir = tempfile::tempdir().unwrap();
    let cmd = script(
        dir.path(),
        &format!(
            "{PRELUDE}
for i in range(3):
    send(cmd='create_task', command='sleep %d' % (i + 1))
send(cmd='flush')
got = [recv() for _ in range(6)]
assert sorted(g['event'] for g in got) == ['task_created'] * 3 + ['task_done'] * 3, got
assert all(g['rc'] == 0 for g in got if g['event'] == 'task_done')
send(cmd='finish')
ev = recv()
assert ev == {{'event': 'exit', 'finished': 3, 'failed': 0}}, ev
"
        ),
    );
    let mut backend = sim(2);
    let report = bridge_run(&cmd, &mut backend).unwrap();
    assert_eq!(report.child_status, Some(0));
    assert!(report.exit.is_success(), "{:?}", report.exit);
    let events = events_to_child(&report.transcript);
    assert_eq!(events.len(), 7);
    assert_eq!(events[6], EngineEvent::Exit { finished: 3, failed: 0 });
    for id in 0..3u64 {
        let created = events.iter().position(|e| *e == EngineEvent::TaskCreated { id });
        let done = events
            .iter()
            .position(|e| matches!(e, EngineEvent::TaskDone { id: d, .. } if *d == id));
        assert!(created.unwrap() < done.unwrap());
    }
}

#[test]
fn malformed_line_gets_one_error_and_session_continues() {
    let dir = tempfile::tempdir().unwrap();
    let cmd = script(
        dir.path(),
        &format!(
            "{PRELUDE}
sys.stdout.write('{{oops\\n'); sys.stdout.flush()
assert recv()['event'] == 'protocol_error'
send(cmd='create_task', command='sleep 1')
assert recv()['event'] == 'task_created'
assert recv()['event'] == 'task_done'
send(cmd='finish')
assert recv()['event'] == 'exit'
"
        ),
    );
    let mut backend = sim(1);
    let report = bridge_run(&cmd, &mut backend).unwrap();
    assert_eq!(report.child_status, Some(0));
    let errors = events_to_child(&report.transcript)
        .into_iter()
        .filter(|e| matches!(e, EngineEvent::ProtocolError { .. }))
        .count();
    assert_eq!(errors, 1);
    assert_eq!(report.exit.finished, 1);
}

#[test]
fn reactive_child_runs_tasks_sequentially() {
    let dir = tempfile::tempdir().unwrap();
    let cmd = script(
        dir.path(),
        &format!(
            "{PRELUDE}
for i in range(10):
    send(cmd='create_task', command='sleep 1')
    assert recv()['event'] == 'task_created'
    assert recv()['event'] == 'task_done'
send(cmd='finish')
recv()
"
        ),
    );
    let mut backend = sim(4);
    let report = bridge_run(&cmd, &mut backend).unwrap();
    assert_eq!(report.exit.finished, 10);
    let recs = &report.exit.records;
    for w in recs.windows(2) {
        assert!(w[1].start_at.unwrap() >= w[0].finish_at.unwrap());
    }
}

#[test]
fn early_exit_is_abnormal_but_drains() {
    let dir = tempfile::tempdir().unwrap();
    let cmd = script(
        dir.path(),
        &format!(
            "{PRELUDE}
import os
assert os.environ['CARAVAN_PROTOCOL_VERSION'] == '1'
for i in range(4):
    send(cmd='create_task', command='sleep 2')
"
        ),
    );
    let mut backend = sim(2);
    let report = bridge_run(&cmd, &mut backend).unwrap();
    assert!(report.exit.abnormal);
    assert_eq!(report.exit.finished, 4);
    assert!(!report.exit.is_success());
}

#[test]
fn completion_order_matches_arrival_on_real_processes() {
    let work = tempfile::tempdir().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cmd = script(
        dir.path(),
        &format!(
            "{PRELUDE}
for d in ['0.3', '0.0', '0.15']:
    send(cmd='create_task', command='sleep %s; echo %s > _results.txt' % (d, d))
for _ in range(3):
    assert recv()['event'] == 'task_created'
got = [recv() for _ in range(3)]
assert [g['results'] for g in got] == [[0.0], [0.15], [0.3]], got
send(cmd='finish')
recv()
"
        ),
    );
    let topo = Topology::new(3, 384).unwrap();
    let mut sched =
        start_topology(SchedulerConfig::new(work.path()), transport_inprocess(&topo)).unwrap();
    let report = bridge_run(&cmd, &mut sched).unwrap();
    assert_eq!(report.child_status, Some(0), "{:?}", report.transcript);
    assert_eq!(report.exit.finished, 3);
}
