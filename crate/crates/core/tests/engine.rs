use std::cell::RefCell;
use std::rc::Rc;

use caravan::engine::{Engine, EngineError, TraceEvent};
use caravan::scheduler::sim::{SimConfig, SleepExecutor, VirtualRun};
use caravan::scheduler::{
    start_topology, transport_inprocess, SchedulerConfig, Topology, VirtualScheduler,
};
use caravan::types::{TaskId, TaskSpec, TaskState};

fn virtual_backend(consumers: usize) -> VirtualScheduler {
    VirtualScheduler::new(
        Topology::new(consumers, 384).unwrap(),
        SimConfig::default(),
        SleepExecutor,
    )
}

#[test]
fn empty_program() {
    let mut sim = virtual_backend(2);
    let report = Engine::new().run(&mut sim, |_| async { Ok(()) });
    assert_eq!((report.created, report.finished, report.failed), (0, 0, 0));
    assert!(report.is_success());
}

#[test]
fn hello_echo_on_real_processes() {
    let dir = tempfile::tempdir().unwrap();
    let topo = Topology::new(4, 384).unwrap();
    let mut sched =
        start_topology(SchedulerConfig::new(dir.path()), transport_inprocess(&topo)).unwrap();
    let report = Engine::new().run(&mut sched, |server| async move {
        for i in 0..10 {
            let id = server.create_task(format!("echo hello caravan {i}"))?;
            assert_eq!(id, TaskId(i));
        }
        Ok(())
    });
    assert_eq!(report.finished, 10);
    assert!(report.is_success(), "{report:?}");
    for rec in &report.records {
        let out = dir.path().join(format!("w{:010}", rec.id().0)).join("_stdout.txt");
        let text = std::fs::read_to_string(out).unwrap();
        assert_eq!(text, format!("hello caravan {}\n", rec.id().0));
    }
}

#[test]
fn callbacks_create_follow_up_tasks() {
    let mut sim = virtual_backend(4);
    let parents: Rc<RefCell<Vec<(TaskId, TaskId)>>> = Rc::default();
    let p = parents.clone();
    let report = Engine::new().run(&mut sim, move |server| async move {
        for i in 0..10 {
            let t = server.create_task(format!("sleep {}", 1 + i % 3))?;
            let s = server.clone();
            let p = p.clone();
            server.add_callback(t, move |rec| {
                assert_eq!(rec.state, TaskState::Finished);
                let child = s.create_task(format!("sleep 1; echo child of {}", rec.id())).unwrap();
                p.borrow_mut().push((rec.id(), child));
            })?;
        }
        Ok(())
    });
    assert_eq!(report.finished, 20);
    let parents = parents.borrow();
    assert_eq!(parents.len(), 10);
    for (parent, child) in parents.iter() {
        let pr = &report.records[parent.0 as usize];
        let cr = &report.records[child.0 as usize];
        assert!(child.0 >= 10);
        assert!(cr.start_at.unwrap() >= pr.finish_at.unwrap());
    }
}

#[test]
fn three_sequential_chains() {
    let mut sim = virtual_backend(8);
    let in_flight_at_boundaries: Rc<RefCell<Vec<usize>>> = Rc::default();
    let chains: Rc<RefCell<Vec<Vec<TaskId>>>> = Rc::default();
    let (b, c) = (in_flight_at_boundaries.clone(), chains.clone());
    let report = Engine::new().trace(true).run(&mut sim, move |server| async move {
        for a in 0..3 {
            let s = server.clone();
            let (b, c) = (b.clone(), c.clone());
            server.spawn(async move {
                let mut mine = Vec::new();
                for _ in 0..5 {
                    let t = s.create_task("sleep 2")?;
                    b.borrow_mut().push(s.tasks_in_flight());
                    mine.push(t);
                    let rec = s.await_task(t).await?;
                    assert_eq!(rec.state, TaskState::Finished);
                }
                c.borrow_mut().push(mine);
                let _ = a;
                Ok(())
            });
        }
        Ok(())
    });
    assert_eq!(report.finished, 15);
    assert!(report.is_success());
    for chain in chains.borrow().iter() {
        assert_eq!(chain.len(), 5);
        for w in chain.windows(2) {
            let prev = &report.records[w[0].0 as usize];
            let next = &report.records[w[1].0 as usize];
            assert!(next.start_at.unwrap() >= prev.finish_at.unwrap());
        }
    }
    // With equal durations the chains stay in lock-step: each step ends with
    // exactly three tasks in flight.
    let b = in_flight_at_boundaries.borrow();
    assert_eq!(b.len(), 15);
    assert!(b.chunks(3).all(|c| c == [1, 2, 3]), "{b:?}");
    // All three activities start before any of their awaits resolve.
    let fourth_creation = report
        .trace
        .iter()
        .enumerate()
        .filter(|(_, e)| matches!(e, TraceEvent::Created(_)))
        .nth(3)
        .unwrap()
        .0;
    for a in 1..=3 {
        let start = report.trace.iter().position(|e| *e == TraceEvent::Resumed(a)).unwrap();
        assert!(start < fourth_creation);
    }
}

#[test]
fn callbacks_run_in_registration_order_and_late_ones_still_fire() {
    let mut sim = virtual_backend(1);
    let log: Rc<RefCell<Vec<&'static str>>> = Rc::default();
    let l = log.clone();
    let report = Engine::new().run(&mut sim, move |server| async move {
        let t = server.create_task("sleep 1")?;
        let (l1, l2) = (l.clone(), l.clone());
        server.add_callback(t, move |_| l1.borrow_mut().push("first"))?;
        server.add_callback(t, move |_| l2.borrow_mut().push("second"))?;
        server.await_task(t).await?;
        let l3 = l.clone();
        server.add_callback(t, move |_| l3.borrow_mut().push("late"))?;
        assert!(matches!(
            server.add_callback(TaskId(99), |_| {}),
            Err(EngineError::UnknownTask(_))
        ));
        Ok(())
    });
    assert!(report.is_success());
    assert_eq!(*log.borrow(), vec!["first", "second", "late"]);
    assert_eq!(report.callbacks_run, 3);
}

#[test]
fn callbacks_see_failed_tasks() {
    let mut sim = VirtualScheduler::new(
        Topology::new(2, 384).unwrap(),
        SimConfig::default(),
        |spec: &TaskSpec| VirtualRun {
            duration: 1.0,
            rc: if spec.command == "false" { 1 } else { 0 },
            results: vec![],
        },
    );
    type Seen = Vec<(TaskState, Option<i32>)>;
    let seen: Rc<RefCell<Seen>> = Rc::default();
    let s2 = seen.clone();
    let report = Engine::new().run(&mut sim, move |server| async move {
        for cmd in ["true", "false"] {
            let t = server.create_task(cmd)?;
            let s = s2.clone();
            server.add_callback(t, move |r| s.borrow_mut().push((r.state, r.rc)))?;
        }
        Ok(())
    });
    assert_eq!((report.finished, report.failed), (1, 1));
    let mut seen = seen.borrow().clone();
    seen.sort_by_key(|s| s.1);
    assert_eq!(seen, vec![(TaskState::Finished, Some(0)), (TaskState::Failed, Some(1))]);
}

#[test]
fn await_all_keeps_argument_order() {
    let mut sim = virtual_backend(4);
    let report = Engine::new().run(&mut sim, |server| async move {
        assert!(server.await_all_tasks(vec![]).await?.is_empty());
        let slow = server.create_task("sleep 5")?;
        let fast = server.create_task("sleep 1")?;
        let recs = server.await_all_tasks(vec![slow, fast]).await?;
        assert_eq!(recs[0].id(), slow);
        assert_eq!(recs[1].id(), fast);
        assert!(recs[1].finish_at < recs[0].finish_at);
        let many: Vec<TaskId> = (0..100)
            .map(|i| server.create_task(format!("sleep {}", i % 7)))
            .collect::<Result<_, _>>()?;
        let recs = server.await_all_tasks(many).await?;
        assert!(recs.iter().all(|r| r.state.is_terminal()));
        Ok(())
    });
    assert!(report.is_success(), "{report:?}");
    assert_eq!(report.finished, 102);
}

#[test]
fn activity_errors_are_isolated() {
    let mut sim = virtual_backend(2);
    let report = Engine::new().run(&mut sim, |server| async move {
        server.spawn(async { anyhow::bail!("boom") });
        let s = server.clone();
        server.spawn(async move {
            let t = s.create_task("sleep 1")?;
            s.await_task(t).await?;
            Ok(())
        });
        Ok(())
    });
    assert_eq!(report.finished, 1);
    assert_eq!(report.activity_errors.len(), 1);
    assert!(report.activity_errors[0].contains("boom"));
    assert!(report.program_error.is_none());
}

#[test]
fn program_error_still_drains_tasks() {
    let mut sim = virtual_backend(2);
    let report = Engine::new().run(&mut sim, |server| async move {
        for _ in 0..4 {
            server.create_task("sleep 1")?;
        }
        anyhow::bail!("user program failed")
    });
    assert_eq!(report.finished, 4);
    assert!(report.program_error.unwrap().contains("user program failed"));
}

#[test]
fn awaiting_a_never_completing_future_is_reported() {
    let mut sim = virtual_backend(1);
    let report = Engine::new().run(&mut sim, |server| async move {
        server.spawn(std::future::pending());
        Ok(())
    });
    assert_eq!(report.activity_errors.len(), 1);
}

#[test]
fn parameter_sets_render_seeds_and_average() {
    let mut sim = VirtualScheduler::new(
        Topology::new(4, 384).unwrap(),
        SimConfig::default(),
        |spec: &TaskSpec| {
            // "sim <x> <seed>" returns [x + seed]
            let w: Vec<f64> = spec.command.split(' ').skip(1).map(|t| t.parse().unwrap()).collect();
            VirtualRun {
                duration: 1.0,
                rc: 0,
                results: vec![w[0] + w[1]],
            }
        },
    );
    let report = Engine::new().run(&mut sim, |server| async move {
        let a = server.create_parameter_set(vec![10.0], "sim {0} {seed}", 5, 0)?;
        let b = server.create_parameter_set(vec![10.0], "sim {0} {seed}", 1, 0)?;
        assert_ne!(a.id, b.id);
        assert_eq!(a.runs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert_eq!(b.runs.len(), 1);
        assert_eq!(server.task(a.runs[3].task).unwrap().spec.command, "sim 10 3");
        assert!(matches!(
            server.create_parameter_set(vec![], "sim", 0, 0),
            Err(EngineError::NoRuns)
        ));
        assert!(matches!(
            server.create_parameter_set(vec![1.0], "sim {3}", 1, 0),
            Err(EngineError::Spec(_))
        ));
        server.await_all_tasks(a.task_ids()).await?;
        server.await_all_tasks(b.task_ids()).await?;
        assert_eq!(server.average_results(&a)?, vec![12.0]);
        assert_eq!(server.average_results(&b)?, vec![10.0]);
        Ok(())
    });
    assert!(report.is_success(), "{report:?}");
}

fn traced_run() -> Vec<TraceEvent> {
    let mut sim = virtual_backend(3);
    let report = Engine::new().trace(true).run(&mut sim, |server| async move {
        for i in 0..6 {
            let t = server.create_task(format!("sleep {}", 1 + i % 4))?;
            let s = server.clone();
            server.add_callback(t, move |rec| {
                if rec.id().0 % 2 == 0 {
                    s.create_task("sleep 1").unwrap();
                }
            })?;
        }
        for _ in 0..2 {
            let s = server.clone();
            server.spawn(async move {
                for _ in 0..3 {
                    let t = s.create_task("sleep 2")?;
                    s.await_task(t).await?;
                }
                Ok(())
            });
        }
        Ok(())
    });
    assert!(report.is_success());
    report.trace
}

#[test]
fn logic_is_deterministic_in_virtual_time() {
    let first = traced_run();
    assert!(first.len() > 20);
    for _ in 0..3 {
        assert_eq!(traced_run(), first);
    }
}

#[test]
fn no_reentrancy_under_stress() {
    let mut sim = virtual_backend(64);
    let report = Engine::new().run(&mut sim, |server| async move {
        for i in 0..5_000u64 {
            let t = server.create_task(format!("sleep {}", (i % 13) as f64 * 0.1))?;
            let s = server.clone();
            server.add_callback(t, move |rec| {
                if rec.id().0 % 2 == 0 {
                    s.create_task("sleep 0.05").unwrap();
                }
            })?;
        }
        for _ in 0..10 {
            let s = server.clone();
            server.spawn(async move {
                for _ in 0..250 {
                    let t = s.create_task("sleep 0.3")?;
                    s.await_task(t).await?;
                }
                Ok(())
            });
        }
        Ok(())
    });
    assert!(report.is_success());
    assert_eq!(report.reentrancy_violations, 0);
    assert_eq!(report.created, 5_000 + 2_500 + 2_500);
    assert_eq!(report.created, report.finished + report.failed);
    assert_eq!(report.records.len(), report.created);
}
