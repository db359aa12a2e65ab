//! Load-balancing benchmark: dummy `sleep` tasks with uniform or heavy-tailed
//! durations, scored by the job filling rate
//!
//! ```text
//! r = Σ (t_end − t_begin) / (T · N_p),   T = max t_end − min t_begin
//! ```

use std::cell::Cell;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::engine::{Backend, Engine, ExitReport};
use crate::types::{TaskRecord, TaskState};

pub const TC1_RANGE: (f64, f64) = (20.0, 30.0);
pub const POWER_LAW_RANGE: (f64, f64) = (5.0, 100.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Case {
    /// All tasks up front, durations uniform on [20, 30] s.
    Tc1,
    /// All tasks up front, power-law durations on [5, 100] s.
    Tc2,
    /// A quarter up front; each completion creates one more.
    Tc3,
}

impl std::str::FromStr for Case {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "tc1" => Ok(Case::Tc1),
            "tc2" => Ok(Case::Tc2),
            "tc3" => Ok(Case::Tc3),
            other => Err(format!("unknown case `{other}` (expected tc1, tc2 or tc3)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("refusing to write a report for an empty timeline")]
    EmptyTimeline,
    #[error("benchmark needs a backend with a known topology")]
    NoTopology,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Inverse CDF of the density ∝ t⁻² truncated to [t_min, t_max].
pub fn power_law_inverse(u: f64, t_min: f64, t_max: f64) -> f64 {
    1.0 / (1.0 / t_min - u * (1.0 / t_min - 1.0 / t_max))
}

/// Analytic mean of that truncated power law.
pub fn power_law_mean(t_min: f64, t_max: f64) -> f64 {
    t_min * t_max * (t_max / t_min).ln() / (t_max - t_min)
}

/// Unscaled duration in seconds.
pub fn sample_duration<R: Rng + ?Sized>(case: Case, rng: &mut R) -> f64 {
    match case {
        Case::Tc1 => rng.random_range(TC1_RANGE.0..=TC1_RANGE.1),
        Case::Tc2 | Case::Tc3 => {
            power_law_inverse(rng.random::<f64>(), POWER_LAW_RANGE.0, POWER_LAW_RANGE.1)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub case: Case,
    pub n_total: usize,
    pub time_scale: f64,
    pub seed: u64,
}

impl Workload {
    /// N = 100 tasks per consumer, durations shrunk by 1000.
    pub fn new(case: Case, consumers: usize) -> Self {
        Self {
            case,
            n_total: 100 * consumers,
            time_scale: 0.001,
            seed: 0,
        }
    }

    pub fn initial_batch(&self) -> usize {
        match self.case {
            Case::Tc3 => self.n_total / 4,
            _ => self.n_total,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimelineRow {
    pub task: u64,
    pub worker: u32,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FillingRate {
    pub r_consumers: f64,
    pub r_all: f64,
    pub numerator: f64,
    pub makespan: f64,
}

/// Filling rate of a timeline over `consumers` task-running processes and,
/// for `r_all`, the producer and `buffers` as well.
pub fn filling_rate(timeline: &[TimelineRow], consumers: usize, buffers: usize) -> FillingRate {
    let numerator: f64 = timeline.iter().map(|r| r.end - r.start).sum();
    let first = timeline.iter().map(|r| r.start).fold(f64::INFINITY, f64::min);
    let last = timeline.iter().map(|r| r.end).fold(f64::NEG_INFINITY, f64::max);
    let makespan = if timeline.is_empty() { 0.0 } else { last - first };
    let rate = |n: usize| {
        if makespan > 0.0 {
            numerator / (makespan * n as f64)
        } else {
            0.0
        }
    };
    FillingRate {
        r_consumers: rate(consumers),
        r_all: rate(consumers + buffers + 1),
        numerator,
        makespan,
    }
}

#[derive(Debug, Clone)]
pub struct FillingRateReport {
    pub case: Case,
    pub consumers: usize,
    pub buffers: usize,
    pub rate: FillingRate,
    /// Busy seconds per consumer, in consumer order.
    pub per_worker_busy: Vec<f64>,
    pub timeline: Vec<TimelineRow>,
    /// False if any dummy task failed.
    pub valid: bool,
    pub exit: ExitReport,
}

/// Runs one benchmark case on `backend` and scores it.
pub fn run_benchmark(workload: &Workload, backend: &mut dyn Backend) -> Result<FillingRateReport, BenchError> {
    let topo = backend.topology().ok_or(BenchError::NoTopology)?.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(workload.seed);
    let durations: Vec<f64> = (0..workload.n_total)
        .map(|_| sample_duration(workload.case, &mut rng) * workload.time_scale)
        .collect();
    let durations = Rc::new(durations);
    let initial = workload.initial_batch();
    let exit = Engine::new().run(backend, move |server| async move {
        let created = Rc::new(Cell::new(0usize));
        for _ in 0..initial {
            let i = created.get();
            created.set(i + 1);
            let t = server.create_task(format!("sleep {}", durations[i]))?;
            if initial < durations.len() {
                chain(&server, t, created.clone(), durations.clone());
            }
        }
        Ok(())
    });
    let mut timeline: Vec<TimelineRow> = exit
        .records
        .iter()
        .filter(|r| r.state == TaskState::Finished)
        .filter_map(row)
        .collect();
    timeline.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.task.cmp(&b.task)));
    let rate = filling_rate(&timeline, topo.num_consumers(), topo.num_buffers());
    let first_consumer = 1 + topo.num_buffers() as u32;
    let mut per_worker_busy = vec![0.0; topo.num_consumers()];
    for r in &timeline {
        if let Some(slot) = r.worker.checked_sub(first_consumer) {
            if let Some(b) = per_worker_busy.get_mut(slot as usize) {
                *b += r.end - r.start;
            }
        }
    }
    Ok(FillingRateReport {
        case: workload.case,
        consumers: topo.num_consumers(),
        buffers: topo.num_buffers(),
        valid: exit.failed == 0 && exit.is_success() && exit.created == workload.n_total,
        rate,
        per_worker_busy,
        timeline,
        exit,
    })
}

fn chain(server: &crate::engine::Server, task: crate::types::TaskId, created: Rc<Cell<usize>>, durations: Rc<Vec<f64>>) {
    let s = server.clone();
    server
        .add_callback(task, move |_| {
            let i = created.get();
            if i >= durations.len() {
                return;
            }
            created.set(i + 1);
            if let Ok(next) = s.create_task(format!("sleep {}", durations[i])) {
                chain(&s, next, created.clone(), durations.clone());
            }
        })
        .expect("task was just created");
}

fn row(r: &TaskRecord) -> Option<TimelineRow> {
    Some(TimelineRow {
        task: r.id().0,
        worker: r.place?.0,
        start: r.start_at?,
        end: r.finish_at?,
    })
}

/// Writes `<prefix>_timeline.csv`, `<prefix>_summary.csv` and, if asked,
/// `<prefix>_gantt.svg`. Returns the paths written.
pub fn emit_report(report: &FillingRateReport, prefix: &Path, svg: bool) -> Result<Vec<PathBuf>, BenchError> {
    if report.timeline.is_empty() {
        return Err(BenchError::EmptyTimeline);
    }
    let with_suffix = |s: &str| {
        let mut p = prefix.as_os_str().to_owned();
        p.push(s);
        PathBuf::from(p)
    };
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let timeline_path = with_suffix("_timeline.csv");
    let mut w = csv::Writer::from_path(&timeline_path)?;
    w.write_record(["task", "worker", "start", "end"])?;
    for r in &report.timeline {
        w.write_record([
            r.task.to_string(),
            r.worker.to_string(),
            r.start.to_string(),
            r.end.to_string(),
        ])?;
    }
    w.flush()?;

    let summary_path = with_suffix("_summary.csv");
    let mut w = csv::Writer::from_path(&summary_path)?;
    w.write_record(["r_consumers", "r_all", "N", "C", "B", "T"])?;
    w.write_record([
        report.rate.r_consumers.to_string(),
        report.rate.r_all.to_string(),
        report.timeline.len().to_string(),
        report.consumers.to_string(),
        report.buffers.to_string(),
        report.rate.makespan.to_string(),
    ])?;
    w.flush()?;

    let mut written = vec![timeline_path, summary_path];
    if svg {
        let path = with_suffix("_gantt.svg");
        std::fs::write(&path, gantt_svg(report))?;
        written.push(path);
    }
    Ok(written)
}

fn gantt_svg(report: &FillingRateReport) -> String {
    let first_consumer = 1 + report.buffers as u32;
    let t0 = report.timeline.iter().map(|r| r.start).fold(f64::INFINITY, f64::min);
    let span = report.rate.makespan.max(f64::MIN_POSITIVE);
    let (width, lane) = (1000.0, 6.0);
    let height = lane * report.consumers as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    for r in &report.timeline {
        let y = (r.worker.saturating_sub(first_consumer)) as f64 * lane;
        let x = (r.start - t0) / span * width;
        let w = ((r.end - r.start) / span * width).max(0.5);
        let _ = writeln!(
            s,
            r##"<rect x="{x:.3}" y="{y:.1}" width="{w:.3}" height="{:.1}" fill="#4a7ab5"><title>task {}</title></rect>"##,
            lane - 1.0,
            r.task
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tl(rows: &[(u32, f64, f64)]) -> Vec<TimelineRow> {
        rows.iter()
            .enumerate()
            .map(|(i, &(worker, start, end))| TimelineRow {
                task: i as u64,
                worker,
                start,
                end,
            })
            .collect()
    }

    #[test]
    fn power_law_endpoints() {
        assert_eq!(power_law_inverse(0.0, 5.0, 100.0), 5.0);
        assert!((power_law_inverse(1.0, 5.0, 100.0) - 100.0).abs() < 1e-9);
        assert!((power_law_inverse(0.5, 5.0, 100.0) - 1.0 / (0.2 - 0.5 * 0.19)).abs() < 1e-12);
    }

    #[test]
    fn inverse_matches_numeric_cdf() {
        // CDF(t) = (1/5 − 1/t) / (1/5 − 1/100); invert by bisection.
        let cdf = |t: f64| (0.2 - 1.0 / t) / (0.2 - 0.01);
        for u in [0.1, 0.25, 0.5, 0.9] {
            let (mut lo, mut hi) = (5.0, 100.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if cdf(mid) < u { lo = mid } else { hi = mid }
            }
            assert!((power_law_inverse(u, 5.0, 100.0) - lo).abs() < 1e-9);
        }
    }

    #[test]
    fn tc1_samples_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let d = sample_duration(Case::Tc1, &mut rng);
            assert!((20.0..=30.0).contains(&d));
        }
    }

    #[test]
    fn hand_packed_schedules() {
        let perfect = tl(&[(1, 0.0, 0.01), (1, 0.01, 0.02), (1, 0.02, 0.03)]);
        assert_eq!(filling_rate(&perfect, 1, 0).r_consumers, 1.0);
        let good = tl(&[(1, 0.0, 10.0), (1, 10.0, 20.0), (2, 0.0, 20.0)]);
        assert_eq!(filling_rate(&good, 2, 0).r_consumers, 1.0);
        let bad = tl(&[(1, 0.0, 10.0), (1, 10.0, 30.0), (2, 0.0, 10.0)]);
        let r = filling_rate(&bad, 2, 0);
        assert!((r.r_consumers - 40.0 / 60.0).abs() < 1e-12);
        assert!((r.r_all - 40.0 / 90.0).abs() < 1e-12);
    }

    #[test]
    fn case_parsing() {
        assert_eq!("TC2".parse::<Case>().unwrap(), Case::Tc2);
        assert!("tc4".parse::<Case>().is_err());
    }
}
