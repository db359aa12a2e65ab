//! The asynchronous optimizer loop, driven entirely by engine callbacks.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::future::Future;
use std::path::Path;
use std::pin::Pin;
use std::rc::Rc;
use std::sync::Arc;
use std::task::{Context, Poll, Waker};

use log::{info, warn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    crowded_less, crowding_distance, non_dominated_sort, polynomial_mutation, rank_and_crowding,
    sbx_crossover, tournament_select, Bound, Genome, Individual, MoeaConfig, MoeaError, Truncation,
};
use crate::engine::{Backend, Engine, ExitReport, ParameterSet, Server};

/// What to optimize: gene bounds, the evaluator command and the number of
/// objectives it reports.
#[derive(Debug, Clone)]
pub struct Problem {
    pub bounds: Arc<Vec<Bound>>,
    /// Rendered with the genome as `{0}`, `{1}`, ... and the replicate seed
    /// as `{seed}`.
    pub command_template: String,
    pub num_objectives: usize,
}

impl Problem {
    pub fn new(bounds: Vec<Bound>, command_template: impl Into<String>, num_objectives: usize) -> Self {
        Self {
            bounds: Arc::new(bounds),
            command_template: command_template.into(),
            num_objectives,
        }
    }

    /// Template `<program> {0} {1} ... {n-1} {seed}`.
    pub fn with_program(program: &str, bounds: Vec<Bound>, num_objectives: usize) -> Self {
        let mut template = program.to_string();
        for i in 0..bounds.len() {
            template.push_str(&format!(" {{{i}}}"));
        }
        template.push_str(" {seed}");
        Self::new(bounds, template, num_objectives)
    }
}

/// One evaluated individual, logged when it entered the archive merge.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationRow {
    pub id: u64,
    pub generation: usize,
    pub genome: Vec<f64>,
    pub objectives: Vec<f64>,
    pub rank_at_archival: usize,
    pub completed_at: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSummary {
    pub generation: usize,
    pub time: f64,
    /// Evaluation tasks still running when the merge happened.
    pub in_flight_before: usize,
    pub merged: usize,
    pub archive_size: usize,
    pub front0_size: usize,
}

/// Archive contents right after a merge, as (individual id, objectives).
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveSnapshot {
    pub generation: usize,
    pub members: Vec<(u64, Vec<f64>)>,
}

#[derive(Debug, Clone, Default)]
pub struct OptimizationLog {
    pub evaluations: Vec<EvaluationRow>,
    pub generations: Vec<GenerationSummary>,
    pub snapshots: Vec<ArchiveSnapshot>,
    pub archive: Vec<Individual>,
    pub tasks_created: usize,
    pub failed_evaluations: usize,
}

impl OptimizationLog {
    /// Objective vectors of the initial population.
    pub fn initial_objectives(&self) -> Vec<Vec<f64>> {
        self.evaluations
            .iter()
            .filter(|r| r.generation == 0)
            .map(|r| r.objectives.clone())
            .collect()
    }

    pub fn archive_objectives(&self) -> Vec<Vec<f64>> {
        self.archive.iter().map(|i| i.objectives.clone()).collect()
    }

    /// One row per evaluated individual:
    /// `generation,id,x0..xn,f0..fk,rank_at_archival`.
    pub fn write_evaluations_csv(&self, path: &Path) -> Result<(), MoeaError> {
        let mut w = csv::Writer::from_path(path)?;
        let (n, k) = self
            .evaluations
            .first()
            .map_or((0, 0), |r| (r.genome.len(), r.objectives.len()));
        let mut header = vec!["generation".to_string(), "id".to_string()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend((0..k).map(|i| format!("f{i}")));
        header.push("rank_at_archival".into());
        w.write_record(&header)?;
        for r in &self.evaluations {
            let mut rec = vec![r.generation.to_string(), r.id.to_string()];
            rec.extend(r.genome.iter().map(f64::to_string));
            rec.extend(r.objectives.iter().map(f64::to_string));
            rec.push(r.rank_at_archival.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn write_generations_csv(&self, path: &Path) -> Result<(), MoeaError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "generation",
            "time",
            "in_flight_before",
            "merged",
            "archive_size",
            "front0_size",
        ])?;
        for g in &self.generations {
            w.write_record([
                g.generation.to_string(),
                g.time.to_string(),
                g.in_flight_before.to_string(),
                g.merged.to_string(),
                g.archive_size.to_string(),
                g.front0_size.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

struct Pending {
    genome: Genome,
    generation: usize,
    set: ParameterSet,
    remaining: usize,
}

struct State {
    config: MoeaConfig,
    problem: Problem,
    rng: ChaCha8Rng,
    archive: Vec<Individual>,
    pool: Vec<(Individual, f64)>,
    pending: BTreeMap<u64, Pending>,
    next_id: u64,
    generation: usize,
    replacements_left: usize,
    log: OptimizationLog,
    done: bool,
    error: Option<MoeaError>,
    waker: Option<Waker>,
}

type Shared = Rc<RefCell<State>>;

fn submit(server: &Server, shared: &Shared, genome: Genome, generation: usize) -> Result<(), MoeaError> {
    let (id, set) = {
        let mut st = shared.borrow_mut();
        let id = st.next_id;
        st.next_id += 1;
        let reps = st.config.replicates;
        let set = server.create_parameter_set(
            genome.values.clone(),
            &st.problem.command_template,
            reps,
            id * reps as u64,
        )?;
        st.log.tasks_created += reps;
        st.pending.insert(
            id,
            Pending {
                genome,
                generation,
                set: set.clone(),
                remaining: reps,
            },
        );
        (id, set)
    };
    for run in &set.runs {
        let (s, sh) = (server.clone(), shared.clone());
        server.add_callback(run.task, move |_| on_run_done(&s, &sh, id))?;
    }
    Ok(())
}

fn on_run_done(server: &Server, shared: &Shared, id: u64) {
    if let Err(e) = step(server, shared, id) {
        let mut st = shared.borrow_mut();
        warn!("optimizer stopped: {e}");
        st.error.get_or_insert(e);
        finish(&mut st);
    }
}

fn finish(st: &mut State) {
    st.done = true;
    if let Some(w) = st.waker.take() {
        w.wake();
    }
}

fn step(server: &Server, shared: &Shared, id: u64) -> Result<(), MoeaError> {
    let mut st = shared.borrow_mut();
    if st.done {
        return Ok(());
    }
    let p = st.pending.get_mut(&id).expect("callback for a pending individual");
    p.remaining -= 1;
    if p.remaining > 0 {
        return Ok(());
    }
    let p = st.pending.remove(&id).expect("present");
    let k = st.problem.num_objectives;
    match server.average_results(&p.set) {
        Ok(obj) if obj.len() == k && obj.iter().all(|v| v.is_finite()) => {
            let ind = Individual {
                id,
                generation: p.generation,
                genome: p.genome,
                objectives: obj,
                rank: 0,
                crowding: 0.0,
            };
            let now = server.now();
            st.pool.push((ind, now));
        }
        outcome => {
            st.log.failed_evaluations += 1;
            warn!("evaluation of individual {id} failed: {outcome:?}");
            if st.replacements_left > 0 {
                st.replacements_left -= 1;
                let child = if st.archive.is_empty() {
                    let bounds = st.problem.bounds.clone();
                    Genome::random(bounds, &mut st.rng)
                } else {
                    offspring(&mut st, 1)?.pop().expect("one child")
                };
                drop(st);
                submit(server, shared, child, p.generation)?;
                st = shared.borrow_mut();
            }
        }
    }

    if st.pool.len() >= st.config.p_n && st.generation < st.config.generations {
        st.generation += 1;
        let g = st.generation;
        merge(&mut st, g, server.now())?;
        let p_n = st.config.p_n;
        let children = offspring(&mut st, p_n)?;
        drop(st);
        for child in children {
            submit(server, shared, child, g)?;
        }
        st = shared.borrow_mut();
    }

    if st.pending.is_empty() {
        if !st.pool.is_empty() {
            let g = st.generation;
            merge(&mut st, g, server.now())?;
        }
        info!(
            "optimization finished: {} generations, archive {}",
            st.generation,
            st.archive.len()
        );
        finish(&mut st);
    }
    Ok(())
}

fn merge(st: &mut State, generation: usize, now: f64) -> Result<(), MoeaError> {
    let in_flight_before = st.pending.values().map(|p| p.remaining).sum();
    let incoming = std::mem::take(&mut st.pool);
    let merged_count = incoming.len();
    let base = st.archive.len();
    let mut merged = std::mem::take(&mut st.archive);
    let mut completed_at = Vec::with_capacity(incoming.len());
    for (ind, t) in incoming {
        merged.push(ind);
        completed_at.push(t);
    }
    let objs: Vec<Vec<f64>> = merged.iter().map(|i| i.objectives.clone()).collect();
    let (rank, crowd) = rank_and_crowding(&objs)?;
    for (j, ind) in merged[base..].iter().enumerate() {
        st.log.evaluations.push(EvaluationRow {
            id: ind.id,
            generation: ind.generation,
            genome: ind.genome.values.clone(),
            objectives: ind.objectives.clone(),
            rank_at_archival: rank[base + j],
            completed_at: completed_at[j],
        });
    }

    let cap = st.config.p_archive;
    let keep: Vec<usize> = if merged.len() <= cap {
        (0..merged.len()).collect()
    } else {
        match st.config.truncation {
            Truncation::RankCrowding => truncate_rank_crowding(&objs, cap)?,
            Truncation::Tournament => truncate_tournament(&rank, &crowd, cap, &mut st.rng),
        }
    };
    let mut slots: Vec<Option<Individual>> = merged.into_iter().map(Some).collect();
    let mut archive: Vec<Individual> = keep
        .into_iter()
        .map(|i| slots[i].take().expect("kept once"))
        .collect();
    archive.sort_by_key(|i| i.id);

    let objs: Vec<Vec<f64>> = archive.iter().map(|i| i.objectives.clone()).collect();
    let (rank, crowd) = rank_and_crowding(&objs)?;
    for (ind, (r, c)) in archive.iter_mut().zip(rank.iter().zip(crowd)) {
        ind.rank = *r;
        ind.crowding = c;
    }
    let front0 = rank.iter().filter(|&&r| r == 0).count();
    st.log.generations.push(GenerationSummary {
        generation,
        time: now,
        in_flight_before,
        merged: merged_count,
        archive_size: archive.len(),
        front0_size: front0,
    });
    st.log.snapshots.push(ArchiveSnapshot {
        generation,
        members: archive.iter().map(|i| (i.id, i.objectives.clone())).collect(),
    });
    st.archive = archive;
    Ok(())
}

/// Whole fronts in rank order; the front that does not fit is cut by
/// descending crowding distance (ties to the lower index).
pub(crate) fn truncate_rank_crowding(objs: &[Vec<f64>], cap: usize) -> Result<Vec<usize>, MoeaError> {
    let mut keep = Vec::with_capacity(cap);
    for front in non_dominated_sort(objs)? {
        if keep.len() + front.len() <= cap {
            keep.extend(front);
            continue;
        }
        let members: Vec<&[f64]> = front.iter().map(|&i| objs[i].as_slice()).collect();
        let d = crowding_distance(&members);
        let mut order: Vec<usize> = (0..front.len()).collect();
        order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
        let room = cap - keep.len();
        keep.extend(order.into_iter().take(room).map(|j| front[j]));
        break;
    }
    Ok(keep)
}

fn truncate_tournament(rank: &[usize], crowd: &[f64], cap: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..rank.len()).collect();
    let mut keep = Vec::with_capacity(cap);
    while keep.len() < cap && !remaining.is_empty() {
        let pick = if remaining.len() == 1 {
            0
        } else {
            let a = rng.random_range(0..remaining.len());
            let mut b = rng.random_range(0..remaining.len() - 1);
            if b >= a {
                b += 1;
            }
            if crowded_less(remaining[a], remaining[b], rank, crowd) {
                a
            } else {
                b
            }
        };
        keep.push(remaining.swap_remove(pick));
    }
    keep
}

/// `count` children from the archive: binary tournaments pick parents, SBX
/// makes two children per pair, then each child is mutated.
fn offspring(st: &mut State, count: usize) -> Result<Vec<Genome>, MoeaError> {
    let rank: Vec<usize> = st.archive.iter().map(|i| i.rank).collect();
    let crowd: Vec<f64> = st.archive.iter().map(|i| i.crowding).collect();
    let c = st.config.clone();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = tournament_select(&rank, &crowd, &mut st.rng);
        let b = tournament_select(&rank, &crowd, &mut st.rng);
        let (x, y) = sbx_crossover(
            &st.archive[a].genome,
            &st.archive[b].genome,
            c.eta_b,
            c.crossover_rate,
            &mut st.rng,
        )?;
        out.push(polynomial_mutation(&x, c.eta_p, c.mutation_rate, &mut st.rng));
        if out.len() < count {
            out.push(polynomial_mutation(&y, c.eta_p, c.mutation_rate, &mut st.rng));
        }
    }
    Ok(out)
}

struct Finished(Shared);

impl Future for Finished {
    type Output = ();

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        let mut st = self.0.borrow_mut();
        if st.done {
            Poll::Ready(())
        } else {
            st.waker = Some(cx.waker().clone());
            Poll::Pending
        }
    }
}

/// Runs the optimizer inside the engine and resolves with its log once every
/// evaluation has completed and the last pool has been merged.
pub async fn async_optimize(
    server: Server,
    config: MoeaConfig,
    problem: Problem,
) -> Result<OptimizationLog, MoeaError> {
    config.validate()?;
    if problem.num_objectives == 0 {
        return Err(MoeaError::Config("need at least one objective".into()));
    }
    let shared: Shared = Rc::new(RefCell::new(State {
        rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
        replacements_left: config.p_ini + config.generations * config.p_n,
        config: config.clone(),
        problem: problem.clone(),
        archive: Vec::new(),
        pool: Vec::new(),
        pending: BTreeMap::new(),
        next_id: 0,
        generation: 0,
        log: OptimizationLog::default(),
        done: false,
        error: None,
        waker: None,
    }));
    for _ in 0..config.p_ini {
        let genome = {
            let mut st = shared.borrow_mut();
            Genome::random(problem.bounds.clone(), &mut st.rng)
        };
        submit(&server, &shared, genome, 0)?;
    }
    Finished(shared.clone()).await;
    let mut st = shared.borrow_mut();
    if let Some(e) = st.error.take() {
        return Err(e);
    }
    let mut log = std::mem::take(&mut st.log);
    log.archive = std::mem::take(&mut st.archive);
    Ok(log)
}

/// Runs [`async_optimize`] as the whole engine program. The log is `None`
/// if the optimizer failed; the reason is in the report's `program_error`.
pub fn optimize(
    backend: &mut dyn Backend,
    config: MoeaConfig,
    problem: Problem,
) -> (Option<OptimizationLog>, ExitReport) {
    let slot = Rc::new(RefCell::new(None));
    let out = slot.clone();
    let report = Engine::new().run(backend, move |server| async move {
        let log = async_optimize(server, config, problem).await?;
        *out.borrow_mut() = Some(log);
        Ok(())
    });
    let log = slot.borrow_mut().take();
    (log, report)
}
