//! Evacuation-planning demo: a toy city, three objectives and a simulator
//! executable that follows the usual contract (arguments in, `_results.txt`
//! out, working directory for everything else).
//!
//! Each sub-area splits its population in the ratio `r : 1 − r` between two
//! shelters. The objectives are
//!
//! * `f1`: time until the last evacuee is served, a queueing surrogate;
//! * `f2`: plan complexity, `−Σ [r ln r + (1 − r) ln(1 − r)]`;
//! * `f3`: evacuees in excess of shelter capacity.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Backend, ExitReport};
use crate::moea::{optimize, Bound, MoeaConfig, OptimizationLog, Problem};
use crate::scheduler::sim::VirtualRun;
use crate::types::{render_number, TaskSpec};

pub const CITY_ENV: &str = "CARAVAN_DEMO_CITY";
pub const TIME_SCALE_ENV: &str = "CARAVAN_DEMO_TIME_SCALE";
pub const DEFAULT_TIME_SCALE: f64 = 0.001;
/// Standard deviation of the f1 noise, relative to f1.
pub const F1_NOISE: f64 = 0.01;
pub const SUMMARY_FILE: &str = "plan_summary.txt";

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("ratio {index} = {value} is outside [0, 1]")]
    RatioOutOfRange { index: usize, value: f64 },
    #[error("expected {expected} arguments, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("argument {index} is not a number: `{token}`")]
    BadNumber { index: usize, token: String },
    #[error("invalid city: {0}")]
    City(String),
    #[error("reading city file: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing city file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityModel {
    /// Evacuees per sub-area.
    pub populations: Vec<u64>,
    /// Capacity per shelter.
    pub capacities: Vec<u64>,
    /// Travel time in minutes, `distances[sub_area][shelter]`.
    pub distances: Vec<Vec<f64>>,
    /// Evacuees each shelter admits per minute.
    pub service_rate: Vec<f64>,
}

impl CityModel {
    pub fn num_areas(&self) -> usize {
        self.populations.len()
    }

    pub fn num_shelters(&self) -> usize {
        self.capacities.len()
    }

    pub fn validate(&self) -> Result<(), DemoError> {
        let (k, s) = (self.num_areas(), self.num_shelters());
        let bad = |m: String| Err(DemoError::City(m));
        if k == 0 || s == 0 {
            return bad("need at least one sub-area and one shelter".into());
        }
        if self.distances.len() != k || self.distances.iter().any(|row| row.len() != s) {
            return bad(format!("distances must be {k}×{s}"));
        }
        if self.distances.iter().flatten().any(|d| !d.is_finite() || *d < 0.0) {
            return bad("distances must be finite and non-negative".into());
        }
        if self.service_rate.len() != s || self.service_rate.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return bad(format!("service_rate needs {s} positive entries"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DemoError> {
        let city: CityModel = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        city.validate()?;
        Ok(city)
    }

    pub fn save(&self, path: &Path) -> Result<(), DemoError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// The built-in 16-area, 4-shelter city with 1,000 residents.
    ///
    /// Three sub-areas hold 70% of the residents. No assignment of whole
    /// groups balances the shelter queues, so shorter evacuations require
    /// splitting, which costs plan simplicity.
    pub fn desk() -> Self {
        let populations = vec![
            300, 250, 150, 30, 28, 26, 25, 24, 23, 22, 22, 21, 21, 20, 19, 19,
        ];
        let capacities = vec![350, 350, 450, 450];
        let service_rate = vec![10.0, 10.0, 12.0, 12.0];
        let distances = (0..16)
            .map(|i| {
                let x = i as f64;
                vec![
                    4.0 + 0.8 * x,
                    6.0 + 0.6 * (15.0 - x),
                    14.0 + 0.5 * x,
                    16.0 + 0.4 * (15.0 - x),
                ]
            })
            .collect();
        Self {
            populations,
            capacities,
            distances,
            service_rate,
        }
    }

    /// Gene bounds for a plan on this city: ratios in [0, 1], then two
    /// destination codes per sub-area in [0, S].
    pub fn genome_bounds(&self) -> Vec<Bound> {
        let k = self.num_areas();
        let s = self.num_shelters() as f64;
        let mut b = vec![Bound { lo: 0.0, hi: 1.0 }; k];
        b.extend(std::iter::repeat_n(Bound { lo: 0.0, hi: s }, 2 * k));
        b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvacuationPlan {
    pub ratios: Vec<f64>,
    /// (primary, secondary) shelter per sub-area; the primary takes the
    /// fraction `r`.
    pub destinations: Vec<[usize; 2]>,
}

impl EvacuationPlan {
    /// Decodes `K` ratios followed by `2K` destination codes. Codes are
    /// floored and clamped to a valid shelter index.
    pub fn from_genome(genes: &[f64], num_shelters: usize) -> Result<Self, DemoError> {
        if !genes.len().is_multiple_of(3) || genes.is_empty() {
            return Err(DemoError::Arity {
                expected: 3 * (genes.len() / 3).max(1),
                got: genes.len(),
            });
        }
        let k = genes.len() / 3;
        let ratios = genes[..k].to_vec();
        for (i, r) in ratios.iter().enumerate() {
            if !(0.0..=1.0).contains(r) {
                return Err(DemoError::RatioOutOfRange { index: i, value: *r });
            }
        }
        let code = |x: f64| (x.max(0.0).floor() as usize).min(num_shelters - 1);
        let destinations = genes[k..]
            .chunks(2)
            .map(|c| [code(c[0]), code(c[1])])
            .collect();
        Ok(Self {
            ratios,
            destinations,
        })
    }

    pub fn to_genome(&self) -> Vec<f64> {
        let mut g = self.ratios.clone();
        for d in &self.destinations {
            g.push(d[0] as f64);
            g.push(d[1] as f64);
        }
        g
    }

    /// Simulator arguments: the genome, then the seed.
    pub fn to_argv(&self, seed: u64) -> Vec<String> {
        let mut v: Vec<String> = self.to_genome().into_iter().map(render_number).collect();
        v.push(seed.to_string());
        v
    }

    /// Group sizes: `round(r·pop)` to the primary, the rest to the secondary.
    fn groups(&self, city: &CityModel) -> Vec<(usize, [u64; 2])> {
        self.ratios
            .iter()
            .zip(&city.populations)
            .enumerate()
            .map(|(i, (r, &pop))| {
                let first = ((r * pop as f64).round() as u64).min(pop);
                (i, [first, pop - first])
            })
            .collect()
    }

    pub fn loads(&self, city: &CityModel) -> Vec<u64> {
        let mut load = vec![0; city.num_shelters()];
        for (i, sizes) in self.groups(city) {
            for (g, size) in sizes.into_iter().enumerate() {
                load[self.destinations[i][g]] += size;
            }
        }
        load
    }
}

/// Plan complexity. Zero for plans that never split a sub-area.
pub fn objective_f2(plan: &EvacuationPlan) -> Result<f64, DemoError> {
    let mut total = 0.0;
    for (i, &r) in plan.ratios.iter().enumerate() {
        if !(0.0..=1.0).contains(&r) {
            return Err(DemoError::RatioOutOfRange { index: i, value: r });
        }
        total -= xlnx(r) + xlnx(1.0 - r);
    }
    Ok(total)
}

fn xlnx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Evacuees beyond shelter capacity, summed over shelters.
pub fn objective_f3(plan: &EvacuationPlan, city: &CityModel) -> f64 {
    plan.loads(city)
        .iter()
        .zip(&city.capacities)
        .map(|(&l, &c)| l.saturating_sub(c) as f64)
        .sum()
}

/// Minutes until every shelter has admitted its load: for each shelter the
/// farthest group's travel time plus the queue `load / rate`; empty shelters
/// do not count.
pub fn surrogate_f1(plan: &EvacuationPlan, city: &CityModel) -> f64 {
    let s = city.num_shelters();
    let mut farthest = vec![f64::NEG_INFINITY; s];
    let mut load = vec![0u64; s];
    for (i, sizes) in plan.groups(city) {
        for (g, size) in sizes.into_iter().enumerate() {
            if size == 0 {
                continue;
            }
            let dest = plan.destinations[i][g];
            farthest[dest] = farthest[dest].max(city.distances[i][dest]);
            load[dest] += size;
        }
    }
    (0..s)
        .filter(|&j| load[j] > 0)
        .map(|j| farthest[j] + load[j] as f64 / city.service_rate[j])
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objectives {
    pub f1: f64,
    pub f2: f64,
    pub f3: f64,
}

/// Objectives with seed-dependent noise on f1 only.
pub fn evaluate(plan: &EvacuationPlan, city: &CityModel, seed: u64) -> Result<Objectives, DemoError> {
    let f1 = surrogate_f1(plan, city);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ plan_hash(plan).rotate_left(17));
    let noise = Normal::new(0.0, F1_NOISE * f1)
        .map(|n| n.sample(&mut rng))
        .unwrap_or(0.0);
    Ok(Objectives {
        f1: f1 + noise,
        f2: objective_f2(plan)?,
        f3: objective_f3(plan, city),
    })
}

// FNV-1a over the genome bits, so distinct plans draw distinct noise.
fn plan_hash(plan: &EvacuationPlan) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for x in plan.to_genome() {
        for b in x.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Parses simulator arguments for `city`: `3K` genes then a seed.
pub fn parse_argv(args: &[String], city: &CityModel) -> Result<(EvacuationPlan, u64), DemoError> {
    let expected = 3 * city.num_areas() + 1;
    if args.len() != expected {
        return Err(DemoError::Arity {
            expected,
            got: args.len(),
        });
    }
    let mut genes = Vec::with_capacity(expected - 1);
    for (i, tok) in args[..expected - 1].iter().enumerate() {
        let v: f64 = tok.parse().map_err(|_| DemoError::BadNumber {
            index: i,
            token: tok.clone(),
        })?;
        genes.push(v);
    }
    let seed_tok = &args[expected - 1];
    let seed = seed_tok.parse().map_err(|_| DemoError::BadNumber {
        index: expected - 1,
        token: seed_tok.clone(),
    })?;
    Ok((EvacuationPlan::from_genome(&genes, city.num_shelters())?, seed))
}

pub fn plan_summary(plan: &EvacuationPlan, city: &CityModel, obj: &Objectives) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "f1 (minutes, noisy) {:.4}", obj.f1);
    let _ = writeln!(s, "f2 (complexity)     {:.6}", obj.f2);
    let _ = writeln!(s, "f3 (excess)         {}", obj.f3);
    let _ = writeln!(s, "\narea  pop  ratio  primary  secondary");
    for (i, (r, d)) in plan.ratios.iter().zip(&plan.destinations).enumerate() {
        let _ = writeln!(s, "{i:>4} {:>4}  {r:.3}  {:>7}  {:>9}", city.populations[i], d[0], d[1]);
    }
    let _ = writeln!(s, "\nshelter  load  capacity");
    for (j, (l, c)) in plan.loads(city).iter().zip(&city.capacities).enumerate() {
        let _ = writeln!(s, "{j:>7} {l:>5}  {c:>8}");
    }
    s
}

/// Entry point of the simulator executable. Writes `_results.txt` and
/// `plan_summary.txt` into the current directory and returns the exit code.
pub fn simulator_main(args: &[String]) -> i32 {
    let Some(city_path) = std::env::var_os(CITY_ENV) else {
        eprintln!("{CITY_ENV} is not set");
        return 2;
    };
    let city = match CityModel::load(Path::new(&city_path)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("cannot load city: {e}");
            return 2;
        }
    };
    let (plan, seed) = match parse_argv(args, &city) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("usage: caravan-demo-sim <{} genes> <seed>: {e}", 3 * city.num_areas());
            return 1;
        }
    };
    let obj = match evaluate(&plan, &city, seed) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("{e}");
            return 1;
        }
    };
    let scale = std::env::var(TIME_SCALE_ENV)
        .ok()
        .and_then(|s| s.parse::<f64>().ok())
        .filter(|s| s.is_finite() && *s >= 0.0)
        .unwrap_or(DEFAULT_TIME_SCALE);
    std::thread::sleep(std::time::Duration::from_secs_f64((scale * obj.f1).max(0.0)));
    let results = format!("{} {} {}\n", obj.f1, obj.f2, obj.f3);
    if let Err(e) = std::fs::write(crate::scheduler::executor::RESULTS_FILE, results)
        .and_then(|_| std::fs::write(SUMMARY_FILE, plan_summary(&plan, &city, &obj)))
    {
        eprintln!("writing outputs: {e}");
        return 1;
    }
    0
}

/// Virtual-time stand-in for the simulator: reads the genome from the task's
/// input and the seed from the last command word; takes `time_scale · f1`
/// seconds.
pub fn virtual_evaluator(city: CityModel, time_scale: f64) -> impl FnMut(&TaskSpec) -> VirtualRun {
    move |spec: &TaskSpec| {
        let seed = spec
            .command
            .split_whitespace()
            .last()
            .and_then(|t| t.parse().ok())
            .unwrap_or(0);
        match EvacuationPlan::from_genome(&spec.input, city.num_shelters())
            .and_then(|p| evaluate(&p, &city, seed))
        {
            Ok(o) => VirtualRun {
                duration: time_scale * o.f1,
                rc: 0,
                results: vec![o.f1, o.f2, o.f3],
            },
            Err(_) => VirtualRun {
                duration: 0.0,
                rc: 1,
                results: Vec::new(),
            },
        }
    }
}

/// Optimizer settings used by the demo: small enough to run on a laptop,
/// large enough for the f1/f2 trade-off to emerge.
pub fn demo_config(seed: u64) -> MoeaConfig {
    MoeaConfig {
        p_ini: 200,
        p_n: 100,
        p_archive: 200,
        generations: 40,
        replicates: 3,
        rng_seed: seed,
        ..MoeaConfig::default()
    }
}

/// Runs the optimizer on `city` with `program` as the evaluator command
/// prefix (the genome and seed are appended).
pub fn run_demo(
    backend: &mut dyn Backend,
    city: &CityModel,
    config: MoeaConfig,
    program: &str,
) -> (Option<OptimizationLog>, ExitReport) {
    optimize(backend, config, Problem::with_program(program, city.genome_bounds(), 3))
}

/// Sample Pearson correlation; `None` when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    let d = (sxx * syy).sqrt();
    (d > 0.0).then(|| sxy / d)
}
