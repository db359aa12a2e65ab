//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use caravan::bench::{power_law_inverse, POWER_LAW_RANGE};
use caravan::moea::{dominates, Bound, Problem};
use caravan::scheduler::sim::{SimConfig, VirtualRun};
use caravan::scheduler::{Topology, VirtualExecutor, VirtualScheduler};
use caravan::types::TaskSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Peels fronts one at a time by pairwise domination checks.
pub fn brute_fronts(points: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let mut left: Vec<usize> = (0..points.len()).collect();
    let mut fronts = Vec::new();
    while !left.is_empty() {
        let front: Vec<usize> = left
            .iter()
            .copied()
            .filter(|&i| !left.iter().any(|&j| dominates(&points[j], &points[i])))
            .collect();
        left.retain(|i| !front.contains(i));
        fronts.push(front);
    }
    fronts
}

/// Crowding distance by linear neighbor search. Ties are ordered by index,
/// so a point's neighbors on objective m are the nearest (value, index)
/// keys on either side.
#[allow(clippy::needless_range_loop)]
pub fn brute_crowding(front: &[Vec<f64>]) -> Vec<f64> {
    let n = front.len();
    let k = front.first().map_or(0, Vec::len);
    let mut d = vec![0.0; n];
    for m in 0..k {
        let key = |i: usize| (front[i][m], i);
        let less = |a: (f64, usize), b: (f64, usize)| a.0 < b.0 || (a.0 == b.0 && a.1 < b.1);
        let lo = (0..n).map(|i| front[i][m]).fold(f64::INFINITY, f64::min);
        let hi = (0..n).map(|i| front[i][m]).fold(f64::NEG_INFINITY, f64::max);
        for i in 0..n {
            let below = (0..n).filter(|&j| less(key(j), key(i))).max_by(|&a, &b| {
                if less(key(a), key(b)) {
                    std::cmp::Ordering::Less
                } else {
                    std::cmp::Ordering::Greater
                }
            });
            let above = (0..n).filter(|&j| less(key(i), key(j))).min_by(|&a, &b| {
                if less(key(a), key(b)) {
                    std::cmp::Ordering::Less
                } else {
                    std::cmp::Ordering::Greater
                }
            });
            match (below, above) {
                (Some(b), Some(a)) => {
                    if hi > lo && d[i] != f64::INFINITY {
                        d[i] += (front[a][m] - front[b][m]) / (hi - lo);
                    }
                }
                _ => d[i] = f64::INFINITY,
            }
        }
    }
    d
}

/// Random objective vectors; with `coarse` the values sit on a small grid so
/// that ties and duplicates are common.
pub fn random_points(rng: &mut impl Rng, n: usize, k: usize, coarse: bool) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..k)
                .map(|_| {
                    if coarse {
                        rng.random_range(0..6) as f64
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect()
        })
        .collect()
}

pub fn zdt1(x: &[f64]) -> Vec<f64> {
    let f1 = x[0];
    let g = 1.0 + 9.0 * x[1..].iter().sum::<f64>() / (x.len() - 1) as f64;
    vec![f1, g * (1.0 - (f1 / g).sqrt())]
}

pub fn sphere(x: &[f64]) -> Vec<f64> {
    vec![x.iter().map(|v| v * v).sum(), x.iter().map(|v| (v - 1.0).powi(2)).sum()]
}

pub fn unit_problem(genes: usize, objectives: usize) -> Problem {
    Problem::with_program("evaluate", vec![Bound::new(0.0, 1.0).unwrap(); genes], objectives)
}

#[derive(Clone, Copy)]
pub enum Durations {
    Constant(f64),
    /// Heavy-tailed, drawn per task from its id.
    PowerLaw,
}

/// Virtual evaluator: objectives from the task's input, durations as given.
pub fn evaluator(
    f: fn(&[f64]) -> Vec<f64>,
    durations: Durations,
) -> impl FnMut(&TaskSpec) -> VirtualRun {
    move |spec: &TaskSpec| {
        let duration = match durations {
            Durations::Constant(d) => d,
            Durations::PowerLaw => {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.id.0);
                power_law_inverse(rng.random(), POWER_LAW_RANGE.0, POWER_LAW_RANGE.1)
            }
        };
        VirtualRun {
            duration,
            rc: 0,
            results: f(&spec.input),
        }
    }
}

pub fn sim(consumers: usize, exec: impl VirtualExecutor + 'static) -> VirtualScheduler {
    VirtualScheduler::new(Topology::new(consumers, 384).unwrap(), SimConfig::default(), exec)
}
