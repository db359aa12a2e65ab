//! Asynchronous NSGA-II.
//!
//! Instead of waiting for a whole generation, the optimizer merges every
//! `p_n` completed evaluations into the archive and immediately submits `p_n`
//! new offspring, so the scheduler never runs dry between generations.

mod operators;
mod optimizer;
mod sort;

use std::sync::Arc;

use thiserror::Error;

pub use operators::{mutate_gene, polynomial_mutation, sbx_crossover, sbx_pair, spread_factor};
pub use optimizer::{
    async_optimize, optimize, ArchiveSnapshot, EvaluationRow, GenerationSummary, OptimizationLog, Problem,
};
pub use sort::{
    crowded_less, crowding_distance, dominates, hypervolume_2d, non_dominated_sort,
    rank_and_crowding, ranks, tournament_select,
};

use crate::engine::EngineError;
use crate::types::SpecError;

#[derive(Debug, Error)]
pub enum MoeaError {
    #[error("individual {index} has a NaN objective")]
    NanObjective { index: usize },
    #[error("individual {index} has {got} objectives, expected {expected}")]
    ObjectiveCount {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("parents differ in length or bounds")]
    GenomeMismatch,
    #[error("bad bound [{lo}, {hi}]")]
    BadBound { lo: f64, hi: f64 },
    #[error("gene {index} = {value} outside its bounds")]
    OutOfBounds { index: usize, value: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("writing log: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bound {
    pub lo: f64,
    pub hi: f64,
}

impl Bound {
    pub fn new(lo: f64, hi: f64) -> Result<Self, MoeaError> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(MoeaError::BadBound { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn clip(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Genome {
    pub values: Vec<f64>,
    pub bounds: Arc<Vec<Bound>>,
}

impl Genome {
    pub fn new(values: Vec<f64>, bounds: Arc<Vec<Bound>>) -> Result<Self, MoeaError> {
        if values.len() != bounds.len() {
            return Err(MoeaError::GenomeMismatch);
        }
        for (i, (v, b)) in values.iter().zip(bounds.iter()).enumerate() {
            if !(b.lo..=b.hi).contains(v) {
                return Err(MoeaError::OutOfBounds { index: i, value: *v });
            }
        }
        Ok(Self { values, bounds })
    }

    /// Uniform sample within the bounds.
    pub fn random<R: rand::Rng + ?Sized>(bounds: Arc<Vec<Bound>>, rng: &mut R) -> Self {
        let values = bounds
            .iter()
            .map(|b| if b.hi > b.lo { rng.random_range(b.lo..=b.hi) } else { b.lo })
            .collect();
        Self { values, bounds }
    }
}

/// An evaluated member of the population.
#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub id: u64,
    /// Generation that produced it; 0 for the initial population.
    pub generation: usize,
    pub genome: Genome,
    pub objectives: Vec<f64>,
    pub rank: usize,
    pub crowding: f64,
}

/// How the archive is cut back to `p_archive` after a merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Truncation {
    /// Whole fronts in rank order, the last one by descending crowding.
    #[default]
    RankCrowding,
    /// Repeated binary tournaments without replacement.
    Tournament,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeaConfig {
    pub p_ini: usize,
    pub p_n: usize,
    pub p_archive: usize,
    pub generations: usize,
    pub replicates: usize,
    pub crossover_rate: f64,
    pub eta_b: f64,
    pub mutation_rate: f64,
    pub eta_p: f64,
    pub rng_seed: u64,
    pub truncation: Truncation,
}

impl Default for MoeaConfig {
    fn default() -> Self {
        Self {
            p_ini: 1000,
            p_n: 500,
            p_archive: 1000,
            generations: 40,
            replicates: 5,
            crossover_rate: 1.0,
            eta_b: 15.0,
            mutation_rate: 0.01,
            eta_p: 20.0,
            rng_seed: 0,
            truncation: Truncation::RankCrowding,
        }
    }
}

impl MoeaConfig {
    pub fn validate(&self) -> Result<(), MoeaError> {
        let bad = |m: &str| Err(MoeaError::Config(m.to_string()));
        if self.p_n == 0 || self.p_n >= self.p_ini {
            return bad("need 0 < p_n < p_ini");
        }
        if self.p_archive == 0 {
            return bad("p_archive must be positive");
        }
        if self.replicates == 0 {
            return bad("replicates must be positive");
        }
        for (name, r) in [
            ("crossover_rate", self.crossover_rate),
            ("mutation_rate", self.mutation_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(&format!("{name} must be in [0, 1]"));
            }
        }
        if self.eta_b < 0.0 || self.eta_p < 0.0 {
            return bad("distribution indices must be non-negative");
        }
        Ok(())
    }

    /// Task executions a failure-free run performs.
    pub fn expected_evaluations(&self) -> usize {
        (self.p_ini + self.generations * self.p_n) * self.replicates
    }
}
