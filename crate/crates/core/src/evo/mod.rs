//! Genetic operators and generation loops for feature-subgroup search and
//! per-subgroup model search.

mod cluster;
mod groups;
mod models;
mod search;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genome::{self, GenomeError, ModelGenome};

pub use cluster::{average_linkage, correlation_distance};
pub use groups::{
    crossover_groups, crossover_groups_at, init_population_clustered, init_population_random,
    mutate_groups, SubgroupSolution,
};
pub use models::{crossover_models, crossover_models_at, mutate_model, select_diverse, select_diverse_indices};
pub use search::{
    evolve_groups, evolve_models, resume_groups, resume_models, GroupCheckpoint, GroupSearch,
    ModelCheckpoint, ModelSearch, ModelSearchSpace,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvoError {
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("fitness failed in generation {generation}, member {member}: {message}")]
    Fitness {
        generation: usize,
        member: usize,
        message: String,
    },
    #[error("model fitness failed for group {group}, generation {generation}, member {member}: {message}")]
    ModelFitness {
        group: usize,
        generation: usize,
        member: usize,
        message: String,
    },
    #[error("checkpoint write failed: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Genome(#[from] GenomeError),
}

/// Settings of one GA level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaParams {
    pub population_size: usize,
    pub parents_mating: usize,
    pub mutation_probability: f64,
    pub generations: usize,
}

impl GaParams {
    /// Subgroup search defaults: population 8, 4 parents, p_m 0.1, 10 generations.
    pub fn subgroup_default() -> Self {
        Self {
            population_size: 8,
            parents_mating: 4,
            mutation_probability: 0.1,
            generations: 10,
        }
    }

    /// Model search defaults: population 24, 8 parents, p_m 0.5, 16 generations.
    pub fn model_default() -> Self {
        Self {
            population_size: 24,
            parents_mating: 8,
            mutation_probability: 0.5,
            generations: 16,
        }
    }

    pub fn validate(&self) -> Result<(), EvoError> {
        if self.population_size == 0 {
            return Err(EvoError::Config("population_size must be at least 1".into()));
        }
        if self.parents_mating == 0 || self.parents_mating > self.population_size {
            return Err(EvoError::Config(format!(
                "parents_mating {} must be in 1..={}",
                self.parents_mating, self.population_size
            )));
        }
        if !(0.0..=1.0).contains(&self.mutation_probability) {
            return Err(EvoError::Config(format!(
                "mutation_probability {} outside [0, 1]",
                self.mutation_probability
            )));
        }
        Ok(())
    }
}

/// A subgroup solution with one model genome per group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleGenome {
    pub solution: SubgroupSolution,
    pub genomes: Vec<ModelGenome>,
}

impl EnsembleGenome {
    /// Every group starts from the same genome.
    pub fn uniform(solution: SubgroupSolution, base: &ModelGenome) -> Self {
        let genomes = vec![base.clone(); solution.k()];
        Self { solution, genomes }
    }

    pub fn validate(&self) -> Result<(), EvoError> {
        if self.genomes.len() != self.solution.k() {
            return Err(EvoError::Contract(format!(
                "{} genomes for {} groups",
                self.genomes.len(),
                self.solution.k()
            )));
        }
        for (i, g) in self.genomes.iter().enumerate() {
            let v = genome::validate(g);
            if !v.is_empty() {
                return Err(EvoError::Contract(format!("genome of group {i} invalid: {v:?}")));
            }
        }
        Ok(())
    }
}
