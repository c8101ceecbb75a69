//! Fitness of a subgroup solution: per group, train the group's model,
//! weight train and validation reconstruction loss by window counts,
//! normalize by group size, and negate the sum.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datapipe::{make_group_windows, window_count, TimeSeriesDataset};
use crate::evo::SubgroupSolution;
use crate::genome::{decode, ModelGenome};
use crate::ndnet::{evaluate_model, train_model, Network, TrainConfig};
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitnessError {
    #[error("group {group}: {message}")]
    Group { group: usize, message: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Raw outcome of evaluating one group's model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEval {
    pub loss_train: f64,
    pub loss_val: f64,
    /// Training windows, `|X_t|`.
    pub n_train: usize,
    /// Validation windows, `|X_v|`.
    pub n_val: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupLoss {
    pub group_index: usize,
    pub group_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub loss_train: f64,
    pub loss_val: f64,
    pub loss_weighted: f64,
    pub loss_normalized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitnessReport {
    pub per_group: Vec<GroupLoss>,
    pub total_fitness: f64,
}

/// Combine per-group evaluations; `None` marks an empty group, which
/// contributes zero loss.
pub fn assemble_report(groups: &[(usize, Option<GroupEval>)]) -> FitnessReport {
    let mut per_group = Vec::with_capacity(groups.len());
    let mut loss_sum = 0.0;
    for (group_index, (size, eval)) in groups.iter().enumerate() {
        let entry = match eval {
            Some(e) if *size > 0 => {
                let n = (e.n_train + e.n_val) as f64;
                let loss_weighted = if e.n_val == 0 {
                    e.loss_train
                } else {
                    e.n_train as f64 / n * e.loss_train + e.n_val as f64 / n * e.loss_val
                };
                GroupLoss {
                    group_index,
                    group_size: *size,
                    n_train: e.n_train,
                    n_val: e.n_val,
                    loss_train: e.loss_train,
                    loss_val: e.loss_val,
                    loss_weighted,
                    loss_normalized: loss_weighted / *size as f64,
                }
            }
            _ => GroupLoss {
                group_index,
                group_size: *size,
                n_train: 0,
                n_val: 0,
                loss_train: 0.0,
                loss_val: 0.0,
                loss_weighted: 0.0,
                loss_normalized: 0.0,
            },
        };
        loss_sum += entry.loss_normalized;
        per_group.push(entry);
    }
    FitnessReport {
        per_group,
        total_fitness: -loss_sum,
    }
}

/// Produces the train/validation losses of one group's model.
pub trait GroupEvaluator: Sync {
    fn evaluate(
        &self,
        group_index: usize,
        group: &[usize],
        genome: &ModelGenome,
        rng_seed: u64,
    ) -> Result<GroupEval, FitnessError>;
}

/// Decodes the genome, trains it on the group's training windows and
/// reports inference-mode MSE on training and validation windows. Trained
/// weights are discarded.
#[derive(Clone, Debug)]
pub struct AutoencoderEvaluator<'a> {
    pub train: &'a TimeSeriesDataset,
    pub val: &'a TimeSeriesDataset,
    pub cfg: TrainConfig,
    pub stride: usize,
}

impl<'a> AutoencoderEvaluator<'a> {
    pub fn new(train: &'a TimeSeriesDataset, val: &'a TimeSeriesDataset, cfg: TrainConfig) -> Self {
        Self {
            train,
            val,
            cfg,
            stride: 1,
        }
    }

    /// Train a fresh model for `group`; shared with final training.
    pub fn train_group(
        &self,
        group_index: usize,
        group: &[usize],
        genome: &ModelGenome,
        rng_seed: u64,
    ) -> Result<Network, FitnessError> {
        let err = |message: String| FitnessError::Group {
            group: group_index,
            message,
        };
        let windows = make_group_windows(self.train, group, genome.window_size, self.stride)
            .map_err(|e| err(e.to_string()))?;
        let init = decode(genome, group.len(), seed::derive(rng_seed, &[0]))
            .map_err(|e| err(e.to_string()))?;
        train_model(&init, &windows.windows, &self.cfg, seed::derive(rng_seed, &[1]))
            .map_err(|e| err(e.to_string()))
    }
}

/// Inference-mode losses of a trained network on one group.
fn losses_of(
    net: &Network,
    group_index: usize,
    group: &[usize],
    train: &TimeSeriesDataset,
    val: &TimeSeriesDataset,
    stride: usize,
) -> Result<GroupEval, FitnessError> {
    let err = |message: String| FitnessError::Group {
        group: group_index,
        message,
    };
    let window = net.input_shape().0;
    let tw = make_group_windows(train, group, window, stride).map_err(|e| err(e.to_string()))?;
    let loss_train = evaluate_model(net, &tw.windows).map_err(|e| err(e.to_string()))?;
    let n_val = window_count(val.rows(), window, stride);
    let loss_val = if n_val == 0 {
        0.0
    } else {
        let vw = make_group_windows(val, group, window, stride).map_err(|e| err(e.to_string()))?;
        evaluate_model(net, &vw.windows).map_err(|e| err(e.to_string()))?
    };
    Ok(GroupEval {
        loss_train,
        loss_val,
        n_train: tw.count(),
        n_val,
    })
}

impl GroupEvaluator for AutoencoderEvaluator<'_> {
    fn evaluate(
        &self,
        group_index: usize,
        group: &[usize],
        genome: &ModelGenome,
        rng_seed: u64,
    ) -> Result<GroupEval, FitnessError> {
        let net = self.train_group(group_index, group, genome, rng_seed)?;
        losses_of(&net, group_index, group, self.train, self.val, self.stride)
    }
}

/// Fitness of `solution` with one genome per group. Groups are evaluated in
/// parallel, each with a seed derived from `rng_seed` and its index.
pub fn fitness<V: GroupEvaluator>(
    solution: &SubgroupSolution,
    genomes: &[ModelGenome],
    evaluator: &V,
    rng_seed: u64,
) -> Result<FitnessReport, FitnessError> {
    if genomes.len() != solution.k() {
        return Err(FitnessError::Contract(format!(
            "{} genomes for {} groups",
            genomes.len(),
            solution.k()
        )));
    }
    let evals: Vec<Result<(usize, Option<GroupEval>), FitnessError>> = solution
        .groups
        .par_iter()
        .zip(genomes)
        .enumerate()
        .map(|(i, (group, genome))| {
            if group.is_empty() {
                return Ok((0, None));
            }
            let e = evaluator.evaluate(i, group, genome, seed::derive(rng_seed, &[i as u64]))?;
            Ok((group.len(), Some(e)))
        })
        .collect();
    let evals: Vec<(usize, Option<GroupEval>)> = evals.into_iter().collect::<Result<_, _>>()?;
    Ok(assemble_report(&evals))
}

/// Fitness with the same base genome for every group.
pub fn fitness_for_subgroup_search<V: GroupEvaluator>(
    solution: &SubgroupSolution,
    base_genome: &ModelGenome,
    evaluator: &V,
    rng_seed: u64,
) -> Result<FitnessReport, FitnessError> {
    fitness(solution, &vec![base_genome.clone(); solution.k()], evaluator, rng_seed)
}

/// Fitness of one genome on one group: the group's negated normalized loss.
/// Uses the same per-group seed as [`fitness`] would for `group_index`.
pub fn group_fitness<V: GroupEvaluator>(
    group_index: usize,
    group: &[usize],
    genome: &ModelGenome,
    evaluator: &V,
    rng_seed: u64,
) -> Result<f64, FitnessError> {
    if group.is_empty() {
        return Ok(0.0);
    }
    let e = evaluator.evaluate(group_index, group, genome, seed::derive(rng_seed, &[group_index as u64]))?;
    Ok(assemble_report(&[(group.len(), Some(e))]).total_fitness)
}

/// Evaluate-only fitness of already trained networks (one per group, `None`
/// for empty groups); no weights change.
pub fn fitness_trained(
    solution: &SubgroupSolution,
    networks: &[Option<&Network>],
    train: &TimeSeriesDataset,
    val: &TimeSeriesDataset,
    stride: usize,
) -> Result<FitnessReport, FitnessError> {
    if networks.len() != solution.k() {
        return Err(FitnessError::Contract(format!(
            "{} networks for {} groups",
            networks.len(),
            solution.k()
        )));
    }
    let evals: Vec<Result<(usize, Option<GroupEval>), FitnessError>> = solution
        .groups
        .par_iter()
        .zip(networks)
        .enumerate()
        .map(|(i, (group, net))| match (group.is_empty(), net) {
            (true, _) => Ok((0, None)),
            (false, None) => Err(FitnessError::Contract(format!("group {i} has features but no network"))),
            (false, Some(net)) => Ok((group.len(), Some(losses_of(net, i, group, train, val, stride)?))),
        })
        .collect();
    let evals: Vec<(usize, Option<GroupEval>)> = evals.into_iter().collect::<Result<_, _>>()?;
    Ok(assemble_report(&evals))
}
