//! Gradient-free fine-tuning of trained ensembles by masked weight mutation
//! and an elitist population search.

use std::fmt::Display;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::EnsembleModel;
use crate::ndnet::{Network, ParamId, ParamKind};
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FineTuneError {
    #[error("invalid fine-tune parameters: {0}")]
    Params(String),
    #[error("evaluation failed in generation {generation}, variant {variant}: {message}")]
    Evaluation {
        generation: usize,
        variant: usize,
        message: String,
    },
}

/// Distribution of the step multiplier `alpha`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    FixedOne,
    /// `alpha ~ U(0, 1]`, drawn per weight.
    #[default]
    Uniform01,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneParams {
    pub population_size: usize,
    pub generations: usize,
    /// Fraction of each tensor's entries perturbed per mutation.
    pub percentage: f64,
    /// Steps are at most `max|theta| / scale`.
    pub scale: f64,
    pub alpha_mode: AlphaMode,
}

impl Default for FineTuneParams {
    fn default() -> Self {
        Self {
            population_size: 32,
            generations: 64,
            percentage: 0.02,
            scale: 256.0,
            alpha_mode: AlphaMode::Uniform01,
        }
    }
}

impl FineTuneParams {
    pub fn validate(&self) -> Result<(), FineTuneError> {
        if self.population_size == 0 {
            return Err(FineTuneError::Params("population_size must be at least 1".into()));
        }
        if !(self.percentage > 0.0 && self.percentage <= 1.0) {
            return Err(FineTuneError::Params(format!("percentage {} outside (0, 1]", self.percentage)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(FineTuneError::Params(format!("scale {} must be positive", self.scale)));
        }
        Ok(())
    }
}

/// Whether a parameter tensor takes part in fine-tuning: conv weights and
/// batch-norm affine parameters. Conv biases and running statistics do not.
pub fn is_tunable(kind: ParamKind) -> bool {
    matches!(kind, ParamKind::ConvWeight | ParamKind::BnGamma | ParamKind::BnBeta)
}

/// Entries selected for a tensor of `count` scalars.
pub fn mask_size(count: usize, percentage: f64) -> usize {
    ((percentage * count as f64 - 1e-9).ceil().max(1.0) as usize).min(count)
}

/// A binary mask over `count` entries with exactly `mask_size` ones.
pub fn draw_mask(count: usize, percentage: f64, rng_seed: u64) -> Vec<bool> {
    let mut mask = vec![false; count];
    let mut rng = seed::rng(rng_seed);
    for i in index::sample(&mut rng, count, mask_size(count, percentage)) {
        mask[i] = true;
    }
    mask
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MutationLog {
    /// Tunable tensors and the number of entries changed in each.
    pub changed: Vec<(ParamId, usize)>,
    /// Tensors left alone because every entry is zero.
    pub skipped_zero: Vec<ParamId>,
}

impl MutationLog {
    pub fn total_changed(&self) -> usize {
        self.changed.iter().map(|(_, n)| n).sum()
    }
}

/// Shift a random `percentage` of every tunable tensor by
/// `±alpha · max|theta| / scale`, with `max` taken over that tensor.
pub fn weight_mutate(
    net: &Network,
    percentage: f64,
    scale: f64,
    alpha_mode: AlphaMode,
    rng_seed: u64,
) -> (Network, MutationLog) {
    let mut out = net.clone();
    let mut log = MutationLog::default();
    for (t, (id, values)) in out.param_tensors_mut().into_iter().enumerate() {
        if !is_tunable(id.kind) || values.is_empty() {
            continue;
        }
        let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max == 0.0 {
            log::debug!("fine-tune: skipping all-zero tensor {id:?}");
            log.skipped_zero.push(id);
            continue;
        }
        let tensor_seed = seed::derive(rng_seed, &[t as u64]);
        let mask = draw_mask(values.len(), percentage, tensor_seed);
        let mut rng = seed::rng(seed::derive(tensor_seed, &[1]));
        let step = max / scale;
        let mut changed = 0;
        for (v, _) in values.iter_mut().zip(&mask).filter(|(_, &m)| m) {
            let alpha = match alpha_mode {
                AlphaMode::FixedOne => 1.0,
                AlphaMode::Uniform01 => 1.0 - rng.gen::<f64>(),
            };
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            *v += sign * alpha * step;
            changed += 1;
        }
        log.changed.push((id, changed));
    }
    (out, log)
}

/// Mutate every member network of an ensemble.
pub fn mutate_ensemble(model: &EnsembleModel, params: &FineTuneParams, rng_seed: u64) -> (EnsembleModel, usize) {
    let mut out = model.clone();
    let mut changed = 0;
    for (i, m) in out.members.iter_mut().enumerate() {
        let (net, log) = weight_mutate(
            &m.network,
            params.percentage,
            params.scale,
            params.alpha_mode,
            seed::derive(rng_seed, &[i as u64]),
        );
        m.network = net;
        changed += log.total_changed();
    }
    (out, changed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneGeneration {
    pub generation: usize,
    pub best_fitness: f64,
    /// Weights changed by each child's mutation in this generation.
    pub changed_weight_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneOutcome {
    pub model: EnsembleModel,
    pub initial_fitness: f64,
    pub final_fitness: f64,
    /// Generation 0 is the initial population.
    pub history: Vec<FineTuneGeneration>,
}

fn evaluate_all<F, E>(variants: &[EnsembleModel], fitness_fn: &F, generation: usize) -> Result<Vec<f64>, FineTuneError>
where
    F: Fn(&EnsembleModel) -> Result<f64, E> + Sync,
    E: Display,
{
    let results: Vec<Result<f64, String>> = variants
        .par_iter()
        .map(|v| fitness_fn(v).map_err(|e| e.to_string()))
        .collect();
    results
        .into_iter()
        .enumerate()
        .map(|(variant, r)| match r {
            Ok(f) if f.is_finite() => Ok(f),
            Ok(f) => Err(FineTuneError::Evaluation { generation, variant, message: format!("non-finite fitness {f}") }),
            Err(message) => Err(FineTuneError::Evaluation { generation, variant, message }),
        })
        .collect()
}

/// Elitist weight-mutation search.
///
/// With zero generations the input is returned as is. Otherwise the
/// population starts as the input plus `population_size - 1` mutations
/// of it. Every generation mutates each member once, pools parents and
/// children, and keeps the `population_size` fittest (parents win ties).
/// The fittest variant is returned, so the result is never worse than the
/// input. `fitness_fn` must not train; higher is better.
pub fn fine_tune<F, E>(
    model: &EnsembleModel,
    params: &FineTuneParams,
    fitness_fn: F,
    rng_seed: u64,
) -> Result<FineTuneOutcome, FineTuneError>
where
    F: Fn(&EnsembleModel) -> Result<f64, E> + Sync,
    E: Display,
{
    params.validate()?;
    if params.generations == 0 {
        let f = evaluate_all(std::slice::from_ref(model), &fitness_fn, 0)?[0];
        return Ok(FineTuneOutcome {
            model: model.clone(),
            initial_fitness: f,
            final_fitness: f,
            history: vec![FineTuneGeneration { generation: 0, best_fitness: f, changed_weight_counts: Vec::new() }],
        });
    }
    let n_p = params.population_size;
    let mut population = vec![model.clone()];
    let mut counts = Vec::new();
    for i in 1..n_p {
        let (m, c) = mutate_ensemble(model, params, seed::derive(rng_seed, &[0, i as u64]));
        population.push(m);
        counts.push(c);
    }
    let mut fitness = evaluate_all(&population, &fitness_fn, 0)?;
    let initial_fitness = fitness[0];
    let best_of = |f: &[f64]| f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut history = vec![FineTuneGeneration {
        generation: 0,
        best_fitness: best_of(&fitness),
        changed_weight_counts: counts,
    }];
    for generation in 1..=params.generations {
        let mut children = Vec::with_capacity(n_p);
        let mut counts = Vec::with_capacity(n_p);
        for (i, parent) in population.iter().enumerate() {
            let (c, n) = mutate_ensemble(parent, params, seed::derive(rng_seed, &[generation as u64, i as u64]));
            children.push(c);
            counts.push(n);
        }
        let child_fitness = evaluate_all(&children, &fitness_fn, generation)?;
        let mut pool: Vec<(EnsembleModel, f64)> = population
            .into_iter()
            .zip(fitness)
            .chain(children.into_iter().zip(child_fitness))
            .collect();
        // stable sort keeps parents ahead of equally fit children
        pool.sort_by(|a, b| b.1.total_cmp(&a.1));
        pool.truncate(n_p);
        (population, fitness) = pool.into_iter().unzip();
        history.push(FineTuneGeneration {
            generation,
            best_fitness: fitness[0],
            changed_weight_counts: counts,
        });
        log::info!("fine-tune generation {generation}: best fitness {:.6}", fitness[0]);
    }
    let best = (0..population.len()).max_by(|&a, &b| fitness[a].total_cmp(&fitness[b]).then(b.cmp(&a))).unwrap();
    Ok(FineTuneOutcome {
        final_fitness: fitness[best],
        model: population.swap_remove(best),
        initial_fitness,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{Member, VotingRule};
    use crate::ndnet::{BatchNorm1d, Conv1d, Layer};

    fn net(seed_: u64) -> Network {
        let mut rng = seed::rng(seed_);
        Network::new(
            vec![
                Layer::Conv1d(Conv1d::init_uniform(4, 16, 3, 1, &mut rng)),
                Layer::Batchnorm1d(BatchNorm1d::new(16)),
                Layer::Relu,
                Layer::Conv1d(Conv1d::init_uniform(16, 4, 3, 1, &mut rng)),
            ],
            (4, 6),
        )
        .unwrap()
    }

    fn diff(a: &Network, b: &Network) -> Vec<(ParamId, usize, f64, f64)> {
        let mut out = Vec::new();
        for ((id, x), (_, y)) in a.param_tensors().into_iter().zip(b.param_tensors()) {
            let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let n = x.iter().zip(y).filter(|(p, q)| p != q).count();
            let worst = x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            out.push((id, n, worst, max));
        }
        out
    }

    #[test]
    fn exact_count_and_bounded_step() {
        let a = net(1);
        for s in 0..20 {
            let (b, log) = weight_mutate(&a, 0.02, 256.0, AlphaMode::Uniform01, s);
            for (id, n, worst, max) in diff(&a, &b) {
                let count = a.param_tensors().iter().find(|(i, _)| *i == id).unwrap().1.len();
                if is_tunable(id.kind) && max > 0.0 {
                    assert_eq!(n, (0.02 * count as f64).ceil() as usize, "{id:?}");
                    assert!(worst <= max / 256.0, "{id:?}");
                } else {
                    assert_eq!(n, 0);
                }
            }
            // the fresh batch-norm shift is all zero and skipped
            assert_eq!(log.changed.len(), 3);
            assert_eq!(log.skipped_zero, vec![ParamId { layer: 1, kind: ParamKind::BnBeta }]);
        }
    }

    #[test]
    fn fixed_alpha_steps_exactly() {
        let mut c = Conv1d::zeros(2, 2, 1, 0);
        c.weight = vec![0.5, -0.25, 0.1, 0.0];
        let a = Network::new(vec![Layer::Conv1d(c)], (2, 3)).unwrap();
        let (b, _) = weight_mutate(&a, 1.0, 256.0, AlphaMode::FixedOne, 3);
        let wa = a.param_tensors()[0].1.to_vec();
        let wb = b.param_tensors()[0].1.to_vec();
        for (x, y) in wa.iter().zip(&wb) {
            assert!(((x - y).abs() - 0.5 / 256.0).abs() < 1e-15);
        }
        assert_eq!(b.param_tensors()[1].1, a.param_tensors()[1].1);
    }

    #[test]
    fn full_mask_changes_every_weight() {
        let a = net(2);
        let (b, log) = weight_mutate(&a, 1.0, 64.0, AlphaMode::Uniform01, 9);
        let tunable: usize = a
            .param_tensors()
            .iter()
            .filter(|(id, t)| is_tunable(id.kind) && t.iter().any(|&v| v != 0.0))
            .map(|(_, t)| t.len())
            .sum();
        let changed: usize = diff(&a, &b).iter().map(|d| d.1).sum();
        assert_eq!(changed, tunable);
        assert_eq!(log.total_changed(), tunable);
    }

    #[test]
    fn zero_tensor_is_skipped_and_logged() {
        let a = Network::new(vec![Layer::Conv1d(Conv1d::zeros(2, 2, 1, 0))], (2, 3)).unwrap();
        let (b, log) = weight_mutate(&a, 0.5, 256.0, AlphaMode::FixedOne, 0);
        assert_eq!(a, b);
        assert_eq!(log.skipped_zero.len(), 1);
    }

    #[test]
    fn running_stats_untouched() {
        let a = net(4);
        let (b, _) = weight_mutate(&a, 1.0, 2.0, AlphaMode::FixedOne, 1);
        match (&a.layers()[1], &b.layers()[1]) {
            (Layer::Batchnorm1d(x), Layer::Batchnorm1d(y)) => {
                assert_eq!(x.running_mean, y.running_mean);
                assert_eq!(x.running_var, y.running_var);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn mask_overlap_matches_hypergeometric_mean() {
        // two masks of size m over n entries overlap by m^2/n on average
        let (n, p) = (400, 0.1);
        let m = mask_size(n, p);
        let draws = 1000;
        let mut total = 0usize;
        for d in 0..draws {
            let a = draw_mask(n, p, seed::derive(7, &[d, 0]));
            let b = draw_mask(n, p, seed::derive(7, &[d, 1]));
            total += a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        }
        let mean = total as f64 / draws as f64;
        let expected = (m * m) as f64 / n as f64;
        // hypergeometric variance m^2 (n-m)^2 / (n^2 (n-1)); 5 sigma of the mean
        let var = (m * m) as f64 * ((n - m) * (n - m)) as f64 / ((n * n) as f64 * (n - 1) as f64);
        let tol = 5.0 * (var / draws as f64).sqrt();
        assert!((mean - expected).abs() < tol, "mean {mean}, expected {expected} ± {tol}");
    }

    fn ensemble() -> EnsembleModel {
        EnsembleModel {
            members: vec![
                Member { group_index: 0, group: (0..6).collect(), network: net(5), threshold: 0.0 },
                Member { group_index: 1, group: (0..6).collect(), network: net(6), threshold: 0.0 },
            ],
            voting: VotingRule::Majority,
            stride: 1,
        }
    }

    /// Prefers small first-layer weights.
    fn l2_fitness(m: &EnsembleModel) -> Result<f64, String> {
        Ok(-m.members.iter().map(|x| x.network.param_tensors()[0].1.iter().map(|w| w * w).sum::<f64>()).sum::<f64>())
    }

    #[test]
    fn zero_generations_returns_input() {
        let e = ensemble();
        let params = FineTuneParams { population_size: 4, generations: 0, ..Default::default() };
        let r = fine_tune(&e, &params, l2_fitness, 1).unwrap();
        assert_eq!(r.model, e);
    }

    #[test]
    fn elitist_search_is_monotone() {
        let e = ensemble();
        let params = FineTuneParams { population_size: 6, generations: 10, percentage: 0.2, scale: 16.0, alpha_mode: AlphaMode::Uniform01 };
        let r = fine_tune(&e, &params, l2_fitness, 2).unwrap();
        assert!(r.history.windows(2).all(|w| w[1].best_fitness >= w[0].best_fitness));
        assert!(r.final_fitness > r.initial_fitness);
        assert_eq!(r.final_fitness, l2_fitness(&r.model).unwrap());
        assert_eq!(r, fine_tune(&e, &params, l2_fitness, 2).unwrap());
    }

    #[test]
    fn default_params_match_table() {
        let p = FineTuneParams::default();
        assert_eq!((p.population_size, p.percentage, p.generations), (32, 0.02, 64));
        assert_eq!(p.scale, 256.0);
    }
}
