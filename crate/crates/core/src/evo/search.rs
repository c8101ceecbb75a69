use std::collections::HashMap;
use std::fmt::Display;
use std::hash::Hash;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::groups::{crossover_groups, mutate_groups, SubgroupSolution};
use super::models::{crossover_models, mutate_model, select_diverse_indices};
use super::{EnsembleGenome, EvoError, GaParams};
use crate::genome::{random_genome, GenomeBounds, ModelGenome};
use crate::seed::{self, stream};

/// Path element reserved for fitness-evaluation seeds.
const EVAL: u64 = u64::MAX;

/// State after `generation` completed generations of subgroup search;
/// generation 0 is the scored initial population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheckpoint {
    pub master_seed: u64,
    pub generation: usize,
    pub population: Vec<SubgroupSolution>,
    pub fitness: Vec<f64>,
    /// Best fitness of every generation so far, starting at generation 0.
    pub best_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupSearch {
    /// Final population, fittest first.
    pub ranked: Vec<(SubgroupSolution, f64)>,
    pub best_history: Vec<f64>,
}

/// Model search state: groups before `group` are finished, and `group` has
/// completed `generation` generations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub master_seed: u64,
    pub group: usize,
    pub generation: usize,
    pub ensemble: EnsembleGenome,
    pub population: Vec<ModelGenome>,
    pub fitness: Vec<f64>,
    /// Best-fitness histories of the finished groups (empty for empty groups).
    pub histories: Vec<Vec<f64>>,
    pub current_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSearch {
    pub ensemble: EnsembleGenome,
    /// Per group, best fitness of every generation; empty for empty groups.
    pub histories: Vec<Vec<f64>>,
    /// Per group, fitness of the chosen genome (`None` for empty groups).
    pub best_fitness: Vec<Option<f64>>,
}

/// Score every member, evaluating each distinct individual once and in
/// parallel. Results are assembled by member index.
fn score<T, F>(
    population: &[T],
    cache: &mut HashMap<T, f64>,
    eval: F,
) -> Result<Vec<f64>, (usize, String)>
where
    T: Clone + Eq + Hash + Sync,
    F: Fn(&T) -> Result<f64, String> + Sync,
{
    let mut todo: Vec<usize> = Vec::new();
    {
        let mut pending: HashMap<&T, ()> = HashMap::new();
        for (i, m) in population.iter().enumerate() {
            if !cache.contains_key(m) && pending.insert(m, ()).is_none() {
                todo.push(i);
            }
        }
    }
    let results: Vec<Result<f64, String>> = todo.par_iter().map(|&i| eval(&population[i])).collect();
    for (&i, r) in todo.iter().zip(results) {
        let f = r.map_err(|e| (i, e))?;
        if !f.is_finite() {
            return Err((i, format!("non-finite fitness {f}")));
        }
        cache.insert(population[i].clone(), f);
    }
    Ok(population.iter().map(|m| cache[m]).collect())
}

/// Member indices sorted fittest first; ties keep member order.
fn ranking(fitness: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..fitness.len()).collect();
    order.sort_by(|&a, &b| fitness[b].total_cmp(&fitness[a]).then(a.cmp(&b)));
    order
}

fn best(fitness: &[f64]) -> f64 {
    fitness.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Generational GA over subgroup solutions.
///
/// Parents are the `parents_mating` fittest members; consecutive parent
/// pairs (cyclically) produce crossover children that are then mutated.
/// The fittest member always survives unchanged. `fitness_fn` receives the
/// run's evaluation seed, which is the same for every member, so fitness is
/// a pure function of the solution.
#[allow(clippy::too_many_arguments)]
pub fn evolve_groups<F, E>(
    initial: Vec<SubgroupSolution>,
    params: &GaParams,
    n_features: usize,
    min_coverage: f64,
    master_seed: u64,
    fitness_fn: F,
    on_checkpoint: &mut dyn FnMut(&GroupCheckpoint) -> Result<(), String>,
) -> Result<GroupSearch, EvoError>
where
    F: Fn(&SubgroupSolution, u64) -> Result<f64, E> + Sync,
    E: Display,
{
    params.validate()?;
    if initial.is_empty() {
        return Err(EvoError::Config("initial population is empty".into()));
    }
    for s in &initial {
        s.validate(n_features, min_coverage)?;
    }
    let eval_seed = seed::derive(master_seed, &[stream::GROUP_EVOLUTION, EVAL]);
    let mut cache = HashMap::new();
    let fitness = score(&initial, &mut cache, |s| {
        fitness_fn(s, eval_seed).map_err(|e| e.to_string())
    })
    .map_err(|(member, message)| EvoError::Fitness { generation: 0, member, message })?;
    let state = GroupCheckpoint {
        master_seed,
        generation: 0,
        best_history: vec![best(&fitness)],
        population: initial,
        fitness,
    };
    on_checkpoint(&state).map_err(EvoError::Checkpoint)?;
    run_groups(state, cache, params, n_features, min_coverage, &fitness_fn, on_checkpoint)
}

/// Continue a subgroup search from a checkpoint. Gives the same result as
/// the uninterrupted run with the same parameters and fitness function.
pub fn resume_groups<F, E>(
    checkpoint: GroupCheckpoint,
    params: &GaParams,
    n_features: usize,
    min_coverage: f64,
    fitness_fn: F,
    on_checkpoint: &mut dyn FnMut(&GroupCheckpoint) -> Result<(), String>,
) -> Result<GroupSearch, EvoError>
where
    F: Fn(&SubgroupSolution, u64) -> Result<f64, E> + Sync,
    E: Display,
{
    params.validate()?;
    if checkpoint.population.len() != checkpoint.fitness.len() {
        return Err(EvoError::Contract("checkpoint population and fitness lengths differ".into()));
    }
    let cache = checkpoint
        .population
        .iter()
        .cloned()
        .zip(checkpoint.fitness.iter().copied())
        .collect();
    run_groups(checkpoint, cache, params, n_features, min_coverage, &fitness_fn, on_checkpoint)
}

fn run_groups<F, E>(
    mut state: GroupCheckpoint,
    mut cache: HashMap<SubgroupSolution, f64>,
    params: &GaParams,
    n_features: usize,
    min_coverage: f64,
    fitness_fn: &F,
    on_checkpoint: &mut dyn FnMut(&GroupCheckpoint) -> Result<(), String>,
) -> Result<GroupSearch, EvoError>
where
    F: Fn(&SubgroupSolution, u64) -> Result<f64, E> + Sync,
    E: Display,
{
    let eval_seed = seed::derive(state.master_seed, &[stream::GROUP_EVOLUTION, EVAL]);
    while state.generation < params.generations {
        let generation = state.generation + 1;
        let gen_seed = seed::derive(state.master_seed, &[stream::GROUP_EVOLUTION, generation as u64]);
        let order = ranking(&state.fitness);
        let n_par = params.parents_mating.min(order.len());
        let parents: Vec<&SubgroupSolution> = order[..n_par].iter().map(|&i| &state.population[i]).collect();
        let mut next = vec![state.population[order[0]].clone()];
        let mut pair = 0u64;
        while next.len() < params.population_size {
            let a = parents[pair as usize % n_par];
            let b = parents[(pair as usize + 1) % n_par];
            let (c1, c2) = crossover_groups(a, b, n_features, min_coverage, seed::derive(gen_seed, &[pair, 0]))?;
            for (t, child) in [c1, c2].into_iter().enumerate() {
                if next.len() < params.population_size {
                    let s = seed::derive(gen_seed, &[pair, 1 + t as u64]);
                    next.push(mutate_groups(&child, params.mutation_probability, s));
                }
            }
            pair += 1;
        }
        let fitness = score(&next, &mut cache, |s| {
            fitness_fn(s, eval_seed).map_err(|e| e.to_string())
        })
        .map_err(|(member, message)| EvoError::Fitness { generation, member, message })?;
        state.best_history.push(best(&fitness));
        state.population = next;
        state.fitness = fitness;
        state.generation = generation;
        log::info!(
            "subgroup search generation {generation}: best fitness {:.6}",
            state.best_history.last().unwrap()
        );
        on_checkpoint(&state).map_err(EvoError::Checkpoint)?;
    }
    let ranked = ranking(&state.fitness)
        .into_iter()
        .map(|i| (state.population[i].clone(), state.fitness[i]))
        .collect();
    Ok(GroupSearch {
        ranked,
        best_history: state.best_history,
    })
}

/// Settings shared by every group's model search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSearchSpace {
    pub bounds: GenomeBounds,
    /// Weight of structural distance in diverse survivor selection, in rank units.
    pub lambda: f64,
}

impl Default for ModelSearchSpace {
    fn default() -> Self {
        Self {
            bounds: GenomeBounds::default(),
            lambda: 0.5,
        }
    }
}

/// Independent model-level GA for every non-empty group.
///
/// A group's initial population is its incumbent genome, mutations of it
/// filling the first half, and random genomes for the rest. Survivors are
/// chosen by diverse selection; crossover children of survivor pairs are
/// mutated with `mutation_probability`. The winner replaces the group's
/// genome. `fitness_fn(group, genome, seed)` scores one genome on one group.
pub fn evolve_models<F, E>(
    ensemble: &EnsembleGenome,
    params: &GaParams,
    space: &ModelSearchSpace,
    master_seed: u64,
    fitness_fn: F,
    on_checkpoint: &mut dyn FnMut(&ModelCheckpoint) -> Result<(), String>,
) -> Result<ModelSearch, EvoError>
where
    F: Fn(usize, &ModelGenome, u64) -> Result<f64, E> + Sync,
    E: Display,
{
    params.validate()?;
    ensemble.validate()?;
    space.bounds.validate()?;
    run_models(
        ensemble.clone(),
        master_seed,
        0,
        None,
        Vec::new(),
        params,
        space,
        &fitness_fn,
        on_checkpoint,
    )
}

/// Continue a model search from a checkpoint.
pub fn resume_models<F, E>(
    checkpoint: ModelCheckpoint,
    params: &GaParams,
    space: &ModelSearchSpace,
    fitness_fn: F,
    on_checkpoint: &mut dyn FnMut(&ModelCheckpoint) -> Result<(), String>,
) -> Result<ModelSearch, EvoError>
where
    F: Fn(usize, &ModelGenome, u64) -> Result<f64, E> + Sync,
    E: Display,
{
    params.validate()?;
    checkpoint.ensemble.validate()?;
    if checkpoint.population.len() != checkpoint.fitness.len() || checkpoint.histories.len() != checkpoint.group {
        return Err(EvoError::Contract("inconsistent model checkpoint".into()));
    }
    let group = checkpoint.group;
    let state = GroupState {
        generation: checkpoint.generation,
        population: checkpoint.population,
        fitness: checkpoint.fitness,
        history: checkpoint.current_history,
    };
    run_models(
        checkpoint.ensemble,
        checkpoint.master_seed,
        group,
        Some(state),
        checkpoint.histories,
        params,
        space,
        &fitness_fn,
        on_checkpoint,
    )
}

struct GroupState {
    generation: usize,
    population: Vec<ModelGenome>,
    fitness: Vec<f64>,
    history: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn run_models<F, E>(
    mut ensemble: EnsembleGenome,
    master_seed: u64,
    start_group: usize,
    mut resumed: Option<GroupState>,
    mut histories: Vec<Vec<f64>>,
    params: &GaParams,
    space: &ModelSearchSpace,
    fitness_fn: &F,
    on_checkpoint: &mut dyn FnMut(&ModelCheckpoint) -> Result<(), String>,
) -> Result<ModelSearch, EvoError>
where
    F: Fn(usize, &ModelGenome, u64) -> Result<f64, E> + Sync,
    E: Display,
{
    let k = ensemble.solution.k();
    let mut best_fitness: Vec<Option<f64>> = vec![None; k];
    for g in start_group..k {
        if ensemble.solution.groups[g].is_empty() {
            histories.push(Vec::new());
            continue;
        }
        let group_seed = seed::derive(master_seed, &[stream::MODEL_EVOLUTION, g as u64]);
        let eval_seed = seed::derive(group_seed, &[EVAL]);
        let evaluate = |genome: &ModelGenome| fitness_fn(g, genome, eval_seed).map_err(|e| e.to_string());
        let mut cache = HashMap::new();
        let mut st = match resumed.take() {
            Some(st) => {
                for (m, f) in st.population.iter().zip(&st.fitness) {
                    cache.insert(m.clone(), *f);
                }
                st
            }
            None => {
                let population = initial_models(&ensemble.genomes[g], params.population_size, &space.bounds, group_seed)?;
                let fitness = score(&population, &mut cache, evaluate).map_err(|(member, message)| {
                    EvoError::ModelFitness { group: g, generation: 0, member, message }
                })?;
                let st = GroupState {
                    generation: 0,
                    history: vec![best(&fitness)],
                    population,
                    fitness,
                };
                emit(on_checkpoint, master_seed, g, &ensemble, &st, &histories)?;
                st
            }
        };
        while st.generation < params.generations {
            let generation = st.generation + 1;
            let gen_seed = seed::derive(group_seed, &[generation as u64]);
            let scored: Vec<(ModelGenome, f64)> = st.population.iter().cloned().zip(st.fitness.iter().copied()).collect();
            let n_par = params.parents_mating.min(scored.len());
            let survivors = select_diverse_indices(&scored, n_par, space.lambda)?;
            let mut next: Vec<ModelGenome> = survivors.iter().map(|&i| scored[i].0.clone()).collect();
            let mut pair = 0u64;
            while next.len() < params.population_size {
                let a = &scored[survivors[pair as usize % n_par]].0;
                let b = &scored[survivors[(pair as usize + 1) % n_par]].0;
                let (c1, c2) = crossover_models(a, b, seed::derive(gen_seed, &[pair, 0]));
                for (t, child) in [c1, c2].into_iter().enumerate() {
                    if next.len() < params.population_size {
                        let mut rng = seed::rng(seed::derive(gen_seed, &[pair, 1 + t as u64]));
                        let child = if rng.gen_bool(params.mutation_probability) {
                            mutate_model(&child, &space.bounds, rng.gen())
                        } else {
                            child
                        };
                        next.push(child);
                    }
                }
                pair += 1;
            }
            let fitness = score(&next, &mut cache, evaluate).map_err(|(member, message)| {
                EvoError::ModelFitness { group: g, generation, member, message }
            })?;
            st.history.push(best(&fitness));
            st.population = next;
            st.fitness = fitness;
            st.generation = generation;
            log::info!(
                "model search group {g} generation {generation}: best fitness {:.6}",
                st.history.last().unwrap()
            );
            emit(on_checkpoint, master_seed, g, &ensemble, &st, &histories)?;
        }
        let winner = ranking(&st.fitness)[0];
        ensemble.genomes[g] = st.population[winner].clone();
        best_fitness[g] = Some(st.fitness[winner]);
        histories.push(st.history);
    }
    // groups finished before a resume point keep their recorded best
    for (g, h) in histories.iter().enumerate().take(start_group) {
        best_fitness[g] = h.last().copied();
    }
    Ok(ModelSearch {
        ensemble,
        histories,
        best_fitness,
    })
}

fn emit(
    on_checkpoint: &mut dyn FnMut(&ModelCheckpoint) -> Result<(), String>,
    master_seed: u64,
    group: usize,
    ensemble: &EnsembleGenome,
    st: &GroupState,
    histories: &[Vec<f64>],
) -> Result<(), EvoError> {
    on_checkpoint(&ModelCheckpoint {
        master_seed,
        group,
        generation: st.generation,
        ensemble: ensemble.clone(),
        population: st.population.clone(),
        fitness: st.fitness.clone(),
        histories: histories.to_vec(),
        current_history: st.history.clone(),
    })
    .map_err(EvoError::Checkpoint)
}

fn initial_models(
    incumbent: &ModelGenome,
    size: usize,
    bounds: &GenomeBounds,
    group_seed: u64,
) -> Result<Vec<ModelGenome>, EvoError> {
    let half = size.div_ceil(2);
    let mut population = vec![incumbent.clone()];
    for i in 1..half {
        population.push(mutate_model(incumbent, bounds, seed::derive(group_seed, &[u64::MAX - 1, i as u64])));
    }
    for i in population.len()..size {
        population.push(random_genome(seed::derive(group_seed, &[u64::MAX - 2, i as u64]), bounds)?);
    }
    Ok(population)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evo::init_population_random;
    use crate::genome::{self, presets};

    /// Fitness rewarding solutions that group features by parity.
    fn parity_fitness(s: &SubgroupSolution, _seed: u64) -> Result<f64, String> {
        let mut penalty = 0.0;
        for g in &s.groups {
            let odd = g.iter().filter(|&&f| f % 2 == 1).count();
            penalty += odd.min(g.len() - odd) as f64 + if g.is_empty() { 1.0 } else { 0.0 };
        }
        Ok(-penalty)
    }

    fn quick() -> GaParams {
        GaParams {
            population_size: 8,
            parents_mating: 4,
            mutation_probability: 0.5,
            generations: 12,
        }
    }

    #[test]
    fn zero_generations_returns_scored_initial() {
        let init = init_population_random(8, 2, 5, 1).unwrap();
        let params = GaParams { generations: 0, population_size: 5, ..quick() };
        let r = evolve_groups(init.clone(), &params, 8, 1.0, 3, parity_fitness, &mut |_| Ok(())).unwrap();
        assert_eq!(r.ranked.len(), 5);
        assert!(r.ranked.windows(2).all(|w| w[0].1 >= w[1].1));
        for (s, f) in &r.ranked {
            assert!(init.contains(s));
            assert_eq!(*f, parity_fitness(s, 0).unwrap());
        }
    }

    #[test]
    fn group_search_is_elitist_and_improves() {
        let init = init_population_random(10, 2, 8, 4).unwrap();
        let r = evolve_groups(init, &quick(), 10, 1.0, 9, parity_fitness, &mut |_| Ok(())).unwrap();
        assert_eq!(r.best_history.len(), 13);
        assert!(r.best_history.windows(2).all(|w| w[1] >= w[0]), "{:?}", r.best_history);
        assert!(r.best_history.last() > r.best_history.first());
        r.ranked[0].0.validate(10, 1.0).unwrap();
    }

    #[test]
    fn group_search_resume_matches_uninterrupted() {
        let init = init_population_random(10, 3, 8, 4).unwrap();
        let mut checkpoints = Vec::new();
        let full = evolve_groups(init, &quick(), 10, 1.0, 5, parity_fitness, &mut |c| {
            checkpoints.push(serde_json::to_string(c).unwrap());
            Ok(())
        })
        .unwrap();
        assert_eq!(checkpoints.len(), 13);
        for cut in [0, 4, 12] {
            let ck: GroupCheckpoint = serde_json::from_str(&checkpoints[cut]).unwrap();
            let resumed = resume_groups(ck, &quick(), 10, 1.0, parity_fitness, &mut |_| Ok(())).unwrap();
            assert_eq!(resumed, full);
        }
    }

    #[test]
    fn fitness_errors_carry_context() {
        let init = init_population_random(6, 2, 4, 0).unwrap();
        let params = GaParams { population_size: 4, parents_mating: 2, ..quick() };
        let err = evolve_groups(init, &params, 6, 1.0, 0, |_: &SubgroupSolution, _| Err::<f64, _>("boom"), &mut |_| Ok(()))
            .unwrap_err();
        assert!(matches!(err, EvoError::Fitness { generation: 0, member: 0, .. }));
    }

    #[test]
    fn evaluation_is_deterministic_under_parallelism() {
        let init = init_population_random(12, 3, 8, 2).unwrap();
        let a = evolve_groups(init.clone(), &quick(), 12, 1.0, 1, parity_fitness, &mut |_| Ok(())).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| evolve_groups(init, &quick(), 12, 1.0, 1, parity_fitness, &mut |_| Ok(())).unwrap());
        assert_eq!(a, b);
    }

    /// Prefers genomes with `target` genes and wide first layers.
    fn shape_fitness(target: usize) -> impl Fn(usize, &ModelGenome, u64) -> Result<f64, String> + Sync {
        move |_, g, _| Ok(-(g.len().abs_diff(target) as f64) + g.layers[0].out_channels as f64 / 1000.0)
    }

    fn model_params() -> GaParams {
        GaParams {
            population_size: 10,
            parents_mating: 4,
            mutation_probability: 0.5,
            generations: 6,
        }
    }

    #[test]
    fn model_search_per_group_elitist_and_valid() {
        let sol = SubgroupSolution::new(vec![vec![0, 1], vec![], vec![2, 3, 4]]);
        let base = genome::random_genome(1, &GenomeBounds::default()).unwrap();
        let ens = EnsembleGenome::uniform(sol, &base);
        let fitness = |g: usize, genome: &ModelGenome, s: u64| shape_fitness(if g == 0 { 2 } else { 6 })(g, genome, s);
        let r = evolve_models(&ens, &model_params(), &ModelSearchSpace::default(), 7, fitness, &mut |_| Ok(())).unwrap();
        assert!(r.histories[1].is_empty());
        assert_eq!(r.best_fitness[1], None);
        assert_eq!(r.ensemble.genomes[1], base);
        for g in [0, 2] {
            let h = &r.histories[g];
            assert_eq!(h.len(), 7);
            assert!(h.windows(2).all(|w| w[1] >= w[0]), "{h:?}");
            assert!(genome::is_valid(&r.ensemble.genomes[g]));
        }
        assert_eq!(r.ensemble.genomes[0].len(), 2);
        assert_eq!(r.ensemble.genomes[2].len(), 6);
        assert_ne!(r.ensemble.genomes[0], r.ensemble.genomes[2]);
    }

    #[test]
    fn model_search_resume_matches_uninterrupted() {
        let sol = SubgroupSolution::new(vec![vec![0, 1], vec![2, 3, 4]]);
        let ens = EnsembleGenome::uniform(sol, &presets::swat());
        let mut checkpoints = Vec::new();
        let fitness = shape_fitness(3);
        let full = evolve_models(&ens, &model_params(), &ModelSearchSpace::default(), 3, &fitness, &mut |c| {
            checkpoints.push(serde_json::to_string(c).unwrap());
            Ok(())
        })
        .unwrap();
        assert_eq!(checkpoints.len(), 14);
        for cut in [0, 3, 6, 7, 10, 13] {
            let ck: ModelCheckpoint = serde_json::from_str(&checkpoints[cut]).unwrap();
            let resumed = resume_models(ck, &model_params(), &ModelSearchSpace::default(), &fitness, &mut |_| Ok(())).unwrap();
            assert_eq!(resumed, full, "cut {cut}");
        }
    }

    #[test]
    fn initial_model_population_is_seeded_from_incumbent() {
        let inc = presets::wadi();
        let pop = initial_models(&inc, 24, &GenomeBounds::default(), 0).unwrap();
        assert_eq!(pop.len(), 24);
        assert_eq!(pop[0], inc);
        assert!(pop.iter().all(genome::is_valid));
    }
}
