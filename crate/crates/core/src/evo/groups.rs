use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cluster::{average_linkage, correlation_distance};
use super::EvoError;
use crate::datapipe::TimeSeriesDataset;
use crate::seed;

/// Feature indices split into `k` groups. Groups may overlap and may be
/// empty; each group is kept sorted.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubgroupSolution {
    pub groups: Vec<Vec<usize>>,
}

impl SubgroupSolution {
    pub fn new(mut groups: Vec<Vec<usize>>) -> Self {
        for g in &mut groups {
            g.sort_unstable();
        }
        Self { groups }
    }

    pub fn k(&self) -> usize {
        self.groups.len()
    }

    /// Number of distinct features in the union of all groups.
    pub fn covered_count(&self, n_features: usize) -> usize {
        let mut seen = vec![false; n_features];
        for &f in self.groups.iter().flatten() {
            if f < n_features {
                seen[f] = true;
            }
        }
        seen.into_iter().filter(|&b| b).count()
    }

    /// Check index range, in-group uniqueness and coverage of at least
    /// `min_coverage` of the `n_features` features.
    pub fn validate(&self, n_features: usize, min_coverage: f64) -> Result<(), EvoError> {
        for (gi, g) in self.groups.iter().enumerate() {
            if let Some(&f) = g.iter().find(|&&f| f >= n_features) {
                return Err(EvoError::Contract(format!(
                    "group {gi}: feature {f} out of range for {n_features} features"
                )));
            }
            if g.windows(2).any(|w| w[0] >= w[1]) {
                return Err(EvoError::Contract(format!(
                    "group {gi} is unsorted or repeats a feature"
                )));
            }
        }
        let covered = self.covered_count(n_features);
        if (covered as f64) < min_coverage * n_features as f64 - 1e-9 {
            return Err(EvoError::Contract(format!(
                "covers {covered} of {n_features} features, below {min_coverage}"
            )));
        }
        Ok(())
    }

    fn insert(&mut self, group: usize, f: usize) {
        let g = &mut self.groups[group];
        if let Err(pos) = g.binary_search(&f) {
            g.insert(pos, f);
        }
    }

    fn remove(&mut self, group: usize, f: usize) {
        let g = &mut self.groups[group];
        if let Ok(pos) = g.binary_search(&f) {
            g.remove(pos);
        }
    }

    /// Add uncovered features, lowest index first, to the currently smallest
    /// group until `min_coverage` holds.
    fn repair_coverage(&mut self, n_features: usize, min_coverage: f64) {
        if self.groups.is_empty() {
            return;
        }
        let mut seen = vec![false; n_features];
        for &f in self.groups.iter().flatten() {
            seen[f] = true;
        }
        let mut covered = seen.iter().filter(|&&b| b).count();
        let target = (min_coverage * n_features as f64 - 1e-9).ceil().max(0.0) as usize;
        for f in 0..n_features {
            if covered >= target {
                break;
            }
            if !seen[f] {
                let smallest = (0..self.k()).min_by_key(|&i| self.groups[i].len()).unwrap();
                self.insert(smallest, f);
                covered += 1;
            }
        }
    }
}

fn check_k(n_features: usize, k: usize) -> Result<(), EvoError> {
    if k == 0 {
        return Err(EvoError::Config("k must be at least 1".into()));
    }
    if n_features < k {
        return Err(EvoError::Config(format!("{n_features} features cannot fill {k} groups")));
    }
    Ok(())
}

/// Initial subgroup population from correlation clustering.
///
/// Sensors are clustered by `1 - |r|` with average linkage and cut at `k`
/// clusters; each member then independently reassigns every feature, with
/// probability `jitter`, to a uniformly random group.
pub fn init_population_clustered(
    train: &TimeSeriesDataset,
    k: usize,
    population_size: usize,
    jitter: f64,
    rng_seed: u64,
) -> Result<Vec<SubgroupSolution>, EvoError> {
    check_k(train.sensors(), k)?;
    if population_size == 0 {
        return Err(EvoError::Config("population_size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&jitter) {
        return Err(EvoError::Config(format!("jitter {jitter} outside [0, 1]")));
    }
    let base = SubgroupSolution::new(average_linkage(&correlation_distance(train), k));
    Ok((0..population_size)
        .map(|m| {
            let mut rng = seed::rng(seed::derive(rng_seed, &[m as u64]));
            let mut s = base.clone();
            for f in 0..train.sensors() {
                if rng.gen_bool(jitter) {
                    let to = rng.gen_range(0..k);
                    for g in 0..k {
                        s.remove(g, f);
                    }
                    s.insert(to, f);
                }
            }
            s
        })
        .collect())
}

/// Random partitions: each feature is placed in one uniformly chosen group.
pub fn init_population_random(
    n_features: usize,
    k: usize,
    population_size: usize,
    rng_seed: u64,
) -> Result<Vec<SubgroupSolution>, EvoError> {
    check_k(n_features, k)?;
    Ok((0..population_size)
        .map(|m| {
            let mut rng = seed::rng(seed::derive(rng_seed, &[m as u64]));
            let mut groups = vec![Vec::new(); k];
            for f in 0..n_features {
                groups[rng.gen_range(0..k)].push(f);
            }
            SubgroupSolution::new(groups)
        })
        .collect())
}

/// Each group mutates with probability `p_m`: one of its features is moved,
/// or with probability 0.5 copied, into another group that lacks it.
///
/// Which groups mutate, and which feature and target each picks, are all
/// drawn from the input solution, so the operations do not interact.
pub fn mutate_groups(s: &SubgroupSolution, p_m: f64, rng_seed: u64) -> SubgroupSolution {
    let mut rng = seed::rng(rng_seed);
    let k = s.k();
    let mut ops = Vec::new();
    for i in 0..k {
        if !rng.gen_bool(p_m.clamp(0.0, 1.0)) || s.groups[i].is_empty() || k < 2 {
            continue;
        }
        let f = *s.groups[i].choose(&mut rng).unwrap();
        let targets: Vec<usize> = (0..k)
            .filter(|&j| j != i && s.groups[j].binary_search(&f).is_err())
            .collect();
        let duplicate = rng.gen_bool(0.5);
        if let Some(&to) = targets.choose(&mut rng) {
            ops.push((i, f, to, duplicate));
        }
    }
    let mut out = s.clone();
    for (from, f, to, duplicate) in ops {
        out.insert(to, f);
        if !duplicate {
            out.remove(from, f);
        }
    }
    out
}

/// Single-point crossover on the group axis at `cut`, followed by coverage
/// repair. `cut = 0` swaps the parents entirely.
pub fn crossover_groups_at(
    a: &SubgroupSolution,
    b: &SubgroupSolution,
    cut: usize,
    n_features: usize,
    min_coverage: f64,
) -> Result<(SubgroupSolution, SubgroupSolution), EvoError> {
    if a.k() != b.k() {
        return Err(EvoError::Contract(format!(
            "crossover of solutions with k = {} and k = {}",
            a.k(),
            b.k()
        )));
    }
    let cut = cut.min(a.k());
    let splice = |x: &SubgroupSolution, y: &SubgroupSolution| {
        let mut c = SubgroupSolution {
            groups: x.groups[..cut]
                .iter()
                .chain(&y.groups[cut..])
                .cloned()
                .collect(),
        };
        c.repair_coverage(n_features, min_coverage);
        c
    };
    Ok((splice(a, b), splice(b, a)))
}

/// [`crossover_groups_at`] with a uniformly drawn cut in `0..k`.
pub fn crossover_groups(
    a: &SubgroupSolution,
    b: &SubgroupSolution,
    n_features: usize,
    min_coverage: f64,
    rng_seed: u64,
) -> Result<(SubgroupSolution, SubgroupSolution), EvoError> {
    let cut = seed::rng(rng_seed).gen_range(0..a.k().max(1));
    crossover_groups_at(a, b, cut, n_features, min_coverage)
}
