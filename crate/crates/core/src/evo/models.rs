use rand::Rng;

use super::EvoError;
use crate::genome::{self, GenomeBounds, LayerGene, ModelGenome, CHANNEL_LIMITS, KERNEL_LIMITS, LAYER_LIMITS};
use crate::seed;

const MAX_ATTEMPTS: usize = 256;

#[derive(Clone, Copy, Debug)]
enum Feature {
    OutChannels,
    KernelSize,
    Padding,
    AddLayer,
    RemoveLayer,
    WindowSize,
}

const FEATURES: [Feature; 6] = [
    Feature::OutChannels,
    Feature::KernelSize,
    Feature::Padding,
    Feature::AddLayer,
    Feature::RemoveLayer,
    Feature::WindowSize,
];

/// Widen `[lo, hi]` so it contains `current`, then clip to `limits`.
fn span(lo: usize, hi: usize, current: usize, limits: (usize, usize)) -> (usize, usize) {
    (lo.min(current).max(limits.0), hi.max(current).min(limits.1))
}

fn try_mutate<R: Rng>(g: &ModelGenome, bounds: &GenomeBounds, rng: &mut R) -> Option<ModelGenome> {
    let n = g.layers.len();
    let feature = FEATURES[rng.gen_range(0..FEATURES.len())];
    let mut out = g.clone();
    match feature {
        Feature::OutChannels => {
            // the terminal gene's width is tied to the window
            let i = rng.gen_range(0..n - 1);
            let c = g.layers[i].out_channels as f64;
            let factor = rng.gen_range(1.0..=1.5);
            let next = if rng.gen_bool(0.5) { c * factor } else { c / factor };
            let (lo, hi) = span(bounds.min_channels, bounds.max_channels, g.layers[i].out_channels, CHANNEL_LIMITS);
            out.layers[i].out_channels = (next.round() as usize).clamp(lo, hi);
        }
        Feature::KernelSize => {
            let i = rng.gen_range(0..n);
            let gene = &mut out.layers[i];
            let delta = [-2i64, -1, 1, 2][rng.gen_range(0..4)];
            let (lo, hi) = span(bounds.min_kernel, bounds.max_kernel, gene.kernel_size, KERNEL_LIMITS);
            gene.kernel_size = (gene.kernel_size as i64 + delta).clamp(lo as i64, hi as i64) as usize;
            gene.padding = gene.padding.min(gene.kernel_size / 2);
        }
        Feature::Padding => {
            let i = rng.gen_range(0..n);
            let gene = &mut out.layers[i];
            let hi = (gene.kernel_size / 2).min(bounds.max_padding.max(gene.padding));
            gene.padding = if rng.gen_bool(0.5) {
                (gene.padding + 1).min(hi)
            } else {
                gene.padding.saturating_sub(1)
            };
        }
        Feature::AddLayer => {
            if n >= bounds.max_layers.min(LAYER_LIMITS.1) {
                return None;
            }
            let i = rng.gen_range(0..n);
            let dup: LayerGene = g.layers[i];
            out.layers.insert(i + 1, dup);
        }
        Feature::RemoveLayer => {
            if n <= bounds.min_layers.max(LAYER_LIMITS.0) {
                return None;
            }
            out.layers.remove(rng.gen_range(0..n - 1));
        }
        Feature::WindowSize => {
            let (lo, hi) = span(bounds.min_window, bounds.max_window, g.window_size, CHANNEL_LIMITS);
            let w = if rng.gen_bool(0.5) { g.window_size + 1 } else { g.window_size.saturating_sub(1) };
            out.window_size = w.clamp(lo, hi);
        }
    }
    out.repair_closure();
    (out != *g).then_some(out)
}

/// Perturb one feature of one gene (or the window size, or the depth).
///
/// Channel widths scale by up to 1.5x either way, kernels move by 1 or 2,
/// padding by 1; added genes duplicate an existing gene's shape, and the
/// terminal gene is never removed. Draws repeat until the genome actually
/// changes. Values already outside `bounds` are not pulled back in.
pub fn mutate_model(g: &ModelGenome, bounds: &GenomeBounds, rng_seed: u64) -> ModelGenome {
    let mut rng = seed::rng(rng_seed);
    for _ in 0..MAX_ATTEMPTS {
        if let Some(out) = try_mutate(g, bounds, &mut rng) {
            debug_assert!(genome::is_valid(&out), "{:?}", genome::validate(&out));
            return out;
        }
    }
    g.clone()
}

/// Swap gene suffixes from layer `l_id`. Each child keeps the window size
/// of the parent that supplies its first gene.
pub fn crossover_models_at(a: &ModelGenome, b: &ModelGenome, l_id: usize) -> (ModelGenome, ModelGenome) {
    let l = l_id.min(a.layers.len().min(b.layers.len()).saturating_sub(1));
    let child = |x: &ModelGenome, y: &ModelGenome| {
        let mut c = ModelGenome {
            window_size: if l == 0 { y.window_size } else { x.window_size },
            layers: x.layers[..l].iter().chain(&y.layers[l..]).copied().collect(),
        };
        c.repair_closure();
        c
    };
    (child(a, b), child(b, a))
}

/// [`crossover_models_at`] with `l_id` uniform in `0..min(len)`.
pub fn crossover_models(a: &ModelGenome, b: &ModelGenome, rng_seed: u64) -> (ModelGenome, ModelGenome) {
    let m = a.layers.len().min(b.layers.len()).max(1);
    crossover_models_at(a, b, seed::rng(rng_seed).gen_range(0..m))
}

/// Rank scores in `[0, n-1]`, higher is fitter; tied fitness values share
/// the mean of their ranks.
fn rank_scores(fitness: &[f64]) -> Vec<f64> {
    let n = fitness.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| fitness[a].total_cmp(&fitness[b]));
    let mut score = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && fitness[order[j + 1]] == fitness[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0;
        for &o in &order[i..=j] {
            score[o] = mean;
        }
        i = j + 1;
    }
    score
}

/// Indices chosen by [`select_diverse`], in selection order.
pub fn select_diverse_indices(
    scored: &[(ModelGenome, f64)],
    survivors: usize,
    lambda: f64,
) -> Result<Vec<usize>, EvoError> {
    if survivors > scored.len() {
        return Err(EvoError::Config(format!(
            "{survivors} survivors requested from {} candidates",
            scored.len()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(EvoError::Config(format!("lambda {lambda} must be finite and >= 0")));
    }
    let fitness: Vec<f64> = scored.iter().map(|(_, f)| *f).collect();
    let rank = rank_scores(&fitness);
    let mut chosen: Vec<usize> = Vec::with_capacity(survivors);
    let mut taken = vec![false; scored.len()];
    while chosen.len() < survivors {
        let mut best: Option<(usize, f64)> = None;
        for c in (0..scored.len()).filter(|&c| !taken[c]) {
            let value = if chosen.is_empty() || lambda == 0.0 {
                rank[c]
            } else {
                let d = chosen
                    .iter()
                    .map(|&s| genome::distance(&scored[c].0, &scored[s].0))
                    .min()
                    .unwrap();
                // a structural twin of a survivor is worth one rank less
                rank[c] + lambda * d as f64 - if d == 0 { 1.0 } else { 0.0 }
            };
            let better = match best {
                None => true,
                Some((b, v)) => value > v || (value == v && fitness[c] > fitness[b]),
            };
            if better {
                best = Some((c, value));
            }
        }
        let (c, _) = best.expect("survivors <= candidates");
        taken[c] = true;
        chosen.push(c);
    }
    Ok(chosen)
}

/// Greedy survivor selection blending fitness rank with structural
/// distance: the fittest genome first, then repeatedly the candidate
/// maximizing `rank + lambda * min distance to the selected set`. A
/// candidate at distance 0 from a survivor loses one rank. `lambda = 0`
/// is plain truncation selection.
pub fn select_diverse(
    scored: &[(ModelGenome, f64)],
    survivors: usize,
    lambda: f64,
) -> Result<Vec<ModelGenome>, EvoError> {
    Ok(select_diverse_indices(scored, survivors, lambda)?
        .into_iter()
        .map(|i| scored[i].0.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::{presets, random_genome};
    use proptest::prelude::*;
    use rand::Rng;

    fn two_gene(window: usize, mid: usize) -> ModelGenome {
        ModelGenome {
            window_size: window,
            layers: vec![
                LayerGene { out_channels: mid, kernel_size: 3, padding: 1, batchnorm: true },
                LayerGene { out_channels: window, kernel_size: 3, padding: 1, batchnorm: false },
            ],
        }
    }

    #[test]
    fn mutation_always_changes_and_validates() {
        let bounds = GenomeBounds::default();
        for s in 0..1000 {
            let g = random_genome(s, &bounds).unwrap();
            let m = mutate_model(&g, &bounds, s + 1);
            assert_ne!(m, g, "seed {s}");
            assert!(genome::is_valid(&m), "seed {s}: {:?}", genome::validate(&m));
        }
    }

    #[test]
    fn two_gene_genome_never_shrinks() {
        let bounds = GenomeBounds::default();
        let g = two_gene(4, 8);
        for s in 0..500 {
            assert!(mutate_model(&g, &bounds, s).len() >= 2);
        }
    }

    #[test]
    fn preset_mutation_stays_valid() {
        let bounds = GenomeBounds::default();
        let g = presets::swat();
        for s in 0..300 {
            let m = mutate_model(&g, &bounds, s);
            assert!(genome::is_valid(&m));
            let widest = m.layers.iter().map(|l| l.out_channels).max().unwrap();
            assert!(widest <= (205.0f64 * 1.5).round() as usize);
        }
    }

    #[test]
    fn crossover_boundaries() {
        let a = presets::swat();
        let b = two_gene(3, 7);
        let (c1, c2) = crossover_models_at(&a, &b, 0);
        assert_eq!((c1, c2), (b.clone(), a.clone()));
        let (x, y) = crossover_models(&a, &a, 5);
        assert_eq!((x, y), (a.clone(), a.clone()));
        let (c1, c2) = crossover_models_at(&a, &b, 1);
        assert_eq!(c1.channel_chain(), vec![5, 84, 5]);
        assert_eq!(c2.len(), 6);
        assert_eq!(c2.window_size, 3);
        assert!(genome::is_valid(&c1) && genome::is_valid(&c2));
    }

    #[test]
    fn crossover_of_lengths_six_and_four() {
        let bounds = GenomeBounds { min_layers: 4, max_layers: 4, ..Default::default() };
        let b = random_genome(3, &bounds).unwrap();
        let a = presets::wadi();
        for s in 0..200 {
            let (c1, c2) = crossover_models(&a, &b, s);
            for c in [&c1, &c2] {
                assert!((4..=6).contains(&c.len()));
                assert!(genome::is_valid(c));
            }
            assert_eq!(c1.len() + c2.len(), 10);
        }
    }

    #[test]
    fn select_all_returns_everything() {
        let scored: Vec<(ModelGenome, f64)> = (0..5).map(|i| (two_gene(3, 4 + i), -(i as f64))).collect();
        let mut got = select_diverse_indices(&scored, 5, 0.5).unwrap();
        got.sort();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);
        assert!(select_diverse(&scored, 6, 0.5).is_err());
    }

    #[test]
    fn duplicate_loses_to_different_structure() {
        let deep = presets::swat();
        let scored = vec![(two_gene(3, 4), -1.0), (two_gene(3, 5), -2.0), (deep.clone(), -2.0)];
        let picked = select_diverse(&scored, 2, 0.5).unwrap();
        assert_eq!(picked, vec![two_gene(3, 4), deep]);
    }

    #[test]
    fn zero_lambda_is_truncation() {
        for s in 0..50u64 {
            let mut rng = seed::rng(s);
            let scored: Vec<(ModelGenome, f64)> = (0..12)
                .map(|i| {
                    (
                        random_genome(s * 100 + i, &GenomeBounds::default()).unwrap(),
                        -(rng.gen_range(0..6) as f64),
                    )
                })
                .collect();
            let got = select_diverse_indices(&scored, 5, 0.0).unwrap();
            let mut oracle: Vec<usize> = (0..12).collect();
            oracle.sort_by(|&a, &b| scored[b].1.total_cmp(&scored[a].1).then(a.cmp(&b)));
            assert_eq!(got, oracle[..5].to_vec());
        }
    }

    #[test]
    fn tied_ranks_are_averaged() {
        assert_eq!(rank_scores(&[1.0, 3.0, 3.0, 0.0]), vec![1.0, 2.5, 2.5, 0.0]);
    }

    proptest! {
        #[test]
        fn diverse_selection_avoids_twins(seeds in proptest::collection::vec(0u64..400, 4..14), raw in proptest::collection::vec(0u8..5, 14), k in 2usize..5) {
            let bounds = GenomeBounds::default();
            let scored: Vec<(ModelGenome, f64)> = seeds
                .iter()
                .zip(&raw)
                .map(|(&s, &f)| (random_genome(s, &bounds).unwrap(), -(f as f64)))
                .collect();
            let k = k.min(scored.len());
            let picked = select_diverse_indices(&scored, k, 0.5).unwrap();
            let ranks = rank_scores(&scored.iter().map(|x| x.1).collect::<Vec<_>>());
            for (pos, &p) in picked.iter().enumerate().skip(1) {
                let prior = &picked[..pos];
                let twin = prior.iter().any(|&q| genome::distance(&scored[p].0, &scored[q].0) == 0);
                if !twin { continue; }
                // at the moment p was picked, no candidate beyond its distance-0 peers
                // within one rank was left unselected
                for c in 0..scored.len() {
                    if picked[..pos].contains(&c) || c == p { continue; }
                    let d = prior.iter().map(|&q| genome::distance(&scored[c].0, &scored[q].0)).min().unwrap();
                    prop_assert!(!(d > 0 && ranks[c] >= ranks[p] - 1.0), "candidate {c} skipped for twin {p}");
                }
            }
        }

        #[test]
        fn mutate_then_crossover_valid(a in 0u64..1000, b in 0u64..1000) {
            let bounds = GenomeBounds { max_layers: 10, ..Default::default() };
            let ga = mutate_model(&random_genome(a, &bounds).unwrap(), &bounds, b);
            let gb = mutate_model(&random_genome(b, &bounds).unwrap(), &bounds, a);
            let (c1, c2) = crossover_models(&ga, &gb, a ^ b);
            prop_assert!(genome::is_valid(&c1));
            prop_assert!(genome::is_valid(&c2));
        }
    }
}
