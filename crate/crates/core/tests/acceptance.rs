//! Acceptance criteria, one test each. Expected values are recomputed here
//! from first principles rather than read back from the library.

use std::path::Path;
use std::time::Instant;

use rand::Rng;

use neuroevo::datapipe::{downsample, synth_generate, SynthBenchmark, SynthSpec, TimeSeriesDataset};
use neuroevo::evo::{evolve_groups, init_population_clustered, init_population_random, GaParams, SubgroupSolution};
use neuroevo::finetune::{is_tunable, weight_mutate, AlphaMode, FineTuneParams};
use neuroevo::fitness::{fitness, fitness_for_subgroup_search, AutoencoderEvaluator, FitnessError, GroupEval, GroupEvaluator};
use neuroevo::genome::{decode, presets, random_genome, GenomeBounds, LayerGene, ModelGenome};
use neuroevo::ndnet::{grad_check, LayerKind, Tensor3, TrainConfig};
use neuroevo::pipeline::{prepare_data, Pipeline, PipelineConfig, METRICS_FILE};
use neuroevo::seed;

fn report(name: &str, start: Instant, detail: String) {
    println!("[criterion] {name}: {detail} ({:.1}s)", start.elapsed().as_secs_f64());
}

fn benchmark(rows: usize, seed: u64) -> SynthBenchmark {
    synth_generate(&SynthSpec {
        sensors: 12,
        rows,
        groups: 3,
        anomaly_rate: 0.12,
        seed,
    })
    .unwrap()
}

fn column_dataset(rows: usize) -> TimeSeriesDataset {
    let values: Vec<f64> = (0..rows).map(|r| (r % 97) as f64).collect();
    TimeSeriesDataset::new("rows", vec!["x".into()], values, None).unwrap()
}

fn quick_profile(dir: &Path) -> PipelineConfig {
    let train = TrainConfig {
        epochs: 3,
        learning_rate: 0.05,
        batch_size: 32,
    };
    PipelineConfig {
        output_dir: dir.to_path_buf(),
        label_column: Some("label".into()),
        k: 3,
        group_search: GaParams {
            population_size: 4,
            parents_mating: 2,
            mutation_probability: 0.1,
            generations: 2,
        },
        model_search: GaParams {
            population_size: 6,
            parents_mating: 2,
            mutation_probability: 0.5,
            generations: 2,
        },
        evolution_training: train,
        final_training: train,
        fine_tune: FineTuneParams {
            population_size: 4,
            generations: 4,
            ..FineTuneParams::default()
        },
        ..PipelineConfig::default()
    }
}

fn non_decreasing(h: &[f64]) -> bool {
    h.windows(2).all(|w| w[1] >= w[0])
}

#[test]
fn downsampling_arithmetic() {
    let start = Instant::now();
    for (rows, expected) in [(49668, 9933), (784571, 156914)] {
        let ds = column_dataset(rows);
        let out = downsample(&ds, 5).unwrap();
        assert_eq!(out.rows(), expected, "{rows} rows at ratio 5");
        // each reduced row is the mean of its five source rows
        for t in [0, expected / 2, expected - 1] {
            let mean: f64 = (5 * t..5 * t + 5).map(|r| (r % 97) as f64).sum::<f64>() / 5.0;
            assert!((out.value(t, 0) - mean).abs() < 1e-12);
        }
    }
    // the pipeline records the reduced size it evolves on
    let train = column_dataset(49668);
    let test = column_dataset(100);
    let cfg = PipelineConfig { k: 1, ..PipelineConfig::default() };
    let prepared = prepare_data(&train, &test, &cfg).unwrap();
    assert_eq!(prepared.summary.evolution_rows, 9933);
    report("downsampling arithmetic", start, "49668->9933, 784571->156914".into());
}

#[test]
fn architecture_decode_of_published_genomes() {
    let start = Instant::now();
    let cases = [
        (presets::swat(), vec![5, 84, 123, 205, 123, 84, 5], 51),
        (presets::wadi(), vec![6, 91, 153, 155, 153, 91, 6], 123),
    ];
    for (genome, chain, sensors) in cases {
        let net = decode(&genome, sensors, 1).unwrap();
        assert_eq!(net.channel_chain(), chain);
        let window = chain[0];
        let mut rng = seed::rng(2);
        let data: Vec<f64> = (0..2 * window * sensors).map(|_| rng.gen::<f64>()).collect();
        let batch = Tensor3::from_vec(2, window, sensors, data).unwrap();
        let out = net.forward(&batch).unwrap();
        assert_eq!(out.shape(), batch.shape());
        assert!(out.data().iter().all(|v| v.is_finite()));
    }
    report("architecture decode", start, "both channel chains exact, forward pass finite".into());
}

#[test]
fn gradient_oracle_on_random_networks() {
    let start = Instant::now();
    let bounds = GenomeBounds {
        min_layers: 2,
        max_layers: 4,
        min_channels: 2,
        max_channels: 6,
        min_kernel: 1,
        max_kernel: 3,
        min_padding: 0,
        max_padding: 1,
        min_window: 2,
        max_window: 4,
        batchnorm_probability: 0.5,
    };
    let mut kinds = [false; 3];
    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let genome = random_genome(seed::derive(100, &[i]), &bounds).unwrap();
        let sensors = 3 + (i as usize % 4);
        let net = decode(&genome, sensors, seed::derive(200, &[i])).unwrap();
        for l in net.layers() {
            kinds[match l.kind() {
                LayerKind::Conv1d => 0,
                LayerKind::Batchnorm1d => 1,
                LayerKind::Activation => 2,
            }] = true;
        }
        let window = genome.window_size;
        let mut rng = seed::rng(seed::derive(300, &[i]));
        let data: Vec<f64> = (0..4 * window * sensors).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let batch = Tensor3::from_vec(4, window, sensors, data).unwrap();
        let r = grad_check(&net, &batch, 1e-5).unwrap();
        assert!(r.checked > 0);
        assert!(r.max_rel_error <= 1e-4, "network {i}: relative error {}", r.max_rel_error);
        worst = worst.max(r.max_rel_error);
    }
    assert_eq!(kinds, [true; 3], "every layer kind must be exercised");
    report("gradient oracle", start, format!("20 networks, worst relative error {worst:.2e}"));
}

/// Returns a fixed, known evaluation per group.
struct StubEvaluator {
    evals: Vec<GroupEval>,
}

impl GroupEvaluator for StubEvaluator {
    fn evaluate(&self, group_index: usize, _: &[usize], _: &ModelGenome, _: u64) -> Result<GroupEval, FitnessError> {
        Ok(self.evals[group_index])
    }
}

#[test]
fn fitness_arithmetic_with_stubbed_trainer() {
    let start = Instant::now();
    let genome = presets::swat();
    let mut rng = seed::rng(41);
    for case in 0..100 {
        let k = rng.gen_range(1..=5);
        let n_features = rng.gen_range(k..=12);
        let mut groups = vec![Vec::new(); k];
        for f in 0..n_features {
            groups[rng.gen_range(0..k)].push(f);
        }
        let evals: Vec<GroupEval> = (0..k)
            .map(|_| GroupEval {
                loss_train: rng.gen_range(0.0..2.0),
                loss_val: rng.gen_range(0.0..2.0),
                n_train: rng.gen_range(1..5000),
                n_val: rng.gen_range(0..1500),
            })
            .collect();
        let mut expected = 0.0;
        for (g, e) in groups.iter().zip(&evals) {
            if g.is_empty() {
                continue;
            }
            let (nt, nv) = (e.n_train as f64, e.n_val as f64);
            let weighted = (e.loss_train * nt + e.loss_val * nv) / (nt + nv);
            expected -= weighted / g.len() as f64;
        }
        let solution = SubgroupSolution::new(groups);
        let genomes = vec![genome.clone(); k];
        let r = fitness(&solution, &genomes, &StubEvaluator { evals }, case).unwrap();
        assert!((r.total_fitness - expected).abs() <= 1e-12, "case {case}: {} vs {expected}", r.total_fitness);
    }
    report("fitness arithmetic", start, "100 stubbed cases within 1e-12".into());
}

#[test]
fn finetune_mask_count_and_step_bound() {
    let start = Instant::now();
    let mut checked = 0;
    for (i, genome) in [presets::swat(), presets::wadi()].into_iter().enumerate() {
        let mut net = decode(&genome, 8, i as u64).unwrap();
        // nonzero everywhere so no tensor is skipped as all-zero
        let mut rng = seed::rng(77 + i as u64);
        for (_, t) in net.param_tensors_mut() {
            for v in t.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let (mutated, _) = weight_mutate(&net, 0.02, 256.0, AlphaMode::Uniform01, 9 + i as u64);
        for ((id, before), (_, after)) in net.param_tensors().into_iter().zip(mutated.param_tensors()) {
            let changed = before.iter().zip(after).filter(|(a, b)| a != b).count();
            if !is_tunable(id.kind) {
                assert_eq!(changed, 0, "{id:?} must stay fixed");
                continue;
            }
            let n = before.len();
            // ceil(0.02 n) in integer arithmetic
            let expected = (2 * n).div_ceil(100);
            assert_eq!(changed, expected, "{id:?}: {n} entries");
            let bound = before.iter().fold(0.0f64, |m, v| m.max(v.abs())) / 256.0;
            for (a, b) in before.iter().zip(after) {
                assert!((b - a).abs() <= bound, "{id:?}: step {} above {bound}", (b - a).abs());
            }
            checked += 1;
        }
    }
    report("fine-tune exactness", start, format!("{checked} tensors with exact counts and bounded steps"));
}

#[test]
fn best_fitness_never_decreases() {
    let start = Instant::now();
    let b = benchmark(2000, 5);
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::from_datasets(quick_profile(dir.path()), 3, &b.train, &b.test).unwrap();
    p.open_output(true).unwrap();
    let groups = p.evolve_groups_stage(false).unwrap();
    let models = p.evolve_models_stage(false).unwrap();
    p.train_stage(false).unwrap();
    let (_, tuned) = p.finetune_stage(false).unwrap();
    assert!(non_decreasing(&groups.best_history), "{:?}", groups.best_history);
    for h in &models.histories {
        assert!(non_decreasing(h), "{h:?}");
    }
    let ft: Vec<f64> = tuned.history.iter().map(|g| g.best_fitness).collect();
    assert!(non_decreasing(&ft), "{ft:?}");
    assert!(tuned.final_fitness >= tuned.initial_fitness);
    report(
        "GA monotonicity",
        start,
        format!("groups {:?}, fine-tune {:.6} -> {:.6}", groups.best_history, tuned.initial_fitness, tuned.final_fitness),
    );
}

fn recovery_genome() -> ModelGenome {
    ModelGenome {
        window_size: 4,
        layers: vec![
            LayerGene { out_channels: 8, kernel_size: 3, padding: 1, batchnorm: true },
            LayerGene { out_channels: 4, kernel_size: 3, padding: 1, batchnorm: false },
        ],
    }
}

#[test]
fn subgroup_recovery_of_planted_clusters() {
    let start = Instant::now();
    let b = benchmark(2000, 7);
    let truth = b.clusters();
    let cfg = PipelineConfig {
        k: 3,
        evolution_training: TrainConfig { epochs: 5, learning_rate: 0.05, batch_size: 32 },
        ..PipelineConfig::default()
    };
    let data = prepare_data(&b.train, &b.test, &cfg).unwrap();
    let population = init_population_clustered(&data.evolution_train, 3, 8, 0.0, 11).unwrap();
    for s in &population {
        let mut got = s.groups.clone();
        got.sort();
        assert_eq!(got, truth, "clustered initialisation must match the planted clusters");
    }

    let base = recovery_genome();
    let ev = AutoencoderEvaluator::new(&data.evolution_train, &data.evolution_val, cfg.evolution_training);
    let score = |s: &SubgroupSolution, rng_seed: u64| fitness_for_subgroup_search(s, &base, &ev, rng_seed).map(|r| r.total_fitness);
    let random = init_population_random(12, 3, 8, 13).unwrap();
    let result = evolve_groups(random, &GaParams::subgroup_default(), 12, 1.0, 17, score, &mut |_| Ok(())).unwrap();
    let best = &result.ranked[0].0;
    // compare both partitions under one common evaluation seed
    let common = 23;
    let f_best = score(best, common).unwrap();
    let f_true = score(&SubgroupSolution::new(truth.clone()), common).unwrap();
    let floor = f_true - 0.05 * f_true.abs();
    assert!(f_best >= floor, "found {f_best:.6}, planted {f_true:.6}, floor {floor:.6}");
    report(
        "subgroup recovery",
        start,
        format!("clustered init exact; evolved {f_best:.6} vs planted {f_true:.6} ({:?})", best.groups),
    );
}

fn detection_profile(dir: &Path) -> PipelineConfig {
    let mut cfg = quick_profile(dir);
    cfg.evolution_training.epochs = 5;
    cfg.final_training.epochs = 10;
    cfg.baseline = true;
    cfg
}

#[test]
fn end_to_end_detection_quality() {
    let start = Instant::now();
    let b = benchmark(4000, 7);
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::from_datasets(detection_profile(dir.path()), 7, &b.train, &b.test).unwrap();
    let summary = p.run_all(false).unwrap();
    let ensemble = summary.metrics.as_ref().unwrap().ensemble.f1;
    let baseline = summary.baseline.as_ref().unwrap().metrics.as_ref().unwrap().ensemble.f1;
    report("end-to-end detection", start, format!("ensemble F1 {ensemble:.4}, single-model F1 {baseline:.4}"));
    assert!(ensemble >= 0.80, "ensemble F1 {ensemble:.4} below 0.80");
    assert!(ensemble >= baseline, "ensemble F1 {ensemble:.4} below single-model F1 {baseline:.4}");
}

#[test]
fn identical_runs_give_identical_metrics() {
    let start = Instant::now();
    let b = benchmark(2000, 9);
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::from_datasets(quick_profile(dir.path()), 21, &b.train, &b.test).unwrap();
        p.run_all(false).unwrap();
        outputs.push(std::fs::read(dir.path().join(METRICS_FILE)).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    report("determinism", start, format!("metrics JSON identical ({} bytes)", outputs[0].len()));
}
