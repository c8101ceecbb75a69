//! End-to-end driver: data preparation, the two evolution levels, final
//! training, fine-tuning, calibration and detection. Every stage writes
//! its artifact into the output directory so later stages (and later
//! processes) can pick up from it.

mod archive;
mod config;
mod report;

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use archive::{genome_of, load_archive, save_archive, Manifest, MemberEntry, TensorEntry, FORMAT_VERSION};
pub use config::PipelineConfig;
pub use report::{render_report, summarize, MemberSummary, RunSummary};

use crate::datapipe::{downsample, load_csv, split_train_val, DataError, MinMaxScaler, TimeSeriesDataset};
use crate::ensemble::{calibrate, detect, evaluate_metrics, write_detection_csv, DetectionResult, EnsembleModel, Member, Metrics};
use crate::evo::{
    evolve_groups, evolve_models, init_population_clustered, resume_groups, resume_models, EnsembleGenome, GroupCheckpoint,
    ModelCheckpoint, ModelSearch, ModelSearchSpace, SubgroupSolution,
};
use crate::finetune::{fine_tune, FineTuneGeneration};
use crate::fitness::{fitness_for_subgroup_search, fitness_trained, group_fitness, AutoencoderEvaluator};
use crate::genome::{random_genome, ModelGenome};
use crate::io;
use crate::seed::{self, stream};

pub const CONFIG_FILE: &str = "config.json";
pub const DATA_FILE: &str = "data.json";
pub const GROUPS_FILE: &str = "groups.json";
pub const MODELS_FILE: &str = "models.json";
pub const MODEL_DIR: &str = "model";
pub const FINETUNED_DIR: &str = "model_finetuned";
pub const FINETUNE_FILE: &str = "finetune_history.json";
pub const DETECTION_FILE: &str = "detection.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const BASELINE_FILE: &str = "baseline.json";
pub const SUMMARY_FILE: &str = "run_summary.json";
pub const REPORT_FILE: &str = "report.txt";
const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("stage {stage} failed: {message}{}", resume_hint(.checkpoint))]
    Stage {
        stage: &'static str,
        message: String,
        checkpoint: Option<PathBuf>,
    },
}

fn resume_hint(checkpoint: &Option<PathBuf>) -> String {
    match checkpoint {
        Some(p) => format!(" (latest checkpoint: {}; rerun with --resume)", p.display()),
        None => String::new(),
    }
}

impl PipelineError {
    /// Process exit code: 2 for usage and configuration, 3 for data, 4 for
    /// a failed stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) => 3,
            PipelineError::Stage { .. } => 4,
        }
    }

    fn stage(stage: &'static str, message: impl Display) -> Self {
        PipelineError::Stage {
            stage,
            message: message.to_string(),
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub sensor_names: Vec<String>,
    pub train_rows: usize,
    pub test_rows: usize,
    pub red_ratio: usize,
    /// Rows of the downsampled training data used by both evolution levels.
    pub evolution_rows: usize,
    pub evolution_train_rows: usize,
    pub evolution_val_rows: usize,
    pub final_train_rows: usize,
    pub final_val_rows: usize,
    pub test_anomalies: Option<usize>,
}

/// Normalized splits shared by every stage.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub scaler: MinMaxScaler,
    pub evolution_train: TimeSeriesDataset,
    pub evolution_val: TimeSeriesDataset,
    pub final_train: TimeSeriesDataset,
    pub final_val: TimeSeriesDataset,
    pub test: TimeSeriesDataset,
    pub summary: DataSummary,
}

/// Fit the scaler on the full training data, downsample it for evolution,
/// and split both resolutions into contiguous train and validation parts.
pub fn prepare_data(
    train: &TimeSeriesDataset,
    test: &TimeSeriesDataset,
    cfg: &PipelineConfig,
) -> Result<PreparedData, PipelineError> {
    let data = |e: DataError| PipelineError::Data(e.to_string());
    if train.sensor_names() != test.sensor_names() {
        return Err(PipelineError::Data(format!(
            "train has sensors {:?}, test has {:?}",
            train.sensor_names(),
            test.sensor_names()
        )));
    }
    if cfg.k > train.sensors() {
        return Err(PipelineError::Config(format!("k = {} exceeds {} sensors", cfg.k, train.sensors())));
    }
    let scaler = MinMaxScaler::fit(train);
    let train_n = scaler.transform(train).map_err(data)?;
    let test_n = scaler.transform(test).map_err(data)?;
    let reduced = downsample(&train_n, cfg.red_ratio).map_err(data)?;
    let (evolution_train, evolution_val) = split_train_val(&reduced, cfg.val_fraction).map_err(data)?;
    let (final_train, final_val) = split_train_val(&train_n, cfg.val_fraction).map_err(data)?;
    let summary = DataSummary {
        sensor_names: train.sensor_names().to_vec(),
        train_rows: train.rows(),
        test_rows: test.rows(),
        red_ratio: cfg.red_ratio,
        evolution_rows: reduced.rows(),
        evolution_train_rows: evolution_train.rows(),
        evolution_val_rows: evolution_val.rows(),
        final_train_rows: final_train.rows(),
        final_val_rows: final_val.rows(),
        test_anomalies: test.labels().map(|_| test.anomaly_count()),
    };
    Ok(PreparedData {
        scaler,
        evolution_train,
        evolution_val,
        final_train,
        final_val,
        test: test_n,
        summary,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedSolution {
    pub solution: SubgroupSolution,
    pub fitness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupsArtifact {
    pub base_genome: ModelGenome,
    /// Final population, fittest first.
    pub ranked: Vec<RankedSolution>,
    pub best_history: Vec<f64>,
}

impl GroupsArtifact {
    pub fn best(&self) -> &RankedSolution {
        &self.ranked[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelsArtifact {
    pub ensemble: EnsembleGenome,
    pub histories: Vec<Vec<f64>>,
    pub best_fitness: Vec<Option<f64>>,
}

impl From<ModelSearch> for ModelsArtifact {
    fn from(m: ModelSearch) -> Self {
        Self {
            ensemble: m.ensemble,
            histories: m.histories,
            best_fitness: m.best_fitness,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneArtifact {
    pub initial_fitness: f64,
    pub final_fitness: f64,
    pub history: Vec<FineTuneGeneration>,
    /// Member thresholds calibrated before and after fine-tuning.
    pub thresholds_before: Vec<f64>,
    pub thresholds_after: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ensemble: Metrics,
    /// Only when point adjustment was requested.
    pub point_adjusted: Option<Metrics>,
    pub members: Vec<Metrics>,
    pub flagged_rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineArtifact {
    pub genome: ModelGenome,
    pub model_fitness: Option<f64>,
    pub fine_tune: FineTuneArtifact,
    pub metrics: Option<MetricsReport>,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(stage: &'static str, path: &Path, value: &T) -> Result<(), PipelineError> {
    io::write_json_atomic(path, value).map_err(|e| PipelineError::stage(stage, format!("{}: {e}", path.display())))
}

/// Highest-numbered checkpoint in `dir` whose name parses with `key`.
fn latest_checkpoint(dir: &Path, key: impl Fn(&str) -> Option<(usize, usize)>) -> Option<PathBuf> {
    let entries = fs::read_dir(dir).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            key(name.strip_suffix(".json")?).map(|k| (k, e.path()))
        })
        .max_by_key(|(k, _)| *k)
        .map(|(_, p)| p)
}

fn group_checkpoint_key(stem: &str) -> Option<(usize, usize)> {
    Some((0, stem.strip_prefix("gen_")?.parse().ok()?))
}

fn model_checkpoint_key(stem: &str) -> Option<(usize, usize)> {
    let rest = stem.strip_prefix("group_")?;
    let (g, t) = rest.split_once("_gen_")?;
    Some((g.parse().ok()?, t.parse().ok()?))
}

/// Detect and, when the test data is labelled, score the result.
pub fn detect_and_score(
    model: &EnsembleModel,
    test: &TimeSeriesDataset,
    point_adjust: bool,
) -> Result<(DetectionResult, Option<MetricsReport>), String> {
    let result = detect(model, test).map_err(|e| e.to_string())?;
    let metrics = match test.labels() {
        None => None,
        Some(labels) => {
            let ensemble = evaluate_metrics(&result.flags, labels, false).map_err(|e| e.to_string())?;
            let point_adjusted = if point_adjust {
                Some(evaluate_metrics(&result.flags, labels, true).map_err(|e| e.to_string())?)
            } else {
                None
            };
            let members = result
                .member_flags
                .iter()
                .map(|f| evaluate_metrics(f, labels, false))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| e.to_string())?;
            Some(MetricsReport {
                ensemble,
                point_adjusted,
                members,
                flagged_rows: result.flags.iter().filter(|&&f| f == 1).count(),
            })
        }
    };
    Ok((result, metrics))
}

/// Read the `ensemble_flag` column of a detection CSV.
pub fn read_detection_flags(path: &Path) -> Result<Vec<u8>, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let headers = r.headers().map_err(|e| e.to_string())?.clone();
    let col = headers
        .iter()
        .position(|h| h == "ensemble_flag")
        .ok_or_else(|| format!("{}: no ensemble_flag column", path.display()))?;
    let mut flags = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        match rec.get(col) {
            Some("0") => flags.push(0),
            Some("1") => flags.push(1),
            other => return Err(format!("{}: row {i}: bad flag {other:?}", path.display())),
        }
    }
    Ok(flags)
}

/// A configured run bound to its data and output directory.
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub seed: u64,
    pub data: PreparedData,
}

impl Pipeline {
    /// Load both CSV files named by the config.
    pub fn load(cfg: PipelineConfig, seed: u64) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let load = |p: &Path, label: Option<&str>| {
            load_csv(p, label).map(|l| l.dataset).map_err(|e| match e {
                DataError::Config(m) => PipelineError::Config(format!("{}: {m}", p.display())),
                e => PipelineError::Data(e.to_string()),
            })
        };
        let label = cfg.label_column.as_deref();
        // normal-only training exports often carry no label column at all
        let train = match load(&cfg.train_path, label) {
            Err(PipelineError::Config(_)) if label.is_some() => load(&cfg.train_path, None)?,
            other => other?,
        };
        let test = load(&cfg.test_path, label)?;
        Self::from_datasets(cfg, seed, &train, &test)
    }

    pub fn from_datasets(
        mut cfg: PipelineConfig,
        seed: u64,
        train: &TimeSeriesDataset,
        test: &TimeSeriesDataset,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        cfg.seed = Some(seed);
        let data = prepare_data(train, test, &cfg)?;
        Ok(Self { cfg, seed, data })
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn checkpoint_dir(&self, level: &str) -> PathBuf {
        self.cfg.output_dir.join(CHECKPOINT_DIR).join(level)
    }

    /// Prepare the output directory. A fresh start removes every artifact
    /// this pipeline writes; otherwise the stored config must match.
    pub fn open_output(&self, fresh: bool) -> Result<(), PipelineError> {
        let dir = &self.cfg.output_dir;
        let cfg_path = dir.join(CONFIG_FILE);
        if fresh {
            for f in [
                GROUPS_FILE,
                MODELS_FILE,
                FINETUNE_FILE,
                DETECTION_FILE,
                METRICS_FILE,
                BASELINE_FILE,
                SUMMARY_FILE,
                REPORT_FILE,
            ] {
                let _ = fs::remove_file(dir.join(f));
            }
            for d in [MODEL_DIR, FINETUNED_DIR, CHECKPOINT_DIR] {
                let _ = fs::remove_dir_all(dir.join(d));
            }
        } else if cfg_path.exists() {
            let stored: PipelineConfig = read_json(&cfg_path).map_err(PipelineError::Config)?;
            if stored != self.cfg {
                return Err(PipelineError::Config(format!(
                    "{} was written with a different configuration or seed; start a fresh run or use a new output_dir",
                    cfg_path.display()
                )));
            }
        }
        fs::create_dir_all(dir).map_err(|e| PipelineError::Config(format!("{}: {e}", dir.display())))?;
        write_json("setup", &cfg_path, &self.cfg)?;
        write_json("setup", &dir.join(DATA_FILE), &self.data.summary)
    }

    /// The genome shared by all groups during subgroup search.
    pub fn base_genome(&self) -> Result<ModelGenome, PipelineError> {
        match &self.cfg.base_genome {
            Some(g) => Ok(g.clone()),
            None => random_genome(seed::derive(self.seed, &[stream::GROUP_INIT, 1]), &self.cfg.genome_bounds)
                .map_err(|e| PipelineError::Config(e.to_string())),
        }
    }

    fn evolution_evaluator(&self) -> AutoencoderEvaluator<'_> {
        AutoencoderEvaluator {
            stride: self.cfg.fitness_stride,
            ..AutoencoderEvaluator::new(
                &self.data.evolution_train,
                &self.data.evolution_val,
                self.cfg.evolution_training,
            )
        }
    }

    fn load_stage_input<T: DeserializeOwned>(&self, stage: &'static str, file: &str, producer: &str) -> Result<T, PipelineError> {
        let path = self.out(file);
        if !path.exists() {
            return Err(PipelineError::stage(stage, format!("{} is missing; run {producer} first", path.display())));
        }
        read_json(&path).map_err(|m| PipelineError::stage(stage, m))
    }

    /// Subgroup search. With `resume`, an existing `groups.json` is reused
    /// and an interrupted search continues from its latest checkpoint.
    pub fn evolve_groups_stage(&self, resume: bool) -> Result<GroupsArtifact, PipelineError> {
        const STAGE: &str = "evolve-groups";
        let out = self.out(GROUPS_FILE);
        if resume && out.exists() {
            return read_json(&out).map_err(|m| PipelineError::stage(STAGE, m));
        }
        let base = self.base_genome()?;
        let evaluator = self.evolution_evaluator();
        let fitness_fn = |s: &SubgroupSolution, rng_seed: u64| {
            fitness_for_subgroup_search(s, &base, &evaluator, rng_seed).map(|r| r.total_fitness)
        };
        let ckpt_dir = self.checkpoint_dir("groups");
        let latest = if resume { latest_checkpoint(&ckpt_dir, group_checkpoint_key) } else { None };
        if !resume {
            let _ = fs::remove_dir_all(&ckpt_dir);
        }
        fs::create_dir_all(&ckpt_dir).map_err(|e| PipelineError::stage(STAGE, e))?;
        let mut on_checkpoint = |c: &GroupCheckpoint| {
            io::write_json_atomic(&ckpt_dir.join(format!("gen_{:04}.json", c.generation)), c).map_err(|e| e.to_string())
        };
        let n = self.data.evolution_train.sensors();
        let p = &self.cfg.group_search;
        let result = match &latest {
            Some(path) => {
                let c: GroupCheckpoint = read_json(path).map_err(|m| PipelineError::stage(STAGE, m))?;
                if c.master_seed != self.seed {
                    return Err(PipelineError::Config(format!("{} belongs to seed {}", path.display(), c.master_seed)));
                }
                log::info!("resuming subgroup search from {}", path.display());
                resume_groups(c, p, n, self.cfg.min_coverage, fitness_fn, &mut on_checkpoint)
            }
            None => {
                let initial = init_population_clustered(
                    &self.data.evolution_train,
                    self.cfg.k,
                    p.population_size,
                    self.cfg.jitter,
                    seed::derive(self.seed, &[stream::GROUP_INIT]),
                )
                .map_err(|e| PipelineError::stage(STAGE, e))?;
                evolve_groups(initial, p, n, self.cfg.min_coverage, self.seed, fitness_fn, &mut on_checkpoint)
            }
        }
        .map_err(|e| PipelineError::Stage {
            stage: STAGE,
            message: e.to_string(),
            checkpoint: latest_checkpoint(&ckpt_dir, group_checkpoint_key),
        })?;
        let artifact = GroupsArtifact {
            base_genome: base,
            ranked: result
                .ranked
                .into_iter()
                .map(|(solution, fitness)| RankedSolution { solution, fitness })
                .collect(),
            best_history: result.best_history,
        };
        write_json(STAGE, &out, &artifact)?;
        Ok(artifact)
    }

    /// Model-level search for every group of `ensemble`. Checkpoints go to
    /// `ckpt_dir` when given.
    fn search_models(
        &self,
        stage: &'static str,
        ensemble: &EnsembleGenome,
        master_seed: u64,
        ckpt_dir: Option<&Path>,
        resume: bool,
    ) -> Result<ModelSearch, PipelineError> {
        let evaluator = self.evolution_evaluator();
        let groups = ensemble.solution.groups.clone();
        let fitness_fn =
            |g: usize, genome: &ModelGenome, rng_seed: u64| group_fitness(g, &groups[g], genome, &evaluator, rng_seed);
        let space = ModelSearchSpace {
            bounds: self.cfg.genome_bounds.clone(),
            lambda: self.cfg.diversity_lambda,
        };
        let p = &self.cfg.model_search;
        let Some(dir) = ckpt_dir else {
            return evolve_models(ensemble, p, &space, master_seed, fitness_fn, &mut |_| Ok(()))
                .map_err(|e| PipelineError::stage(stage, e));
        };
        let latest = if resume { latest_checkpoint(dir, model_checkpoint_key) } else { None };
        if !resume {
            let _ = fs::remove_dir_all(dir);
        }
        fs::create_dir_all(dir).map_err(|e| PipelineError::stage(stage, e))?;
        let mut on_checkpoint = |c: &ModelCheckpoint| {
            let name = format!("group_{:02}_gen_{:04}.json", c.group, c.generation);
            io::write_json_atomic(&dir.join(name), c).map_err(|e| e.to_string())
        };
        match &latest {
            Some(path) => {
                let c: ModelCheckpoint = read_json(path).map_err(|m| PipelineError::stage(stage, m))?;
                if c.master_seed != master_seed || c.ensemble.solution != ensemble.solution {
                    return Err(PipelineError::Config(format!(
                        "{} does not belong to this run",
                        path.display()
                    )));
                }
                log::info!("resuming model search from {}", path.display());
                resume_models(c, p, &space, fitness_fn, &mut on_checkpoint)
            }
            None => evolve_models(ensemble, p, &space, master_seed, fitness_fn, &mut on_checkpoint),
        }
        .map_err(|e| PipelineError::Stage {
            stage,
            message: e.to_string(),
            checkpoint: latest_checkpoint(dir, model_checkpoint_key),
        })
    }

    /// Model search starting from the best subgroup solution.
    pub fn evolve_models_stage(&self, resume: bool) -> Result<ModelsArtifact, PipelineError> {
        const STAGE: &str = "evolve-models";
        let out = self.out(MODELS_FILE);
        if resume && out.exists() {
            return read_json(&out).map_err(|m| PipelineError::stage(STAGE, m));
        }
        let groups: GroupsArtifact = self.load_stage_input(STAGE, GROUPS_FILE, "evolve-groups")?;
        let ensemble = EnsembleGenome::uniform(groups.best().solution.clone(), &groups.base_genome);
        let dir = self.checkpoint_dir("models");
        let artifact: ModelsArtifact = self.search_models(STAGE, &ensemble, self.seed, Some(&dir), resume)?.into();
        write_json(STAGE, &out, &artifact)?;
        Ok(artifact)
    }

    /// Train one member per non-empty group on the full-resolution training
    /// split, then calibrate thresholds on its validation split.
    pub fn train_ensemble(&self, ensemble: &EnsembleGenome, master_seed: u64) -> Result<EnsembleModel, String> {
        ensemble.validate().map_err(|e| e.to_string())?;
        let evaluator = AutoencoderEvaluator {
            stride: self.cfg.fitness_stride,
            ..AutoencoderEvaluator::new(&self.data.final_train, &self.data.final_val, self.cfg.final_training)
        };
        let jobs: Vec<usize> = (0..ensemble.solution.k())
            .filter(|&g| !ensemble.solution.groups[g].is_empty())
            .collect();
        let trained: Vec<Result<Member, String>> = jobs
            .par_iter()
            .map(|&g| {
                let group = &ensemble.solution.groups[g];
                let network = evaluator
                    .train_group(g, group, &ensemble.genomes[g], seed::derive(master_seed, &[g as u64]))
                    .map_err(|e| e.to_string())?;
                Ok(Member {
                    group_index: g,
                    group: group.clone(),
                    network,
                    threshold: 0.0,
                })
            })
            .collect();
        let mut model = EnsembleModel {
            members: trained.into_iter().collect::<Result<_, _>>()?,
            voting: self.cfg.voting,
            stride: self.cfg.detection_stride,
        };
        calibrate(&mut model, &self.data.final_val, self.cfg.quantile).map_err(|e| e.to_string())?;
        Ok(model)
    }

    pub fn train_stage(&self, resume: bool) -> Result<EnsembleModel, PipelineError> {
        const STAGE: &str = "train";
        let dir = self.out(MODEL_DIR);
        if resume && dir.join("manifest.json").exists() {
            return load_archive(&dir).map_err(|m| PipelineError::stage(STAGE, m));
        }
        let models: ModelsArtifact = self.load_stage_input(STAGE, MODELS_FILE, "evolve-models")?;
        let model = self
            .train_ensemble(&models.ensemble, seed::derive(self.seed, &[stream::FINAL_TRAINING]))
            .map_err(|m| PipelineError::stage(STAGE, m))?;
        save_archive(&model, &dir).map_err(|m| PipelineError::stage(STAGE, m))?;
        Ok(model)
    }

    /// Fitness of a trained ensemble on the full-resolution splits, without
    /// any training.
    pub fn trained_fitness(&self, model: &EnsembleModel) -> Result<f64, String> {
        let solution = SubgroupSolution::new(model.members.iter().map(|m| m.group.clone()).collect());
        let nets: Vec<_> = model.members.iter().map(|m| Some(&m.network)).collect();
        fitness_trained(&solution, &nets, &self.data.final_train, &self.data.final_val, self.cfg.fitness_stride)
            .map(|r| r.total_fitness)
            .map_err(|e| e.to_string())
    }

    /// Weight-mutation fine-tuning followed by recalibration.
    pub fn tune(&self, model: &EnsembleModel, rng_seed: u64) -> Result<(EnsembleModel, FineTuneArtifact), String> {
        let outcome = fine_tune(model, &self.cfg.fine_tune, |m| self.trained_fitness(m), rng_seed).map_err(|e| e.to_string())?;
        let mut tuned = outcome.model;
        calibrate(&mut tuned, &self.data.final_val, self.cfg.quantile).map_err(|e| e.to_string())?;
        let artifact = FineTuneArtifact {
            initial_fitness: outcome.initial_fitness,
            final_fitness: outcome.final_fitness,
            history: outcome.history,
            thresholds_before: model.members.iter().map(|m| m.threshold).collect(),
            thresholds_after: tuned.members.iter().map(|m| m.threshold).collect(),
        };
        Ok((tuned, artifact))
    }

    pub fn finetune_stage(&self, resume: bool) -> Result<(EnsembleModel, FineTuneArtifact), PipelineError> {
        const STAGE: &str = "finetune";
        let dir = self.out(FINETUNED_DIR);
        let history = self.out(FINETUNE_FILE);
        if resume && dir.join("manifest.json").exists() && history.exists() {
            let model = load_archive(&dir).map_err(|m| PipelineError::stage(STAGE, m))?;
            let artifact = read_json(&history).map_err(|m| PipelineError::stage(STAGE, m))?;
            return Ok((model, artifact));
        }
        let trained_dir = self.out(MODEL_DIR);
        if !trained_dir.join("manifest.json").exists() {
            return Err(PipelineError::stage(STAGE, format!("{} is missing; run train first", trained_dir.display())));
        }
        let trained = load_archive(&trained_dir).map_err(|m| PipelineError::stage(STAGE, m))?;
        let (tuned, artifact) = self
            .tune(&trained, seed::derive(self.seed, &[stream::FINE_TUNE]))
            .map_err(|m| PipelineError::stage(STAGE, m))?;
        save_archive(&tuned, &dir).map_err(|m| PipelineError::stage(STAGE, m))?;
        write_json(STAGE, &history, &artifact)?;
        Ok((tuned, artifact))
    }

    /// Flag the test rows with the fine-tuned model and write the detection
    /// CSV plus, for labelled test data, `metrics.json`.
    pub fn detect_stage(&self) -> Result<Option<MetricsReport>, PipelineError> {
        const STAGE: &str = "detect";
        let dir = self.out(FINETUNED_DIR);
        if !dir.join("manifest.json").exists() {
            return Err(PipelineError::stage(STAGE, format!("{} is missing; run finetune first", dir.display())));
        }
        let model = load_archive(&dir).map_err(|m| PipelineError::stage(STAGE, m))?;
        let (result, metrics) =
            detect_and_score(&model, &self.data.test, self.cfg.point_adjust).map_err(|m| PipelineError::stage(STAGE, m))?;
        write_detection_csv(&result, &self.out(DETECTION_FILE)).map_err(|e| PipelineError::stage(STAGE, e))?;
        let metrics_path = self.out(METRICS_FILE);
        match &metrics {
            Some(m) => write_json(STAGE, &metrics_path, m)?,
            None => {
                let _ = fs::remove_file(metrics_path);
            }
        }
        Ok(metrics)
    }

    /// A single model over all sensors, searched, trained and fine-tuned
    /// with the same budget as the ensemble. Writes no checkpoints.
    pub fn baseline_stage(&self, resume: bool) -> Result<BaselineArtifact, PipelineError> {
        const STAGE: &str = "baseline";
        let out = self.out(BASELINE_FILE);
        if resume && out.exists() {
            return read_json(&out).map_err(|m| PipelineError::stage(STAGE, m));
        }
        let artifact = self.run_baseline()?;
        write_json(STAGE, &out, &artifact)?;
        Ok(artifact)
    }

    pub fn run_baseline(&self) -> Result<BaselineArtifact, PipelineError> {
        const STAGE: &str = "baseline";
        let master = seed::derive(self.seed, &[stream::BASELINE]);
        let all = SubgroupSolution::new(vec![(0..self.data.final_train.sensors()).collect()]);
        let ensemble = EnsembleGenome::uniform(all, &self.base_genome()?);
        let searched = self.search_models(STAGE, &ensemble, master, None, false)?;
        let err = |m: String| PipelineError::stage(STAGE, m);
        let model = self
            .train_ensemble(&searched.ensemble, seed::derive(master, &[stream::FINAL_TRAINING]))
            .map_err(err)?;
        let (tuned, fine) = self.tune(&model, seed::derive(master, &[stream::FINE_TUNE])).map_err(err)?;
        let (_, metrics) = detect_and_score(&tuned, &self.data.test, self.cfg.point_adjust).map_err(err)?;
        Ok(BaselineArtifact {
            genome: searched.ensemble.genomes[0].clone(),
            model_fitness: searched.best_fitness[0],
            fine_tune: fine,
            metrics,
        })
    }

    /// Every stage in order, then the summary and report.
    pub fn run_all(&self, resume: bool) -> Result<RunSummary, PipelineError> {
        self.open_output(!resume)?;
        self.evolve_groups_stage(resume)?;
        self.evolve_models_stage(resume)?;
        self.train_stage(resume)?;
        self.finetune_stage(resume)?;
        self.detect_stage()?;
        if self.cfg.baseline {
            self.baseline_stage(resume)?;
        }
        write_summary(&self.cfg.output_dir)
    }
}

/// Load the data and run every stage.
pub fn run_pipeline(cfg: PipelineConfig, resume: bool) -> Result<RunSummary, PipelineError> {
    let seed = cfg.require_seed()?;
    Pipeline::load(cfg, seed)?.run_all(resume)
}

/// Rebuild `run_summary.json` and `report.txt` from the artifacts in `dir`.
pub fn write_summary(dir: &Path) -> Result<RunSummary, PipelineError> {
    const STAGE: &str = "report";
    let summary = summarize(dir).map_err(|m| PipelineError::stage(STAGE, m))?;
    write_json(STAGE, &dir.join(SUMMARY_FILE), &summary)?;
    io::write_atomic(&dir.join(REPORT_FILE), render_report(&summary).as_bytes())
        .map_err(|e| PipelineError::stage(STAGE, e))?;
    Ok(summary)
}
