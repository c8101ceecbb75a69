use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::ensemble::VotingRule;
use crate::evo::GaParams;
use crate::finetune::FineTuneParams;
use crate::genome::{self, GenomeBounds, ModelGenome};
use crate::ndnet::TrainConfig;

/// Every knob of an end-to-end run. Missing fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    /// Label column of both CSV files; `None` reads no labels.
    pub label_column: Option<String>,
    pub output_dir: PathBuf,
    /// Master seed. Required, either here or on the command line.
    pub seed: Option<u64>,
    /// Rows averaged into one sample for the evolution stages.
    pub red_ratio: usize,
    pub val_fraction: f64,
    /// Number of feature groups.
    pub k: usize,
    /// Reassignment probability applied to the clustered initial population.
    pub jitter: f64,
    pub min_coverage: f64,
    pub group_search: GaParams,
    pub model_search: GaParams,
    pub genome_bounds: GenomeBounds,
    pub diversity_lambda: f64,
    /// Genome used for every group during subgroup search; random from
    /// `genome_bounds` when absent.
    pub base_genome: Option<ModelGenome>,
    pub evolution_training: TrainConfig,
    pub final_training: TrainConfig,
    pub fine_tune: FineTuneParams,
    pub quantile: f64,
    pub voting: VotingRule,
    /// Also report point-adjusted metrics (never the default).
    pub point_adjust: bool,
    /// Window stride for fitness evaluation.
    pub fitness_stride: usize,
    /// Window stride for calibration and detection.
    pub detection_stride: usize,
    /// Also train and score a single all-features model with the same budget.
    pub baseline: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train_path: PathBuf::new(),
            test_path: PathBuf::new(),
            label_column: None,
            output_dir: PathBuf::from("run"),
            seed: None,
            red_ratio: 5,
            val_fraction: 0.2,
            k: 3,
            jitter: 0.1,
            min_coverage: 1.0,
            group_search: GaParams::subgroup_default(),
            model_search: GaParams::model_default(),
            genome_bounds: GenomeBounds::default(),
            diversity_lambda: 0.5,
            base_genome: None,
            evolution_training: TrainConfig {
                epochs: 25,
                ..TrainConfig::default()
            },
            final_training: TrainConfig {
                epochs: 90,
                ..TrainConfig::default()
            },
            fine_tune: FineTuneParams::default(),
            quantile: 0.99,
            voting: VotingRule::Majority,
            point_adjust: false,
            fitness_stride: 1,
            detection_stride: 1,
            baseline: false,
        }
    }
}

impl PipelineConfig {
    /// Check every value that can be checked without touching the data.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.red_ratio == 0 {
            return bad("red_ratio must be at least 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.jitter) || !(0.0..=1.0).contains(&self.min_coverage) {
            return bad("jitter and min_coverage must lie in [0, 1]".into());
        }
        if !(self.quantile > 0.0 && self.quantile <= 1.0) {
            return bad(format!("quantile {} outside (0, 1]", self.quantile));
        }
        if self.fitness_stride == 0 || self.detection_stride == 0 {
            return bad("strides must be positive".into());
        }
        if !(self.diversity_lambda >= 0.0 && self.diversity_lambda.is_finite()) {
            return bad("diversity_lambda must be finite and >= 0".into());
        }
        if let VotingRule::AtLeast(0) = self.voting {
            return bad("at_least voting needs m >= 1".into());
        }
        self.group_search.validate().map_err(|e| PipelineError::Config(format!("group_search: {e}")))?;
        self.model_search.validate().map_err(|e| PipelineError::Config(format!("model_search: {e}")))?;
        self.genome_bounds.validate().map_err(|e| PipelineError::Config(format!("genome_bounds: {e}")))?;
        self.evolution_training
            .validate()
            .map_err(|e| PipelineError::Config(format!("evolution_training: {e}")))?;
        self.final_training
            .validate()
            .map_err(|e| PipelineError::Config(format!("final_training: {e}")))?;
        self.fine_tune.validate().map_err(|e| PipelineError::Config(format!("fine_tune: {e}")))?;
        if let Some(g) = &self.base_genome {
            let v = genome::validate(g);
            if !v.is_empty() {
                return bad(format!("base_genome invalid: {v:?}"));
            }
        }
        Ok(())
    }

    pub fn require_seed(&self) -> Result<u64, PipelineError> {
        self.seed
            .ok_or_else(|| PipelineError::Config("a seed is required (config `seed` or --seed)".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&json).unwrap(), c);
        assert_eq!(c.final_training.epochs, 90);
        assert_eq!(c.evolution_training.epochs, 25);
    }

    #[test]
    fn partial_json_takes_defaults() {
        let c: PipelineConfig = serde_json::from_str(r#"{"k": 4, "seed": 7}"#).unwrap();
        assert_eq!(c.k, 4);
        assert_eq!(c.require_seed().unwrap(), 7);
        assert_eq!(c.red_ratio, 5);
    }

    #[test]
    fn unknown_field_and_bad_values_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"kk": 4}"#).is_err());
        let c = PipelineConfig { quantile: 0.0, ..Default::default() };
        assert!(matches!(c.validate(), Err(PipelineError::Config(_))));
        assert!(PipelineConfig::default().require_seed().is_err());
    }
}
