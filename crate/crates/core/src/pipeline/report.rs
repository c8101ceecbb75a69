use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    load_archive, read_json, BaselineArtifact, DataSummary, FineTuneArtifact, GroupsArtifact, MetricsReport,
    ModelsArtifact, BASELINE_FILE, DATA_FILE, FINETUNED_DIR, FINETUNE_FILE, GROUPS_FILE, METRICS_FILE, MODELS_FILE,
};
use crate::ensemble::{Metrics, VotingRule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberSummary {
    pub group_index: usize,
    pub sensors: Vec<String>,
    pub window_size: usize,
    pub channel_chain: Vec<usize>,
    pub batchnorm_layers: usize,
    pub search_fitness: Option<f64>,
    pub threshold: f64,
}

/// Everything a reader needs to judge a run, collected from its artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: Option<u64>,
    pub data: DataSummary,
    pub groups: Vec<Vec<usize>>,
    pub group_fitness: f64,
    pub group_history: Vec<f64>,
    pub model_histories: Vec<Vec<f64>>,
    pub members: Vec<MemberSummary>,
    pub voting: VotingRule,
    pub fine_tune_initial: f64,
    pub fine_tune_final: f64,
    pub fine_tune_generations: usize,
    pub metrics: Option<MetricsReport>,
    pub baseline: Option<BaselineArtifact>,
}

pub fn summarize(dir: &Path) -> Result<RunSummary, String> {
    let data: DataSummary = read_json(&dir.join(DATA_FILE))?;
    let cfg: super::PipelineConfig = read_json(&dir.join(super::CONFIG_FILE))?;
    let groups: GroupsArtifact = read_json(&dir.join(GROUPS_FILE))?;
    let models: ModelsArtifact = read_json(&dir.join(MODELS_FILE))?;
    let fine: FineTuneArtifact = read_json(&dir.join(FINETUNE_FILE))?;
    let model = load_archive(&dir.join(FINETUNED_DIR))?;
    let metrics_path = dir.join(METRICS_FILE);
    let metrics = if metrics_path.exists() { Some(read_json(&metrics_path)?) } else { None };
    let baseline_path = dir.join(BASELINE_FILE);
    let baseline = if baseline_path.exists() { Some(read_json(&baseline_path)?) } else { None };
    let members = model
        .members
        .iter()
        .map(|m| {
            let g = &models.ensemble.genomes[m.group_index];
            MemberSummary {
                group_index: m.group_index,
                sensors: m.group.iter().map(|&s| data.sensor_names[s].clone()).collect(),
                window_size: g.window_size,
                channel_chain: g.channel_chain(),
                batchnorm_layers: g.layers.iter().filter(|l| l.batchnorm).count(),
                search_fitness: models.best_fitness[m.group_index],
                threshold: m.threshold,
            }
        })
        .collect();
    Ok(RunSummary {
        seed: cfg.seed,
        data,
        groups: models.ensemble.solution.groups.clone(),
        group_fitness: groups.best().fitness,
        group_history: groups.best_history,
        model_histories: models.histories,
        members,
        voting: model.voting,
        fine_tune_initial: fine.initial_fitness,
        fine_tune_final: fine.final_fitness,
        fine_tune_generations: fine.history.len().saturating_sub(1),
        metrics,
        baseline,
    })
}

fn metrics_line(out: &mut String, label: &str, m: &Metrics) {
    let _ = writeln!(
        out,
        "  {label:<16} precision {:.4}  recall {:.4}  f1 {:.4}  (tp {} fp {} fn {}){}",
        m.precision,
        m.recall,
        m.f1,
        m.true_positives,
        m.false_positives,
        m.false_negatives,
        if m.degenerate { "  [degenerate]" } else { "" }
    );
}

fn history(h: &[f64]) -> String {
    match (h.first(), h.last()) {
        (Some(a), Some(b)) => format!("{a:.6} -> {b:.6} over {} generations", h.len() - 1),
        _ => "empty group".into(),
    }
}

/// Plain-text report. Deterministic for a given summary.
pub fn render_report(s: &RunSummary) -> String {
    let mut out = String::new();
    let d = &s.data;
    let _ = writeln!(out, "neuroevo run report");
    if let Some(seed) = s.seed {
        let _ = writeln!(out, "seed: {seed}");
    }
    let _ = writeln!(out, "\nData");
    let _ = writeln!(out, "  sensors: {}", d.sensor_names.len());
    let _ = writeln!(out, "  train rows: {} (evolution uses {} after averaging every {})", d.train_rows, d.evolution_rows, d.red_ratio);
    let _ = writeln!(out, "  final split: {} train / {} validation", d.final_train_rows, d.final_val_rows);
    match d.test_anomalies {
        Some(a) => {
            let _ = writeln!(out, "  test rows: {} ({a} labelled anomalous)", d.test_rows);
        }
        None => {
            let _ = writeln!(out, "  test rows: {} (unlabelled)", d.test_rows);
        }
    }
    let _ = writeln!(out, "\nSubgroup search");
    let _ = writeln!(out, "  best fitness: {}", history(&s.group_history));
    for (i, g) in s.groups.iter().enumerate() {
        let names: Vec<&str> = g.iter().map(|&j| d.sensor_names[j].as_str()).collect();
        let _ = writeln!(out, "  group {i}: [{}]", names.join(", "));
    }
    let _ = writeln!(out, "\nModel search");
    for (i, h) in s.model_histories.iter().enumerate() {
        let _ = writeln!(out, "  group {i}: {}", history(h));
    }
    let _ = writeln!(out, "\nEnsemble ({} members, {:?} voting)", s.members.len(), s.voting);
    for m in &s.members {
        let _ = writeln!(
            out,
            "  group {}: window {}, channels {:?}, {} batchnorm, threshold {:.6}",
            m.group_index, m.window_size, m.channel_chain, m.batchnorm_layers, m.threshold
        );
    }
    let _ = writeln!(
        out,
        "\nFine-tuning: fitness {:.6} -> {:.6} over {} generations",
        s.fine_tune_initial, s.fine_tune_final, s.fine_tune_generations
    );
    if let Some(m) = &s.metrics {
        let _ = writeln!(out, "\nTest metrics ({} rows flagged)", m.flagged_rows);
        metrics_line(&mut out, "ensemble", &m.ensemble);
        if let Some(pa) = &m.point_adjusted {
            metrics_line(&mut out, "point-adjusted", pa);
        }
        for (i, mm) in m.members.iter().enumerate() {
            metrics_line(&mut out, &format!("member {i}"), mm);
        }
    }
    if let Some(b) = &s.baseline {
        let _ = writeln!(out, "\nSingle-model baseline (all sensors, channels {:?})", b.genome.channel_chain());
        if let Some(m) = &b.metrics {
            metrics_line(&mut out, "baseline", &m.ensemble);
        }
    }
    out
}
