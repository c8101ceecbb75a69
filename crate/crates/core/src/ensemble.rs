//! Ensemble detector: per-member thresholds on reconstruction error,
//! window-to-row flag expansion, voting and point-wise metrics.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datapipe::{make_group_windows, window_count, DataError, TimeSeriesDataset};
use crate::io;
use crate::ndnet::{window_errors, NetError, Network};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// How member row flags combine into the ensemble decision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VotingRule {
    /// At least half of the members; a tie counts as an anomaly.
    #[default]
    Majority,
    Any,
    /// At least `m` members, with `m` capped at the member count.
    AtLeast(usize),
}

impl VotingRule {
    pub fn decide(&self, flagged: usize, members: usize) -> bool {
        match *self {
            VotingRule::Majority => members > 0 && flagged * 2 >= members,
            VotingRule::Any => flagged >= 1,
            VotingRule::AtLeast(m) => flagged >= m.clamp(1, members.max(1)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Member {
    /// Index of the group in the subgroup solution.
    pub group_index: usize,
    pub group: Vec<usize>,
    pub network: Network,
    pub threshold: f64,
}

impl Member {
    pub fn window(&self) -> usize {
        self.network.input_shape().0
    }

    /// Per-window reconstruction errors on the member's features.
    pub fn window_errors(&self, ds: &TimeSeriesDataset, stride: usize) -> Result<Vec<f64>, EnsembleError> {
        let w = make_group_windows(ds, &self.group, self.window(), stride)?;
        Ok(window_errors(&self.network, &w.windows)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub members: Vec<Member>,
    pub voting: VotingRule,
    pub stride: usize,
}

impl EnsembleModel {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.members.is_empty() {
            return Err(EnsembleError::Contract("ensemble has no members".into()));
        }
        if self.stride == 0 {
            return Err(EnsembleError::Contract("stride must be positive".into()));
        }
        for (i, m) in self.members.iter().enumerate() {
            if m.group.is_empty() {
                return Err(EnsembleError::Contract(format!("member {i} has an empty group")));
            }
            if !(m.threshold.is_finite() && m.threshold >= 0.0) {
                return Err(EnsembleError::Contract(format!(
                    "member {i} threshold {} is not a finite nonnegative value",
                    m.threshold
                )));
            }
            if m.network.input_shape().1 != m.group.len() {
                return Err(EnsembleError::Contract(format!(
                    "member {i} network expects {} sensors, group has {}",
                    m.network.input_shape().1,
                    m.group.len()
                )));
            }
        }
        if let VotingRule::AtLeast(0) = self.voting {
            return Err(EnsembleError::Contract("at_least voting needs m >= 1".into()));
        }
        Ok(())
    }
}

/// Linear-interpolation quantile of `values` (`q = 1` is the maximum).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Per-member threshold: the `quantile` of its validation window errors.
pub fn calibrate_thresholds(
    members: &[Member],
    val: &TimeSeriesDataset,
    quantile_q: f64,
    stride: usize,
) -> Result<Vec<f64>, EnsembleError> {
    if !(quantile_q > 0.0 && quantile_q <= 1.0) {
        return Err(EnsembleError::Calibration(format!("quantile {quantile_q} outside (0, 1]")));
    }
    if val.anomaly_count() > 0 {
        return Err(EnsembleError::Calibration(format!(
            "validation data contains {} labelled anomalies",
            val.anomaly_count()
        )));
    }
    members
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            if window_count(val.rows(), m.window(), stride) == 0 {
                return Err(EnsembleError::Calibration(format!(
                    "member {i}: no validation windows of size {}",
                    m.window()
                )));
            }
            Ok(quantile(&m.window_errors(val, stride)?, quantile_q))
        })
        .collect()
}

/// Set every member's threshold from validation data.
pub fn calibrate(model: &mut EnsembleModel, val: &TimeSeriesDataset, quantile_q: f64) -> Result<(), EnsembleError> {
    let t = calibrate_thresholds(&model.members, val, quantile_q, model.stride)?;
    for (m, t) in model.members.iter_mut().zip(t) {
        m.threshold = t;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    /// Ensemble decision per test row.
    pub flags: Vec<u8>,
    /// Per member, per row: flag after window-to-row expansion.
    pub member_flags: Vec<Vec<u8>>,
    /// Per member, per row: the largest error of any window covering the row.
    pub scores: Vec<Vec<f64>>,
}

impl DetectionResult {
    pub fn rows(&self) -> usize {
        self.flags.len()
    }
}

/// Score and flag every test row.
pub fn detect(model: &EnsembleModel, test: &TimeSeriesDataset) -> Result<DetectionResult, EnsembleError> {
    model.validate()?;
    for (i, m) in model.members.iter().enumerate() {
        if let Some(&f) = m.group.iter().find(|&&f| f >= test.sensors()) {
            return Err(EnsembleError::Contract(format!(
                "member {i} uses sensor {f}; test data has {} sensors",
                test.sensors()
            )));
        }
    }
    let rows = test.rows();
    let per_member: Vec<Result<(Vec<u8>, Vec<f64>), EnsembleError>> = model
        .members
        .par_iter()
        .map(|m| {
            let errors = m.window_errors(test, model.stride)?;
            let w = m.window();
            let mut flags = vec![0u8; rows];
            let mut scores = vec![0.0f64; rows];
            for (j, &e) in errors.iter().enumerate() {
                let start = j * model.stride;
                let flagged = e > m.threshold;
                for r in start..start + w {
                    scores[r] = scores[r].max(e);
                    if flagged {
                        flags[r] = 1;
                    }
                }
            }
            Ok((flags, scores))
        })
        .collect();
    let mut member_flags = Vec::with_capacity(model.members.len());
    let mut scores = Vec::with_capacity(model.members.len());
    for r in per_member {
        let (f, s) = r?;
        member_flags.push(f);
        scores.push(s);
    }
    let n = model.members.len();
    let flags = (0..rows)
        .map(|r| {
            let count = member_flags.iter().filter(|f| f[r] == 1).count();
            u8::from(model.voting.decide(count, n))
        })
        .collect();
    Ok(DetectionResult {
        flags,
        member_flags,
        scores,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
    /// Set when a zero denominator forced a metric to 0.
    pub degenerate: bool,
    /// Whether predictions were point-adjusted before counting.
    pub point_adjust: bool,
}

/// Expand predictions to every row of a labelled segment in which at least
/// one row is predicted.
pub fn point_adjust(flags: &[u8], labels: &[u8]) -> Vec<u8> {
    let mut out = flags.to_vec();
    let mut r = 0;
    while r < labels.len() {
        if labels[r] == 1 {
            let start = r;
            while r < labels.len() && labels[r] == 1 {
                r += 1;
            }
            if flags[start..r].contains(&1) {
                out[start..r].fill(1);
            }
        } else {
            r += 1;
        }
    }
    out
}

/// Point-wise precision, recall and F1. Point adjustment is off by default
/// and only applied when requested.
pub fn evaluate_metrics(flags: &[u8], labels: &[u8], adjust: bool) -> Result<Metrics, EnsembleError> {
    if flags.len() != labels.len() {
        return Err(EnsembleError::Contract(format!(
            "{} predictions for {} labels",
            flags.len(),
            labels.len()
        )));
    }
    let pred = if adjust { point_adjust(flags, labels) } else { flags.to_vec() };
    let (mut tp, mut fp, mut fne, mut tn) = (0, 0, 0, 0);
    for (&p, &l) in pred.iter().zip(labels) {
        match (p == 1, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => tn += 1,
        }
    }
    let mut degenerate = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fne);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    if degenerate {
        log::warn!("degenerate metrics: tp {tp}, fp {fp}, fn {fne}");
    }
    Ok(Metrics {
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fne,
        true_negatives: tn,
        degenerate,
        point_adjust: adjust,
    })
}

/// Write `row_index, ensemble_flag, <one score column per member>`.
pub fn write_detection_csv(result: &DetectionResult, path: &Path) -> Result<(), EnsembleError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["row_index".to_string(), "ensemble_flag".to_string()];
    header.extend((0..result.scores.len()).map(|m| format!("member_{m}_score")));
    w.write_record(&header)?;
    for r in 0..result.rows() {
        let mut rec = vec![r.to_string(), result.flags[r].to_string()];
        rec.extend(result.scores.iter().map(|s| format!("{}", s[r])));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| EnsembleError::Io(e.into_error()))?;
    io::write_atomic(path, &bytes)?;
    Ok(())
}

/// Jaccard index of two binary row sets.
pub fn jaccard(a: &[u8], b: &[u8]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x == 1 && **y == 1).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x == 1 || **y == 1).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
