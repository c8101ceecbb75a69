//! Seeded synthetic multivariate benchmark with planted sensor clusters and
//! labelled anomalies.
//!
//! Each cluster is driven by its own latent signal (two sinusoids of
//! cluster-specific period plus AR(1) noise). A sensor is a scaled copy of
//! its cluster latent, lightly cross-coupled with a second cluster-local
//! oscillation, plus white noise. Latents of different clusters are
//! independent, so correlation is high inside a cluster and near zero
//! across clusters.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, TimeSeriesDataset};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub sensors: usize,
    /// Rows in each of the train and test series.
    pub rows: usize,
    pub groups: usize,
    pub anomaly_rate: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    Spike,
    StuckAt,
    Drift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedEvent {
    pub kind: AnomalyKind,
    pub start: usize,
    pub len: usize,
    pub sensors: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SynthBenchmark {
    /// Anomaly-free training series (labels present, all zero).
    pub train: TimeSeriesDataset,
    /// Test series with planted anomalies and labels.
    pub test: TimeSeriesDataset,
    /// Planted cluster of every sensor.
    pub cluster_of: Vec<usize>,
    pub events: Vec<PlantedEvent>,
}

impl SynthBenchmark {
    /// Planted clusters as sorted sensor-index lists, ordered by first member.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let k = self.cluster_of.iter().max().map_or(0, |m| m + 1);
        let mut groups = vec![Vec::new(); k];
        for (s, &c) in self.cluster_of.iter().enumerate() {
            groups[c].push(s);
        }
        groups.sort();
        groups
    }
}

struct SensorModel {
    cluster: usize,
    gain: f64,
    coupling: f64,
    offset: f64,
    noise: f64,
}

struct ClusterModel {
    period: f64,
    phase: [f64; 3],
    ar_state: f64,
}

const AR_COEF: f64 = 0.95;

impl ClusterModel {
    /// `(primary latent, coupling oscillation)` at time `t`.
    fn step(&mut self, t: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
        let innovation: f64 = gaussian(rng) * (1.0 - AR_COEF * AR_COEF).sqrt();
        self.ar_state = AR_COEF * self.ar_state + innovation;
        let z = (TAU * t / self.period + self.phase[0]).sin()
            + 0.4 * (TAU * t / (self.period * 0.37) + self.phase[1]).sin()
            + 0.3 * self.ar_state;
        let w = (TAU * t / (self.period * 1.7) + self.phase[2]).cos();
        (z, w)
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

fn validate(spec: &SynthSpec) -> Result<(), DataError> {
    if !(spec.anomaly_rate > 0.0 && spec.anomaly_rate <= 0.3) {
        return Err(DataError::Config(format!(
            "anomaly_rate {} outside (0, 0.3]",
            spec.anomaly_rate
        )));
    }
    if spec.groups == 0 || spec.groups > spec.sensors {
        return Err(DataError::Config(format!(
            "groups {} must be in 1..={}",
            spec.groups, spec.sensors
        )));
    }
    if spec.rows < 50 {
        return Err(DataError::Config("rows must be at least 50".into()));
    }
    Ok(())
}

/// Generate an anomaly-free training series and a labelled test series.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthBenchmark, DataError> {
    validate(spec)?;
    let mut rng = seed::rng(spec.seed);

    let mut order: Vec<usize> = (0..spec.sensors).collect();
    order.shuffle(&mut rng);
    let mut cluster_of = vec![0; spec.sensors];
    for (pos, &s) in order.iter().enumerate() {
        cluster_of[s] = pos % spec.groups;
    }

    let mut clusters: Vec<ClusterModel> = (0..spec.groups)
        .map(|c| ClusterModel {
            period: 24.0 * 1.45f64.powi(c as i32) * rng.gen_range(0.95..1.05),
            phase: [rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU)],
            ar_state: 0.0,
        })
        .collect();
    let sensors: Vec<SensorModel> = (0..spec.sensors)
        .map(|s| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            SensorModel {
                cluster: cluster_of[s],
                gain: sign * rng.gen_range(0.6..1.4),
                coupling: rng.gen_range(-0.3..0.3),
                offset: rng.gen_range(-2.0..2.0),
                noise: 0.08,
            }
        })
        .collect();

    let total = 2 * spec.rows;
    let mut values = Vec::with_capacity(total * spec.sensors);
    let mut latent = vec![(0.0, 0.0); spec.groups];
    for t in 0..total {
        for (c, cm) in clusters.iter_mut().enumerate() {
            latent[c] = cm.step(t as f64, &mut rng);
        }
        for s in &sensors {
            let (z, w) = latent[s.cluster];
            values.push(s.gain * (z + s.coupling * w) + s.offset + s.noise * gaussian(&mut rng));
        }
    }
    let (train_vals, test_vals) = values.split_at(spec.rows * spec.sensors);
    let mut test_vals = test_vals.to_vec();

    let events = plan_events(spec, &cluster_of, &mut rng);
    let mut labels = vec![0u8; spec.rows];
    for ev in &events {
        for (i, r) in (ev.start..ev.start + ev.len).enumerate() {
            labels[r] = 1;
            let progress = if ev.len > 1 { i as f64 / (ev.len - 1) as f64 } else { 1.0 };
            for &s in &ev.sensors {
                let sm = &sensors[s];
                let cell = &mut test_vals[r * spec.sensors + s];
                let amp = sm.gain.abs();
                match ev.kind {
                    AnomalyKind::Spike => *cell += amp * 2.5 * event_sign(ev, s),
                    AnomalyKind::StuckAt => {
                        *cell = sm.offset + amp * 2.1 * event_sign(ev, s);
                    }
                    AnomalyKind::Drift => *cell += amp * (0.8 + 1.2 * progress) * event_sign(ev, s),
                }
            }
        }
    }

    let names: Vec<String> = (0..spec.sensors).map(|s| format!("s{s:02}")).collect();
    let train = TimeSeriesDataset::new(
        "synth-train",
        names.clone(),
        train_vals.to_vec(),
        Some(vec![0; spec.rows]),
    )?;
    let test = TimeSeriesDataset::new("synth-test", names, test_vals, Some(labels))?;
    Ok(SynthBenchmark {
        train,
        test,
        cluster_of,
        events,
    })
}

/// Deterministic direction of an event on one sensor.
fn event_sign(ev: &PlantedEvent, sensor: usize) -> f64 {
    if seed::splitmix64((ev.start as u64) << 16 ^ sensor as u64) & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Choose event kinds, lengths, positions and affected sensors so that the
/// labelled row count equals `round(rate * rows)` exactly.
fn plan_events(spec: &SynthSpec, cluster_of: &[usize], rng: &mut ChaCha8Rng) -> Vec<PlantedEvent> {
    let target = ((spec.anomaly_rate * spec.rows as f64).round() as usize).max(1);
    let mut kinds_lens = Vec::new();
    let mut sum = 0;
    while sum < target {
        let roll: f64 = rng.gen();
        let (kind, len) = if roll < 0.2 {
            (AnomalyKind::Spike, rng.gen_range(1..=3))
        } else if roll < 0.6 {
            (AnomalyKind::StuckAt, rng.gen_range(30..=90))
        } else {
            (AnomalyKind::Drift, rng.gen_range(40..=120))
        };
        let len = len.min(target - sum);
        kinds_lens.push((kind, len));
        sum += len;
    }

    let n = kinds_lens.len();
    let free = spec.rows - target;
    let min_gap = (free / (n + 1)).min(20);
    let extra = free - min_gap * (n + 1);
    let weights: Vec<f64> = (0..=n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let wsum: f64 = weights.iter().sum();
    let mut gaps: Vec<usize> = weights
        .iter()
        .map(|w| min_gap + (extra as f64 * w / wsum).floor() as usize)
        .collect();
    let used: usize = gaps.iter().sum();
    gaps[n] += free - used;

    let k = cluster_of.iter().max().map_or(0, |m| m + 1);
    let majority = k / 2 + 1;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (s, &c) in cluster_of.iter().enumerate() {
        members[c].push(s);
    }

    let mut events = Vec::with_capacity(n);
    let mut pos = 0;
    for (i, (kind, len)) in kinds_lens.into_iter().enumerate() {
        pos += gaps[i];
        let mut cl: Vec<usize> = (0..k).collect();
        cl.shuffle(rng);
        let mut sensors = Vec::new();
        for &c in &cl[..majority] {
            let per = if members[c].len() >= 4 { 2 } else { 1 };
            sensors.extend(members[c].choose_multiple(rng, per).copied());
        }
        sensors.sort_unstable();
        events.push(PlantedEvent {
            kind,
            start: pos,
            len,
            sensors,
        });
        pos += len;
    }
    events
}
