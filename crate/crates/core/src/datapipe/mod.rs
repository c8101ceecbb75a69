//! Dataset ingestion, downsampling, normalisation, windowing, train/validation
//! split and the synthetic benchmark generator.

mod csvio;
mod synth;

pub use csvio::{load_csv, parse_label, write_csv, CsvLoad};
pub use synth::{synth_generate, PlantedEvent, SynthBenchmark, SynthSpec, AnomalyKind};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndnet::Tensor3;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}, column '{column}': cannot parse '{value}' as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: unrecognised label '{value}'")]
    Label { row: usize, value: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("operation yields no rows: {0}")]
    EmptyResult(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Row-major matrix of sensor readings with optional binary labels
/// (1 = anomaly).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    name: String,
    sensor_names: Vec<String>,
    rows: usize,
    values: Vec<f64>,
    labels: Option<Vec<u8>>,
}

impl TimeSeriesDataset {
    pub fn new(
        name: impl Into<String>,
        sensor_names: Vec<String>,
        values: Vec<f64>,
        labels: Option<Vec<u8>>,
    ) -> Result<Self, DataError> {
        let sensors = sensor_names.len();
        if sensors == 0 {
            return Err(DataError::Config("dataset has no sensor columns".into()));
        }
        if !values.len().is_multiple_of(sensors) {
            return Err(DataError::Contract(format!(
                "{} values do not fill rows of {sensors} sensors",
                values.len()
            )));
        }
        let rows = values.len() / sensors;
        if let Some(l) = &labels {
            if l.len() != rows {
                return Err(DataError::Contract(format!(
                    "{} labels for {rows} rows",
                    l.len()
                )));
            }
            if l.iter().any(|&v| v > 1) {
                return Err(DataError::Contract("labels must be 0 or 1".into()));
            }
        }
        Ok(Self {
            name: name.into(),
            sensor_names,
            rows,
            values,
            labels,
        })
    }

    /// Build from per-row vectors.
    pub fn from_rows(
        name: impl Into<String>,
        sensor_names: Vec<String>,
        rows: &[Vec<f64>],
        labels: Option<Vec<u8>>,
    ) -> Result<Self, DataError> {
        let n = sensor_names.len();
        if let Some((i, _)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(DataError::Contract(format!(
                "row {i} has {} values, expected {n}",
                rows[i].len()
            )));
        }
        Self::new(name, sensor_names, rows.concat(), labels)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn sensor_names(&self) -> &[String] {
        &self.sensor_names
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn sensors(&self) -> usize {
        self.sensor_names.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let s = self.sensors();
        &self.values[r * s..(r + 1) * s]
    }

    #[inline]
    pub fn value(&self, r: usize, s: usize) -> f64 {
        self.values[r * self.sensors() + s]
    }

    /// Column `s` as a vector.
    pub fn column(&self, s: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.value(r, s)).collect()
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn anomaly_count(&self) -> usize {
        self.labels
            .as_ref()
            .map_or(0, |l| l.iter().filter(|&&v| v == 1).count())
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> TimeSeriesDataset {
        let s = self.sensors();
        TimeSeriesDataset {
            name: self.name.clone(),
            sensor_names: self.sensor_names.clone(),
            rows: end - start,
            values: self.values[start * s..end * s].to_vec(),
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
        }
    }
}

/// Sliding windows `[count, window, sensors]`; each window remembers the
/// row it starts at.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub windows: Tensor3,
    pub window: usize,
    pub stride: usize,
    pub origin_rows: Vec<usize>,
}

impl WindowSet {
    pub fn count(&self) -> usize {
        self.origin_rows.len()
    }

    /// Rows covered by the windows, concatenated in window order.
    pub fn flatten(&self) -> Vec<Vec<f64>> {
        let mut rows = Vec::new();
        for b in 0..self.windows.batch() {
            for t in 0..self.window {
                rows.push(
                    (0..self.windows.length())
                        .map(|s| self.windows.get(b, t, s))
                        .collect(),
                );
            }
        }
        rows
    }
}

/// Number of windows for `rows` rows; zero when `window > rows`.
pub fn window_count(rows: usize, window: usize, stride: usize) -> usize {
    if window > rows || window == 0 || stride == 0 {
        0
    } else {
        (rows - window) / stride + 1
    }
}

/// Average each `red_ratio` consecutive rows into one; trailing remainder
/// rows are dropped. A reduced row is labelled anomalous if any of its
/// constituent rows is.
pub fn downsample(ds: &TimeSeriesDataset, red_ratio: usize) -> Result<TimeSeriesDataset, DataError> {
    if red_ratio == 0 {
        return Err(DataError::Config("red_ratio must be at least 1".into()));
    }
    if red_ratio > ds.rows() {
        return Err(DataError::EmptyResult(format!(
            "red_ratio {red_ratio} exceeds {} rows",
            ds.rows()
        )));
    }
    if red_ratio == 1 {
        return Ok(ds.clone());
    }
    let out_rows = ds.rows() / red_ratio;
    let s = ds.sensors();
    let mut values = Vec::with_capacity(out_rows * s);
    for t in 0..out_rows {
        for j in 0..s {
            let sum: f64 = (t * red_ratio..(t + 1) * red_ratio)
                .map(|r| ds.value(r, j))
                .sum();
            values.push(sum / red_ratio as f64);
        }
    }
    let labels = ds.labels().map(|l| {
        l[..out_rows * red_ratio]
            .chunks(red_ratio)
            .map(|c| u8::from(c.contains(&1)))
            .collect()
    });
    TimeSeriesDataset::new(ds.name(), ds.sensor_names.clone(), values, labels)
}

/// Per-sensor min/max fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(ds: &TimeSeriesDataset) -> Self {
        let s = ds.sensors();
        let mut min = vec![f64::INFINITY; s];
        let mut max = vec![f64::NEG_INFINITY; s];
        for r in 0..ds.rows() {
            for (j, &v) in ds.row(r).iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Self { min, max }
    }

    /// Scale with the fitted statistics; values outside the fitted range
    /// map outside `[0, 1]` and are not clipped. Constant sensors map to 0.
    pub fn transform(&self, ds: &TimeSeriesDataset) -> Result<TimeSeriesDataset, DataError> {
        if ds.sensors() != self.min.len() {
            return Err(DataError::Contract(format!(
                "scaler fitted on {} sensors, dataset has {}",
                self.min.len(),
                ds.sensors()
            )));
        }
        let s = ds.sensors();
        let values = ds
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let j = i % s;
                let range = self.max[j] - self.min[j];
                if range > 0.0 {
                    (v - self.min[j]) / range
                } else {
                    0.0
                }
            })
            .collect();
        Ok(TimeSeriesDataset {
            values,
            ..ds.clone()
        })
    }
}

/// Min-max scale every sensor into `[0, 1]`; returns the fitted scaler so
/// test data can be transformed with training statistics.
pub fn normalize(ds: &TimeSeriesDataset) -> (TimeSeriesDataset, MinMaxScaler) {
    let scaler = MinMaxScaler::fit(ds);
    let out = scaler
        .transform(ds)
        .expect("scaler fitted on the same dataset");
    (out, scaler)
}

/// Contiguous tail split: the last `floor(rows * val_fraction)` rows form
/// the validation set. The source must be anomaly-free.
pub fn split_train_val(
    ds: &TimeSeriesDataset,
    val_fraction: f64,
) -> Result<(TimeSeriesDataset, TimeSeriesDataset), DataError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DataError::Config(format!(
            "val_fraction {val_fraction} outside (0, 1)"
        )));
    }
    if ds.anomaly_count() > 0 {
        return Err(DataError::Contract(format!(
            "train/validation split source contains {} labelled anomalies",
            ds.anomaly_count()
        )));
    }
    let val_rows = (ds.rows() as f64 * val_fraction).floor() as usize;
    let train_rows = ds.rows() - val_rows;
    if train_rows == 0 || val_rows == 0 {
        return Err(DataError::EmptyResult(format!(
            "split of {} rows at {val_fraction} leaves an empty side",
            ds.rows()
        )));
    }
    Ok((
        ds.slice_rows(0, train_rows).with_name(format!("{}-train", ds.name())),
        ds.slice_rows(train_rows, ds.rows()).with_name(format!("{}-val", ds.name())),
    ))
}

/// Sliding windows over all sensors.
pub fn make_windows(ds: &TimeSeriesDataset, window: usize, stride: usize) -> Result<WindowSet, DataError> {
    let all: Vec<usize> = (0..ds.sensors()).collect();
    make_group_windows(ds, &all, window, stride)
}

/// Sliding windows restricted to the sensors in `group`, in group order.
pub fn make_group_windows(
    ds: &TimeSeriesDataset,
    group: &[usize],
    window: usize,
    stride: usize,
) -> Result<WindowSet, DataError> {
    if window == 0 || stride == 0 {
        return Err(DataError::Config("window and stride must be positive".into()));
    }
    if group.is_empty() {
        return Err(DataError::Config("window group has no sensors".into()));
    }
    if let Some(&bad) = group.iter().find(|&&j| j >= ds.sensors()) {
        return Err(DataError::Contract(format!(
            "sensor index {bad} out of range for {} sensors",
            ds.sensors()
        )));
    }
    let count = window_count(ds.rows(), window, stride);
    if count == 0 {
        return Err(DataError::EmptyResult(format!(
            "window {window} exceeds {} rows",
            ds.rows()
        )));
    }
    let g = group.len();
    let mut data = Vec::with_capacity(count * window * g);
    let mut origin_rows = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * stride;
        origin_rows.push(start);
        for t in 0..window {
            let row = ds.row(start + t);
            data.extend(group.iter().map(|&j| row[j]));
        }
    }
    let windows = Tensor3::from_vec(count, window, g, data).expect("window buffer size");
    Ok(WindowSet {
        windows,
        window,
        stride,
        origin_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn ramp(rows: usize, sensors: usize) -> TimeSeriesDataset {
        let values = (0..rows * sensors).map(|v| v as f64).collect();
        TimeSeriesDataset::new("ramp", names(sensors), values, None).unwrap()
    }

    #[test]
    fn downsample_identity_and_mean() {
        let ds = ramp(7, 2);
        assert_eq!(downsample(&ds, 1).unwrap(), ds);
        let one = TimeSeriesDataset::new("x", names(1), vec![1.0, 2.0, 3.0, 4.0, 5.0], None).unwrap();
        assert_eq!(downsample(&one, 5).unwrap().values(), &[3.0]);
        assert!(matches!(downsample(&one, 6), Err(DataError::EmptyResult(_))));
        assert!(matches!(downsample(&one, 0), Err(DataError::Config(_))));
    }

    #[test]
    fn downsample_swat_row_count() {
        let ds = TimeSeriesDataset::new("swat", names(1), vec![0.0; 49668], None).unwrap();
        assert_eq!(downsample(&ds, 5).unwrap().rows(), 9933);
    }

    #[test]
    fn normalize_examples() {
        let ds = TimeSeriesDataset::from_rows(
            "n",
            names(2),
            &[vec![0.0, 7.0], vec![5.0, 7.0], vec![10.0, 7.0]],
            None,
        )
        .unwrap();
        let (out, scaler) = normalize(&ds);
        assert_eq!(out.column(0), vec![0.0, 0.5, 1.0]);
        assert_eq!(out.column(1), vec![0.0, 0.0, 0.0]);

        // test data scaled with train statistics, not clipped
        let test = TimeSeriesDataset::from_rows("t", names(2), &[vec![15.0, 9.0], vec![-5.0, 7.0]], None).unwrap();
        let scaled = scaler.transform(&test).unwrap();
        assert_eq!(scaled.column(0), vec![1.5, -0.5]);
        assert_eq!(scaled.column(1), vec![0.0, 0.0]);
    }

    #[test]
    fn split_examples() {
        let (t, v) = split_train_val(&ramp(100, 1), 0.2).unwrap();
        assert_eq!((t.rows(), v.rows()), (80, 20));
        let (t, v) = split_train_val(&ramp(9933, 1), 0.2).unwrap();
        assert_eq!((t.rows(), v.rows()), (7947, 1986));
        let (t, v) = split_train_val(&ramp(3, 1), 0.5).unwrap();
        assert_eq!((t.rows(), v.rows()), (2, 1));
        // validation is the tail
        assert_eq!(v.values(), &[2.0]);
    }

    #[test]
    fn split_rejects_anomalies() {
        let ds = TimeSeriesDataset::new("a", names(1), vec![0.0; 4], Some(vec![0, 0, 1, 0])).unwrap();
        assert!(matches!(split_train_val(&ds, 0.25), Err(DataError::Contract(_))));
        let clean = TimeSeriesDataset::new("a", names(1), vec![0.0; 4], Some(vec![0; 4])).unwrap();
        assert!(split_train_val(&clean, 0.25).is_ok());
    }

    #[test]
    fn window_counts() {
        let ds = ramp(10, 3);
        assert_eq!(make_windows(&ds, 5, 1).unwrap().count(), 6);
        assert_eq!(make_windows(&ds, 5, 5).unwrap().count(), 2);
        assert_eq!(make_windows(&ds, 10, 1).unwrap().count(), 1);
        assert!(matches!(make_windows(&ds, 11, 1), Err(DataError::EmptyResult(_))));
        let ws = make_windows(&ds, 4, 3).unwrap();
        assert_eq!(ws.origin_rows, vec![0, 3, 6]);
    }

    #[test]
    fn group_windows_follow_group_order() {
        let ds = ramp(3, 4);
        let ws = make_group_windows(&ds, &[3, 1], 2, 1).unwrap();
        assert_eq!(ws.windows.shape(), (2, 2, 2));
        // window 1, timestep 0 = row 1 -> sensors 3 and 1
        assert_eq!(ws.windows.get(1, 0, 0), 7.0);
        assert_eq!(ws.windows.get(1, 0, 1), 5.0);
    }

    proptest! {
        #[test]
        fn downsample_row_count_and_label_soundness(
            labels in prop::collection::vec(0u8..2, 10..120),
            ratio in 1usize..=10,
        ) {
            let rows = labels.len();
            let ds = TimeSeriesDataset::new("p", names(1), (0..rows).map(|v| v as f64).collect(), Some(labels.clone())).unwrap();
            let out = downsample(&ds, ratio).unwrap();
            prop_assert_eq!(out.rows(), rows / ratio);
            for (t, &l) in out.labels().unwrap().iter().enumerate() {
                let any = labels[t * ratio..(t + 1) * ratio].contains(&1);
                prop_assert_eq!(l == 1, any);
            }
        }

        #[test]
        fn windows_with_stride_equal_window_reconstruct_rows(
            rows in 1usize..40, sensors in 1usize..5, window in 1usize..8,
        ) {
            prop_assume!(window <= rows);
            let ds = ramp(rows, sensors);
            let ws = make_windows(&ds, window, window).unwrap();
            prop_assert_eq!(ws.count(), window_count(rows, window, window));
            let flat = ws.flatten();
            for (r, row) in flat.iter().enumerate() {
                prop_assert_eq!(row.as_slice(), ds.row(r));
            }
            prop_assert_eq!(flat.len(), (rows / window) * window);
        }

        #[test]
        fn normalize_is_idempotent(values in prop::collection::vec(-1e3f64..1e3, 6..60)) {
            let n = values.len() / 3 * 3;
            let ds = TimeSeriesDataset::new("p", names(3), values[..n].to_vec(), None).unwrap();
            let (once, _) = normalize(&ds);
            let (twice, _) = normalize(&once);
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
