use serde::{Deserialize, Serialize};

use super::NetError;

/// Dense `[batch, channels, length]` array, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    batch: usize,
    channels: usize,
    length: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(batch: usize, channels: usize, length: usize) -> Self {
        Self {
            batch,
            channels,
            length,
            data: vec![0.0; batch * channels * length],
        }
    }

    pub fn from_vec(
        batch: usize,
        channels: usize,
        length: usize,
        data: Vec<f64>,
    ) -> Result<Self, NetError> {
        if data.len() != batch * channels * length {
            return Err(NetError::DataLength {
                expected: batch * channels * length,
                found: data.len(),
            });
        }
        Ok(Self {
            batch,
            channels,
            length,
            data,
        })
    }

    /// Build from nested `[batch][channel][position]` vectors.
    pub fn from_nested(rows: &[Vec<Vec<f64>>]) -> Result<Self, NetError> {
        let batch = rows.len();
        let channels = rows.first().map_or(0, Vec::len);
        let length = rows
            .first()
            .and_then(|r| r.first())
            .map_or(0, Vec::len);
        let mut data = Vec::with_capacity(batch * channels * length);
        for sample in rows {
            if sample.len() != channels {
                return Err(NetError::Ragged);
            }
            for ch in sample {
                if ch.len() != length {
                    return Err(NetError::Ragged);
                }
                data.extend_from_slice(ch);
            }
        }
        Ok(Self {
            batch,
            channels,
            length,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.channels, self.length)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, t: usize) -> usize {
        (b * self.channels + c) * self.length + t
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, t: usize) -> f64 {
        self.data[self.index(b, c, t)]
    }

    /// Contiguous `[channels * length]` slice of one sample.
    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.channels * self.length;
        &self.data[b * n..(b + 1) * n]
    }

    /// Contiguous `[length]` row of one sample and channel.
    #[inline]
    pub fn row(&self, b: usize, c: usize) -> &[f64] {
        let start = self.index(b, c, 0);
        &self.data[start..start + self.length]
    }

    #[inline]
    pub fn row_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let start = self.index(b, c, 0);
        let len = self.length;
        &mut self.data[start..start + len]
    }

    /// Copy out the samples at `indices`, in order.
    pub fn gather(&self, indices: &[usize]) -> Tensor3 {
        let n = self.channels * self.length;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor3 {
            batch: indices.len(),
            channels: self.channels,
            length: self.length,
            data,
        }
    }

    /// Samples `start..end` as a new tensor.
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor3 {
        let n = self.channels * self.length;
        Tensor3 {
            batch: end - start,
            channels: self.channels,
            length: self.length,
            data: self.data[start * n..end * n].to_vec(),
        }
    }

    /// Zero-pad along the length axis.
    pub fn pad_length(&self, left: usize, right: usize) -> Tensor3 {
        if left == 0 && right == 0 {
            return self.clone();
        }
        let new_len = self.length + left + right;
        let mut out = Tensor3::zeros(self.batch, self.channels, new_len);
        for b in 0..self.batch {
            for c in 0..self.channels {
                out.row_mut(b, c)[left..left + self.length].copy_from_slice(self.row(b, c));
            }
        }
        out
    }

    /// Keep positions `left..length-right` along the length axis.
    pub fn crop_length(&self, left: usize, right: usize) -> Tensor3 {
        if left == 0 && right == 0 {
            return self.clone();
        }
        let new_len = self.length - left - right;
        let mut out = Tensor3::zeros(self.batch, self.channels, new_len);
        for b in 0..self.batch {
            for c in 0..self.channels {
                out.row_mut(b, c)
                    .copy_from_slice(&self.row(b, c)[left..left + new_len]);
            }
        }
        out
    }
}

/// Mean squared error over every element, and its gradient w.r.t. `output`.
pub fn mse_with_grad(output: &Tensor3, target: &Tensor3) -> (f64, Tensor3) {
    debug_assert_eq!(output.shape(), target.shape());
    let n = output.data.len() as f64;
    let mut grad = Tensor3::zeros(output.batch, output.channels, output.length);
    let mut sum = 0.0;
    for ((g, &o), &t) in grad.data.iter_mut().zip(&output.data).zip(&target.data) {
        let d = o - t;
        sum += d * d;
        *g = 2.0 * d / n;
    }
    (sum / n, grad)
}

pub fn mse(output: &Tensor3, target: &Tensor3) -> f64 {
    let n = output.data.len() as f64;
    output
        .data
        .iter()
        .zip(&target.data)
        .map(|(o, t)| (o - t) * (o - t))
        .sum::<f64>()
        / n
}

/// Per-sample mean squared error.
pub fn per_sample_mse(output: &Tensor3, target: &Tensor3) -> Vec<f64> {
    let n = output.channels * output.length;
    output
        .data
        .chunks(n)
        .zip(target.data.chunks(n))
        .map(|(o, t)| {
            o.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64
        })
        .collect()
}
