use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor3;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv1d,
    Batchnorm1d,
    Activation,
}

/// Which learnable tensor of a layer a parameter slice belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
}

/// 1-D convolution with zero padding and unit stride.
///
/// `weight` is laid out `[out_channels][in_channels][kernel_size]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub padding: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel_size: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            padding,
            weight: vec![0.0; out_channels * in_channels * kernel_size],
            bias: vec![0.0; out_channels],
        }
    }

    /// Uniform fan-in initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_uniform<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel_size, padding);
        let bound = 1.0 / ((in_channels * kernel_size) as f64).sqrt();
        for w in conv.weight.iter_mut().chain(conv.bias.iter_mut()) {
            *w = rng.gen_range(-bound..=bound);
        }
        conv
    }

    #[inline]
    fn widx(&self, o: usize, i: usize, j: usize) -> usize {
        (o * self.in_channels + i) * self.kernel_size + j
    }

    /// Output length for an input of `len`, or `None` when it would be empty.
    pub fn output_length(&self, len: usize) -> Option<usize> {
        (len + 2 * self.padding)
            .checked_sub(self.kernel_size)
            .map(|l| l + 1)
    }

    /// Forward pass on an already padded input.
    fn forward_padded(&self, xp: &Tensor3) -> Tensor3 {
        let out_len = xp.length() + 1 - self.kernel_size;
        let mut y = Tensor3::zeros(xp.batch(), self.out_channels, out_len);
        for b in 0..xp.batch() {
            for o in 0..self.out_channels {
                let yrow = y.row_mut(b, o);
                yrow.fill(self.bias[o]);
                for i in 0..self.in_channels {
                    let xrow = xp.row(b, i);
                    for j in 0..self.kernel_size {
                        let w = self.weight[self.widx(o, i, j)];
                        if w == 0.0 {
                            continue;
                        }
                        for (yv, xv) in yrow.iter_mut().zip(&xrow[j..j + out_len]) {
                            *yv += w * xv;
                        }
                    }
                }
            }
        }
        y
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        self.forward_padded(&x.pad_length(self.padding, self.padding))
    }

    /// Returns `(grad_input, grad_weight, grad_bias)`.
    fn backward(&self, xp: &Tensor3, dy: &Tensor3) -> (Tensor3, Vec<f64>, Vec<f64>) {
        let out_len = dy.length();
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; self.out_channels];
        let mut dxp = Tensor3::zeros(xp.batch(), self.in_channels, xp.length());
        for b in 0..xp.batch() {
            for o in 0..self.out_channels {
                let dyrow = dy.row(b, o);
                db[o] += dyrow.iter().sum::<f64>();
                for i in 0..self.in_channels {
                    let xrow = xp.row(b, i);
                    for j in 0..self.kernel_size {
                        let wi = self.widx(o, i, j);
                        dw[wi] += dyrow
                            .iter()
                            .zip(&xrow[j..j + out_len])
                            .map(|(g, x)| g * x)
                            .sum::<f64>();
                    }
                }
                for i in 0..self.in_channels {
                    let dxrow = dxp.row_mut(b, i);
                    for j in 0..self.kernel_size {
                        let w = self.weight[self.widx(o, i, j)];
                        for (dx, g) in dxrow[j..j + out_len].iter_mut().zip(dyrow) {
                            *dx += w * g;
                        }
                    }
                }
            }
        }
        let dx = dxp.crop_length(self.padding, self.padding);
        (dx, dw, db)
    }
}

/// Per-channel batch normalisation over the batch and length axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm1d {
    pub num_features: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm1d {
    pub fn new(num_features: usize) -> Self {
        Self {
            num_features,
            gamma: vec![1.0; num_features],
            beta: vec![0.0; num_features],
            running_mean: vec![0.0; num_features],
            running_var: vec![1.0; num_features],
        }
    }

    /// Inference-mode forward pass using the running statistics.
    pub fn forward_eval(&self, x: &Tensor3) -> Tensor3 {
        let mut y = x.clone();
        for c in 0..self.num_features {
            let scale = self.gamma[c] / (self.running_var[c] + BN_EPS).sqrt();
            let shift = self.beta[c] - self.running_mean[c] * scale;
            for b in 0..x.batch() {
                for v in y.row_mut(b, c) {
                    *v = *v * scale + shift;
                }
            }
        }
        y
    }

    /// Training-mode forward pass; returns output and the normalised input.
    fn forward_train(&self, x: &Tensor3) -> (Tensor3, BnCache) {
        let n = (x.batch() * x.length()) as f64;
        let mut xhat = x.clone();
        let mut y = x.clone();
        let mut inv_std = vec![0.0; self.num_features];
        let mut mean = vec![0.0; self.num_features];
        let mut var = vec![0.0; self.num_features];
        for c in 0..self.num_features {
            let mut s = 0.0;
            for b in 0..x.batch() {
                s += x.row(b, c).iter().sum::<f64>();
            }
            let mu = s / n;
            let mut ss = 0.0;
            for b in 0..x.batch() {
                ss += x.row(b, c).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
            let v = ss / n;
            let istd = 1.0 / (v + BN_EPS).sqrt();
            for b in 0..x.batch() {
                let xr = xhat.row_mut(b, c);
                for e in xr.iter_mut() {
                    *e = (*e - mu) * istd;
                }
                let yr = y.row_mut(b, c);
                for (o, h) in yr.iter_mut().zip(xhat.row(b, c)) {
                    *o = self.gamma[c] * h + self.beta[c];
                }
            }
            inv_std[c] = istd;
            mean[c] = mu;
            var[c] = v;
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                mean,
                var,
                count: x.batch() * x.length(),
            },
        )
    }

    fn backward(&self, cache: &BnCache, dy: &Tensor3) -> (Tensor3, Vec<f64>, Vec<f64>) {
        let n = cache.count as f64;
        let mut dx = Tensor3::zeros(dy.batch(), dy.channels(), dy.length());
        let mut dgamma = vec![0.0; self.num_features];
        let mut dbeta = vec![0.0; self.num_features];
        for c in 0..self.num_features {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for b in 0..dy.batch() {
                for (g, h) in dy.row(b, c).iter().zip(cache.xhat.row(b, c)) {
                    sum_dy += g;
                    sum_dy_xhat += g * h;
                }
            }
            dgamma[c] = sum_dy_xhat;
            dbeta[c] = sum_dy;
            let k = self.gamma[c] * cache.inv_std[c] / n;
            for b in 0..dy.batch() {
                let xh = cache.xhat.row(b, c);
                let g = dy.row(b, c);
                let out = dx.row_mut(b, c);
                for t in 0..out.len() {
                    out[t] = k * (n * g[t] - sum_dy - xh[t] * sum_dy_xhat);
                }
            }
        }
        (dx, dgamma, dbeta)
    }

    /// Fold one training batch's statistics into the running estimates.
    fn update_running(&mut self, cache: &BnCache) {
        let n = cache.count as f64;
        let unbias = if cache.count > 1 { n / (n - 1.0) } else { 1.0 };
        for c in 0..self.num_features {
            self.running_mean[c] =
                (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * cache.mean[c];
            self.running_var[c] =
                (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * cache.var[c] * unbias;
        }
    }
}

/// The layer vocabulary evolved genomes decode into.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv1d(Conv1d),
    Batchnorm1d(BatchNorm1d),
    Relu,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv1d(_) => LayerKind::Conv1d,
            Layer::Batchnorm1d(_) => LayerKind::Batchnorm1d,
            Layer::Relu => LayerKind::Activation,
        }
    }

    /// Learnable tensors in a fixed order.
    pub fn params(&self) -> Vec<(ParamKind, &[f64])> {
        match self {
            Layer::Conv1d(c) => vec![
                (ParamKind::ConvWeight, c.weight.as_slice()),
                (ParamKind::ConvBias, c.bias.as_slice()),
            ],
            Layer::Batchnorm1d(bn) => vec![
                (ParamKind::BnGamma, bn.gamma.as_slice()),
                (ParamKind::BnBeta, bn.beta.as_slice()),
            ],
            Layer::Relu => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(ParamKind, &mut Vec<f64>)> {
        match self {
            Layer::Conv1d(c) => vec![
                (ParamKind::ConvWeight, &mut c.weight),
                (ParamKind::ConvBias, &mut c.bias),
            ],
            Layer::Batchnorm1d(bn) => vec![
                (ParamKind::BnGamma, &mut bn.gamma),
                (ParamKind::BnBeta, &mut bn.beta),
            ],
            Layer::Relu => Vec::new(),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor3, train: bool) -> (Tensor3, LayerCache) {
        match self {
            Layer::Conv1d(c) => {
                let xp = x.pad_length(c.padding, c.padding);
                let y = c.forward_padded(&xp);
                let cache = if train {
                    LayerCache::Conv { padded_input: xp }
                } else {
                    LayerCache::None
                };
                (y, cache)
            }
            Layer::Batchnorm1d(bn) => {
                if train {
                    let (y, cache) = bn.forward_train(x);
                    (y, LayerCache::Bn(cache))
                } else {
                    (bn.forward_eval(x), LayerCache::None)
                }
            }
            Layer::Relu => {
                let mut y = x.clone();
                let mut mask = Vec::new();
                if train {
                    mask.reserve(y.data().len());
                }
                for v in y.data_mut() {
                    let active = *v > 0.0;
                    if !active {
                        *v = 0.0;
                    }
                    if train {
                        mask.push(active);
                    }
                }
                let cache = if train {
                    LayerCache::Relu { mask }
                } else {
                    LayerCache::None
                };
                (y, cache)
            }
        }
    }

    /// Returns the input gradient and one gradient per tensor of `params()`.
    pub(crate) fn backward(&self, cache: &LayerCache, dy: &Tensor3) -> (Tensor3, Vec<Vec<f64>>) {
        match (self, cache) {
            (Layer::Conv1d(c), LayerCache::Conv { padded_input }) => {
                let (dx, dw, db) = c.backward(padded_input, dy);
                (dx, vec![dw, db])
            }
            (Layer::Batchnorm1d(bn), LayerCache::Bn(cache)) => {
                let (dx, dg, db) = bn.backward(cache, dy);
                (dx, vec![dg, db])
            }
            (Layer::Relu, LayerCache::Relu { mask }) => {
                let mut dx = dy.clone();
                for (g, &m) in dx.data_mut().iter_mut().zip(mask) {
                    if !m {
                        *g = 0.0;
                    }
                }
                (dx, Vec::new())
            }
            _ => unreachable!("backward called with a cache from a different layer or mode"),
        }
    }

    pub(crate) fn update_running(&mut self, cache: &LayerCache) {
        if let (Layer::Batchnorm1d(bn), LayerCache::Bn(c)) = (self, cache) {
            bn.update_running(c);
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BnCache {
    pub(crate) xhat: Tensor3,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    count: usize,
}

#[derive(Clone, Debug)]
pub(crate) enum LayerCache {
    None,
    Conv { padded_input: Tensor3 },
    Bn(BnCache),
    Relu { mask: Vec<bool> },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_of_ones_gives_sliding_sums() {
        // input channels [1,2] and [3,4]; every kernel tap is 1
        let x = Tensor3::from_nested(&[vec![vec![1.0, 2.0], vec![3.0, 4.0]]]).unwrap();
        let mut conv = Conv1d::zeros(2, 2, 2, 0);
        conv.weight.fill(1.0);
        let y = conv.forward(&x);
        assert_eq!(y.shape(), (1, 2, 1));
        assert_eq!(y.data(), &[10.0, 10.0]);

        // kernel 1: per-position channel sums
        let mut conv = Conv1d::zeros(2, 1, 1, 0);
        conv.weight.fill(1.0);
        assert_eq!(conv.forward(&x).data(), &[4.0, 6.0]);

        // padding 1, kernel 2: [0,1,2,0] + [0,3,4,0] windows
        let mut conv = Conv1d::zeros(2, 1, 2, 1);
        conv.weight.fill(1.0);
        assert_eq!(conv.forward(&x).data(), &[4.0, 10.0, 6.0]);
    }

    #[test]
    fn output_length_follows_padding_arithmetic() {
        let conv = Conv1d::zeros(1, 1, 4, 1);
        assert_eq!(conv.output_length(10), Some(9));
        assert_eq!(Conv1d::zeros(1, 1, 9, 0).output_length(3), None);
        assert_eq!(Conv1d::zeros(1, 1, 2, 1).output_length(5), Some(6));
    }

    #[test]
    fn batchnorm_train_normalises_each_channel() {
        let mut rng = crate::seed::rng(3);
        let data: Vec<f64> = (0..4 * 3 * 7).map(|_| rng.gen_range(-5.0..9.0)).collect();
        let x = Tensor3::from_vec(4, 3, 7, data).unwrap();
        let bn = BatchNorm1d::new(3);
        let (_, cache) = bn.forward_train(&x);
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|b| cache.xhat.row(b, c).to_vec()).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6);
            // eps keeps the variance just under one
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn running_stats_track_batch_statistics() {
        let x = Tensor3::from_vec(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bn = BatchNorm1d::new(1);
        let (_, cache) = bn.forward_train(&x);
        bn.update_running(&cache);
        assert!((bn.running_mean[0] - 0.25).abs() < 1e-12);
        // unbiased var of 1..4 is 5/3
        assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }
}
