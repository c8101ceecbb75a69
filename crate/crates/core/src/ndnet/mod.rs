//! Minimal differentiable network engine.
//!
//! Supports exactly the layer vocabulary evolved autoencoders need: 1-D
//! convolution, batch normalisation and ReLU. Backward passes are written by
//! hand per layer; [`grad_check`] compares them against central finite
//! differences.
//!
//! A window of `W` timesteps over `S` sensors enters a network as
//! `channels = W`, `length = S`.

mod gradcheck;
mod layers;
mod tensor;
mod train;

pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{BatchNorm1d, Conv1d, Layer, LayerKind, ParamKind, BN_EPS, BN_MOMENTUM};
pub use tensor::{mse, mse_with_grad, per_sample_mse, Tensor3};
pub use train::{evaluate_model, train_model, window_errors, TrainConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use layers::LayerCache;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("layer {layer}: expected {expected} input channels, found {found}")]
    ChannelMismatch {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("layer {layer}: spatial length collapses to zero (input length {input_length})")]
    SpatialCollapse { layer: usize, input_length: usize },
    #[error("network output has {found} channels but input has {expected}")]
    NotClosed { expected: usize, found: usize },
    #[error("network has no layers")]
    Empty,
    #[error("input shape (channels {found_channels}, length {found_length}) does not match network input ({channels}, {length})")]
    InputShape {
        channels: usize,
        length: usize,
        found_channels: usize,
        found_length: usize,
    },
    #[error("tensor data has {found} values, shape requires {expected}")]
    DataLength { expected: usize, found: usize },
    #[error("nested input is ragged")]
    Ragged,
    #[error("empty input: no windows to process")]
    EmptyInput,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    TrainingDiverged { epoch: usize },
}

/// Zero padding applied before the first layer and cropping applied after
/// the last, so that the output length always equals the input length.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthAdapter {
    pub pad_left: usize,
    pub pad_right: usize,
    pub crop_left: usize,
    pub crop_right: usize,
}

/// An autoencoder: an ordered layer stack whose output has the input's shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: (usize, usize),
    adapter: LengthAdapter,
}

/// Per-layer caches from a training-mode forward pass.
pub struct Tape {
    caches: Vec<LayerCache>,
}

/// Gradients ordered like [`Network::param_tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

/// Identifies one learnable tensor of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub layer: usize,
    pub kind: ParamKind,
}

impl Network {
    /// Validate the channel chain and closure, and derive the length adapter.
    ///
    /// The adapter pads the input by the deepest cumulative shrink of the
    /// conv chain, so no intermediate length drops below the input length,
    /// then center-crops the output back to the input length.
    pub fn new(layers: Vec<Layer>, input_shape: (usize, usize)) -> Result<Self, NetError> {
        if layers.is_empty() {
            return Err(NetError::Empty);
        }
        let (in_ch, in_len) = input_shape;
        let mut ch = in_ch;
        let mut offset: i64 = 0;
        let mut min_offset: i64 = 0;
        for (idx, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Conv1d(c) => {
                    if c.in_channels != ch {
                        return Err(NetError::ChannelMismatch {
                            layer: idx,
                            expected: ch,
                            found: c.in_channels,
                        });
                    }
                    debug_assert_eq!(c.weight.len(), c.out_channels * c.in_channels * c.kernel_size);
                    ch = c.out_channels;
                    offset += 2 * c.padding as i64 - c.kernel_size as i64 + 1;
                    min_offset = min_offset.min(offset);
                }
                Layer::Batchnorm1d(bn) => {
                    if bn.num_features != ch {
                        return Err(NetError::ChannelMismatch {
                            layer: idx,
                            expected: ch,
                            found: bn.num_features,
                        });
                    }
                }
                Layer::Relu => {}
            }
        }
        if ch != in_ch {
            return Err(NetError::NotClosed {
                expected: in_ch,
                found: ch,
            });
        }
        let pad = (-min_offset) as usize;
        let crop = (pad as i64 + offset) as usize;
        let adapter = LengthAdapter {
            pad_left: pad / 2,
            pad_right: pad - pad / 2,
            crop_left: crop / 2,
            crop_right: crop - crop / 2,
        };
        let net = Self {
            layers,
            input_shape,
            adapter,
        };
        net.layer_lengths(in_len)?;
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> (usize, usize) {
        self.input_shape
    }

    pub fn adapter(&self) -> LengthAdapter {
        self.adapter
    }

    /// Channel count after each conv layer, starting with the input.
    pub fn channel_chain(&self) -> Vec<usize> {
        let mut chain = vec![self.input_shape.0];
        for layer in &self.layers {
            if let Layer::Conv1d(c) = layer {
                chain.push(c.out_channels);
            }
        }
        chain
    }

    /// Spatial length after every layer for an input of `len`, including
    /// the adapter's padding but before the final crop.
    pub fn layer_lengths(&self, len: usize) -> Result<Vec<usize>, NetError> {
        let mut cur = len + self.adapter.pad_left + self.adapter.pad_right;
        let mut out = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            if let Layer::Conv1d(c) = layer {
                cur = match c.output_length(cur) {
                    Some(l) if l > 0 => l,
                    _ => {
                        return Err(NetError::SpatialCollapse {
                            layer: idx,
                            input_length: cur,
                        })
                    }
                };
            }
            out.push(cur);
        }
        Ok(out)
    }

    /// Total number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn param_tensors(&self) -> Vec<(ParamId, &[f64])> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(layer, l)| {
                l.params()
                    .into_iter()
                    .map(move |(kind, t)| (ParamId { layer, kind }, t))
            })
            .collect()
    }

    pub fn param_tensors_mut(&mut self) -> Vec<(ParamId, &mut Vec<f64>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(layer, l)| {
                l.params_mut()
                    .into_iter()
                    .map(move |(kind, t)| (ParamId { layer, kind }, t))
            })
            .collect()
    }

    fn check_input(&self, batch: &Tensor3) -> Result<(), NetError> {
        let (c, l) = self.input_shape;
        if batch.channels() != c || batch.length() != l {
            return Err(NetError::InputShape {
                channels: c,
                length: l,
                found_channels: batch.channels(),
                found_length: batch.length(),
            });
        }
        if batch.batch() == 0 {
            return Err(NetError::EmptyInput);
        }
        Ok(())
    }

    /// Inference-mode reconstruction; batch norm uses running statistics.
    pub fn forward(&self, batch: &Tensor3) -> Result<Tensor3, NetError> {
        self.check_input(batch)?;
        let a = self.adapter;
        let mut x = batch.pad_length(a.pad_left, a.pad_right);
        for layer in &self.layers {
            x = layer.forward(&x, false).0;
        }
        Ok(x.crop_length(a.crop_left, a.crop_right))
    }

    /// Training-mode forward pass recording what backward needs.
    pub fn forward_train(&self, batch: &Tensor3) -> Result<(Tensor3, Tape), NetError> {
        self.check_input(batch)?;
        let a = self.adapter;
        let mut x = batch.pad_length(a.pad_left, a.pad_right);
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward(&x, true);
            caches.push(cache);
            x = y;
        }
        Ok((x.crop_length(a.crop_left, a.crop_right), Tape { caches }))
    }

    /// Back-propagate `grad_output` (shaped like the network output).
    pub fn backward(&self, tape: &Tape, grad_output: &Tensor3) -> Gradients {
        let a = self.adapter;
        let mut g = grad_output.pad_length(a.crop_left, a.crop_right);
        let mut per_layer: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.layers.len());
        for (layer, cache) in self.layers.iter().zip(&tape.caches).rev() {
            let (dx, grads) = layer.backward(cache, &g);
            per_layer.push(grads);
            g = dx;
        }
        per_layer.reverse();
        Gradients {
            tensors: per_layer.into_iter().flatten().collect(),
        }
    }

    /// Fold a training pass's batch statistics into running estimates.
    pub fn update_running_stats(&mut self, tape: &Tape) {
        for (layer, cache) in self.layers.iter_mut().zip(&tape.caches) {
            layer.update_running(cache);
        }
    }

    /// ReLU on/off pattern recorded in a tape, flattened over layers.
    pub(crate) fn activation_pattern(tape: &Tape) -> Vec<bool> {
        tape.caches
            .iter()
            .filter_map(|c| match c {
                LayerCache::Relu { mask } => Some(mask.as_slice()),
                _ => None,
            })
            .flatten()
            .copied()
            .collect()
    }
}
