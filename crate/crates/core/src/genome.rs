//! Genotype of a Conv1D autoencoder: a window size and an ordered list of
//! conv layer genes.
//!
//! The first gene reads `window_size` channels; every later gene reads its
//! predecessor's `out_channels`. The last gene must map back to
//! `window_size` channels.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndnet::{BatchNorm1d, Conv1d, Layer, NetError, Network};
use crate::seed;

pub const KERNEL_LIMITS: (usize, usize) = (1, 9);
pub const CHANNEL_LIMITS: (usize, usize) = (1, 512);
pub const LAYER_LIMITS: (usize, usize) = (2, 16);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerGene {
    pub out_channels: usize,
    pub kernel_size: usize,
    pub padding: usize,
    #[serde(rename = "batchnorm")]
    pub batchnorm: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelGenome {
    pub window_size: usize,
    pub layers: Vec<LayerGene>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    LayerCount { count: usize },
    WindowOutOfRange { window: usize },
    ChannelsOutOfRange { layer: usize, channels: usize },
    KernelOutOfRange { layer: usize, kernel: usize },
    PaddingTooLarge { layer: usize, padding: usize, kernel: usize },
    ClosureMismatch { final_out: usize, window: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenomeError {
    #[error("infeasible genome bounds: {0}")]
    Bounds(String),
    #[error("invalid genome: {0:?}")]
    Invalid(Vec<Violation>),
    #[error("group size must be at least 1")]
    EmptyGroup,
    #[error("decode failed: {0}")]
    Decode(#[from] NetError),
}

impl ModelGenome {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Input channel count of every gene, in order.
    pub fn in_channels(&self) -> Vec<usize> {
        std::iter::once(self.window_size)
            .chain(self.layers.iter().map(|g| g.out_channels))
            .take(self.layers.len())
            .collect()
    }

    /// `window_size` followed by every gene's `out_channels`.
    pub fn channel_chain(&self) -> Vec<usize> {
        std::iter::once(self.window_size)
            .chain(self.layers.iter().map(|g| g.out_channels))
            .collect()
    }

    /// Force the closure invariant: the last gene emits `window_size`.
    pub fn repair_closure(&mut self) {
        if let Some(last) = self.layers.last_mut() {
            last.out_channels = self.window_size;
        }
    }
}

/// Every invariant violation of `g`; empty means valid.
pub fn validate(g: &ModelGenome) -> Vec<Violation> {
    let mut v = Vec::new();
    if !(LAYER_LIMITS.0..=LAYER_LIMITS.1).contains(&g.layers.len()) {
        v.push(Violation::LayerCount {
            count: g.layers.len(),
        });
    }
    if !(CHANNEL_LIMITS.0..=CHANNEL_LIMITS.1).contains(&g.window_size) {
        v.push(Violation::WindowOutOfRange {
            window: g.window_size,
        });
    }
    for (i, gene) in g.layers.iter().enumerate() {
        if !(CHANNEL_LIMITS.0..=CHANNEL_LIMITS.1).contains(&gene.out_channels) {
            v.push(Violation::ChannelsOutOfRange {
                layer: i,
                channels: gene.out_channels,
            });
        }
        if !(KERNEL_LIMITS.0..=KERNEL_LIMITS.1).contains(&gene.kernel_size) {
            v.push(Violation::KernelOutOfRange {
                layer: i,
                kernel: gene.kernel_size,
            });
        }
        if gene.padding > gene.kernel_size / 2 {
            v.push(Violation::PaddingTooLarge {
                layer: i,
                padding: gene.padding,
                kernel: gene.kernel_size,
            });
        }
    }
    if let Some(last) = g.layers.last() {
        if last.out_channels != g.window_size {
            v.push(Violation::ClosureMismatch {
                final_out: last.out_channels,
                window: g.window_size,
            });
        }
    }
    v
}

pub fn is_valid(g: &ModelGenome) -> bool {
    validate(g).is_empty()
}

/// Structural distance: the absolute difference in layer-gene counts.
pub fn distance(a: &ModelGenome, b: &ModelGenome) -> usize {
    a.layers.len().abs_diff(b.layers.len())
}

/// Search-space bounds for random genomes and mutation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenomeBounds {
    pub min_layers: usize,
    pub max_layers: usize,
    pub min_channels: usize,
    pub max_channels: usize,
    pub min_kernel: usize,
    pub max_kernel: usize,
    pub min_padding: usize,
    pub max_padding: usize,
    pub min_window: usize,
    pub max_window: usize,
    pub batchnorm_probability: f64,
}

impl Default for GenomeBounds {
    fn default() -> Self {
        Self {
            min_layers: 2,
            max_layers: 6,
            min_channels: 4,
            max_channels: 32,
            min_kernel: 1,
            max_kernel: 5,
            min_padding: 0,
            max_padding: 2,
            min_window: 2,
            max_window: 8,
            batchnorm_probability: 0.8,
        }
    }
}

impl GenomeBounds {
    pub fn validate(&self) -> Result<(), GenomeError> {
        let ranges = [
            ("layers", self.min_layers, self.max_layers, LAYER_LIMITS),
            ("channels", self.min_channels, self.max_channels, CHANNEL_LIMITS),
            ("kernel", self.min_kernel, self.max_kernel, KERNEL_LIMITS),
            ("window", self.min_window, self.max_window, CHANNEL_LIMITS),
        ];
        for (name, lo, hi, (limit_lo, limit_hi)) in ranges {
            if lo > hi {
                return Err(GenomeError::Bounds(format!("min {name} {lo} > max {hi}")));
            }
            if lo < limit_lo || hi > limit_hi {
                return Err(GenomeError::Bounds(format!(
                    "{name} range {lo}..={hi} outside {limit_lo}..={limit_hi}"
                )));
            }
        }
        if self.min_padding > self.max_padding {
            return Err(GenomeError::Bounds(format!(
                "min padding {} > max {}",
                self.min_padding, self.max_padding
            )));
        }
        if self.min_padding > self.max_kernel / 2 {
            return Err(GenomeError::Bounds(format!(
                "min padding {} needs kernels above {}",
                self.min_padding, self.max_kernel
            )));
        }
        if !(0.0..=1.0).contains(&self.batchnorm_probability) {
            return Err(GenomeError::Bounds("batchnorm_probability outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Kernel sizes that admit at least `min_padding` under the
    /// `padding <= kernel / 2` rule.
    pub(crate) fn kernel_range(&self) -> (usize, usize) {
        (self.min_kernel.max(2 * self.min_padding).max(1), self.max_kernel)
    }

    pub(crate) fn padding_range(&self, kernel: usize) -> (usize, usize) {
        (self.min_padding, self.max_padding.min(kernel / 2))
    }

    pub(crate) fn sample_kernel<R: Rng>(&self, rng: &mut R) -> usize {
        let (lo, hi) = self.kernel_range();
        rng.gen_range(lo..=hi)
    }

    pub(crate) fn sample_padding<R: Rng>(&self, kernel: usize, rng: &mut R) -> usize {
        let (lo, hi) = self.padding_range(kernel);
        rng.gen_range(lo..=hi.max(lo))
    }
}

/// A random mirror-symmetric genome within `bounds`.
///
/// The first half of the genes (the encoder) is sampled freely; the decoder
/// mirrors the encoder's kernels, paddings and batch-norm flags and walks the
/// channel widths back down to `window_size`.
pub fn random_genome(rng_seed: u64, bounds: &GenomeBounds) -> Result<ModelGenome, GenomeError> {
    bounds.validate()?;
    let mut rng = seed::rng(rng_seed);
    let window_size = rng.gen_range(bounds.min_window..=bounds.max_window);
    let n = rng.gen_range(bounds.min_layers..=bounds.max_layers);
    let enc = n / 2;
    let fresh_gene = |rng: &mut rand_chacha::ChaCha8Rng| {
        let kernel_size = bounds.sample_kernel(rng);
        LayerGene {
            out_channels: rng.gen_range(bounds.min_channels..=bounds.max_channels),
            kernel_size,
            padding: bounds.sample_padding(kernel_size, rng),
            batchnorm: rng.gen_bool(bounds.batchnorm_probability),
        }
    };
    let mut layers: Vec<LayerGene> = (0..enc).map(|_| fresh_gene(&mut rng)).collect();
    for i in enc..n {
        let mirror = n - 1 - i;
        let mut gene = if mirror < enc {
            layers[mirror]
        } else {
            fresh_gene(&mut rng)
        };
        gene.out_channels = if i == n - 1 {
            window_size
        } else {
            layers[n - 2 - i].out_channels
        };
        layers.push(gene);
    }
    Ok(ModelGenome {
        window_size,
        layers,
    })
}

/// Decode into a freshly initialised network for a group of `group_size`
/// sensors: conv per gene, batch norm where flagged, ReLU after every gene
/// except the last.
pub fn decode(g: &ModelGenome, group_size: usize, rng_seed: u64) -> Result<Network, GenomeError> {
    let violations = validate(g);
    if !violations.is_empty() {
        return Err(GenomeError::Invalid(violations));
    }
    if group_size == 0 {
        return Err(GenomeError::EmptyGroup);
    }
    let mut rng = seed::rng(rng_seed);
    let mut layers = Vec::with_capacity(g.layers.len() * 3);
    let mut in_ch = g.window_size;
    for (i, gene) in g.layers.iter().enumerate() {
        layers.push(Layer::Conv1d(Conv1d::init_uniform(
            in_ch,
            gene.out_channels,
            gene.kernel_size,
            gene.padding,
            &mut rng,
        )));
        if gene.batchnorm {
            layers.push(Layer::Batchnorm1d(BatchNorm1d::new(gene.out_channels)));
        }
        if i + 1 < g.layers.len() {
            layers.push(Layer::Relu);
        }
        in_ch = gene.out_channels;
    }
    Ok(Network::new(layers, (g.window_size, group_size))?)
}

/// Architectures reported as the best evolved CNN 1D autoencoders for the
/// SWaT and WADI benchmarks.
pub mod presets {
    use super::{LayerGene, ModelGenome};

    fn gene(out_channels: usize, kernel_size: usize) -> LayerGene {
        LayerGene {
            out_channels,
            kernel_size,
            padding: 1,
            batchnorm: true,
        }
    }

    /// SWaT: window 5, channels 5→84→123→205→123→84→5.
    pub fn swat() -> ModelGenome {
        ModelGenome {
            window_size: 5,
            layers: vec![
                gene(84, 2),
                gene(123, 6),
                gene(205, 4),
                gene(123, 4),
                gene(84, 6),
                gene(5, 2),
            ],
        }
    }

    /// WADI: window 6, channels 6→91→153→155→153→91→6.
    pub fn wadi() -> ModelGenome {
        ModelGenome {
            window_size: 6,
            layers: vec![
                gene(91, 7),
                gene(153, 3),
                gene(155, 4),
                gene(153, 4),
                gene(91, 3),
                gene(6, 7),
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndnet::{LayerKind, Tensor3};
    use proptest::prelude::*;

    #[test]
    fn swat_preset_decodes_to_table_network() {
        let g = presets::swat();
        assert!(validate(&g).is_empty());
        let net = decode(&g, 51, 0).unwrap();
        assert_eq!(net.channel_chain(), vec![5, 84, 123, 205, 123, 84, 5]);
        let kinds: Vec<LayerKind> = net
            .layers()
            .iter()
            .map(|l| l.kind())
            .filter(|k| *k != LayerKind::Activation)
            .collect();
        assert_eq!(kinds.len(), 12);
        assert!(kinds
            .chunks(2)
            .all(|p| p == [LayerKind::Conv1d, LayerKind::Batchnorm1d]));
        let y = net.forward(&Tensor3::zeros(1, 5, 51)).unwrap();
        assert_eq!(y.shape(), (1, 5, 51));
    }

    #[test]
    fn wadi_preset_chain() {
        let net = decode(&presets::wadi(), 123, 1).unwrap();
        assert_eq!(net.channel_chain(), vec![6, 91, 153, 155, 153, 91, 6]);
    }

    #[test]
    fn identity_gene_decodes_to_single_conv() {
        let g = ModelGenome {
            window_size: 3,
            layers: vec![
                LayerGene { out_channels: 3, kernel_size: 1, padding: 0, batchnorm: false },
                LayerGene { out_channels: 3, kernel_size: 1, padding: 0, batchnorm: false },
            ],
        };
        let net = decode(&g, 4, 0).unwrap();
        assert_eq!(net.input_shape(), (3, 4));
        assert_eq!(net.adapter(), Default::default());
    }

    #[test]
    fn validate_reports_all_violations() {
        let g = ModelGenome {
            window_size: 4,
            layers: vec![
                LayerGene { out_channels: 8, kernel_size: 0, padding: 0, batchnorm: true },
                LayerGene { out_channels: 5, kernel_size: 3, padding: 1, batchnorm: true },
            ],
        };
        let v = validate(&g);
        assert!(v.contains(&Violation::KernelOutOfRange { layer: 0, kernel: 0 }));
        assert!(v.contains(&Violation::ClosureMismatch { final_out: 5, window: 4 }));
        assert_eq!(v.len(), 2);
        assert!(matches!(decode(&g, 3, 0), Err(GenomeError::Invalid(_))));
    }

    #[test]
    fn decode_rejects_empty_group() {
        assert_eq!(decode(&presets::swat(), 0, 0).unwrap_err(), GenomeError::EmptyGroup);
    }

    #[test]
    fn distance_examples() {
        let a = presets::swat();
        let mut b = a.clone();
        assert_eq!(distance(&a, &a), 0);
        b.layers.truncate(4);
        b.repair_closure();
        assert_eq!(distance(&a, &b), 2);
        assert_eq!(distance(&b, &a), 2);
    }

    #[test]
    fn fixed_bounds_pin_the_genome() {
        let bounds = GenomeBounds {
            min_layers: 6,
            max_layers: 6,
            min_channels: 84,
            max_channels: 84,
            min_kernel: 2,
            max_kernel: 2,
            min_padding: 1,
            max_padding: 1,
            min_window: 5,
            max_window: 5,
            batchnorm_probability: 1.0,
        };
        let g = random_genome(9, &bounds).unwrap();
        assert_eq!(g, random_genome(1234, &bounds).unwrap());
        assert_eq!(g.channel_chain(), vec![5, 84, 84, 84, 84, 84, 5]);
        assert!(g.layers.iter().all(|l| l.kernel_size == 2 && l.padding == 1 && l.batchnorm));
    }

    #[test]
    fn two_layer_bounds_give_two_genes() {
        let bounds = GenomeBounds {
            min_layers: 2,
            max_layers: 2,
            ..GenomeBounds::default()
        };
        for s in 0..20 {
            assert_eq!(random_genome(s, &bounds).unwrap().len(), 2);
        }
    }

    #[test]
    fn infeasible_bounds_are_rejected() {
        let bounds = GenomeBounds {
            min_layers: 5,
            max_layers: 3,
            ..GenomeBounds::default()
        };
        assert!(matches!(random_genome(0, &bounds), Err(GenomeError::Bounds(_))));
    }

    #[test]
    fn random_genomes_validate_and_decode() {
        let bounds = GenomeBounds::default();
        for s in 0..1000 {
            let g = random_genome(s, &bounds).unwrap();
            assert!(validate(&g).is_empty(), "seed {s}: {:?}", validate(&g));
            assert!(g.len() >= bounds.min_layers && g.len() <= bounds.max_layers);
            for group in [1, 4] {
                decode(&g, group, s).unwrap();
            }
        }
    }

    #[test]
    fn random_genomes_are_mirror_symmetric() {
        let g = random_genome(77, &GenomeBounds { min_layers: 6, max_layers: 6, ..Default::default() }).unwrap();
        let n = g.len();
        for i in 0..n / 2 {
            assert_eq!(g.layers[i].kernel_size, g.layers[n - 1 - i].kernel_size);
        }
        let chain = g.channel_chain();
        let rev: Vec<usize> = chain.iter().rev().copied().collect();
        assert_eq!(chain, rev);
    }

    #[test]
    fn genome_json_shape() {
        let g = ModelGenome {
            window_size: 2,
            layers: vec![LayerGene { out_channels: 2, kernel_size: 3, padding: 1, batchnorm: true }],
        };
        let json = serde_json::to_value(&g).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"window_size": 2, "layers": [{"out_channels": 2, "kernel_size": 3, "padding": 1, "batchnorm": true}]})
        );
    }

    proptest! {
        #[test]
        fn distance_is_a_pseudometric(a in 0u64..500, b in 0u64..500, c in 0u64..500) {
            let bounds = GenomeBounds { max_layers: 12, ..Default::default() };
            let (ga, gb, gc) = (
                random_genome(a, &bounds).unwrap(),
                random_genome(b, &bounds).unwrap(),
                random_genome(c, &bounds).unwrap(),
            );
            prop_assert_eq!(distance(&ga, &gb), distance(&gb, &ga));
            prop_assert!(distance(&ga, &gc) <= distance(&ga, &gb) + distance(&gb, &gc));
        }

        #[test]
        fn valid_genomes_forward_on_matching_batches(s in 0u64..300, group in 1usize..8) {
            let g = random_genome(s, &GenomeBounds::default()).unwrap();
            let net = decode(&g, group, s).unwrap();
            let y = net.forward(&Tensor3::zeros(2, g.window_size, group)).unwrap();
            prop_assert_eq!(y.shape(), (2, g.window_size, group));
        }
    }
}
