//! Model archive: a directory holding `manifest.json`, one genome JSON per
//! member and one flat blob of little-endian f64 values per member.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::{EnsembleModel, Member, VotingRule};
use crate::genome::{decode, LayerGene, ModelGenome};
use crate::io;
use crate::ndnet::{Layer, Network};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub layer: usize,
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in values.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberEntry {
    pub group_index: usize,
    pub group: Vec<usize>,
    pub threshold: f64,
    pub genome_file: String,
    pub weights_file: String,
    pub input_shape: (usize, usize),
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub voting: VotingRule,
    pub stride: usize,
    pub members: Vec<MemberEntry>,
}

/// Recover the genome a decoded network was built from.
pub fn genome_of(net: &Network) -> ModelGenome {
    let mut layers: Vec<LayerGene> = Vec::new();
    for l in net.layers() {
        match l {
            Layer::Conv1d(c) => layers.push(LayerGene {
                out_channels: c.out_channels,
                kernel_size: c.kernel_size,
                padding: c.padding,
                batchnorm: false,
            }),
            Layer::Batchnorm1d(_) => {
                if let Some(g) = layers.last_mut() {
                    g.batchnorm = true;
                }
            }
            Layer::Relu => {}
        }
    }
    ModelGenome {
        window_size: net.input_shape().0,
        layers,
    }
}

/// Every stored array of a layer, in blob order.
fn layer_arrays(layer: &Layer) -> Vec<(&'static str, Vec<usize>, &[f64])> {
    match layer {
        Layer::Conv1d(c) => vec![
            ("weight", vec![c.out_channels, c.in_channels, c.kernel_size], &c.weight[..]),
            ("bias", vec![c.out_channels], &c.bias[..]),
        ],
        Layer::Batchnorm1d(b) => vec![
            ("gamma", vec![b.num_features], &b.gamma[..]),
            ("beta", vec![b.num_features], &b.beta[..]),
            ("running_mean", vec![b.num_features], &b.running_mean[..]),
            ("running_var", vec![b.num_features], &b.running_var[..]),
        ],
        Layer::Relu => Vec::new(),
    }
}

fn layer_arrays_mut(layer: &mut Layer) -> Vec<(&'static str, &mut Vec<f64>)> {
    match layer {
        Layer::Conv1d(c) => vec![("weight", &mut c.weight), ("bias", &mut c.bias)],
        Layer::Batchnorm1d(b) => vec![
            ("gamma", &mut b.gamma),
            ("beta", &mut b.beta),
            ("running_mean", &mut b.running_mean),
            ("running_var", &mut b.running_var),
        ],
        Layer::Relu => Vec::new(),
    }
}

pub fn save_archive(model: &EnsembleModel, dir: &Path) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let mut members = Vec::new();
    for (i, m) in model.members.iter().enumerate() {
        let genome_file = format!("member_{i:02}_genome.json");
        let weights_file = format!("member_{i:02}_weights.bin");
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (li, layer) in m.network.layers().iter().enumerate() {
            for (name, shape, values) in layer_arrays(layer) {
                tensors.push(TensorEntry { layer: li, name: name.into(), shape, offset });
                offset += values.len();
                for v in values {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        io::write_json_atomic(&dir.join(&genome_file), &genome_of(&m.network)).map_err(|e| e.to_string())?;
        io::write_atomic(&dir.join(&weights_file), &blob).map_err(|e| e.to_string())?;
        members.push(MemberEntry {
            group_index: m.group_index,
            group: m.group.clone(),
            threshold: m.threshold,
            genome_file,
            weights_file,
            input_shape: m.network.input_shape(),
            tensors,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        voting: model.voting,
        stride: model.stride,
        members,
    };
    io::write_json_atomic(&dir.join("manifest.json"), &manifest).map_err(|e| e.to_string())
}

pub fn load_archive(dir: &Path) -> Result<EnsembleModel, String> {
    let read = |name: &str| fs::read(dir.join(name)).map_err(|e| format!("{}: {e}", dir.join(name).display()));
    let manifest: Manifest =
        serde_json::from_slice(&read("manifest.json")?).map_err(|e| format!("manifest.json: {e}"))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(format!("unsupported archive format {}", manifest.format_version));
    }
    let mut members = Vec::new();
    for entry in &manifest.members {
        let genome: ModelGenome = serde_json::from_slice(&read(&entry.genome_file)?)
            .map_err(|e| format!("{}: {e}", entry.genome_file))?;
        let mut net = decode(&genome, entry.input_shape.1, 0).map_err(|e| e.to_string())?;
        let bytes = read(&entry.weights_file)?;
        if bytes.len() % 8 != 0 {
            return Err(format!("{}: length is not a multiple of 8", entry.weights_file));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut expected = entry.tensors.iter();
        let mut consumed = 0;
        for (li, layer) in net.layers_mut().iter_mut().enumerate() {
            for (name, target) in layer_arrays_mut(layer) {
                let t = expected
                    .next()
                    .filter(|t| t.layer == li && t.name == name)
                    .ok_or_else(|| format!("manifest does not match genome at layer {li} {name}"))?;
                let n = target.len();
                if t.shape.iter().product::<usize>() != n || t.offset + n > values.len() {
                    return Err(format!("tensor layer {li} {name}: shape or offset mismatch"));
                }
                target.copy_from_slice(&values[t.offset..t.offset + n]);
                consumed += n;
            }
        }
        if consumed != values.len() {
            return Err(format!("{}: {} unused values", entry.weights_file, values.len() - consumed));
        }
        members.push(Member {
            group_index: entry.group_index,
            group: entry.group.clone(),
            network: net,
            threshold: entry.threshold,
        });
    }
    Ok(EnsembleModel {
        members,
        voting: manifest.voting,
        stride: manifest.stride,
    })
}
