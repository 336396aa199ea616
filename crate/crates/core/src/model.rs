//! The segmentation network shared by teacher and student: a stack of 3×3
//! convolutions with leaky-rectifier activations (the backbone) followed by
//! a per-pixel linear classifier (the head). Teacher and student differ only
//! in the number of input channels.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{push_f64s, read_framed, take_f64s, write_framed};
use crate::ndcore::{Bindings, Graph, NodeId, Tensor, LEAKY_SLOPE};

pub const KERNEL_SIZE: usize = 3;

const CHECKPOINT_FORMAT: &str = "protokd-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Architecture knobs shared by teacher and student; channel and class
/// counts come from the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub conv_layers: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 8,
            conv_layers: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn segnet(&self, in_channels: usize, classes: usize) -> SegNetConfig {
        SegNetConfig {
            in_channels,
            hidden: self.hidden,
            classes,
            conv_layers: self.conv_layers,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegNetConfig {
    pub in_channels: usize,
    /// Embedding width `D` of the backbone output.
    pub hidden: usize,
    pub classes: usize,
    pub conv_layers: usize,
    pub seed: u64,
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels < 1 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.hidden < 2 {
            return Err(Error::Config(format!(
                "hidden width must be >= 2, got {}",
                self.hidden
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need >= 2 classes, got {}",
                self.classes
            )));
        }
        if self.conv_layers < 1 {
            return Err(Error::Config("need at least one conv layer".into()));
        }
        Ok(())
    }

    /// Parameter names and shapes in declaration order.
    pub fn layer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let k = KERNEL_SIZE;
        let mut out = Vec::new();
        for i in 0..self.conv_layers {
            let cin = if i == 0 {
                self.in_channels
            } else {
                self.hidden
            };
            out.push((format!("conv{i}.weight"), vec![self.hidden, cin, k, k]));
            out.push((format!("conv{i}.bias"), vec![self.hidden]));
        }
        out.push(("head.weight".into(), vec![self.hidden, self.classes]));
        out.push(("head.bias".into(), vec![self.classes]));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegNetParams {
    config: SegNetConfig,
    tensors: Vec<(String, Tensor)>,
}

/// Kernels from `N(0, 2/fan_in)`, biases zero.
pub fn init_params(config: &SegNetConfig) -> Result<SegNetParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let tensors = config
        .layer_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = if shape.len() == 4 {
                    shape[1] * shape[2] * shape[3]
                } else {
                    shape[0]
                };
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
            };
            (name, t)
        })
        .collect();
    Ok(SegNetParams {
        config: config.clone(),
        tensors,
    })
}

impl SegNetParams {
    pub fn from_tensors(config: SegNetConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = config.layer_shapes();
        let ok = expected.len() == tensors.len()
            && expected
                .iter()
                .zip(&tensors)
                .all(|((n, s), (m, t))| n == m && s.as_slice() == t.shape());
        if !ok {
            return Err(Error::Incompatible(
                "parameter tensors do not match the config".into(),
            ));
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter().map(|(_, t)| t)
    }

    /// Same names and shapes, new values.
    pub fn with_values(&self, values: Vec<Tensor>) -> Self {
        debug_assert_eq!(values.len(), self.tensors.len());
        Self {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .zip(values)
                .map(|((n, _), t)| (n.clone(), t))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(Tensor::is_finite)
    }

    pub fn bind(&self, bindings: &mut Bindings) {
        for (n, t) in &self.tensors {
            bindings.insert(n.clone(), t.clone());
        }
    }

    pub fn bindings(&self) -> Bindings {
        let mut b = Bindings::new();
        self.bind(&mut b);
        b
    }

    /// Exact bit-level equality of all parameter values.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self.values().zip(other.values()).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed: self.config.seed,
            config: self.config.clone(),
            layers: self
                .tensors
                .iter()
                .map(|(n, t)| LayerShape {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let mut payload = Vec::new();
        for t in self.values() {
            push_f64s(&mut payload, t.data());
        }
        write_framed(path, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, payload): (CheckpointHeader, Vec<u8>) = read_framed(path)?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::MalformedHeader(format!(
                "not a checkpoint: `{}`",
                header.format
            )));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: header.version,
            });
        }
        let expected = header.config.layer_shapes();
        let declared: Vec<(String, Vec<usize>)> = header
            .layers
            .iter()
            .map(|l| (l.name.clone(), l.shape.clone()))
            .collect();
        if expected != declared {
            return Err(Error::MalformedHeader(
                "layer shapes disagree with config".into(),
            ));
        }
        let total: usize = expected
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        if payload.len() != total * 8 {
            return Err(Error::Truncated {
                expected: total * 8,
                found: payload.len(),
            });
        }
        let mut rest = payload.as_slice();
        let mut tensors = Vec::new();
        for (name, shape) in expected {
            let n = shape.iter().product();
            tensors.push((name, Tensor::new(shape, take_f64s(&mut rest, n)?)?));
        }
        Self::from_tensors(header.config, tensors)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerShape {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: SegNetConfig,
    seed: u64,
    layers: Vec<LayerShape>,
}

#[derive(Debug, Clone)]
pub struct SegNetNodes {
    /// `N×D` backbone output.
    pub features: NodeId,
    /// `N×K` head output.
    pub logits: NodeId,
    /// Convolution outputs before each rectifier.
    pub pre_activations: Vec<NodeId>,
}

/// Adds the network to `g` on top of `image` (`C×H×W`). Parameters become
/// graph inputs named after [`SegNetConfig::layer_shapes`].
pub fn build(g: &mut Graph, config: &SegNetConfig, image: NodeId) -> Result<SegNetNodes> {
    config.validate()?;
    let s = g.shape(image).to_vec();
    if s.len() != 3 || s[0] != config.in_channels {
        return Err(Error::shape(
            format!("{image}"),
            format!(
                "image {s:?} but model expects {} channels",
                config.in_channels
            ),
        ));
    }
    let (h, w) = (s[1], s[2]);
    let d = config.hidden;
    let mut params = Vec::new();
    for (name, shape) in config.layer_shapes() {
        params.push(g.input(name, &shape)?);
    }

    let mut x = image;
    let mut pre_activations = Vec::new();
    for layer in 0..config.conv_layers {
        let (kernel, bias) = (params[2 * layer], params[2 * layer + 1]);
        let conv = g.conv2d(x, kernel)?;
        let b = g.reshape(bias, &[d, 1, 1])?;
        let b = g.broadcast(b, &[d, h, w])?;
        let pre = g.add(conv, b)?;
        pre_activations.push(pre);
        x = g.leaky_relu(pre, LEAKY_SLOPE)?;
    }
    let flat = g.reshape(x, &[d, h * w])?;
    let features = g.transpose(flat)?;
    let logits = head(
        g,
        features,
        params[params.len() - 2],
        params[params.len() - 1],
    )?;
    Ok(SegNetNodes {
        features,
        logits,
        pre_activations,
    })
}

fn head(g: &mut Graph, features: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
    let n = g.shape(features)[0];
    let k = g.shape(weight)[1];
    let lin = g.matmul(features, weight)?;
    let b = g.reshape(bias, &[1, k])?;
    let b = g.broadcast(b, &[n, k])?;
    g.add(lin, b)
}

/// Backbone and head outputs for one image.
pub fn predict(params: &SegNetParams, image: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let img = g.constant(image.clone());
    let nodes = build(&mut g, params.config(), img)?;
    let v = g.forward(&params.bindings())?;
    Ok((v.get(nodes.features).clone(), v.get(nodes.logits).clone()))
}

/// `N×D` pixel features of `image` (`C×H×W`), pixels in row-major order.
pub fn backbone_forward(params: &SegNetParams, image: &Tensor) -> Result<Tensor> {
    predict(params, image).map(|(f, _)| f)
}

/// Per-pixel affine map from `N×D` features to `N×K` logits.
pub fn head_forward(params: &SegNetParams, features: &Tensor) -> Result<Tensor> {
    let d = params.config().hidden;
    if features.rank() != 2 || features.shape()[1] != d {
        return Err(Error::shape(
            "head",
            format!("features {:?} but head expects width {d}", features.shape()),
        ));
    }
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let w = g.constant(params.get("head.weight").expect("head weight").clone());
    let b = g.constant(params.get("head.bias").expect("head bias").clone());
    let out = head(&mut g, f, w, b)?;
    Ok(g.forward(&Bindings::new())?.get(out).clone())
}

/// Per-pixel argmax of `N×K` logits (first maximum on ties).
pub fn argmax_labels(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
