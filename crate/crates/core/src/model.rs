//! Model state: generating factors, parameter initialization, the forward
//! graph builder, and batched evaluation.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchConfig, LayerSpec, StageShape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, NodeId};
use crate::optim::OptimKind;
use crate::rng::{self, tag};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Uniform in +-1/sqrt(fan_in) for weight and bias.
    KaimingUniform,
    /// Uniform in +-sqrt(6/(fan_in+fan_out)) for weight, zero bias.
    XavierUniform,
}

/// Generating factors for one model: everything that, together with the
/// architecture, determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Factors {
    pub seed: u64,
    pub activation: Activation,
    pub optimizer: OptimKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f32,
    pub init: InitScheme,
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub name: String,
    /// Conv: [out, in, k, k]. Fc: [out, in].
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub arch: ArchConfig,
    pub factors: Factors,
    pub layers: Vec<LayerParams>,
}

/// Node ids of one layer's parameters inside a freshly built forward graph.
#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

pub struct ForwardHandles {
    pub logits: NodeId,
    pub params: Vec<LayerNodes>,
}

pub enum Mode<'a> {
    /// Parameters become trainable graph nodes; dropout masks are drawn.
    Train { rng: &'a mut ChaCha8Rng },
    /// Parameters become constants; dropout is disabled.
    Eval,
}

impl ModelState {
    /// Draws fresh parameters. The draw order is frozen: layers in stack
    /// order, each layer's weight (flat) before its bias.
    pub fn init(arch: &ArchConfig, factors: &Factors) -> Result<ModelState> {
        let (stages, _) = arch.stages()?;
        let names = arch.layer_names();
        let mut rng = rng::stream(factors.seed, &[tag::MODEL, tag::INIT]);
        let mut layers = Vec::with_capacity(names.len());
        let mut ni = 0;
        for (spec, stage) in arch.layers.iter().zip(&stages) {
            let (wdims, fan_in, fan_out) = match (*spec, stage) {
                (LayerSpec::Conv { out_channels, kernel, .. }, StageShape::Map { c, .. }) => (
                    vec![out_channels, *c, kernel, kernel],
                    c * kernel * kernel,
                    out_channels * kernel * kernel,
                ),
                (LayerSpec::Fc { out_features }, StageShape::Flat { features }) => {
                    (vec![out_features, *features], *features, out_features)
                }
                (LayerSpec::MaxPool { .. }, _) => continue,
                _ => unreachable!("stages() aligns shapes with layers"),
            };
            let out = wdims[0];
            let wbound = match factors.init {
                InitScheme::KaimingUniform => 1.0 / (fan_in as f64).sqrt(),
                InitScheme::XavierUniform => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            let wb = wbound as f32;
            let wlen: usize = wdims.iter().product();
            let mut wdata = Vec::with_capacity(wlen);
            for _ in 0..wlen {
                wdata.push(rng::uniform(&mut rng, -wb, wb));
            }
            let bias = match factors.init {
                InitScheme::KaimingUniform => {
                    let bound = (1.0 / (fan_in as f64).sqrt()) as f32;
                    let mut bdata = Vec::with_capacity(out);
                    for _ in 0..out {
                        bdata.push(rng::uniform(&mut rng, -bound, bound));
                    }
                    Tensor::new(vec![out], bdata)?
                }
                InitScheme::XavierUniform => Tensor::zeros(vec![out]),
            };
            layers.push(LayerParams {
                name: names[ni].clone(),
                weight: Tensor::new(wdims, wdata)?,
                bias,
            });
            ni += 1;
        }
        Ok(ModelState { arch: arch.clone(), factors: factors.clone(), layers })
    }

    /// Builds the forward graph for a batch `x` (NCHW leaf already in `g`).
    /// Hidden layers get the configured activation; in train mode, inverted
    /// dropout follows each hidden activation when the rate is positive.
    pub fn forward(&self, g: &mut Graph, x: NodeId, mode: &mut Mode) -> Result<ForwardHandles> {
        let n_weighted = self.layers.len();
        let mut params = Vec::with_capacity(n_weighted);
        let mut cur = x;
        let mut li = 0;
        let mut flattened = false;
        for spec in &self.arch.layers {
            match *spec {
                LayerSpec::Conv { stride, .. } => {
                    let nodes = self.add_layer_params(g, li, mode);
                    cur = g.conv2d(cur, nodes.weight, Some(nodes.bias), stride)?;
                    params.push(nodes);
                    li += 1;
                    cur = g.activation(cur, self.factors.activation);
                    cur = self.maybe_dropout(g, cur, mode)?;
                }
                LayerSpec::MaxPool { window } => {
                    cur = g.maxpool2d(cur, window)?;
                }
                LayerSpec::Fc { .. } => {
                    if !flattened {
                        let dims = g.value(cur).dims().to_vec();
                        let n = dims[0];
                        let features = dims.iter().skip(1).product::<usize>();
                        cur = g.reshape(cur, vec![n, features])?;
                        flattened = true;
                    }
                    let nodes = self.add_layer_params(g, li, mode);
                    cur = g.linear(cur, nodes.weight, Some(nodes.bias))?;
                    params.push(nodes);
                    li += 1;
                    if li < n_weighted {
                        cur = g.activation(cur, self.factors.activation);
                        cur = self.maybe_dropout(g, cur, mode)?;
                    }
                }
            }
        }
        Ok(ForwardHandles { logits: cur, params })
    }

    fn add_layer_params(&self, g: &mut Graph, li: usize, mode: &Mode) -> LayerNodes {
        let lp = &self.layers[li];
        match mode {
            Mode::Train { .. } => LayerNodes {
                weight: g.param(lp.weight.clone()),
                bias: g.param(lp.bias.clone()),
            },
            Mode::Eval => LayerNodes {
                weight: g.leaf(lp.weight.clone()),
                bias: g.leaf(lp.bias.clone()),
            },
        }
    }

    fn maybe_dropout(&self, g: &mut Graph, x: NodeId, mode: &mut Mode) -> Result<NodeId> {
        let p = self.factors.dropout;
        let rng = match mode {
            Mode::Train { rng } if p > 0.0 => rng,
            _ => return Ok(x),
        };
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        let keep = 1.0 - p as f64;
        let scale = (1.0 / keep) as f32;
        let dims = g.value(x).dims().to_vec();
        let n: usize = dims.iter().product();
        let mut mask = Vec::with_capacity(n);
        for _ in 0..n {
            let kept = (rng::uniform(rng, 0.0, 1.0) as f64) < keep;
            mask.push(if kept { scale } else { 0.0 });
        }
        let m = g.leaf(Tensor::new(dims, mask)?);
        g.mul(x, m)
    }

    /// Class predictions for a stack of images, in eval mode, batched.
    pub fn predict(&self, images: &Tensor, batch: usize) -> Result<Vec<u32>> {
        let (n, _, _, _) = images.dims4()?;
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let len = batch.min(n - start);
            let xb = slice_images(images, start, len)?;
            let mut g = Graph::new();
            let x = g.leaf(xb);
            let h = self.forward(&mut g, x, &mut Mode::Eval)?;
            let logits = g.value(h.logits);
            let (rows, classes) = logits.dims2()?;
            for r in 0..rows {
                out.push(argmax_row(&logits.data()[r * classes..(r + 1) * classes]));
            }
            start += len;
        }
        Ok(out)
    }

    /// Mean cross-entropy loss and accuracy over a dataset, in eval mode.
    pub fn evaluate(&self, ds: &Dataset, batch: usize) -> Result<(f64, f64)> {
        let (n, _, _, _) = ds.images.dims4()?;
        if n == 0 {
            return Err(Error::Data("cannot evaluate on an empty dataset".into()));
        }
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut start = 0;
        while start < n {
            let len = batch.min(n - start);
            let xb = slice_images(&ds.images, start, len)?;
            let labels = &ds.labels[start..start + len];
            let mut g = Graph::new();
            let x = g.leaf(xb);
            let h = self.forward(&mut g, x, &mut Mode::Eval)?;
            let loss = g.cross_entropy(h.logits, labels)?;
            loss_sum += g.value(loss).item()? as f64 * len as f64;
            let logits = g.value(h.logits);
            let (rows, classes) = logits.dims2()?;
            for r in 0..rows {
                let pred = argmax_row(&logits.data()[r * classes..(r + 1) * classes]);
                if pred == labels[r] {
                    correct += 1;
                }
            }
            start += len;
        }
        Ok((loss_sum / n as f64, correct as f64 / n as f64))
    }

    /// All parameters flattened in the frozen order: per layer, weight
    /// (row-major) then bias.
    pub fn flatten_params(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for lp in &self.layers {
            out.extend_from_slice(lp.weight.data());
            out.extend_from_slice(lp.bias.data());
        }
        out
    }

    /// Writes a flat vector (same order as `flatten_params`) back into the
    /// layer tensors.
    pub fn assign_from_flat(&mut self, flat: &[f32]) -> Result<()> {
        let want: usize = self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum();
        if flat.len() != want {
            return Err(Error::Shape(format!(
                "flat vector has {} values, model needs {want}",
                flat.len()
            )));
        }
        let mut at = 0;
        for lp in &mut self.layers {
            let wn = lp.weight.numel();
            lp.weight.data_mut().copy_from_slice(&flat[at..at + wn]);
            at += wn;
            let bn = lp.bias.numel();
            lp.bias.data_mut().copy_from_slice(&flat[at..at + bn]);
            at += bn;
        }
        Ok(())
    }

    /// Fraction of exact zeros among prunable entries (weights only; biases
    /// are never pruned).
    pub fn weight_sparsity(&self) -> f64 {
        let mut zeros = 0usize;
        let mut total = 0usize;
        for lp in &self.layers {
            total += lp.weight.numel();
            zeros += lp.weight.data().iter().filter(|v| **v == 0.0).count();
        }
        if total == 0 { 0.0 } else { zeros as f64 / total as f64 }
    }

    /// Checks every parameter for NaN/inf.
    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
    }
}

/// Rows `start..start+len` of an NCHW image stack as a new tensor.
pub fn slice_images(images: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (n, c, h, w) = images.dims4()?;
    if start + len > n {
        return Err(Error::Shape(format!("slice {start}+{len} exceeds {n} images")));
    }
    let stride = c * h * w;
    let data = images.data()[start * stride..(start + len) * stride].to_vec();
    Tensor::new(vec![len, c, h, w], data)
}

/// Index of the row maximum; ties resolve to the lowest class index.
pub fn argmax_row(row: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}
