//! Sparsification by variational dropout: each weight carries a learned
//! log-variance, training adds a KL term that drives useless weights toward
//! high dropout rates, and hardening zeroes every weight whose log dropout
//! ratio crosses the threshold.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, NodeId};
use crate::model::{slice_images, ModelState};
use crate::optim::Optimizer;
use crate::rng::{self, tag};
use crate::tensor::Tensor;
use crate::train::{EpochRecord, EVAL_BATCH};
use rand_chacha::ChaCha8Rng;

/// Default training learning rate for the variational stage.
pub const DEFAULT_VD_LR: f64 = 3e-4;
/// Default number of variational training epochs.
pub const DEFAULT_VD_EPOCHS: usize = 25;
/// Weights with log dropout ratio at or above this are considered dropped.
pub const LOG_ALPHA_PRUNE: f32 = 3.0;
/// log alpha is kept inside [-LOG_ALPHA_CLAMP, LOG_ALPHA_CLAMP].
pub const LOG_ALPHA_CLAMP: f32 = 20.0;
/// Initial log dropout ratio right after wrapping a dense model.
pub const INIT_LOG_ALPHA: f32 = -8.0;

const THETA_EPS: f32 = 1e-12;
const VAR_EPS: f32 = 1e-8;
const K1: f32 = 0.63576;
const K2: f32 = 1.87320;
const K3: f32 = 1.48695;

/// A dense model plus one log-variance tensor per weighted layer, shaped
/// like that layer's weight. Biases stay deterministic.
#[derive(Debug, Clone)]
pub struct VDModelState {
    pub base: ModelState,
    pub log_sigma2: Vec<Tensor>,
}

/// Graph handles for one variational layer.
pub struct VDLayerNodes {
    pub weight: NodeId,
    pub bias: NodeId,
    pub log_sigma2: NodeId,
}

/// Wraps a dense model: log sigma^2 = ln(theta^2 + 1e-12) - 8, i.e. every
/// weight starts at log alpha of about -8 (essentially no dropout).
pub fn vd_wrap(model: &ModelState) -> VDModelState {
    let log_sigma2 = model
        .layers
        .iter()
        .map(|lp| {
            let data: Vec<f32> = lp
                .weight
                .data()
                .iter()
                .map(|w| (w * w + THETA_EPS).ln() + INIT_LOG_ALPHA)
                .collect();
            Tensor::new(lp.weight.dims().to_vec(), data).expect("weight-shaped tensor")
        })
        .collect();
    VDModelState { base: model.clone(), log_sigma2 }
}

fn clamp_alpha(v: f32) -> f32 {
    // max/min rather than clamp: non-finite values land deterministically
    // inside the range instead of propagating.
    v.max(-LOG_ALPHA_CLAMP).min(LOG_ALPHA_CLAMP)
}

impl VDModelState {
    /// Per-layer log dropout ratios, clamped into the finite range.
    pub fn log_alpha(&self) -> Vec<Tensor> {
        self.base
            .layers
            .iter()
            .zip(&self.log_sigma2)
            .map(|(lp, ls)| {
                let data: Vec<f32> = lp
                    .weight
                    .data()
                    .iter()
                    .zip(ls.data())
                    .map(|(w, s)| clamp_alpha(s - (w * w + THETA_EPS).ln()))
                    .collect();
                Tensor::new(lp.weight.dims().to_vec(), data).expect("weight-shaped tensor")
            })
            .collect()
    }

    /// Fraction of weights at or above the pruning threshold.
    pub fn sparsity(&self) -> f64 {
        let las = self.log_alpha();
        let total: usize = las.iter().map(|t| t.numel()).sum();
        if total == 0 {
            return 0.0;
        }
        let dropped: usize = las
            .iter()
            .map(|t| t.data().iter().filter(|v| **v >= LOG_ALPHA_PRUNE).count())
            .sum();
        dropped as f64 / total as f64
    }

    /// Per-layer (name, weight count, mean clamped log alpha, dropped fraction).
    pub fn layer_alpha_stats(&self) -> Vec<(String, usize, f64, f64)> {
        self.base
            .layers
            .iter()
            .zip(self.log_alpha())
            .map(|(lp, la)| {
                let n = la.numel();
                let mean = la.data().iter().map(|v| *v as f64).sum::<f64>() / n as f64;
                let dropped =
                    la.data().iter().filter(|v| **v >= LOG_ALPHA_PRUNE).count() as f64 / n as f64;
                (lp.name.clone(), n, mean, dropped)
            })
            .collect()
    }

    /// Mean clamped log alpha over all weights.
    pub fn mean_log_alpha(&self) -> f64 {
        let las = self.log_alpha();
        let total: usize = las.iter().map(|t| t.numel()).sum();
        las.iter().flat_map(|t| t.data().iter().map(|v| *v as f64)).sum::<f64>() / total as f64
    }

    /// Extra tensors to store next to the dense weights in a checkpoint.
    pub fn extras(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.base.layers.len() * 2);
        for ((lp, ls), la) in self.base.layers.iter().zip(&self.log_sigma2).zip(self.log_alpha())
        {
            out.push((format!("{}.log_sigma2", lp.name), ls.clone()));
            out.push((format!("{}.log_alpha", lp.name), la));
        }
        out
    }

    /// Rebuilds the variational state from a dense model plus the stored
    /// extra tensors (only `log_sigma2` is read back; `log_alpha` is derived).
    pub fn from_parts(model: ModelState, extras: &[(String, Tensor)]) -> Result<Self> {
        let mut log_sigma2 = Vec::with_capacity(model.layers.len());
        for lp in &model.layers {
            let want = format!("{}.log_sigma2", lp.name);
            let t = extras
                .iter()
                .find(|(n, _)| *n == want)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {want}")))?;
            if t.dims() != lp.weight.dims() {
                return Err(Error::Shape(format!(
                    "{want} has dims {:?}, weight has {:?}",
                    t.dims(),
                    lp.weight.dims()
                )));
            }
            log_sigma2.push(t);
        }
        Ok(VDModelState { base: model, log_sigma2 })
    }
}

/// Zeroes every weight whose clamped log alpha is at or above `threshold`
/// (inclusive) and returns the dense model plus the keep masks.
pub fn vd_harden(vd: &VDModelState, threshold: f32) -> (ModelState, Vec<Tensor>) {
    let mut model = vd.base.clone();
    let las = vd.log_alpha();
    let mut masks = Vec::with_capacity(model.layers.len());
    for (lp, la) in model.layers.iter_mut().zip(&las) {
        let mut mask = Vec::with_capacity(la.numel());
        for (w, a) in lp.weight.data_mut().iter_mut().zip(la.data()) {
            if *a >= threshold {
                *w = 0.0;
                mask.push(0.0);
            } else {
                mask.push(1.0);
            }
        }
        masks.push(Tensor::new(la.dims().to_vec(), mask).expect("weight-shaped tensor"));
    }
    (model, masks)
}

/// In-graph KL penalty for one layer, summed over its weights:
/// k1 + 0.5*softplus(-log alpha) - k1*sigmoid(k2 + k3*log alpha)
/// with log alpha = log sigma^2 - ln(theta^2 + 1e-12), left unclamped so
/// gradients flow; the stored values are projected after each step instead.
fn kl_sum_node(g: &mut Graph, w: NodeId, ls: NodeId) -> Result<NodeId> {
    let w2 = g.square(w);
    let w2e = g.add_scalar(w2, THETA_EPS);
    let logw2 = g.log(w2e);
    let la = g.sub(ls, logw2)?;
    let neg_la = g.mul_scalar(la, -1.0);
    let sp = g.softplus(neg_la);
    let lin = g.mul_scalar(la, K3);
    let lin = g.add_scalar(lin, K2);
    let sig = g.activation(lin, Activation::Sigmoid);
    let half_sp = g.mul_scalar(sp, 0.5);
    let k1_sig = g.mul_scalar(sig, K1);
    let diff = g.sub(half_sp, k1_sig)?;
    let term = g.add_scalar(diff, K1);
    Ok(g.sum(term))
}

/// Reference KL for one weight, computed in f64 outside the graph.
pub fn kl_reference(log_alpha: f64) -> f64 {
    let k1 = K1 as f64;
    let k2 = K2 as f64;
    let k3 = K3 as f64;
    let softplus = |x: f64| {
        if x > 30.0 {
            x
        } else {
            x.exp().ln_1p()
        }
    };
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    k1 + 0.5 * softplus(-log_alpha) - k1 * sigmoid(k2 + k3 * log_alpha)
}

/// Noisy forward pass with the local reparameterization trick: activations
/// are sampled as mean + sqrt(var + 1e-8) * eps with one standard-normal
/// draw per activation, where the mean path uses theta and bias and the
/// variance path pushes squared inputs through sigma^2. The plain dropout
/// factor is ignored here; the learned noise replaces it.
pub fn vd_forward(
    vd: &VDModelState,
    g: &mut Graph,
    x: NodeId,
    rng: &mut ChaCha8Rng,
) -> Result<(NodeId, Vec<VDLayerNodes>)> {
    use crate::arch::LayerSpec;
    let model = &vd.base;
    let n_weighted = model.layers.len();
    let mut handles = Vec::with_capacity(n_weighted);
    let mut cur = x;
    let mut li = 0;
    let mut flattened = false;
    for spec in &model.arch.layers {
        match *spec {
            LayerSpec::Conv { stride, .. } => {
                let nodes = add_vd_layer(g, vd, li);
                cur = noisy_apply(g, cur, &nodes, rng, |g, x, w, b| {
                    g.conv2d(x, w, b, stride)
                })?;
                handles.push(nodes);
                li += 1;
                cur = g.activation(cur, model.factors.activation);
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
                let nodes = add_vd_layer(g, vd, li);
                cur = noisy_apply(g, cur, &nodes, rng, |g, x, w, b| g.linear(x, w, b))?;
                handles.push(nodes);
                li += 1;
                if li < n_weighted {
                    cur = g.activation(cur, model.factors.activation);
                }
            }
        }
    }
    Ok((cur, handles))
}

fn add_vd_layer(g: &mut Graph, vd: &VDModelState, li: usize) -> VDLayerNodes {
    let lp = &vd.base.layers[li];
    VDLayerNodes {
        weight: g.param(lp.weight.clone()),
        bias: g.param(lp.bias.clone()),
        log_sigma2: g.param(vd.log_sigma2[li].clone()),
    }
}

fn noisy_apply(
    g: &mut Graph,
    x: NodeId,
    nodes: &VDLayerNodes,
    rng: &mut ChaCha8Rng,
    op: impl Fn(&mut Graph, NodeId, NodeId, Option<NodeId>) -> Result<NodeId>,
) -> Result<NodeId> {
    let mean = op(g, x, nodes.weight, Some(nodes.bias))?;
    let x2 = g.square(x);
    let sigma2 = g.exp(nodes.log_sigma2);
    let var = op(g, x2, sigma2, None)?;
    let var = g.add_scalar(var, VAR_EPS);
    let std = g.sqrt(var);
    let dims = g.value(mean).dims().to_vec();
    let n: usize = dims.iter().product();
    let mut eps = Vec::with_capacity(n);
    for _ in 0..n {
        eps.push(rng::normal(rng));
    }
    let eps = g.leaf(Tensor::new(dims, eps)?);
    let noise = g.mul(std, eps)?;
    g.add(mean, noise)
}

/// Trains the variational model in place. The loss per batch is the mean
/// cross-entropy of a noisy forward pass plus `kl_coeff` times the summed KL
/// penalty; `kl_coeff` defaults to 1 / train set size and is constant from
/// the first step (no warm-up). `lr` replaces the model's learning rate.
/// Evaluation between epochs propagates means only (full theta, no noise),
/// and the recorded sparsity is the fraction of weights at or above the
/// pruning threshold. Returns epochs + 1 records, the first one pre-training.
#[allow(clippy::too_many_arguments)]
pub fn vd_train(
    vd: &mut VDModelState,
    train: &Dataset,
    test: &Dataset,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    kl_coeff: Option<f64>,
    model_id: usize,
    mut on_epoch: impl FnMut(&VDModelState, &EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let n_train = train.labels.len();
    if n_train == 0 {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let coeff = kl_coeff.unwrap_or(1.0 / n_train as f64);
    if !(coeff.is_finite() && coeff >= 0.0) {
        return Err(Error::Config(format!("KL coefficient {coeff} must be >= 0")));
    }
    vd.base.factors.lr = lr;

    let mut trng = rng::stream(vd.base.factors.seed, &[tag::VD, tag::TRAIN]);
    let sizes: Vec<usize> = vd
        .base
        .layers
        .iter()
        .zip(&vd.log_sigma2)
        .flat_map(|(l, ls)| [l.weight.numel(), l.bias.numel(), ls.numel()])
        .collect();
    let mut opt = Optimizer::new(
        vd.base.factors.optimizer,
        vd.base.factors.lr,
        vd.base.factors.weight_decay,
        &sizes,
    );

    let mut records = Vec::with_capacity(epochs + 1);
    let rec = measure_vd(vd, train, test, 0, model_id)?;
    on_epoch(vd, &rec)?;
    records.push(rec);

    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 1..=epochs {
        rng::shuffle(&mut trng, &mut order);
        let mut start = 0;
        while start < n_train {
            let len = batch_size.min(n_train - start);
            let (xb, yb) = train.gather(&order[start..start + len]);
            let mut g = Graph::new();
            let x = g.leaf(xb);
            let (logits, handles) = vd_forward(vd, &mut g, x, &mut trng)?;
            let ce = g.cross_entropy(logits, &yb)?;
            let mut kl: Option<NodeId> = None;
            for nodes in &handles {
                let kl_l = kl_sum_node(&mut g, nodes.weight, nodes.log_sigma2)?;
                kl = Some(match kl {
                    Some(acc) => g.add(acc, kl_l)?,
                    None => kl_l,
                });
            }
            let kl = kl.expect("at least one weighted layer");
            let kl_scaled = g.mul_scalar(kl, coeff as f32);
            let loss = g.add(ce, kl_scaled)?;
            if !g.value(loss).item()?.is_finite() {
                return Err(Error::Divergence { model: model_id, epoch });
            }
            let grads = g.backward(loss)?;

            let mut grad_slices: Vec<&[f32]> = Vec::with_capacity(sizes.len());
            for nodes in &handles {
                for id in [nodes.weight, nodes.bias, nodes.log_sigma2] {
                    match grads.wrt(id) {
                        Some(t) => grad_slices.push(t.data()),
                        None => {
                            return Err(Error::Compute(
                                "parameter missing from gradient tape".into(),
                            ))
                        }
                    }
                }
            }
            let mut param_slices: Vec<&mut [f32]> = Vec::with_capacity(sizes.len());
            let mut mask_slices: Vec<Option<&[f32]>> = Vec::with_capacity(sizes.len());
            for (lp, ls) in vd.base.layers.iter_mut().zip(vd.log_sigma2.iter_mut()) {
                param_slices.push(lp.weight.data_mut());
                param_slices.push(lp.bias.data_mut());
                param_slices.push(ls.data_mut());
                mask_slices.extend([None, None, None]);
            }
            opt.step(&mut param_slices, &grad_slices, &mask_slices)?;

            // Projection: keep the stored log alpha inside the finite range.
            for (lp, ls) in vd.base.layers.iter().zip(vd.log_sigma2.iter_mut()) {
                for (w, s) in lp.weight.data().iter().zip(ls.data_mut().iter_mut()) {
                    let lo = (w * w + THETA_EPS).ln();
                    *s = s.max(lo - LOG_ALPHA_CLAMP).min(lo + LOG_ALPHA_CLAMP);
                }
            }
            start += len;
        }
        if !vd.base.is_finite() {
            return Err(Error::Divergence { model: model_id, epoch });
        }
        let rec = measure_vd(vd, train, test, epoch, model_id)?;
        on_epoch(vd, &rec)?;
        records.push(rec);
    }
    Ok(records)
}

fn measure_vd(
    vd: &VDModelState,
    train: &Dataset,
    test: &Dataset,
    epoch: usize,
    model_id: usize,
) -> Result<EpochRecord> {
    let (train_loss, train_acc) = vd.base.evaluate(train, EVAL_BATCH)?;
    let (_, test_acc) = vd.base.evaluate(test, EVAL_BATCH)?;
    if !train_loss.is_finite() {
        return Err(Error::Divergence { model: model_id, epoch });
    }
    Ok(EpochRecord {
        epoch,
        train_loss,
        train_acc,
        test_acc,
        ggap: train_acc - test_acc,
        sparsity: vd.sparsity(),
    })
}

/// Noisy-forward class predictions are not meaningful for reporting; this
/// exists for tests that need a single sampled pass.
pub fn sample_logits(vd: &VDModelState, images: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (n, _, _, _) = images.dims4()?;
    let xb = slice_images(images, 0, n)?;
    let mut g = Graph::new();
    let x = g.leaf(xb);
    let (logits, _) = vd_forward(vd, &mut g, x, rng)?;
    Ok(g.value(logits).clone())
}
