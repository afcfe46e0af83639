//! Hyper-representation training: turning a zoo of variational-dropout
//! checkpoints into a token dataset, optimizing the autoencoder on it, and
//! persisting the learned embeddings with their property probes.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::ArchConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::hyperrep::ae::{
    decode_nodes, encode_nodes, project_nodes, save_ae, AeDims, AeParams, StagedAe,
};
use crate::hyperrep::losses::{
    contrastive_node, recon_alpha_term, recon_w_term, tanh_transform, total_node,
};
use crate::hyperrep::probe::{probe_all, ProbeReport};
use crate::hyperrep::tokens::{
    augment, inv_var_map, layer_stats, noise_std_map, tokenize, LayerStats, TokenLayout,
};
use crate::optim::{OptimKind, Optimizer};
use crate::rng::{self, tag};
use crate::tensor::Tensor;
use crate::zoo::{self, fmt_metric, ModelStatus};
use crate::ztc;

pub const AE_FILE: &str = "ae.ztc";
pub const EMBEDDINGS_FILE: &str = "embeddings.ztc";
pub const EMBEDDINGS_META_FILE: &str = "embeddings.json";
pub const PROBE_FILE: &str = "probe.csv";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const STATS_FILE: &str = "stats.json";
pub const PROBE_HEADER: &str = "target,r2,n_train,n_test";
pub const LOSS_LOG_HEADER: &str = "epoch,total,contrast,recon_w,recon_alpha";

/// Properties attached to one checkpoint state, the probe targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleProps {
    pub accuracy: f64,
    pub sparsity: f64,
    pub epoch: f64,
    pub ggap: f64,
}

/// One checkpoint state as the autoencoder sees it: aligned weight and
/// log-alpha token grids plus the properties the probes predict.
#[derive(Debug, Clone)]
pub struct AeSample {
    pub model_id: usize,
    pub epoch: usize,
    pub w: Tensor,
    pub alpha: Tensor,
    pub props: SampleProps,
}

/// Every usable state of one zoo under a fixed token layout.
#[derive(Debug, Clone)]
pub struct AeDataset {
    pub arch: ArchConfig,
    pub layout: TokenLayout,
    pub samples: Vec<AeSample>,
}

/// Loads every checkpoint of every converged model in the zoo and tokenizes
/// it. The zoo must carry per-layer log-alpha maps: sparsification by
/// magnitude pruning or plain dense training does not record them, so only a
/// variational-dropout twin can feed this loader.
pub fn load_ae_dataset(zoo_dir: &Path, d_tok: usize) -> Result<AeDataset> {
    let index = zoo::load_zoo(zoo_dir)?;
    let mut layout: Option<TokenLayout> = None;
    let mut samples = Vec::new();
    for entry in &index.models {
        if !matches!(entry.status, ModelStatus::Ok) {
            continue;
        }
        for epoch in 0..=entry.epochs_written {
            let path = index.checkpoint_path(zoo_dir, entry.id, epoch);
            let ckpt = ztc::load_checkpoint(&path)?;
            let mut alphas = Vec::with_capacity(ckpt.model.layers.len());
            for layer in &ckpt.model.layers {
                let name = format!("{}.log_alpha", layer.name);
                match ckpt.extras.iter().find(|(n, _)| *n == name) {
                    Some((_, t)) => alphas.push(t.clone()),
                    None => {
                        return Err(Error::Config(format!(
                            "{}: no {name} tensor; embedding training reads log-alpha maps, \
                             which only a variational-dropout zoo records (this one is {:?})",
                            path.display(),
                            index.method
                        )))
                    }
                }
            }
            let (w, alpha, lo) = tokenize(&ckpt.model, &alphas, d_tok)?;
            match &layout {
                None => layout = Some(lo),
                Some(first) if *first == lo => {}
                Some(_) => {
                    return Err(Error::Format(format!(
                        "{}: layout differs from the first checkpoint",
                        path.display()
                    )))
                }
            }
            samples.push(AeSample {
                model_id: entry.id,
                epoch,
                w,
                alpha,
                props: SampleProps {
                    accuracy: ckpt.record.test_acc,
                    sparsity: ckpt.record.sparsity,
                    epoch: ckpt.record.epoch as f64,
                    ggap: ckpt.record.ggap,
                },
            });
        }
    }
    let layout = layout
        .ok_or_else(|| Error::Data(format!("{}: zoo has no usable checkpoints", zoo_dir.display())))?;
    Ok(AeDataset { arch: index.arch, layout, samples })
}

/// Splits model ids into training and held-out sets, four to one. The split
/// is by model, never by state, so no trajectory leaks across it.
pub fn split_by_model(ds: &AeDataset, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> =
        ds.samples.iter().map(|s| s.model_id).collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = rng::stream(seed, &[tag::AE, tag::DATA]);
    rng::shuffle(&mut rng, &mut ids);
    let cut = ((4 * ids.len()) / 5).max(1).min(ids.len());
    let (train, test) = ids.split_at(cut);
    let mut train = train.to_vec();
    let mut test = test.to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn d_beta() -> f32 {
    0.05
}
fn d_temp() -> f32 {
    0.1
}
fn d_threshold() -> f64 {
    3.0
}
fn d_range() -> f64 {
    1.0
}
fn d_gamma() -> f32 {
    0.05
}
fn d_rho() -> f64 {
    0.1
}
fn d_epochs() -> usize {
    20
}
fn d_batch_pairs() -> usize {
    8
}
fn d_lr() -> f64 {
    3e-4
}

/// Every knob of one autoencoder training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeTrainConfig {
    #[serde(default)]
    pub dims: AeDims,
    /// Weight on the contrastive term; the reconstruction pair gets `1 - beta`.
    #[serde(default = "d_beta")]
    pub beta: f32,
    /// Contrastive temperature.
    #[serde(default = "d_temp")]
    pub temp: f32,
    /// Center of the log-alpha range of interest (the keep/drop boundary).
    #[serde(default = "d_threshold")]
    pub threshold: f64,
    /// Half-width of the log-alpha range of interest.
    #[serde(default = "d_range")]
    pub range: f64,
    /// Augmentation noise scale, in units of each layer's deviation.
    #[serde(default = "d_gamma")]
    pub gamma: f32,
    /// Fraction of token positions erased per view.
    #[serde(default = "d_rho")]
    pub rho: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    /// States per minibatch; each contributes two augmented views.
    #[serde(default = "d_batch_pairs")]
    pub batch_pairs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig {
            dims: AeDims::default(),
            beta: d_beta(),
            temp: d_temp(),
            threshold: d_threshold(),
            range: d_range(),
            gamma: d_gamma(),
            rho: d_rho(),
            epochs: d_epochs(),
            batch_pairs: d_batch_pairs(),
            lr: d_lr(),
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl AeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("autoencoder training needs at least one epoch".into()));
        }
        if self.batch_pairs == 0 {
            return Err(Error::Config("batch size must be at least one state".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("loss weighting {} outside [0, 1]", self.beta)));
        }
        if !(self.temp > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temp)));
        }
        if !(self.range > 0.0) {
            return Err(Error::Config(format!(
                "alpha range of interest {} must be positive",
                self.range
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("noise scale {} must be finite and >= 0", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("erase fraction {} outside [0, 1]", self.rho)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        Ok(())
    }
}

/// Loss components of one epoch, view-weighted means over its steps. Row 0
/// is an evaluation pass before any update.
#[derive(Debug, Clone, PartialEq)]
pub struct AeEpochLog {
    pub epoch: usize,
    pub total: f64,
    pub contrast: f64,
    pub recon_w: f64,
    pub recon_alpha: f64,
}

/// The four loss nodes of one minibatch.
pub struct BatchNodes {
    pub total: NodeId,
    pub contrast: NodeId,
    pub recon_w: NodeId,
    pub recon_alpha: NodeId,
}

/// Builds the full training objective for one batch of views. `views` holds
/// `(w, alpha)` token grids; consecutive entries `2i` and `2i+1` are the two
/// augmented views of one state, which the contrastive term pulls together.
/// Reconstruction targets each view's own grids, weighted by inverse layer
/// variance on the weight branch and restricted to the range of interest on
/// the alpha branch; padding positions are excluded from both.
pub fn batch_loss(
    g: &mut Graph,
    staged: &StagedAe,
    views: &[(Tensor, Tensor)],
    inv_var: &Tensor,
    pad: &Tensor,
    enc_mask: Option<&Tensor>,
    dec_mask: Option<&Tensor>,
    n_params: usize,
    cfg: &AeTrainConfig,
) -> Result<BatchNodes> {
    if views.is_empty() || views.len() % 2 != 0 {
        return Err(Error::Shape(format!("{} views do not form pairs", views.len())));
    }
    let m = views.len();
    let iv = g.leaf(inv_var.clone());
    let pd = g.leaf(pad.clone());
    let em = enc_mask.map(|t| g.leaf(t.clone()));
    let dm = dec_mask.map(|t| g.leaf(t.clone()));
    let mut zbars = Vec::with_capacity(m);
    let mut w_sum: Option<NodeId> = None;
    let mut a_sum: Option<NodeId> = None;
    for (w, alpha) in views {
        let target_a = tanh_transform(alpha, cfg.threshold, cfg.range)?;
        let wn = g.leaf(w.clone());
        let ta = g.leaf(target_a);
        let z = encode_nodes(g, staged, wn, em)?;
        zbars.push(project_nodes(g, staged, z)?);
        let dec = decode_nodes(g, staged, z, dm)?;
        let wt = recon_w_term(g, dec.w, wn, iv)?;
        let at =
            recon_alpha_term(g, dec.alpha, ta, pd, cfg.threshold as f32, cfg.range as f32)?;
        w_sum = Some(match w_sum {
            Some(s) => g.add(s, wt)?,
            None => wt,
        });
        a_sum = Some(match a_sum {
            Some(s) => g.add(s, at)?,
            None => at,
        });
    }
    let recon_w = g.mul_scalar(w_sum.expect("views"), 1.0 / (m as f32 * n_params as f32));
    let recon_alpha = g.mul_scalar(a_sum.expect("views"), 1.0 / m as f32);
    let zcat = g.concat_rows(&zbars)?;
    let contrast = contrastive_node(g, zcat, cfg.temp)?;
    let total = total_node(g, contrast, recon_w, recon_alpha, cfg.beta)?;
    Ok(BatchNodes { total, contrast, recon_w, recon_alpha })
}

/// Trains the autoencoder on the states of `train_models`. Returns the
/// parameters, the layer statistics every consumer of the model must reuse,
/// and one loss row per epoch (row 0 evaluates the fresh network).
///
/// Determinism: initialization, shuffling, and augmentation all run on
/// counter-derived streams keyed by the seed and epoch, so a rerun with the
/// same inputs reproduces the parameters bit for bit.
pub fn train_ae(
    ds: &AeDataset,
    train_models: &[usize],
    cfg: &AeTrainConfig,
) -> Result<(AeParams, LayerStats, Vec<AeEpochLog>)> {
    cfg.validate()?;
    if cfg.dims.d_tok != ds.layout.d_tok {
        return Err(Error::Config(format!(
            "token width {} configured, but the dataset is tokenized at {}",
            cfg.dims.d_tok, ds.layout.d_tok
        )));
    }
    let train_idx: Vec<usize> = ds
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| train_models.contains(&s.model_id))
        .map(|(i, _)| i)
        .collect();
    if train_idx.is_empty() {
        return Err(Error::Config("no training states selected".into()));
    }
    let n_params = ds.layout.n_params;
    let stats =
        layer_stats(train_idx.iter().map(|&i| &ds.samples[i].w.data()[..n_params]), &ds.layout)?;
    let inv_var = inv_var_map(&stats, &ds.layout)?;
    let pad = ds.layout.pad_mask();
    let noise = noise_std_map(&stats, &ds.layout, cfg.gamma)?;

    let mut params = AeParams::init(&cfg.dims, ds.layout.seq_len, cfg.seed)?;
    let (enc_mask, dec_mask) = params.attention_masks(&ds.layout);
    let sizes: Vec<usize> = params.tensors.iter().map(|(_, t)| t.numel()).collect();
    let mut opt = Optimizer::new(OptimKind::Adam, cfg.lr, cfg.weight_decay, &sizes);

    let mut logs = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let update = epoch > 0;
        let mut rng = rng::stream(cfg.seed, &[tag::AE, tag::AUGMENT, epoch as u64]);
        let mut order = train_idx.clone();
        rng::shuffle(&mut rng, &mut order);
        let mut sums = [0.0f64; 4];
        let mut views_seen = 0usize;
        for chunk in order.chunks(cfg.batch_pairs) {
            let mut views = Vec::with_capacity(chunk.len() * 2);
            for &i in chunk {
                let s = &ds.samples[i];
                for _ in 0..2 {
                    views.push(augment(&s.w, &s.alpha, &ds.layout, &noise, cfg.rho, &mut rng)?);
                }
            }
            let mut g = Graph::new();
            let staged = params.stage(&mut g, update);
            let nodes = batch_loss(
                &mut g,
                &staged,
                &views,
                &inv_var,
                &pad,
                enc_mask.as_ref(),
                dec_mask.as_ref(),
                n_params,
                cfg,
            )?;
            let total = g.value(nodes.total).item()? as f64;
            if !total.is_finite() {
                return Err(Error::Divergence { model: 0, epoch });
            }
            let vn = views.len() as f64;
            sums[0] += total * vn;
            sums[1] += g.value(nodes.contrast).item()? as f64 * vn;
            sums[2] += g.value(nodes.recon_w).item()? as f64 * vn;
            sums[3] += g.value(nodes.recon_alpha).item()? as f64 * vn;
            views_seen += views.len();
            if update {
                let grads = g.backward(nodes.total)?;
                let grad_store: Vec<Vec<f32>> = staged
                    .ids
                    .iter()
                    .zip(&sizes)
                    .map(|(&id, &n)| {
                        grads.wrt(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n])
                    })
                    .collect();
                let grad_refs: Vec<&[f32]> = grad_store.iter().map(|v| v.as_slice()).collect();
                let mut slots: Vec<&mut [f32]> =
                    params.tensors.iter_mut().map(|(_, t)| t.data_mut()).collect();
                let masks = vec![None; grad_refs.len()];
                opt.step(&mut slots, &grad_refs, &masks)?;
            }
        }
        if !params.is_finite() {
            return Err(Error::Divergence { model: 0, epoch });
        }
        let vn = views_seen as f64;
        logs.push(AeEpochLog {
            epoch,
            total: sums[0] / vn,
            contrast: sums[1] / vn,
            recon_w: sums[2] / vn,
            recon_alpha: sums[3] / vn,
        });
    }
    Ok((params, stats, logs))
}

/// One embedded checkpoint state.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub model_id: usize,
    pub epoch: usize,
    pub z: Vec<f32>,
    pub props: SampleProps,
}

/// Embeds every state of the dataset, training and held-out alike.
pub fn embed_dataset(params: &AeParams, ds: &AeDataset) -> Result<Vec<Embedding>> {
    ds.samples
        .iter()
        .map(|s| {
            Ok(Embedding {
                model_id: s.model_id,
                epoch: s.epoch,
                z: params.embed(&s.w, &ds.layout)?,
                props: s.props.clone(),
            })
        })
        .collect()
}

/// Coefficient of determination of the clean weight reconstruction, pooled
/// over every state of `models`: each state is encoded and decoded without
/// augmentation, and the decoded weight tokens are compared to the true
/// ones at every real parameter position. Returns `1 - SS_res / SS_tot`
/// around the pooled mean of the true weights, so zero means "as good as
/// predicting the mean" and one means exact.
pub fn recon_r2(params: &AeParams, ds: &AeDataset, models: &[usize]) -> Result<f64> {
    let selected: Vec<&AeSample> =
        ds.samples.iter().filter(|s| models.contains(&s.model_id)).collect();
    if selected.is_empty() {
        return Err(Error::Config("no states selected for reconstruction scoring".into()));
    }
    let (enc_mask, dec_mask) = params.attention_masks(&ds.layout);
    let n = ds.layout.n_params;
    let mut truths = Vec::with_capacity(selected.len() * n);
    let mut preds = Vec::with_capacity(selected.len() * n);
    for s in &selected {
        let mut g = Graph::new();
        let staged = params.stage(&mut g, false);
        let em = enc_mask.as_ref().map(|t| g.leaf(t.clone()));
        let dm = dec_mask.as_ref().map(|t| g.leaf(t.clone()));
        let wn = g.leaf(s.w.clone());
        let z = encode_nodes(&mut g, &staged, wn, em)?;
        let dec = decode_nodes(&mut g, &staged, z, dm)?;
        let recon = g.value(dec.w);
        truths.extend(s.w.data()[..n].iter().map(|&v| v as f64));
        preds.extend(recon.data()[..n].iter().map(|&v| v as f64));
    }
    let mean = truths.iter().sum::<f64>() / truths.len() as f64;
    let ss_tot: f64 = truths.iter().map(|&t| (t - mean) * (t - mean)).sum();
    if ss_tot <= 0.0 {
        return Err(Error::Stats("reconstruction target has zero variance".into()));
    }
    let ss_res: f64 = truths.iter().zip(&preds).map(|(&t, &p)| (t - p) * (t - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Writes the embedding matrix as a checkpoint-container tensor and the
/// per-row identities and properties as a JSON sidecar.
pub fn save_embeddings(ztc_path: &Path, json_path: &Path, embeds: &[Embedding]) -> Result<()> {
    let first = embeds
        .first()
        .ok_or_else(|| Error::Config("no embeddings to save".into()))?;
    let d = first.z.len();
    let mut flat = Vec::with_capacity(embeds.len() * d);
    for e in embeds {
        if e.z.len() != d {
            return Err(Error::Shape(format!(
                "embedding widths differ: {} then {}",
                d,
                e.z.len()
            )));
        }
        flat.extend_from_slice(&e.z);
    }
    let z = Tensor::new(vec![embeds.len(), d], flat)?;
    let meta = serde_json::json!({ "kind": "embeddings", "count": embeds.len(), "d_z": d });
    ztc::write_ztc(ztc_path, &meta, &[("z", &z)])?;
    let rows: Vec<serde_json::Value> = embeds
        .iter()
        .map(|e| {
            serde_json::json!({
                "model_id": e.model_id,
                "epoch": e.epoch,
                "accuracy": e.props.accuracy,
                "sparsity": e.props.sparsity,
                "ggap": e.props.ggap,
            })
        })
        .collect();
    let body = serde_json::to_vec_pretty(&rows)
        .map_err(|e| Error::Format(format!("embedding sidecar: {e}")))?;
    fs::write(json_path, body)?;
    Ok(())
}

/// Config of a full hyper-representation run: the source zoo plus every
/// training knob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperrepConfig {
    /// Variational-dropout zoo to embed.
    pub zoo: PathBuf,
    #[serde(default)]
    pub train: AeTrainConfig,
}

/// What a finished run reports back.
#[derive(Debug, Clone)]
pub struct HyperrepSummary {
    pub n_samples: usize,
    pub train_models: Vec<usize>,
    pub test_models: Vec<usize>,
    pub first_loss: f64,
    pub final_loss: f64,
    pub probes: Vec<ProbeReport>,
}

/// Runs the whole pipeline: dataset, split, training, embeddings, probes.
/// Writes `ae.ztc`, `embeddings.ztc`, `embeddings.json`, `probe.csv`,
/// `loss_log.csv`, and `stats.json` under `out`.
pub fn run_hyperrep(cfg: &HyperrepConfig, out: &Path) -> Result<HyperrepSummary> {
    let ds = load_ae_dataset(&cfg.zoo, cfg.train.dims.d_tok)?;
    let (train_models, test_models) = split_by_model(&ds, cfg.train.seed);
    let (params, stats, logs) = train_ae(&ds, &train_models, &cfg.train)?;
    fs::create_dir_all(out)?;
    save_ae(&out.join(AE_FILE), &params)?;

    let embeds = embed_dataset(&params, &ds)?;
    save_embeddings(&out.join(EMBEDDINGS_FILE), &out.join(EMBEDDINGS_META_FILE), &embeds)?;

    let mut log_csv = String::from(LOSS_LOG_HEADER);
    log_csv.push('\n');
    for l in &logs {
        log_csv.push_str(&format!(
            "{},{},{},{},{}\n",
            l.epoch,
            fmt_metric(l.total),
            fmt_metric(l.contrast),
            fmt_metric(l.recon_w),
            fmt_metric(l.recon_alpha),
        ));
    }
    fs::write(out.join(LOSS_LOG_FILE), log_csv)?;

    let stats_json = serde_json::json!({ "mean": stats.mean, "std": stats.std });
    let body = serde_json::to_vec_pretty(&stats_json)
        .map_err(|e| Error::Format(format!("layer statistics: {e}")))?;
    fs::write(out.join(STATS_FILE), body)?;

    let probes = probe_all(&embeds, &train_models, &test_models)?;
    let mut probe_csv = String::from(PROBE_HEADER);
    probe_csv.push('\n');
    for p in &probes {
        probe_csv.push_str(&format!(
            "{},{},{},{}\n",
            p.target,
            fmt_metric(p.r2),
            p.n_train,
            p.n_test
        ));
    }
    fs::write(out.join(PROBE_FILE), probe_csv)?;

    let first_loss = logs.first().map(|l| l.total).unwrap_or(f64::NAN);
    let final_loss = logs.last().map(|l| l.total).unwrap_or(f64::NAN);
    Ok(HyperrepSummary {
        n_samples: ds.samples.len(),
        train_models,
        test_models,
        first_loss,
        final_loss,
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::LayerSpec;
    use crate::graph::Activation;
    use crate::hyperrep::ae::load_ae;
    use crate::hyperrep::ae::tests::{micro_dims, micro_layout};
    use crate::hyperrep::tokens::ALPHA_BIAS;
    use crate::model::InitScheme;
    use crate::sparsify::{sparsify_zoo, MethodSpec, SparsifyConfig};
    use crate::zoo::{build_zoo, ArchChoice, DataConfig, GridSpec, ZooConfig};
    use std::sync::OnceLock;

    // ── Shared zoo fixture ───────────────────────────────────────────────
    //
    // One tiny dense zoo with variational-dropout and pruning twins, built
    // once for the whole test binary: four models, one dense epoch, four
    // dropout epochs, giving 4 x 5 = 20 states.

    struct Fixture {
        _tmp: tempfile::TempDir,
        vd: PathBuf,
        mp: PathBuf,
    }

    static FIXTURE: OnceLock<Fixture> = OnceLock::new();

    fn fixture() -> &'static Fixture {
        FIXTURE.get_or_init(|| {
            let tmp = tempfile::tempdir().unwrap();
            let src = tmp.path().join("zoo");
            let twins = tmp.path().join("twins");
            let cfg = ZooConfig {
                name: "fixture".into(),
                arch: ArchChoice::Inline(ArchConfig {
                    name: "micro".into(),
                    input: (1, 28, 28),
                    layers: vec![
                        LayerSpec::Conv { out_channels: 2, kernel: 5, stride: 3 },
                        LayerSpec::Fc { out_features: 10 },
                    ],
                }),
                data: DataConfig::Synthetic { n_train: 90, n_test: 30, seed: 42 },
                grid: GridSpec {
                    seeds: vec![1, 2, 3, 4],
                    activations: vec![Activation::Tanh],
                    optimizers: vec![OptimKind::Adam],
                    lrs: vec![3e-3],
                    weight_decays: vec![0.0],
                    dropouts: vec![0.0],
                    inits: vec![InitScheme::KaimingUniform],
                },
                epochs: 1,
                batch_size: 32,
            };
            build_zoo(&cfg, &src, 1).unwrap();
            sparsify_zoo(
                &SparsifyConfig {
                    zoo: src.clone(),
                    methods: vec![MethodSpec::Vd, MethodSpec::Mp { ratios: vec![0.5] }],
                    finetune_epochs: 1,
                    vd_epochs: 4,
                    batch_size: None,
                    mp_lr: 1e-3,
                    vd_lr: 1e-3,
                    kl_coeff: None,
                },
                &twins,
                1,
            )
            .unwrap();
            Fixture { _tmp: tmp, vd: twins.join("vd"), mp: twins.join("mp_50") }
        })
    }

    // ── Synthetic micro dataset (no zoo involved) ────────────────────────

    fn micro_dataset(n_models: usize, states_per_model: usize, seed: u64) -> AeDataset {
        let layout = micro_layout();
        let mut rng = rng::stream(seed, &[tag::AE, 99]);
        let mut samples = Vec::new();
        for model_id in 0..n_models {
            for epoch in 0..states_per_model {
                let w: Vec<f32> =
                    (0..12).map(|_| rng::uniform(&mut rng, -1.0, 1.0)).collect();
                let a: Vec<f32> =
                    (0..12).map(|_| rng::uniform(&mut rng, -6.0, 6.0)).collect();
                samples.push(AeSample {
                    model_id,
                    epoch,
                    w: Tensor::new(vec![3, 4], w).unwrap(),
                    alpha: Tensor::new(vec![3, 4], a).unwrap(),
                    props: SampleProps {
                        accuracy: 0.5,
                        sparsity: 0.1 * epoch as f64,
                        epoch: epoch as f64,
                        ggap: 0.0,
                    },
                });
            }
        }
        AeDataset {
            arch: ArchConfig {
                name: "none".into(),
                input: (1, 4, 4),
                layers: vec![LayerSpec::Fc { out_features: 2 }],
            },
            layout,
            samples,
        }
    }

    fn micro_cfg() -> AeTrainConfig {
        AeTrainConfig {
            dims: micro_dims(),
            beta: 0.2,
            temp: 0.5,
            epochs: 4,
            batch_pairs: 3,
            lr: 3e-3,
            seed: 5,
            ..AeTrainConfig::default()
        }
    }

    #[test]
    fn dataset_reads_a_vd_twin_and_rejects_a_pruned_one() {
        let fx = fixture();
        let ds = load_ae_dataset(&fx.vd, 64).unwrap();
        // 4 models x epochs 0..=4.
        assert_eq!(ds.samples.len(), 20);
        assert_eq!(ds.layout.n_params, 1342);
        assert_eq!(ds.layout.seq_len, 21);
        let ids: BTreeSet<usize> = ds.samples.iter().map(|s| s.model_id).collect();
        assert_eq!(ids, (0..4).collect());
        let epochs: BTreeSet<usize> = ds.samples.iter().map(|s| s.epoch).collect();
        assert_eq!(epochs, (0..=4).collect());
        // Bias positions of the alpha grid carry the sentinel: the first
        // conv layer has 50 weights, then 2 biases.
        let s = &ds.samples[0];
        assert_eq!(s.alpha.data()[50], ALPHA_BIAS);
        assert_eq!(s.alpha.data()[51], ALPHA_BIAS);
        assert_ne!(s.alpha.data()[49], ALPHA_BIAS);
        // Properties come from the checkpoint records.
        assert!(s.props.accuracy > 0.0 && s.props.accuracy <= 1.0);
        assert_eq!(s.props.epoch, s.epoch as f64);
        // Sparsity grows over dropout training somewhere in the population.
        assert!(ds.samples.iter().any(|s| s.props.sparsity > 0.0));

        let err = load_ae_dataset(&fx.mp, 64).unwrap_err();
        match err {
            Error::Config(msg) => {
                assert!(msg.contains("log_alpha"), "unhelpful message: {msg}");
                assert!(msg.contains("variational"), "unhelpful message: {msg}");
            }
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn split_is_deterministic_disjoint_and_four_to_one() {
        let ds = micro_dataset(10, 1, 1);
        let (a_train, a_test) = split_by_model(&ds, 7);
        let (b_train, b_test) = split_by_model(&ds, 7);
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
        assert_eq!(a_train.len(), 8);
        assert_eq!(a_test.len(), 2);
        let mut all: Vec<usize> = a_train.iter().chain(&a_test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        // A different seed gives a different split somewhere.
        let mut seen_other = false;
        for seed in 0..20 {
            if split_by_model(&ds, seed).0 != a_train {
                seen_other = true;
                break;
            }
        }
        assert!(seen_other);
        // One model: everything trains, nothing held out.
        let one = micro_dataset(1, 2, 2);
        let (t, h) = split_by_model(&one, 0);
        assert_eq!(t, vec![0]);
        assert!(h.is_empty());
    }

    #[test]
    fn micro_training_reduces_loss_deterministically() {
        let ds = micro_dataset(6, 2, 3);
        let all: Vec<usize> = (0..6).collect();
        let cfg = micro_cfg();
        let (params_a, stats_a, logs_a) = train_ae(&ds, &all, &cfg).unwrap();
        // Epoch 0 evaluates the fresh network, then one row per epoch.
        assert_eq!(logs_a.len(), cfg.epochs + 1);
        assert_eq!(logs_a[0].epoch, 0);
        assert!(logs_a.iter().all(|l| l.total.is_finite()));
        assert!(
            logs_a[cfg.epochs].total < logs_a[0].total,
            "loss did not decrease: {} -> {}",
            logs_a[0].total,
            logs_a[cfg.epochs].total
        );
        // Bit-exact reproducibility.
        let (params_b, stats_b, logs_b) = train_ae(&ds, &all, &cfg).unwrap();
        assert_eq!(logs_a, logs_b);
        assert_eq!(stats_a, stats_b);
        for ((na, ta), (nb, tb)) in params_a.tensors.iter().zip(&params_b.tensors) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "{na} differs between reruns");
        }
    }

    #[test]
    fn pure_contrastive_training_leaves_the_decoder_untouched() {
        let ds = micro_dataset(4, 2, 4);
        let all: Vec<usize> = (0..4).collect();
        let cfg = AeTrainConfig { beta: 1.0, epochs: 2, ..micro_cfg() };
        let (trained, _, _) = train_ae(&ds, &all, &cfg).unwrap();
        let init = AeParams::init(&cfg.dims, ds.layout.seq_len, cfg.seed).unwrap();
        let mut enc_moved = false;
        for ((name, after), (_, before)) in trained.tensors.iter().zip(&init.tensors) {
            if name.starts_with("dec.") {
                assert_eq!(
                    after.data(),
                    before.data(),
                    "{name} changed without a reconstruction gradient"
                );
            } else if after.data() != before.data() {
                enc_moved = true;
            }
        }
        assert!(enc_moved, "encoder side never moved");
    }

    #[test]
    fn gradients_match_finite_differences_on_the_micro_build() {
        let layout = micro_layout();
        let mut cfg = micro_cfg();
        cfg.beta = 0.4;
        let mut params = AeParams::init(&cfg.dims, layout.seq_len, 11).unwrap();
        let mut rng = rng::stream(17, &[tag::AE, 98]);
        // Check at a generic, well-conditioned point: the freshly drawn
        // embeddings have rows of deviation ~0.02, which puts the layer
        // norms in a regime of enormous curvature where central differences
        // cannot converge. Re-drawing every tensor at O(0.4) keeps the loss
        // smooth at the probe scale without weakening the check.
        for (_, t) in params.tensors.iter_mut() {
            for v in t.data_mut() {
                *v = rng::uniform(&mut rng, -0.4, 0.4);
            }
        }
        let views: Vec<(Tensor, Tensor)> = (0..4)
            .map(|_| {
                let w: Vec<f32> =
                    (0..12).map(|_| rng::uniform(&mut rng, -1.0, 1.0)).collect();
                let a: Vec<f32> =
                    (0..12).map(|_| rng::uniform(&mut rng, -6.0, 6.0)).collect();
                (Tensor::new(vec![3, 4], w).unwrap(), Tensor::new(vec![3, 4], a).unwrap())
            })
            .collect();
        let stats = layer_stats(
            views.iter().map(|(w, _)| &w.data()[..layout.n_params]),
            &layout,
        )
        .unwrap();
        let inv_var = inv_var_map(&stats, &layout).unwrap();
        let pad = layout.pad_mask();

        let eval = |params: &AeParams| -> f64 {
            let mut g = Graph::new();
            let staged = params.stage(&mut g, false);
            let nodes =
                batch_loss(&mut g, &staged, &views, &inv_var, &pad, None, None, layout.n_params, &cfg)
                    .unwrap();
            g.value(nodes.total).item().unwrap() as f64
        };

        let mut g = Graph::new();
        let staged = params.stage(&mut g, true);
        let nodes =
            batch_loss(&mut g, &staged, &views, &inv_var, &pad, None, None, layout.n_params, &cfg)
                .unwrap();
        let grads = g.backward(nodes.total).unwrap();
        let analytic: Vec<(String, Vec<f32>)> = params
            .tensors
            .iter()
            .zip(&staged.ids)
            .map(|((name, t), &id)| {
                let gvec = grads
                    .wrt(id)
                    .map(|gt| gt.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; t.numel()]);
                (name.clone(), gvec)
            })
            .collect();

        let h = 2e-3f32;
        for (k, (name, ga)) in analytic.iter().enumerate() {
            let n = ga.len();
            let mut fd = vec![0.0f64; n];
            for j in 0..n {
                let orig = params.tensors[k].1.data()[j];
                params.tensors[k].1.data_mut()[j] = orig + h;
                let up = eval(&params);
                params.tensors[k].1.data_mut()[j] = orig - h;
                let down = eval(&params);
                params.tensors[k].1.data_mut()[j] = orig;
                fd[j] = (up - down) / (2.0 * h as f64);
            }
            let mut diff2 = 0.0f64;
            let mut na2 = 0.0f64;
            let mut nf2 = 0.0f64;
            for j in 0..n {
                let a = ga[j] as f64;
                diff2 += (a - fd[j]) * (a - fd[j]);
                na2 += a * a;
                nf2 += fd[j] * fd[j];
            }
            let scale = na2.sqrt().max(nf2.sqrt());
            // Relative agreement at 1e-3, over a floor set by the f32
            // evaluation noise of the central differences themselves.
            let tol = 1e-3 * scale + 3e-4 * (n as f64).sqrt();
            assert!(
                diff2.sqrt() <= tol,
                "{name}: |analytic - fd| = {} over scale {} (tol {})",
                diff2.sqrt(),
                scale,
                tol
            );
        }
    }

    #[test]
    fn reconstruction_scoring_improves_with_training_and_is_deterministic() {
        let ds = micro_dataset(6, 2, 3);
        let all: Vec<usize> = (0..6).collect();
        let cfg = micro_cfg();
        let fresh = AeParams::init(&cfg.dims, ds.layout.seq_len, cfg.seed).unwrap();
        let r2_fresh = recon_r2(&fresh, &ds, &all).unwrap();
        let (trained, _, _) = train_ae(&ds, &all, &cfg).unwrap();
        let r2_trained = recon_r2(&trained, &ds, &all).unwrap();
        assert!(r2_fresh.is_finite() && r2_trained.is_finite());
        assert!(
            r2_trained > r2_fresh,
            "training did not help reconstruction: {r2_fresh} -> {r2_trained}"
        );
        assert_eq!(recon_r2(&trained, &ds, &all).unwrap(), r2_trained);
        // Scoring a subset of models is fine; scoring none is a config error.
        assert!(recon_r2(&trained, &ds, &[0]).unwrap().is_finite());
        assert!(matches!(recon_r2(&trained, &ds, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn training_rejects_degenerate_configs() {
        let ds = micro_dataset(2, 1, 6);
        let all = vec![0, 1];
        let wrong_width = AeTrainConfig {
            dims: AeDims { d_tok: 8, ..micro_dims() },
            ..micro_cfg()
        };
        assert!(matches!(train_ae(&ds, &all, &wrong_width), Err(Error::Config(_))));
        for bad in [
            AeTrainConfig { epochs: 0, ..micro_cfg() },
            AeTrainConfig { batch_pairs: 0, ..micro_cfg() },
            AeTrainConfig { rho: 1.5, ..micro_cfg() },
            AeTrainConfig { temp: -1.0, ..micro_cfg() },
            AeTrainConfig { beta: 1.5, ..micro_cfg() },
            AeTrainConfig { lr: 0.0, ..micro_cfg() },
        ] {
            assert!(matches!(train_ae(&ds, &all, &bad), Err(Error::Config(_))));
        }
        assert!(matches!(train_ae(&ds, &[], &micro_cfg()), Err(Error::Config(_))));
    }

    #[test]
    fn runaway_learning_rate_reports_divergence() {
        let ds = micro_dataset(6, 2, 7);
        let all: Vec<usize> = (0..6).collect();
        let cfg = AeTrainConfig { lr: 1e6, epochs: 3, ..micro_cfg() };
        match train_ae(&ds, &all, &cfg) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn full_run_writes_every_artifact() {
        let fx = fixture();
        let out = tempfile::tempdir().unwrap();
        let cfg = HyperrepConfig {
            zoo: fx.vd.clone(),
            train: AeTrainConfig {
                dims: AeDims {
                    d_tok: 64,
                    d_model: 16,
                    heads: 2,
                    d_ff: 24,
                    enc_blocks: 1,
                    dec_blocks: 1,
                    d_z: 8,
                },
                epochs: 2,
                batch_pairs: 4,
                lr: 1e-3,
                seed: 9,
                ..AeTrainConfig::default()
            },
        };
        let summary = run_hyperrep(&cfg, out.path()).unwrap();
        assert_eq!(summary.n_samples, 20);
        assert_eq!(summary.train_models.len(), 3);
        assert_eq!(summary.test_models.len(), 1);
        assert_eq!(summary.probes.len(), 4);
        assert!(summary.final_loss.is_finite());

        let ae = load_ae(&out.path().join(AE_FILE)).unwrap();
        assert_eq!(ae.dims, cfg.train.dims);
        assert_eq!(ae.seq_len, 21);

        let z = ztc::read_ztc(&out.path().join(EMBEDDINGS_FILE)).unwrap();
        assert_eq!(z.tensors.len(), 1);
        assert_eq!(z.tensors[0].0, "z");
        assert_eq!(z.tensors[0].1.dims(), [20, 8]);

        let sidecar: Vec<serde_json::Value> = serde_json::from_slice(
            &fs::read(out.path().join(EMBEDDINGS_META_FILE)).unwrap(),
        )
        .unwrap();
        assert_eq!(sidecar.len(), 20);
        assert!(sidecar[0].get("model_id").is_some());
        assert!(sidecar[0].get("sparsity").is_some());

        let probe_csv = fs::read_to_string(out.path().join(PROBE_FILE)).unwrap();
        let lines: Vec<&str> = probe_csv.trim_end().lines().collect();
        assert_eq!(lines[0], PROBE_HEADER);
        assert_eq!(lines.len(), 5);
        for (line, target) in lines[1..].iter().zip(["accuracy", "sparsity", "epoch", "ggap"]) {
            assert!(line.starts_with(&format!("{target},")), "{line}");
            assert_eq!(line.split(',').count(), 4);
        }

        let loss_csv = fs::read_to_string(out.path().join(LOSS_LOG_FILE)).unwrap();
        let lines: Vec<&str> = loss_csv.trim_end().lines().collect();
        assert_eq!(lines[0], LOSS_LOG_HEADER);
        assert_eq!(lines.len(), 1 + cfg.train.epochs + 1);

        let stats: serde_json::Value =
            serde_json::from_slice(&fs::read(out.path().join(STATS_FILE)).unwrap()).unwrap();
        assert_eq!(stats["mean"].as_array().unwrap().len(), 2);
        assert_eq!(stats["std"].as_array().unwrap().len(), 2);
    }
}
