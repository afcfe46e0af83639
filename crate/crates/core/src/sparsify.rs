//! Builds sparsified twins of an existing zoo: for every finished model,
//! load its final checkpoint, sparsify it with each configured method, and
//! write the resulting trajectories as sibling zoo directories that share
//! the source zoo's dataset and model ids.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mp;
use crate::train::EpochRecord;
use crate::vd;
use crate::zoo::{
    finish_zoo_dir, load_zoo, run_jobs, ModelOutcome, ModelStatus, ZooIndex, ZooSummary,
};
use crate::ztc;

/// File holding the per-layer keep masks of a pruned model, written once
/// next to its checkpoints.
pub const MASKS_FILE: &str = "masks.ztc";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodSpec {
    /// Magnitude pruning at each listed global ratio, then fine-tuning.
    Mp { ratios: Vec<f64> },
    /// Variational dropout training from the dense checkpoint.
    Vd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsifyConfig {
    /// Source zoo directory.
    pub zoo: PathBuf,
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_ft_epochs")]
    pub finetune_epochs: usize,
    #[serde(default = "default_vd_epochs")]
    pub vd_epochs: usize,
    /// Defaults to the source zoo's batch size.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_mp_lr")]
    pub mp_lr: f64,
    #[serde(default = "default_vd_lr")]
    pub vd_lr: f64,
    /// Coefficient on the summed KL penalty; defaults to 1 / train set size.
    #[serde(default)]
    pub kl_coeff: Option<f64>,
}

fn default_ft_epochs() -> usize {
    mp::DEFAULT_FT_EPOCHS
}
fn default_vd_epochs() -> usize {
    vd::DEFAULT_VD_EPOCHS
}
fn default_mp_lr() -> f64 {
    mp::DEFAULT_MP_LR
}
fn default_vd_lr() -> f64 {
    vd::DEFAULT_VD_LR
}

pub struct SparsifySummary {
    /// (method name, twin directory, summary) per built twin.
    pub twins: Vec<(String, PathBuf, ZooSummary)>,
}

/// Builds every configured twin under `out`. The source dataset is copied
/// once to `<out>/data` and shared by all twins via a relative data root, so
/// the output tree is self-contained and relocatable.
pub fn sparsify_zoo(cfg: &SparsifyConfig, out: &Path, workers: usize) -> Result<SparsifySummary> {
    if cfg.methods.is_empty() {
        return Err(Error::Config("no sparsification methods configured".into()));
    }
    let src_root = cfg.zoo.clone();
    let index = load_zoo(&src_root)?;
    let (train, test) = index.load_data(&src_root)?;
    let batch_size = cfg.batch_size.unwrap_or(index.batch_size);
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }

    let methods = expand_methods(&cfg.methods)?;
    std::fs::create_dir_all(out)?;
    copy_data_dir(&index, &src_root, out)?;

    let mut twins = Vec::with_capacity(methods.len());
    for method in &methods {
        let twin_dir = out.join(method.dir_name());
        let summary = build_twin(cfg, &index, &src_root, method, &twin_dir, &train, &test,
            batch_size, workers)?;
        log::info!(
            "twin {}: {} models, {} diverged, mean test acc {:.4}",
            method.dir_name(),
            summary.models,
            summary.diverged,
            summary.mean_test_acc
        );
        twins.push((method.dir_name(), twin_dir, summary));
    }
    Ok(SparsifySummary { twins })
}

/// One twin to build: either a single MP ratio or the VD stage.
#[derive(Debug, Clone, Copy)]
enum TwinMethod {
    Mp { ratio: f64 },
    Vd,
}

impl TwinMethod {
    fn dir_name(&self) -> String {
        match self {
            TwinMethod::Mp { ratio } => mp::method_name(*ratio),
            TwinMethod::Vd => "vd".into(),
        }
    }
}

fn expand_methods(specs: &[MethodSpec]) -> Result<Vec<TwinMethod>> {
    let mut out = Vec::new();
    let mut names = std::collections::HashSet::new();
    for spec in specs {
        match spec {
            MethodSpec::Mp { ratios } => {
                if ratios.is_empty() {
                    return Err(Error::Config("mp method lists no ratios".into()));
                }
                for r in ratios {
                    if !(0.0..1.0).contains(r) {
                        return Err(Error::Config(format!("prune ratio {r} outside [0, 1)")));
                    }
                    out.push(TwinMethod::Mp { ratio: *r });
                }
            }
            MethodSpec::Vd => out.push(TwinMethod::Vd),
        }
    }
    for m in &out {
        if !names.insert(m.dir_name()) {
            return Err(Error::Config(format!("duplicate twin {}", m.dir_name())));
        }
    }
    Ok(out)
}

/// Copies the source zoo's dataset files into `<out>/data` (no-op when the
/// source already lives there).
fn copy_data_dir(index: &ZooIndex, src_root: &Path, out: &Path) -> Result<()> {
    let src_base = if index.data_root.is_absolute() {
        index.data_root.clone()
    } else {
        src_root.join(&index.data_root)
    };
    let dst = out.join("data");
    std::fs::create_dir_all(&dst)?;
    for rel in [
        &index.data.train_images,
        &index.data.train_labels,
        &index.data.test_images,
        &index.data.test_labels,
    ] {
        let from = src_base.join(rel);
        let to = dst.join(rel);
        let same = match (from.canonicalize(), to.canonicalize()) {
            (Ok(a), Ok(b)) => a == b,
            _ => false,
        };
        if !same {
            std::fs::copy(&from, &to)?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build_twin(
    cfg: &SparsifyConfig,
    index: &ZooIndex,
    src_root: &Path,
    method: &TwinMethod,
    twin_dir: &Path,
    train: &Dataset,
    test: &Dataset,
    batch_size: usize,
    workers: usize,
) -> Result<ZooSummary> {
    std::fs::create_dir_all(twin_dir)?;
    let outcomes = run_jobs(index.models.len(), workers, |id| {
        sparsify_model(cfg, index, src_root, method, twin_dir, train, test, batch_size, id)
    })?;
    let epochs = match method {
        TwinMethod::Mp { .. } => cfg.finetune_epochs,
        TwinMethod::Vd => cfg.vd_epochs,
    };
    finish_zoo_dir(
        twin_dir,
        &format!("{}_{}", index.name, method.dir_name()),
        &method.dir_name(),
        &index.arch,
        epochs,
        batch_size,
        index.num_classes,
        PathBuf::from("../data"),
        Some(src_root.to_path_buf()),
        &outcomes,
    )
}

#[allow(clippy::too_many_arguments)]
fn sparsify_model(
    cfg: &SparsifyConfig,
    index: &ZooIndex,
    src_root: &Path,
    method: &TwinMethod,
    twin_dir: &Path,
    train: &Dataset,
    test: &Dataset,
    batch_size: usize,
    id: usize,
) -> Result<ModelOutcome> {
    let entry = &index.models[id];
    // A model that never finished densely has nothing to sparsify; carry its
    // status through so twin ids stay aligned with the source zoo.
    if let ModelStatus::Diverged { epoch } = entry.status {
        return Ok(ModelOutcome {
            id,
            factors: entry.factors.clone(),
            status: ModelStatus::Diverged { epoch },
            records: Vec::new(),
        });
    }
    let ckpt_path = index.checkpoint_path(src_root, id, entry.epochs_written);
    let ckpt = ztc::load_checkpoint(&ckpt_path)?;
    let dir = twin_dir.join("models").join(format!("model_{id:04}"));
    std::fs::create_dir_all(&dir)?;
    let method_name = method.dir_name();

    let mut records: Vec<EpochRecord> = Vec::new();
    let run = match method {
        TwinMethod::Mp { ratio } => {
            let (mut model, masks) = mp::mp_prune(&ckpt.model, *ratio)?;
            let named: Vec<(String, &_)> = model
                .layers
                .iter()
                .zip(&masks)
                .map(|(lp, m)| (format!("{}.mask", lp.name), m))
                .collect();
            let refs: Vec<(&str, &_)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
            ztc::write_ztc(
                &dir.join(MASKS_FILE),
                &serde_json::json!({ "kind": "masks", "method": method_name }),
                &refs,
            )?;
            mp::mp_finetune(
                &mut model,
                &masks,
                train,
                test,
                cfg.finetune_epochs,
                batch_size,
                cfg.mp_lr,
                *ratio,
                id,
                |m, r| {
                    ztc::save_checkpoint(
                        &dir.join(format!("epoch_{:03}.ztc", r.epoch)),
                        m,
                        r,
                        &method_name,
                        &[],
                    )?;
                    records.push(r.clone());
                    Ok(())
                },
            )
            .map(|_| model.factors.clone())
        }
        TwinMethod::Vd => {
            let mut vdm = vd::vd_wrap(&ckpt.model);
            vd::vd_train(
                &mut vdm,
                train,
                test,
                cfg.vd_epochs,
                batch_size,
                cfg.vd_lr,
                cfg.kl_coeff,
                id,
                |v, r| {
                    let extras = v.extras();
                    let refs: Vec<(&str, &_)> =
                        extras.iter().map(|(n, t)| (n.as_str(), t)).collect();
                    ztc::save_checkpoint(
                        &dir.join(format!("epoch_{:03}.ztc", r.epoch)),
                        &v.base,
                        r,
                        &method_name,
                        &refs,
                    )?;
                    records.push(r.clone());
                    Ok(())
                },
            )
            .map(|_| vdm.base.factors.clone())
        }
    };
    let (factors, status) = match run {
        Ok(factors) => (factors, ModelStatus::Ok),
        Err(Error::Divergence { epoch, .. }) => {
            log::warn!("model {id} diverged at epoch {epoch} during {method_name}");
            (entry.factors.clone(), ModelStatus::Diverged { epoch })
        }
        Err(e) => return Err(e),
    };
    Ok(ModelOutcome { id, factors, status, records })
}

/// Reads the keep masks written next to a pruned model's checkpoints.
pub fn load_masks(model_dir: &Path) -> Result<Vec<(String, crate::tensor::Tensor)>> {
    let file = ztc::read_ztc(&model_dir.join(MASKS_FILE))?;
    Ok(file.tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchConfig, LayerSpec};
    use crate::graph::Activation;
    use crate::model::InitScheme;
    use crate::optim::OptimKind;
    use crate::vd::VDModelState;
    use crate::zoo::{self, build_zoo, ArchChoice, DataConfig, GridSpec, ZooConfig};

    fn tiny_source(dir: &Path) -> ZooIndex {
        let cfg = ZooConfig {
            name: "tiny".into(),
            arch: ArchChoice::Inline(ArchConfig {
                name: "micro".into(),
                input: (1, 28, 28),
                layers: vec![
                    LayerSpec::Conv { out_channels: 2, kernel: 5, stride: 3 },
                    LayerSpec::Fc { out_features: 10 },
                ],
            }),
            data: DataConfig::Synthetic { n_train: 120, n_test: 40, seed: 42 },
            grid: GridSpec {
                seeds: vec![1, 2],
                activations: vec![Activation::Tanh],
                optimizers: vec![OptimKind::Adam],
                lrs: vec![3e-3],
                weight_decays: vec![0.0],
                dropouts: vec![0.0],
                inits: vec![InitScheme::KaimingUniform],
            },
            epochs: 2,
            batch_size: 32,
        };
        build_zoo(&cfg, dir, 1).unwrap();
        load_zoo(dir).unwrap()
    }

    fn twin_cfg(zoo: &Path) -> SparsifyConfig {
        SparsifyConfig {
            zoo: zoo.to_path_buf(),
            methods: vec![MethodSpec::Mp { ratios: vec![0.5] }, MethodSpec::Vd],
            finetune_epochs: 2,
            vd_epochs: 2,
            batch_size: None,
            mp_lr: 1e-3,
            vd_lr: 1e-3,
            kl_coeff: None,
        }
    }

    #[test]
    fn builds_aligned_twins_with_shared_data() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("zoo");
        let out = tmp.path().join("twins");
        let index = tiny_source(&src);
        let summary = sparsify_zoo(&twin_cfg(&src), &out, 1).unwrap();
        assert_eq!(summary.twins.len(), 2);

        let mp_index = load_zoo(&out.join("mp_50")).unwrap();
        assert_eq!(mp_index.method, "mp_50");
        assert_eq!(mp_index.models.len(), index.models.len());
        assert_eq!(mp_index.epochs, 2);
        assert_eq!(mp_index.source_zoo.as_deref(), Some(src.as_path()));
        // The twin resolves its dataset through the shared copy.
        let (train, _) = mp_index.load_data(&out.join("mp_50")).unwrap();
        assert_eq!(train.labels.len(), 120);

        // Pruned checkpoints keep the configured sparsity at every epoch.
        let total: usize = {
            let ckpt =
                ztc::load_checkpoint(&mp_index.checkpoint_path(&out.join("mp_50"), 0, 2)).unwrap();
            assert_eq!(ckpt.method, "mp_50");
            assert_eq!(ckpt.model.factors.lr, 1e-3);
            ckpt.model.layers.iter().map(|l| l.weight.numel()).sum()
        };
        for epoch in 0..=2 {
            let ckpt =
                ztc::load_checkpoint(&mp_index.checkpoint_path(&out.join("mp_50"), 0, epoch))
                    .unwrap();
            let s = ckpt.model.weight_sparsity();
            assert!((s - 0.5).abs() <= 1.0 / total as f64 + 1e-12, "epoch {epoch}: {s}");
        }
        let masks = load_masks(&out.join("mp_50").join("models").join("model_0000")).unwrap();
        assert_eq!(masks.len(), 2);
        assert!(masks[0].0.ends_with(".mask"));

        // VD checkpoints carry the log-variance extras and rebuild.
        let vd_index = load_zoo(&out.join("vd")).unwrap();
        let ckpt = ztc::load_checkpoint(&vd_index.checkpoint_path(&out.join("vd"), 1, 2)).unwrap();
        assert_eq!(ckpt.extras.len(), 4);
        let vdm = VDModelState::from_parts(ckpt.model, &ckpt.extras).unwrap();
        assert_eq!(vdm.log_sigma2.len(), 2);
        // Metrics file exists with the standard header.
        let csv = std::fs::read_to_string(out.join("vd").join(zoo::METRICS_FILE)).unwrap();
        assert!(csv.starts_with(zoo::METRICS_HEADER));
        assert!(csv.contains("tiny_vd"));
    }

    #[test]
    fn worker_count_does_not_change_twin_bytes() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("zoo");
        tiny_source(&src);
        let out1 = tmp.path().join("t1");
        let out2 = tmp.path().join("t2");
        sparsify_zoo(&twin_cfg(&src), &out1, 1).unwrap();
        sparsify_zoo(&twin_cfg(&src), &out2, 2).unwrap();
        for twin in ["mp_50", "vd"] {
            for entry in walkdir(&out1.join(twin)) {
                let rel = entry.strip_prefix(&out1).unwrap();
                let a = std::fs::read(&entry).unwrap();
                let b = std::fs::read(out2.join(rel)).unwrap();
                // index.json embeds the absolute source path, which is equal
                // here anyway; everything must match bit for bit.
                assert_eq!(a, b, "{} differs across worker counts", rel.display());
            }
        }
    }

    fn walkdir(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p);
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn rejects_bad_configs() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("zoo");
        tiny_source(&src);
        let mut cfg = twin_cfg(&src);
        cfg.methods = vec![];
        assert!(sparsify_zoo(&cfg, &tmp.path().join("a"), 1).is_err());
        let mut cfg = twin_cfg(&src);
        cfg.methods = vec![MethodSpec::Mp { ratios: vec![1.0] }];
        assert!(sparsify_zoo(&cfg, &tmp.path().join("b"), 1).is_err());
        let mut cfg = twin_cfg(&src);
        cfg.methods =
            vec![MethodSpec::Mp { ratios: vec![0.5] }, MethodSpec::Mp { ratios: vec![0.5] }];
        assert!(sparsify_zoo(&cfg, &tmp.path().join("c"), 1).is_err());
    }
}
