//! Zoo building: factor-grid expansion, a deterministic parallel job runner,
//! the on-disk zoo layout, and the population metrics table.
//!
//! A zoo directory looks like:
//!
//! ```text
//! <out>/
//!   index.json                  population metadata and per-model status
//!   data/                       materialized IDX files (original zoos only)
//!   models/model_0007/epoch_003.ztc
//!   metrics.csv                 zoo,model_id,method,epoch,sparsity,train_acc,test_acc,ggap
//! ```
//!
//! Twin zoos produced by sparsification share the layout but reference the
//! source zoo's data directory instead of carrying their own.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::arch::ArchConfig;
use crate::data::{self, Dataset, IdxPaths};
use crate::error::{Error, Result};
use crate::graph::Activation;
use crate::model::{Factors, InitScheme, ModelState};
use crate::optim::OptimKind;
use crate::rng::tag;
use crate::synth::{self, SynthSpec};
use crate::train::{train_model, EpochRecord};
use crate::ztc;

pub const INDEX_FILE: &str = "index.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "zoo,model_id,method,epoch,sparsity,train_acc,test_acc,ggap";

/// Architecture reference in a config: a preset name or an inline definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchChoice {
    Preset(String),
    Inline(ArchConfig),
}

impl ArchChoice {
    pub fn resolve(&self) -> Result<ArchConfig> {
        match self {
            ArchChoice::Preset(name) => ArchConfig::preset(name)
                .ok_or_else(|| Error::Config(format!("unknown architecture preset '{name}'"))),
            ArchChoice::Inline(cfg) => Ok(cfg.clone()),
        }
    }
}

/// Where a zoo's dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Deterministic built-in digit corpus.
    Synthetic { n_train: usize, n_test: usize, seed: u64 },
    /// Existing IDX files, optionally truncated to a leading subset.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        limit_train: Option<usize>,
        #[serde(default)]
        limit_test: Option<usize>,
        #[serde(default = "default_classes")]
        num_classes: usize,
    },
}

fn default_classes() -> usize {
    10
}

/// The factor grid. Expansion enumerates the cartesian product in nested
/// order: activations, optimizers, lrs, weight_decays, dropouts, inits, and
/// seeds innermost, so model ids are stable and seed-siblings are adjacent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub seeds: Vec<u64>,
    #[serde(default = "default_activations")]
    pub activations: Vec<Activation>,
    #[serde(default = "default_optimizers")]
    pub optimizers: Vec<OptimKind>,
    #[serde(default = "default_lrs")]
    pub lrs: Vec<f64>,
    #[serde(default = "default_wds")]
    pub weight_decays: Vec<f64>,
    #[serde(default = "default_dropouts")]
    pub dropouts: Vec<f32>,
    #[serde(default = "default_inits")]
    pub inits: Vec<InitScheme>,
}

fn default_activations() -> Vec<Activation> {
    vec![Activation::Tanh]
}
fn default_optimizers() -> Vec<OptimKind> {
    vec![OptimKind::Adam]
}
fn default_lrs() -> Vec<f64> {
    vec![3e-4]
}
fn default_wds() -> Vec<f64> {
    vec![0.0]
}
fn default_dropouts() -> Vec<f32> {
    vec![0.0]
}
fn default_inits() -> Vec<InitScheme> {
    vec![InitScheme::KaimingUniform]
}

impl GridSpec {
    pub fn expand(&self) -> Result<Vec<Factors>> {
        if self.seeds.is_empty()
            || self.activations.is_empty()
            || self.optimizers.is_empty()
            || self.lrs.is_empty()
            || self.weight_decays.is_empty()
            || self.dropouts.is_empty()
            || self.inits.is_empty()
        {
            return Err(Error::Config("every grid axis needs at least one value".into()));
        }
        let mut out = Vec::new();
        for &activation in &self.activations {
            for &optimizer in &self.optimizers {
                for &lr in &self.lrs {
                    for &weight_decay in &self.weight_decays {
                        for &dropout in &self.dropouts {
                            for &init in &self.inits {
                                for &seed in &self.seeds {
                                    out.push(Factors {
                                        seed,
                                        activation,
                                        optimizer,
                                        lr,
                                        weight_decay,
                                        dropout,
                                        init,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Config for building an original (dense) zoo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZooConfig {
    pub name: String,
    pub arch: ArchChoice,
    pub data: DataConfig,
    pub grid: GridSpec,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ModelStatus {
    Ok,
    Diverged { epoch: usize },
}

// No deny_unknown_fields here: it cannot coexist with the flattened status.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelEntry {
    pub id: usize,
    pub factors: Factors,
    #[serde(flatten)]
    pub status: ModelStatus,
    /// Directory of this model's checkpoints, relative to the zoo root.
    pub dir: String,
    /// Epoch checkpoints present: 0..=epochs_written.
    pub epochs_written: usize,
}

/// Zoo metadata persisted as `index.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZooIndex {
    pub format_version: u32,
    pub name: String,
    /// "dense" for original zoos; "mp_<ratio>" or "vd" for twins.
    pub method: String,
    pub arch: ArchConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub num_classes: usize,
    /// IDX file paths relative to `data_root`.
    pub data: IdxRelPaths,
    /// Directory holding the IDX files: this zoo for originals, the source
    /// zoo for twins. Absolute or relative to the zoo root.
    pub data_root: PathBuf,
    /// For twins: path of the zoo this one was derived from.
    #[serde(default)]
    pub source_zoo: Option<PathBuf>,
    pub models: Vec<ModelEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxRelPaths {
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
}

impl ZooIndex {
    pub fn model_dir(&self, root: &Path, id: usize) -> PathBuf {
        root.join(&self.models[id].dir)
    }

    pub fn checkpoint_path(&self, root: &Path, id: usize, epoch: usize) -> PathBuf {
        self.model_dir(root, id).join(format!("epoch_{epoch:03}.ztc"))
    }

    /// Loads this zoo's datasets (train, test).
    pub fn load_data(&self, root: &Path) -> Result<(Dataset, Dataset)> {
        let base = if self.data_root.is_absolute() {
            self.data_root.clone()
        } else {
            root.join(&self.data_root)
        };
        let paths = IdxPaths {
            train_images: base.join(&self.data.train_images),
            train_labels: base.join(&self.data.train_labels),
            test_images: base.join(&self.data.test_images),
            test_labels: base.join(&self.data.test_labels),
        };
        data::load_idx_pair(&paths, self.num_classes, None, None)
    }
}

pub fn load_zoo(dir: &Path) -> Result<ZooIndex> {
    let path = dir.join(INDEX_FILE);
    let bytes = std::fs::read(&path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn save_zoo_index(dir: &Path, index: &ZooIndex) -> Result<()> {
    let json = serde_json::to_vec_pretty(index)
        .map_err(|e| Error::Format(format!("zoo index: {e}")))?;
    std::fs::write(dir.join(INDEX_FILE), json)?;
    Ok(())
}

/// One metrics row per model-epoch, written in model-id order.
pub fn write_metrics_csv(
    dir: &Path,
    zoo_name: &str,
    method: &str,
    per_model: &[(usize, &[EpochRecord])],
) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for (id, records) in per_model {
        for r in *records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                zoo_name,
                id,
                method,
                r.epoch,
                fmt_metric(r.sparsity),
                fmt_metric(r.train_acc),
                fmt_metric(r.test_acc),
                fmt_metric(r.ggap),
            ));
        }
    }
    std::fs::write(dir.join(METRICS_FILE), out)?;
    Ok(())
}

/// Metric formatting for CSV output: six significant digits, plain notation.
pub fn fmt_metric(v: f64) -> String {
    if !v.is_finite() {
        return "nan".into();
    }
    let s = format!("{v:.6}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Runs `n_jobs` closures over a fixed-size worker pool. Results come back
/// in job order and do not depend on `workers`; the first failing job (by
/// index) aborts the run after in-flight jobs finish.
pub fn run_jobs<T, F>(n_jobs: usize, workers: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if workers == 0 {
        return Err(Error::Config("workers must be positive".into()));
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<T>>>> =
        Mutex::new((0..n_jobs).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.min(n_jobs.max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n_jobs {
                    break;
                }
                let r = job(i);
                results.lock().expect("job results poisoned")[i] = Some(r);
            });
        }
    });
    let slots = results.into_inner().expect("job results poisoned");
    let mut out = Vec::with_capacity(n_jobs);
    for (i, slot) in slots.into_iter().enumerate() {
        match slot {
            Some(Ok(v)) => out.push(v),
            Some(Err(e)) => return Err(e),
            None => return Err(Error::Compute(format!("job {i} never ran"))),
        }
    }
    Ok(out)
}

/// Outcome of one model's training inside a zoo build.
pub struct ModelOutcome {
    pub id: usize,
    pub factors: Factors,
    pub status: ModelStatus,
    pub records: Vec<EpochRecord>,
}

pub struct ZooSummary {
    pub models: usize,
    pub diverged: usize,
    /// Mean final-epoch test accuracy over models that finished.
    pub mean_test_acc: f64,
}

const REL_DATA: [(&str, &str); 4] = [
    ("train_images", "train-images-idx3-ubyte"),
    ("train_labels", "train-labels-idx1-ubyte"),
    ("test_images", "t10k-images-idx3-ubyte"),
    ("test_labels", "t10k-labels-idx1-ubyte"),
];

fn rel_paths() -> IdxRelPaths {
    IdxRelPaths {
        train_images: REL_DATA[0].1.into(),
        train_labels: REL_DATA[1].1.into(),
        test_images: REL_DATA[2].1.into(),
        test_labels: REL_DATA[3].1.into(),
    }
}

/// Materializes the configured dataset under `<out>/data` and loads it.
fn materialize_data(cfg: &DataConfig, out: &Path) -> Result<(Dataset, Dataset, usize)> {
    let data_dir = out.join("data");
    std::fs::create_dir_all(&data_dir)?;
    match cfg {
        DataConfig::Synthetic { n_train, n_test, seed } => {
            let spec = SynthSpec { n_train: *n_train, n_test: *n_test, seed: *seed };
            let paths = synth::write_synthetic(&data_dir, &spec)?;
            let (train, test) = data::load_idx_pair(&paths, 10, None, None)?;
            Ok((train, test, 10))
        }
        DataConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            limit_train,
            limit_test,
            num_classes,
        } => {
            // Truncate-while-copying so the zoo carries exactly the subset
            // it was trained on.
            let src = IdxPaths {
                train_images: train_images.clone(),
                train_labels: train_labels.clone(),
                test_images: test_images.clone(),
                test_labels: test_labels.clone(),
            };
            let (train, test) = data::load_idx_pair(&src, *num_classes, *limit_train, *limit_test)?;
            copy_subset(&src, &data_dir, *limit_train, *limit_test)?;
            Ok((train, test, *num_classes))
        }
    }
}

/// Copies IDX files into the zoo, truncated to the configured subset.
fn copy_subset(
    src: &IdxPaths,
    data_dir: &Path,
    limit_train: Option<usize>,
    limit_test: Option<usize>,
) -> Result<()> {
    let jobs = [
        (&src.train_images, REL_DATA[0].1, limit_train, true),
        (&src.train_labels, REL_DATA[1].1, limit_train, false),
        (&src.test_images, REL_DATA[2].1, limit_test, true),
        (&src.test_labels, REL_DATA[3].1, limit_test, false),
    ];
    for (from, name, limit, is_images) in jobs {
        let to = data_dir.join(name);
        match limit {
            None => {
                std::fs::copy(from, &to)?;
            }
            Some(n) => {
                if is_images {
                    let (raw, count, rows, cols) = data::read_idx_images(from)?;
                    let keep = n.min(count);
                    data::write_idx_images(&to, &raw[..keep * rows * cols], keep, rows, cols)?;
                } else {
                    let labels = data::read_idx_labels(from)?;
                    let keep = n.min(labels.len());
                    data::write_idx_labels(&to, &labels[..keep])?;
                }
            }
        }
    }
    Ok(())
}

/// Trains a full zoo into `out`. Returns a summary; per-model divergence is
/// recorded, not fatal.
pub fn build_zoo(cfg: &ZooConfig, out: &Path, workers: usize) -> Result<ZooSummary> {
    let arch = cfg.arch.resolve()?;
    arch.param_count()?; // validate shapes before any expensive work
    let factors = cfg.grid.expand()?;
    std::fs::create_dir_all(out)?;
    let (train, test, num_classes) = materialize_data(&cfg.data, out)?;
    if num_classes != arch.num_classes()? {
        return Err(Error::Config(format!(
            "architecture outputs {} classes, dataset has {num_classes}",
            arch.num_classes()?
        )));
    }

    let outcomes = run_jobs(factors.len(), workers, |id| {
        train_zoo_model(&arch, &factors[id], &train, &test, cfg, out, id)
    })?;

    finish_zoo_dir(
        out,
        &cfg.name,
        "dense",
        &arch,
        cfg.epochs,
        cfg.batch_size,
        num_classes,
        PathBuf::from("data"),
        None,
        &outcomes,
    )
}

fn train_zoo_model(
    arch: &ArchConfig,
    factors: &Factors,
    train: &Dataset,
    test: &Dataset,
    cfg: &ZooConfig,
    out: &Path,
    id: usize,
) -> Result<ModelOutcome> {
    let dir = out.join("models").join(format!("model_{id:04}"));
    std::fs::create_dir_all(&dir)?;
    let mut model = ModelState::init(arch, factors)?;
    let mut records = Vec::with_capacity(cfg.epochs + 1);
    let run = train_model(
        &mut model,
        train,
        test,
        cfg.epochs,
        cfg.batch_size,
        None,
        &[tag::TRAIN],
        id,
        |m, r| {
            ztc::save_checkpoint(&dir.join(format!("epoch_{:03}.ztc", r.epoch)), m, r, "dense", &[])?;
            records.push(r.clone());
            Ok(())
        },
    );
    let status = match run {
        Ok(_) => ModelStatus::Ok,
        Err(Error::Divergence { epoch, .. }) => {
            log::warn!("model {id} diverged at epoch {epoch}");
            ModelStatus::Diverged { epoch }
        }
        Err(e) => return Err(e),
    };
    Ok(ModelOutcome { id, factors: factors.clone(), status, records })
}

/// Writes index.json and metrics.csv for a finished build (original or twin)
/// and summarizes it.
#[allow(clippy::too_many_arguments)]
pub fn finish_zoo_dir(
    out: &Path,
    name: &str,
    method: &str,
    arch: &ArchConfig,
    epochs: usize,
    batch_size: usize,
    num_classes: usize,
    data_root: PathBuf,
    source_zoo: Option<PathBuf>,
    outcomes: &[ModelOutcome],
) -> Result<ZooSummary> {
    let models = outcomes
        .iter()
        .map(|o| ModelEntry {
            id: o.id,
            factors: o.factors.clone(),
            status: o.status.clone(),
            dir: format!("models/model_{:04}", o.id),
            epochs_written: o.records.len().saturating_sub(1),
        })
        .collect();
    let index = ZooIndex {
        format_version: ztc::FORMAT_VERSION,
        name: name.to_string(),
        method: method.to_string(),
        arch: arch.clone(),
        epochs,
        batch_size,
        num_classes,
        data: rel_paths(),
        data_root,
        source_zoo,
        models,
    };
    save_zoo_index(out, &index)?;
    let rows: Vec<(usize, &[EpochRecord])> =
        outcomes.iter().map(|o| (o.id, o.records.as_slice())).collect();
    write_metrics_csv(out, name, method, &rows)?;

    let finished: Vec<&ModelOutcome> = outcomes
        .iter()
        .filter(|o| matches!(o.status, ModelStatus::Ok))
        .collect();
    let mean_test_acc = if finished.is_empty() {
        f64::NAN
    } else {
        finished.iter().map(|o| o.records.last().expect("records").test_acc).sum::<f64>()
            / finished.len() as f64
    };
    Ok(ZooSummary {
        models: outcomes.len(),
        diverged: outcomes.len() - finished.len(),
        mean_test_acc,
    })
}
