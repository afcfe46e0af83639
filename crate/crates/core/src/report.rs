//! Zoo-versus-twin analysis: pairs models by id, computes agreement and
//! accuracy correlations, aggregates per-layer sparsity, and writes the
//! report CSVs.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    self, LayerEpochStats, LayerSparsitySample, PredictionVector,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::vd::LOG_ALPHA_PRUNE;
use crate::zoo::{self, fmt_metric, load_zoo, ModelStatus, ZooIndex};
use crate::ztc;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeConfig {
    /// Original zoo directory.
    pub zoo: PathBuf,
    /// Twin zoo directories to compare against the original. A twin may be
    /// the original itself (self-agreement).
    pub twins: Vec<PathBuf>,
    /// Epochs for the per-layer sparsity tables. Defaults per twin: the
    /// milestone epochs 0,5,10,15,20,25 for variational twins, the final
    /// epoch otherwise.
    #[serde(default)]
    pub layer_epochs: Option<Vec<usize>>,
}

/// Everything computed for one twin.
#[derive(Debug)]
pub struct TwinAnalysis {
    /// Report tag: the twin directory's basename.
    pub tag: String,
    pub method: String,
    /// (model id, agreement with the original model of the same id).
    pub agreement: Vec<(usize, f64)>,
    pub agreement_mean: f64,
    pub agreement_std: f64,
    /// Final test accuracies over paired finished models.
    pub original_acc: Vec<f64>,
    pub twin_acc: Vec<f64>,
    /// NaN when undefined (fewer than two pairs or zero variance).
    pub pearson_r: f64,
    pub kendall_tau: f64,
    pub layer_stats: Vec<LayerEpochStats>,
    /// Layer-size effect at the last tabulated epoch; NaN when undefined.
    pub layer_size_tau: f64,
}

#[derive(Debug)]
pub struct AnalyzeSummary {
    pub twins: Vec<TwinAnalysis>,
}

/// Runs the full analysis and writes the report files into `out`:
/// agreement.csv, correlations.csv, per_layer_<tag>.csv and
/// layer_scatter_<tag>.tsv per twin, trajectories.csv, and summary.csv.
pub fn analyze_zoos(cfg: &AnalyzeConfig, out: &Path) -> Result<AnalyzeSummary> {
    let orig_index = load_zoo(&cfg.zoo)?;
    let (_, test) = orig_index.load_data(&cfg.zoo)?;
    if cfg.twins.is_empty() {
        return Err(Error::Config("no twin zoos to analyze".into()));
    }
    std::fs::create_dir_all(out)?;

    // Original predictions and final accuracies, computed once.
    let mut orig_preds: HashMap<usize, PredictionVector> = HashMap::new();
    let mut orig_accs: HashMap<usize, f64> = HashMap::new();
    for entry in &orig_index.models {
        if !matches!(entry.status, ModelStatus::Ok) {
            continue;
        }
        let ckpt =
            ztc::load_checkpoint(&orig_index.checkpoint_path(&cfg.zoo, entry.id, entry.epochs_written))?;
        orig_preds.insert(entry.id, analysis::predict(&ckpt.model, &test, entry.id, "test")?);
        orig_accs.insert(entry.id, ckpt.record.test_acc);
    }

    let mut twins = Vec::with_capacity(cfg.twins.len());
    for twin_dir in &cfg.twins {
        twins.push(analyze_twin(
            cfg,
            &orig_index,
            &orig_preds,
            &orig_accs,
            &test,
            twin_dir,
        )?);
    }

    emit_agreement_csv(out, &twins)?;
    emit_correlations_csv(out, &twins)?;
    for t in &twins {
        emit_per_layer_csv(out, t)?;
        emit_scatter_tsv(out, t)?;
    }
    emit_trajectories_csv(out, &cfg.zoo, &cfg.twins)?;
    emit_summary_csv(out, &twins)?;
    Ok(AnalyzeSummary { twins })
}

fn analyze_twin(
    cfg: &AnalyzeConfig,
    orig_index: &ZooIndex,
    orig_preds: &HashMap<usize, PredictionVector>,
    orig_accs: &HashMap<usize, f64>,
    test: &Dataset,
    twin_dir: &Path,
) -> Result<TwinAnalysis> {
    let twin_index = load_zoo(twin_dir)?;
    if twin_index.arch != orig_index.arch {
        return Err(Error::Config(format!(
            "twin {} was built for architecture {}, original uses {}",
            twin_dir.display(),
            twin_index.arch.name,
            orig_index.arch.name
        )));
    }
    let orig_ids: Vec<usize> = orig_index.models.iter().map(|m| m.id).collect();
    let twin_ids: Vec<usize> = twin_index.models.iter().map(|m| m.id).collect();
    if orig_ids != twin_ids {
        let only_orig: Vec<usize> =
            orig_ids.iter().filter(|i| !twin_ids.contains(i)).copied().collect();
        let only_twin: Vec<usize> =
            twin_ids.iter().filter(|i| !orig_ids.contains(i)).copied().collect();
        return Err(Error::Config(format!(
            "model ids do not pair: only in original {only_orig:?}, only in twin {only_twin:?}"
        )));
    }

    let tag = twin_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| twin_index.method.clone());

    let mut agreement = Vec::new();
    let mut original_acc = Vec::new();
    let mut twin_acc = Vec::new();
    for entry in &twin_index.models {
        if !matches!(entry.status, ModelStatus::Ok) {
            continue;
        }
        let Some(opred) = orig_preds.get(&entry.id) else { continue };
        let ckpt = ztc::load_checkpoint(&twin_index.checkpoint_path(
            twin_dir,
            entry.id,
            entry.epochs_written,
        ))?;
        let tpred = analysis::predict(&ckpt.model, test, entry.id, "test")?;
        agreement.push((entry.id, analysis::agreement(opred, &tpred)?));
        original_acc.push(orig_accs[&entry.id]);
        twin_acc.push(ckpt.record.test_acc);
    }
    if agreement.is_empty() {
        return Err(Error::Data(format!(
            "twin {} has no finished models paired with the original",
            twin_dir.display()
        )));
    }
    let kappas: Vec<f64> = agreement.iter().map(|(_, k)| *k).collect();
    let (agreement_mean, agreement_std) = analysis::mean_std(&kappas);

    // Correlations are reported as NaN when undefined so one degenerate
    // twin does not abort the rest of the report.
    let pearson_r = match analysis::pearson(&original_acc, &twin_acc) {
        Ok(v) => v,
        Err(e) => {
            log::warn!("{tag}: Pearson undefined: {e}");
            f64::NAN
        }
    };
    let kendall = match analysis::kendall_tau(&original_acc, &twin_acc) {
        Ok(v) => v,
        Err(e) => {
            log::warn!("{tag}: Kendall tau undefined: {e}");
            f64::NAN
        }
    };

    let epochs = layer_epochs(cfg, &twin_index);
    let mut layer_info: Option<Vec<(String, usize)>> = None;
    let mut layer_stats = Vec::new();
    for &epoch in &epochs {
        let mut samples = Vec::new();
        for entry in &twin_index.models {
            if entry.epochs_written < epoch
                || (!matches!(entry.status, ModelStatus::Ok) && entry.epochs_written == 0)
            {
                continue;
            }
            let ckpt =
                ztc::load_checkpoint(&twin_index.checkpoint_path(twin_dir, entry.id, epoch))?;
            if layer_info.is_none() {
                layer_info = Some(
                    ckpt.model
                        .layers
                        .iter()
                        .map(|lp| (lp.name.clone(), lp.weight.numel()))
                        .collect(),
                );
            }
            samples.push(layer_sample(entry.id, &ckpt)?);
        }
        if samples.is_empty() {
            log::warn!("{tag}: no models carry epoch {epoch}, skipping");
            continue;
        }
        let info = layer_info.as_ref().expect("set with the first sample");
        layer_stats.push(analysis::layer_sparsity_stats(epoch, info, &samples)?);
    }
    let layer_size_tau = layer_stats
        .last()
        .and_then(|s| analysis::layer_size_sparsity_tau(s).ok())
        .unwrap_or(f64::NAN);

    Ok(TwinAnalysis {
        tag,
        method: twin_index.method.clone(),
        agreement,
        agreement_mean,
        agreement_std,
        original_acc,
        twin_acc,
        pearson_r,
        kendall_tau: kendall,
        layer_stats,
        layer_size_tau,
    })
}

/// Epochs to tabulate for a twin: configured override, else milestones for
/// variational twins, else just the final epoch.
fn layer_epochs(cfg: &AnalyzeConfig, index: &ZooIndex) -> Vec<usize> {
    if let Some(e) = &cfg.layer_epochs {
        let mut out: Vec<usize> = e.iter().copied().filter(|e| *e <= index.epochs).collect();
        out.sort_unstable();
        out.dedup();
        return out;
    }
    if index.method == "vd" {
        (0..=index.epochs).step_by(5).collect()
    } else {
        vec![index.epochs]
    }
}

/// Per-layer sparsity of one checkpoint: the dropped fraction from the
/// log-alpha extras when present, otherwise the exact-zero fraction.
fn layer_sample(model_id: usize, ckpt: &ztc::Checkpoint) -> Result<LayerSparsitySample> {
    let mut layer_sparsity = Vec::with_capacity(ckpt.model.layers.len());
    for lp in &ckpt.model.layers {
        let alpha_name = format!("{}.log_alpha", lp.name);
        let frac = match ckpt.extras.iter().find(|(n, _)| *n == alpha_name) {
            Some((_, la)) => {
                la.data().iter().filter(|v| **v >= LOG_ALPHA_PRUNE).count() as f64
                    / la.numel() as f64
            }
            None => {
                lp.weight.data().iter().filter(|v| **v == 0.0).count() as f64
                    / lp.weight.numel() as f64
            }
        };
        layer_sparsity.push(frac);
    }
    Ok(LayerSparsitySample {
        model_id,
        layer_sparsity,
        accuracy: ckpt.record.test_acc,
        ggap: ckpt.record.ggap,
    })
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(content.as_bytes())?;
    Ok(())
}

fn emit_agreement_csv(out: &Path, twins: &[TwinAnalysis]) -> Result<()> {
    let mut s = String::from("twin,model_id,kappa\n");
    for t in twins {
        for (id, k) in &t.agreement {
            s.push_str(&format!("{},{},{}\n", t.tag, id, fmt_metric(*k)));
        }
    }
    write_file(&out.join("agreement.csv"), &s)
}

fn emit_correlations_csv(out: &Path, twins: &[TwinAnalysis]) -> Result<()> {
    let mut s = String::from("twin,n,pearson_r,kendall_tau\n");
    for t in twins {
        s.push_str(&format!(
            "{},{},{},{}\n",
            t.tag,
            t.original_acc.len(),
            fmt_metric(t.pearson_r),
            fmt_metric(t.kendall_tau)
        ));
    }
    write_file(&out.join("correlations.csv"), &s)
}

/// Wide per-layer table, one row per epoch: every cell is "mean (std)" in
/// percent, matching the usual layer-sparsity presentation.
fn emit_per_layer_csv(out: &Path, t: &TwinAnalysis) -> Result<()> {
    let mut s = String::from("zoo,epoch");
    if let Some(first) = t.layer_stats.first() {
        for (name, _, _, _) in &first.layers {
            s.push(',');
            s.push_str(name);
        }
    }
    s.push_str(",accuracy,ggap\n");
    let pct = |m: f64, sd: f64| format!("{:.2} ({:.2})", m * 100.0, sd * 100.0);
    for stats in &t.layer_stats {
        s.push_str(&format!("{},{}", t.tag, stats.epoch));
        for (_, _, m, sd) in &stats.layers {
            s.push(',');
            s.push_str(&format!("\"{}\"", pct(*m, *sd)));
        }
        s.push_str(&format!(
            ",\"{}\",\"{}\"\n",
            pct(stats.accuracy.0, stats.accuracy.1),
            pct(stats.ggap.0, stats.ggap.1)
        ));
    }
    write_file(&out.join(format!("per_layer_{}.csv", t.tag)), &s)
}

/// Scatter data relating layer size to sparsity at the last tabulated epoch.
fn emit_scatter_tsv(out: &Path, t: &TwinAnalysis) -> Result<()> {
    let mut s = String::from(
        "layer\tparams\tlog10_params\tmean_sparsity\tlog10_mean_sparsity\tstd_sparsity\n",
    );
    if let Some(stats) = t.layer_stats.last() {
        for (name, count, m, sd) in &stats.layers {
            let log_m = if *m > 0.0 { fmt_metric(m.log10()) } else { "nan".into() };
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                name,
                count,
                fmt_metric((*count as f64).log10()),
                fmt_metric(*m),
                log_m,
                fmt_metric(*sd)
            ));
        }
    }
    write_file(&out.join(format!("layer_scatter_{}.tsv", t.tag)), &s)
}

/// One combined trajectory CSV: the original zoo's metrics followed by every
/// twin's, distinguished by the zoo column.
fn emit_trajectories_csv(out: &Path, zoo: &Path, twins: &[PathBuf]) -> Result<()> {
    let mut s = String::new();
    for (i, dir) in std::iter::once(zoo).chain(twins.iter().map(|p| p.as_path())).enumerate() {
        let content = std::fs::read_to_string(dir.join(zoo::METRICS_FILE))?;
        let mut lines = content.lines();
        let header = lines.next().unwrap_or_default();
        if i == 0 {
            s.push_str(header);
            s.push('\n');
        } else if header != zoo::METRICS_HEADER {
            return Err(Error::Format(format!(
                "{} has an unexpected metrics header",
                dir.display()
            )));
        }
        for line in lines {
            s.push_str(line);
            s.push('\n');
        }
    }
    write_file(&out.join("trajectories.csv"), &s)
}

fn emit_summary_csv(out: &Path, twins: &[TwinAnalysis]) -> Result<()> {
    let mut s = String::from("twin,metric,value\n");
    for t in twins {
        let rows = [
            ("n_pairs", t.original_acc.len() as f64),
            ("agreement_mean", t.agreement_mean),
            ("agreement_std", t.agreement_std),
            ("pearson_r", t.pearson_r),
            ("kendall_tau", t.kendall_tau),
            ("layer_size_tau", t.layer_size_tau),
        ];
        for (name, v) in rows {
            s.push_str(&format!("{},{},{}\n", t.tag, name, fmt_metric(v)));
        }
    }
    write_file(&out.join("summary.csv"), &s)
}
