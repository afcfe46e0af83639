//! Population statistics: per-model predictions, pairwise prediction
//! agreement, Pearson and Kendall rank correlations, and per-layer sparsity
//! aggregation across a zoo.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::train::EVAL_BATCH;

/// Class predictions of one model over one dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionVector {
    pub model_id: usize,
    /// Identifies the dataset split the predictions were taken on; agreement
    /// refuses to compare across different splits.
    pub dataset: String,
    pub classes: Vec<u32>,
}

/// Argmax predictions per test sample, ties to the lowest class index.
pub fn predict(
    model: &ModelState,
    data: &Dataset,
    model_id: usize,
    dataset: &str,
) -> Result<PredictionVector> {
    let classes = model.predict(&data.images, EVAL_BATCH)?;
    Ok(PredictionVector { model_id, dataset: dataset.to_string(), classes })
}

/// Fraction of labels a prediction vector gets right.
pub fn accuracy(p: &PredictionVector, labels: &[u32]) -> Result<f64> {
    if p.classes.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions against {} labels",
            p.classes.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Data("empty prediction vector".into()));
    }
    let hits = p.classes.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fraction of samples on which two models predict the same class.
pub fn agreement(a: &PredictionVector, b: &PredictionVector) -> Result<f64> {
    if a.dataset != b.dataset {
        return Err(Error::Config(format!(
            "predictions over different datasets: {} vs {}",
            a.dataset, b.dataset
        )));
    }
    if a.classes.len() != b.classes.len() {
        return Err(Error::Shape(format!(
            "prediction lengths differ: {} vs {}",
            a.classes.len(),
            b.classes.len()
        )));
    }
    if a.classes.is_empty() {
        return Err(Error::Data("empty prediction vector".into()));
    }
    let same = a.classes.iter().zip(&b.classes).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.classes.len() as f64)
}

fn check_paired(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("paired lists of length {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Stats("correlation needs at least two points".into()));
    }
    if let Some(v) = x.iter().chain(y).find(|v| !v.is_finite()) {
        return Err(Error::Stats(format!("non-finite value {v} in correlation input")));
    }
    Ok(())
}

/// Sample Pearson correlation. Zero variance in either list is undefined.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_paired(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Stats("zero variance makes Pearson correlation undefined".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Kendall rank correlation, tie-corrected (tau-b), by pair enumeration.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    check_paired(x, y)?;
    let n = x.len();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    let mut ties_x = 0i64; // tied in x only
    let mut ties_y = 0i64; // tied in y only
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i].partial_cmp(&x[j]).expect("finite");
            let dy = y[i].partial_cmp(&y[j]).expect("finite");
            use std::cmp::Ordering::Equal;
            match (dx, dy) {
                (Equal, Equal) => {}
                (Equal, _) => ties_x += 1,
                (_, Equal) => ties_y += 1,
                (a, b) if a == b => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let denom_x = n0 - tied_pairs(x);
    let denom_y = n0 - tied_pairs(y);
    if denom_x == 0 || denom_y == 0 {
        return Err(Error::Stats("all-tied input makes Kendall tau undefined".into()));
    }
    debug_assert_eq!(denom_x, concordant + discordant + ties_y);
    debug_assert_eq!(denom_y, concordant + discordant + ties_x);
    Ok((concordant - discordant) as f64 / ((denom_x as f64) * (denom_y as f64)).sqrt())
}

/// Number of pairs tied within one list.
fn tied_pairs(v: &[f64]) -> i64 {
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mut total = 0i64;
    let mut run = 1i64;
    for i in 1..sorted.len() {
        if sorted[i] == sorted[i - 1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Mean and sample standard deviation (n-1 denominator; 0 for n == 1).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Sparsity of every layer of every model at one epoch, plus the metrics
/// that go with it in the per-layer report.
#[derive(Debug, Clone)]
pub struct LayerSparsitySample {
    pub model_id: usize,
    /// One fraction per weighted layer, in architecture order.
    pub layer_sparsity: Vec<f64>,
    pub accuracy: f64,
    pub ggap: f64,
}

/// Aggregated per-layer statistics for one epoch of a zoo.
#[derive(Debug, Clone)]
pub struct LayerEpochStats {
    pub epoch: usize,
    /// Per layer: (name, parameter count, mean sparsity, std sparsity).
    pub layers: Vec<(String, usize, f64, f64)>,
    pub accuracy: (f64, f64),
    pub ggap: (f64, f64),
}

/// Aggregates per-model layer sparsities into per-layer mean/std for one
/// epoch. `layer_info` gives (name, parameter count) in architecture order.
pub fn layer_sparsity_stats(
    epoch: usize,
    layer_info: &[(String, usize)],
    samples: &[LayerSparsitySample],
) -> Result<LayerEpochStats> {
    if samples.is_empty() {
        return Err(Error::Data(format!("no models carry epoch {epoch}")));
    }
    for s in samples {
        if s.layer_sparsity.len() != layer_info.len() {
            return Err(Error::Shape(format!(
                "model {} reports {} layers, architecture has {}",
                s.model_id,
                s.layer_sparsity.len(),
                layer_info.len()
            )));
        }
    }
    let layers = layer_info
        .iter()
        .enumerate()
        .map(|(li, (name, count))| {
            let vals: Vec<f64> = samples.iter().map(|s| s.layer_sparsity[li]).collect();
            let (m, s) = mean_std(&vals);
            (name.clone(), *count, m, s)
        })
        .collect();
    let accs: Vec<f64> = samples.iter().map(|s| s.accuracy).collect();
    let ggaps: Vec<f64> = samples.iter().map(|s| s.ggap).collect();
    Ok(LayerEpochStats {
        epoch,
        layers,
        accuracy: mean_std(&accs),
        ggap: mean_std(&ggaps),
    })
}

/// Kendall tau between log layer size and mean layer sparsity — the
/// layer-size effect statistic. (Kendall is monotone-invariant, so the log
/// is cosmetic; it is kept for symmetry with the scatter output.)
pub fn layer_size_sparsity_tau(stats: &LayerEpochStats) -> Result<f64> {
    let sizes: Vec<f64> = stats.layers.iter().map(|l| (l.1 as f64).log10()).collect();
    let means: Vec<f64> = stats.layers.iter().map(|l| l.2).collect();
    kendall_tau(&sizes, &means)
}
