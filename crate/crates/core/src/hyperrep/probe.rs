//! Linear probes: ridge regression from latent embeddings to model
//! properties, scored as held-out R^2 with the split drawn by model id so no
//! state of a test model ever leaks into training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyperrep::train::Embedding;
use crate::rng::{self, tag};

pub const PROBE_TARGETS: [&str; 4] = ["accuracy", "sparsity", "epoch", "ggap"];
pub const RIDGE_LAMBDA: f64 = 1e-3;
/// Fewer embeddings than this cannot support a meaningful split.
pub const MIN_EMBEDDINGS: usize = 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub target: String,
    pub r2: f64,
    pub n_train: usize,
    pub n_test: usize,
}

fn target_value(e: &Embedding, target: &str) -> Result<f64> {
    Ok(match target {
        "accuracy" => e.props.accuracy,
        "sparsity" => e.props.sparsity,
        "epoch" => e.props.epoch,
        "ggap" => e.props.ggap,
        other => return Err(Error::Config(format!("unknown probe target {other:?}"))),
    })
}

/// Solves `A x = b` for symmetric positive definite `A` via Cholesky.
fn cholesky_solve(a: &[f64], b: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0f64; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Stats(format!(
                        "ridge normal matrix not positive definite at row {i}"
                    )));
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    // Forward then back substitution.
    let mut y = vec![0.0f64; d];
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * y[k];
        }
        y[i] = s / l[i * d + i];
    }
    let mut x = vec![0.0f64; d];
    for i in (0..d).rev() {
        let mut s = y[i];
        for k in i + 1..d {
            s -= l[k * d + i] * x[k];
        }
        x[i] = s / l[i * d + i];
    }
    Ok(x)
}

struct Design {
    x: Vec<f64>,
    y: Vec<f64>,
    n: usize,
    d: usize,
}

fn gather(embeds: &[Embedding], models: &[usize], target: &str) -> Result<Design> {
    let d = embeds.first().map(|e| e.z.len()).unwrap_or(0);
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut n = 0;
    for e in embeds {
        if !models.contains(&e.model_id) {
            continue;
        }
        if e.z.len() != d {
            return Err(Error::Shape("embeddings differ in width".into()));
        }
        x.extend(e.z.iter().map(|&v| v as f64));
        y.push(target_value(e, target)?);
        n += 1;
    }
    Ok(Design { x, y, n, d })
}

/// Fits ridge regression on the training design (centred features and
/// target) and returns held-out R^2 against the test split's own mean.
fn ridge_r2(train: &Design, mut train_y: Vec<f64>, test: &Design, lambda: f64) -> Result<f64> {
    let d = train.d;
    if train.n == 0 || test.n == 0 {
        return Err(Error::Config(format!(
            "probe split left {} training and {} test states",
            train.n, test.n
        )));
    }
    let mut xm = vec![0.0f64; d];
    for row in train.x.chunks_exact(d) {
        for (m, &v) in xm.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut xm {
        *m /= train.n as f64;
    }
    let ym = train_y.iter().sum::<f64>() / train.n as f64;
    for v in &mut train_y {
        *v -= ym;
    }
    // Normal equations on centred data: (Xc^T Xc + lambda I) w = Xc^T y.
    let mut a = vec![0.0f64; d * d];
    let mut b = vec![0.0f64; d];
    for (row, &yv) in train.x.chunks_exact(d).zip(&train_y) {
        for i in 0..d {
            let xi = row[i] - xm[i];
            b[i] += xi * yv;
            for j in 0..=i {
                a[i * d + j] += xi * (row[j] - xm[j]);
            }
        }
    }
    for i in 0..d {
        for j in i + 1..d {
            a[i * d + j] = a[j * d + i];
        }
        a[i * d + i] += lambda;
    }
    let w = cholesky_solve(&a, &b, d)?;

    let test_mean = test.y.iter().sum::<f64>() / test.n as f64;
    let mut ss_res = 0.0f64;
    let mut ss_tot = 0.0f64;
    for (row, &yv) in test.x.chunks_exact(d).zip(&test.y) {
        let pred = ym
            + row
                .iter()
                .zip(&xm)
                .zip(&w)
                .map(|((&x, &m), &wi)| (x - m) * wi)
                .sum::<f64>();
        ss_res += (yv - pred) * (yv - pred);
        ss_tot += (yv - test_mean) * (yv - test_mean);
    }
    if ss_tot == 0.0 {
        return Err(Error::Stats("held-out probe target has zero variance".into()));
    }
    Ok(1.0 - ss_res / ss_tot)
}

fn check_inputs(embeds: &[Embedding], train_models: &[usize], test_models: &[usize]) -> Result<()> {
    if embeds.len() < MIN_EMBEDDINGS {
        return Err(Error::Config(format!(
            "{} embeddings cannot support a probe; at least {MIN_EMBEDDINGS} needed",
            embeds.len()
        )));
    }
    if train_models.is_empty() || test_models.is_empty() {
        return Err(Error::Config("probe needs both training and test models".into()));
    }
    if let Some(shared) = train_models.iter().find(|m| test_models.contains(m)) {
        return Err(Error::Config(format!(
            "model {shared} appears in both probe splits"
        )));
    }
    Ok(())
}

/// Probes one property from the embeddings along the given model-id split.
pub fn probe(
    embeds: &[Embedding],
    train_models: &[usize],
    test_models: &[usize],
    target: &str,
    lambda: f64,
) -> Result<ProbeReport> {
    check_inputs(embeds, train_models, test_models)?;
    let all_var = {
        let ys: Vec<f64> =
            embeds.iter().map(|e| target_value(e, target)).collect::<Result<_>>()?;
        let m = ys.iter().sum::<f64>() / ys.len() as f64;
        ys.iter().map(|&v| (v - m) * (v - m)).sum::<f64>()
    };
    if all_var == 0.0 {
        return Err(Error::Stats(format!("probe target {target:?} has zero variance")));
    }
    let train = gather(embeds, train_models, target)?;
    let test = gather(embeds, test_models, target)?;
    let train_y = train.y.clone();
    let r2 = ridge_r2(&train, train_y, &test, lambda)?;
    Ok(ProbeReport { target: target.into(), r2, n_train: train.n, n_test: test.n })
}

/// The permutation control: training labels shuffled, same fit and split.
/// A healthy probe beats this by a clear margin.
pub fn shuffled_probe_r2(
    embeds: &[Embedding],
    train_models: &[usize],
    test_models: &[usize],
    target: &str,
    lambda: f64,
    seed: u64,
) -> Result<f64> {
    check_inputs(embeds, train_models, test_models)?;
    let train = gather(embeds, train_models, target)?;
    let test = gather(embeds, test_models, target)?;
    let mut shuffled = train.y.clone();
    let mut rng = rng::stream(seed, &[tag::PROBE]);
    rng::shuffle(&mut rng, &mut shuffled);
    ridge_r2(&train, shuffled, &test, lambda)
}

/// Probes all four standard properties with the default regularization.
///
/// A target whose statistic is undefined on this population (for example a
/// plateaued accuracy with zero variance) gets an NaN row instead of
/// sinking the whole report, mirroring the correlation tables; every other
/// failure is still an error.
pub fn probe_all(
    embeds: &[Embedding],
    train_models: &[usize],
    test_models: &[usize],
) -> Result<Vec<ProbeReport>> {
    PROBE_TARGETS
        .iter()
        .map(|t| match probe(embeds, train_models, test_models, t, RIDGE_LAMBDA) {
            Err(Error::Stats(_)) => Ok(ProbeReport {
                target: (*t).into(),
                r2: f64::NAN,
                n_train: embeds.iter().filter(|e| train_models.contains(&e.model_id)).count(),
                n_test: embeds.iter().filter(|e| test_models.contains(&e.model_id)).count(),
            }),
            other => other,
        })
        .collect()
}
