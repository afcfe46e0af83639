//! The self-supervised objective: layer-normalized weight reconstruction,
//! threshold-focused alpha reconstruction, the contrastive view term, and
//! their weighted combination. Each loss exists twice: a plain f64 reference
//! used by reports and oracle checks, and a graph builder used in training.

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, NodeId};
use crate::tensor::Tensor;

fn check_views(hat: &[&[f32]], target: &[&[f32]], width: usize) -> Result<usize> {
    if hat.is_empty() || hat.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} reconstructions against {} targets",
            hat.len(),
            target.len()
        )));
    }
    for (h, t) in hat.iter().zip(target) {
        if h.len() != width || t.len() != width {
            return Err(Error::Shape(format!(
                "view of {}/{} values, expected {width}",
                h.len(),
                t.len()
            )));
        }
    }
    Ok(hat.len())
}

/// Squared reconstruction error of weights, scaled per position by the
/// population `1/sigma_l^2` and averaged over views and the `n_params` real
/// parameters. Padding carries zero in `inv_var` and so never contributes.
pub fn loss_recon_w(
    hat: &[&[f32]],
    target: &[&[f32]],
    inv_var: &[f32],
    n_params: usize,
) -> Result<f64> {
    let m = check_views(hat, target, inv_var.len())?;
    if n_params == 0 {
        return Err(Error::Config("weight loss over zero parameters".into()));
    }
    let mut acc = 0.0f64;
    for (h, t) in hat.iter().zip(target) {
        for ((&hv, &tv), &iv) in h.iter().zip(*t).zip(inv_var) {
            let d = hv as f64 - tv as f64;
            acc += iv as f64 * d * d;
        }
    }
    Ok(acc / (m * n_params) as f64)
}

fn tanh_shift(v: f64, t: f64, r: f64) -> f64 {
    ((v - t) / r).tanh()
}

/// Squared error between threshold-centred tanh transforms of predicted and
/// actual log-alphas, summed per view and averaged over views. The transform
/// concentrates resolution in the range `r` around the pruning threshold `t`;
/// values far from it saturate toward equal contributions.
pub fn loss_recon_alpha(
    hat: &[&[f32]],
    target: &[&[f32]],
    pad: &[f32],
    t: f64,
    r: f64,
) -> Result<f64> {
    if r <= 0.0 {
        return Err(Error::Config(format!("alpha range of interest {r} must be positive")));
    }
    let m = check_views(hat, target, pad.len())?;
    let mut acc = 0.0f64;
    for (h, tg) in hat.iter().zip(target) {
        for ((&hv, &tv), &p) in h.iter().zip(*tg).zip(pad) {
            let d = tanh_shift(hv as f64, t, r) - tanh_shift(tv as f64, t, r);
            acc += p as f64 * d * d;
        }
    }
    Ok(acc / m as f64)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    dot / ((na.sqrt() + 1e-12) * (nb.sqrt() + 1e-12))
}

/// Normalized-temperature cross entropy over `2*M_B` projected views where
/// rows `2i` and `2i+1` are the two views of sample `i`, using cosine
/// similarity. Summed over every anchor (both directions of every pair);
/// each anchor's denominator runs over all other views.
pub fn loss_contrastive(views: &[Vec<f32>], temp: f64) -> Result<f64> {
    if views.len() < 2 || views.len() % 2 != 0 {
        return Err(Error::Shape(format!(
            "contrastive loss needs a positive number of view pairs, got {} views",
            views.len()
        )));
    }
    if temp <= 0.0 {
        return Err(Error::Config(format!("temperature {temp} must be positive")));
    }
    let d = views[0].len();
    if views.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("contrastive views differ in width".into()));
    }
    let n = views.len();
    let mut sim = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            sim[i * n + j] = cosine(&views[i], &views[j]) / temp;
        }
    }
    let mut total = 0.0f64;
    for i in 0..n {
        let partner = i ^ 1;
        let row = &sim[i * n..][..n];
        let max = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v));
        let z: f64 = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .map(|(_, &v)| (v - max).exp())
            .sum();
        total += max + z.ln() - row[partner];
    }
    Ok(total)
}

/// Convex combination of the contrastive and reconstruction parts.
pub fn total_loss(contrast: f64, recon_w: f64, recon_alpha: f64, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("loss weighting {beta} outside [0, 1]")));
    }
    Ok(beta * contrast + (1.0 - beta) * (recon_w + recon_alpha))
}

// ── Graph builders ───────────────────────────────────────────────────────

/// Per-view weighted squared error: `sum(inv_var * (hat - target)^2)`.
/// The caller accumulates across views and scales by `1/(M*N)`.
pub fn recon_w_term(g: &mut Graph, hat: NodeId, target: NodeId, inv_var: NodeId) -> Result<NodeId> {
    let d = g.sub(hat, target)?;
    let sq = g.square(d);
    let weighted = g.mul(sq, inv_var)?;
    Ok(g.sum(weighted))
}

/// Host-side `tanh((alpha - t)/r)` grid for reconstruction targets.
pub fn tanh_transform(alpha: &Tensor, t: f64, r: f64) -> Result<Tensor> {
    if r <= 0.0 {
        return Err(Error::Config(format!("alpha range of interest {r} must be positive")));
    }
    let data = alpha.data().iter().map(|&v| tanh_shift(v as f64, t, r) as f32).collect();
    Tensor::new(alpha.dims().to_vec(), data)
}

/// Per-view alpha term against a pre-transformed target grid:
/// `sum(pad * (tanh((hat - t)/r) - tanh_target)^2)`. The caller accumulates
/// across views and scales by `1/M`.
pub fn recon_alpha_term(
    g: &mut Graph,
    hat: NodeId,
    tanh_target: NodeId,
    pad: NodeId,
    t: f32,
    r: f32,
) -> Result<NodeId> {
    if r <= 0.0 {
        return Err(Error::Config(format!("alpha range of interest {r} must be positive")));
    }
    let shifted = g.add_scalar(hat, -t);
    let scaled = g.mul_scalar(shifted, 1.0 / r);
    let th = g.activation(scaled, Activation::Tanh);
    let d = g.sub(th, tanh_target)?;
    let sq = g.square(d);
    let masked = g.mul(sq, pad)?;
    Ok(g.sum(masked))
}

/// Contrastive term over stacked projected views `[2M_B, d]`, rows `2i` and
/// `2i+1` paired: cosine similarities via row normalization, then the
/// summed normalized-temperature cross entropy.
pub fn contrastive_node(g: &mut Graph, zbar: NodeId, temp: f32) -> Result<NodeId> {
    let zn = g.row_normalize(zbar)?;
    let sim = g.matmul(zn, zn, true)?;
    g.nt_xent(sim, temp)
}

/// `beta * contrast + (1 - beta) * (recon_w + recon_alpha)` as graph nodes.
pub fn total_node(
    g: &mut Graph,
    contrast: NodeId,
    recon_w: NodeId,
    recon_alpha: NodeId,
    beta: f32,
) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("loss weighting {beta} outside [0, 1]")));
    }
    let recon = g.add(recon_w, recon_alpha)?;
    let wc = g.mul_scalar(contrast, beta);
    let wr = g.mul_scalar(recon, 1.0 - beta);
    g.add(wc, wr)
}
