//! Global unstructured magnitude pruning: rank every conv and fc weight by
//! |w| across the whole model, zero the smallest fraction, then fine-tune
//! with the zeroed entries frozen.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::rng::tag;
use crate::tensor::Tensor;
use crate::train::{train_model, EpochRecord};

/// Default fine-tuning learning rate for pruned models.
pub const DEFAULT_MP_LR: f64 = 1e-3;
/// Default number of masked fine-tuning epochs.
pub const DEFAULT_FT_EPOCHS: usize = 15;

/// Integer-percent tag for a ratio, used in method names and RNG paths
/// ("mp_50" for 0.5).
pub fn ratio_percent(ratio: f64) -> u64 {
    (ratio * 100.0).round() as u64
}

pub fn method_name(ratio: f64) -> String {
    format!("mp_{}", ratio_percent(ratio))
}

/// Per-layer 1/0 keep masks zeroing the `floor(ratio * P)` globally smallest
/// weights by |w|. Ties break by (layer order, flat index) ascending. Biases
/// are never pruned.
pub fn global_masks(model: &ModelState, ratio: f64) -> Result<Vec<Tensor>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("prune ratio {ratio} outside [0, 1)")));
    }
    let total: usize = model.layers.iter().map(|l| l.weight.numel()).sum();
    if total == 0 {
        return Err(Error::Config("model has no prunable weights".into()));
    }
    let mut entries: Vec<(f32, usize)> = Vec::with_capacity(total);
    let mut gidx = 0;
    for lp in &model.layers {
        for v in lp.weight.data() {
            entries.push((v.abs(), gidx));
            gidx += 1;
        }
    }
    let k = (ratio * total as f64).floor() as usize;
    // Total order: magnitude ascending, then global (layer, flat) index.
    entries.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut pruned = vec![false; total];
    for (_, g) in entries.iter().take(k) {
        pruned[*g] = true;
    }
    let mut masks = Vec::with_capacity(model.layers.len());
    let mut at = 0;
    for lp in &model.layers {
        let n = lp.weight.numel();
        let data: Vec<f32> =
            pruned[at..at + n].iter().map(|p| if *p { 0.0 } else { 1.0 }).collect();
        at += n;
        masks.push(Tensor::new(lp.weight.dims().to_vec(), data)?);
    }
    Ok(masks)
}

/// Zeroes every weight whose mask entry is 0.0.
pub fn apply_masks(model: &mut ModelState, masks: &[Tensor]) -> Result<()> {
    if masks.len() != model.layers.len() {
        return Err(Error::Shape(format!(
            "{} masks for {} layers",
            masks.len(),
            model.layers.len()
        )));
    }
    for (lp, m) in model.layers.iter_mut().zip(masks) {
        if m.dims() != lp.weight.dims() {
            return Err(Error::Shape(format!(
                "mask {:?} against weight {:?} in {}",
                m.dims(),
                lp.weight.dims(),
                lp.name
            )));
        }
        for (w, f) in lp.weight.data_mut().iter_mut().zip(m.data()) {
            if *f == 0.0 {
                *w = 0.0;
            }
        }
    }
    Ok(())
}

/// Fraction of zero entries across a mask set.
pub fn mask_sparsity(masks: &[Tensor]) -> f64 {
    let total: usize = masks.iter().map(|m| m.numel()).sum();
    if total == 0 {
        return 0.0;
    }
    let zeros: usize =
        masks.iter().map(|m| m.data().iter().filter(|v| **v == 0.0).count()).sum();
    zeros as f64 / total as f64
}

/// Prunes a copy of the model at the given global ratio.
pub fn mp_prune(model: &ModelState, ratio: f64) -> Result<(ModelState, Vec<Tensor>)> {
    let masks = global_masks(model, ratio)?;
    let mut pruned = model.clone();
    apply_masks(&mut pruned, &masks)?;
    Ok((pruned, masks))
}

/// Masked fine-tuning after pruning: `epochs` of training during which the
/// masked entries receive no update (values and optimizer moments frozen).
/// `lr` replaces the model's training learning rate and is recorded in the
/// model's factors. The returned records start with the pruned, untuned
/// state at epoch 0.
#[allow(clippy::too_many_arguments)]
pub fn mp_finetune(
    model: &mut ModelState,
    masks: &[Tensor],
    train: &Dataset,
    test: &Dataset,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    ratio: f64,
    model_id: usize,
    on_epoch: impl FnMut(&ModelState, &EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    model.factors.lr = lr;
    train_model(
        model,
        train,
        test,
        epochs,
        batch_size,
        Some(masks),
        &[tag::MP, ratio_percent(ratio), tag::TRAIN],
        model_id,
        on_epoch,
    )
}

/// Weight sparsity per layer: (layer name, prunable count, zero fraction).
pub fn per_layer_sparsity(model: &ModelState) -> Vec<(String, usize, f64)> {
    model
        .layers
        .iter()
        .map(|lp| {
            let n = lp.weight.numel();
            let z = lp.weight.data().iter().filter(|v| **v == 0.0).count();
            (lp.name.clone(), n, z as f64 / n as f64)
        })
        .collect()
}
