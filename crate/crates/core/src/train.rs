//! The training loop: mini-batch SGD/Adam over a model, per-epoch metrics,
//! optional per-layer weight freeze masks, and divergence detection.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Mode, ModelState};
use crate::optim::Optimizer;
use crate::rng;
use crate::tensor::Tensor;

pub const EVAL_BATCH: usize = 256;

/// Metrics taken at the end of an epoch. Epoch 0 is the untrained state.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Generalization gap: train accuracy minus test accuracy.
    pub ggap: f64,
    /// Fraction of exactly-zero prunable weights.
    pub sparsity: f64,
}

/// Trains `model` in place for `epochs` epochs and returns one record per
/// epoch boundary (epochs + 1 records, the first for the untrained state).
///
/// `masks`, when given, holds one tensor per weighted layer, shaped like the
/// layer weight; entries equal to 0.0 freeze both the weight (which must
/// already be 0.0 to stay 0.0) and its optimizer moments. `rng_tags` selects
/// the shuffle/dropout stream under the model seed, so the same model can be
/// trained and later fine-tuned with non-overlapping randomness. `model_id`
/// only labels divergence errors. `on_epoch` runs after each record (epoch 0
/// included), e.g. to write checkpoints.
pub fn train_model(
    model: &mut ModelState,
    train: &Dataset,
    test: &Dataset,
    epochs: usize,
    batch_size: usize,
    masks: Option<&[Tensor]>,
    rng_tags: &[u64],
    model_id: usize,
    mut on_epoch: impl FnMut(&ModelState, &EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let n_train = train.labels.len();
    if n_train == 0 {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    if let Some(ms) = masks {
        if ms.len() != model.layers.len() {
            return Err(Error::Shape(format!(
                "{} masks for {} layers",
                ms.len(),
                model.layers.len()
            )));
        }
        for (m, lp) in ms.iter().zip(&model.layers) {
            if m.dims() != lp.weight.dims() {
                return Err(Error::Shape(format!(
                    "mask {:?} for {} weight {:?}",
                    m.dims(),
                    lp.name,
                    lp.weight.dims()
                )));
            }
        }
    }

    let mut trng = rng::stream(model.factors.seed, rng_tags);
    let sizes: Vec<usize> = model
        .layers
        .iter()
        .flat_map(|l| [l.weight.numel(), l.bias.numel()])
        .collect();
    let mut opt = Optimizer::new(
        model.factors.optimizer,
        model.factors.lr,
        model.factors.weight_decay,
        &sizes,
    );

    let mut records = Vec::with_capacity(epochs + 1);
    let rec = measure(model, train, test, 0, model_id)?;
    on_epoch(model, &rec)?;
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
            let h = model.forward(&mut g, x, &mut Mode::Train { rng: &mut trng })?;
            let loss = g.cross_entropy(h.logits, &yb)?;
            if !g.value(loss).item()?.is_finite() {
                return Err(Error::Divergence { model: model_id, epoch });
            }
            let grads = g.backward(loss)?;

            let mut grad_slices: Vec<&[f32]> = Vec::with_capacity(sizes.len());
            for nodes in &h.params {
                for id in [nodes.weight, nodes.bias] {
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
            for (li, lp) in model.layers.iter_mut().enumerate() {
                param_slices.push(lp.weight.data_mut());
                mask_slices.push(masks.map(|ms| ms[li].data()));
                param_slices.push(lp.bias.data_mut());
                mask_slices.push(None);
            }
            opt.step(&mut param_slices, &grad_slices, &mask_slices)?;
            start += len;
        }
        if !model.is_finite() {
            return Err(Error::Divergence { model: model_id, epoch });
        }
        let rec = measure(model, train, test, epoch, model_id)?;
        on_epoch(model, &rec)?;
        records.push(rec);
    }
    Ok(records)
}

fn measure(
    model: &ModelState,
    train: &Dataset,
    test: &Dataset,
    epoch: usize,
    model_id: usize,
) -> Result<EpochRecord> {
    let (train_loss, train_acc) = model.evaluate(train, EVAL_BATCH)?;
    let (_, test_acc) = model.evaluate(test, EVAL_BATCH)?;
    if !train_loss.is_finite() {
        return Err(Error::Divergence { model: model_id, epoch });
    }
    Ok(EpochRecord {
        epoch,
        train_loss,
        train_acc,
        test_acc,
        ggap: train_acc - test_acc,
        sparsity: model.weight_sparsity(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchConfig, LayerSpec};
    use crate::graph::Activation;
    use crate::model::{Factors, InitScheme};
    use crate::optim::OptimKind;
    use crate::rng::tag;

    fn toy_arch() -> ArchConfig {
        ArchConfig {
            name: "toy".into(),
            input: (1, 6, 6),
            layers: vec![
                LayerSpec::Conv { out_channels: 2, kernel: 3, stride: 1 },
                LayerSpec::Fc { out_features: 2 },
            ],
        }
    }

    fn toy_factors(seed: u64) -> Factors {
        Factors {
            seed,
            activation: Activation::Relu,
            optimizer: OptimKind::Adam,
            lr: 1e-2,
            weight_decay: 0.0,
            dropout: 0.0,
            init: InitScheme::KaimingUniform,
        }
    }

    /// Two linearly separable stripe classes with mild per-pixel noise.
    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = rng::stream(seed, &[tag::DATA, 99]);
        let mut data = Vec::with_capacity(n * 36);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % 2) as u32;
            for r in 0..6 {
                let _ = r;
                for c in 0..6 {
                    let lit = if class == 0 { c < 3 } else { c >= 3 };
                    let base = if lit { 1.0 } else { -1.0 };
                    data.push(base + rng::uniform(&mut rng, -0.2, 0.2));
                }
            }
            labels.push(class);
        }
        Dataset {
            images: Tensor::new(vec![n, 1, 6, 6], data).unwrap(),
            labels,
            num_classes: 2,
        }
    }

    #[test]
    fn learns_the_toy_problem_and_counts_epochs() {
        let train = toy_data(64, 1);
        let test = toy_data(32, 2);
        let mut m = ModelState::init(&toy_arch(), &toy_factors(5)).unwrap();
        let recs = train_model(
            &mut m,
            &train,
            &test,
            4,
            16,
            None,
            &[tag::TRAIN],
            0,
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(recs.len(), 5);
        assert_eq!(recs[0].epoch, 0);
        assert_eq!(recs[4].epoch, 4);
        assert!(recs[4].train_loss < recs[0].train_loss);
        assert!(recs[4].test_acc > 0.9, "test acc {}", recs[4].test_acc);
        for r in &recs {
            assert!((r.ggap - (r.train_acc - r.test_acc)).abs() < 1e-12);
        }
    }

    #[test]
    fn training_is_bit_deterministic() {
        let train = toy_data(32, 1);
        let test = toy_data(16, 2);
        let mut a = ModelState::init(&toy_arch(), &toy_factors(9)).unwrap();
        let mut b = ModelState::init(&toy_arch(), &toy_factors(9)).unwrap();
        let ra =
            train_model(&mut a, &train, &test, 3, 8, None, &[tag::TRAIN], 0, |_, _| Ok(()))
                .unwrap();
        let rb =
            train_model(&mut b, &train, &test, 3, 8, None, &[tag::TRAIN], 0, |_, _| Ok(()))
                .unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.flatten_params(), b.flatten_params());
    }

    #[test]
    fn different_rng_tags_change_the_run() {
        let train = toy_data(32, 1);
        let test = toy_data(16, 2);
        let mut a = ModelState::init(&toy_arch(), &toy_factors(9)).unwrap();
        let mut b = ModelState::init(&toy_arch(), &toy_factors(9)).unwrap();
        train_model(&mut a, &train, &test, 2, 8, None, &[tag::TRAIN], 0, |_, _| Ok(()))
            .unwrap();
        train_model(&mut b, &train, &test, 2, 8, None, &[tag::MP, tag::TRAIN], 0, |_, _| {
            Ok(())
        })
        .unwrap();
        assert_ne!(a.flatten_params(), b.flatten_params());
    }

    #[test]
    fn masked_weights_stay_exactly_zero() {
        let train = toy_data(32, 1);
        let test = toy_data(16, 2);
        let mut m = ModelState::init(&toy_arch(), &toy_factors(3)).unwrap();
        let mut masks = Vec::new();
        for lp in &mut m.layers {
            let mut mk = Tensor::full(lp.weight.dims().to_vec(), 1.0);
            for i in (0..lp.weight.numel()).step_by(2) {
                lp.weight.data_mut()[i] = 0.0;
                mk.data_mut()[i] = 0.0;
            }
            masks.push(mk);
        }
        let before = m.weight_sparsity();
        let recs = train_model(
            &mut m,
            &train,
            &test,
            3,
            8,
            Some(&masks),
            &[tag::MP],
            0,
            |_, _| Ok(()),
        )
        .unwrap();
        for (lp, mk) in m.layers.iter().zip(&masks) {
            for (w, f) in lp.weight.data().iter().zip(mk.data()) {
                if *f == 0.0 {
                    assert_eq!(*w, 0.0);
                }
            }
        }
        assert!(m.weight_sparsity() >= before);
        assert!(recs.iter().all(|r| r.sparsity >= before));
    }

    #[test]
    fn epoch_callback_sees_every_epoch() {
        let train = toy_data(16, 1);
        let test = toy_data(8, 2);
        let mut m = ModelState::init(&toy_arch(), &toy_factors(3)).unwrap();
        let mut seen = Vec::new();
        train_model(&mut m, &train, &test, 2, 8, None, &[tag::TRAIN], 0, |_, r| {
            seen.push(r.epoch);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn non_finite_parameters_report_divergence() {
        let train = toy_data(16, 1);
        let test = toy_data(8, 2);
        let mut m = ModelState::init(&toy_arch(), &toy_factors(3)).unwrap();
        // Poison a final-layer bias so the loss itself is non-finite.
        m.layers.last_mut().unwrap().bias.data_mut()[0] = f32::NAN;
        let err = train_model(&mut m, &train, &test, 1, 8, None, &[tag::TRAIN], 7, |_, _| {
            Ok(())
        })
        .unwrap_err();
        match err {
            Error::Divergence { model, epoch } => {
                assert_eq!(model, 7);
                assert_eq!(epoch, 0);
            }
            other => panic!("expected divergence, got {other}"),
        }
    }
}
