//! SGD and Adam parameter updates with optional per-weight freeze masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Sgd,
    Adam,
}

/// Optimizer over a fixed set of flat parameter buffers.
///
/// A mask buffer (1.0 keep, 0.0 frozen) can accompany any parameter; frozen
/// entries are skipped entirely, so neither the value, nor the weight decay,
/// nor the Adam moments ever move for them.
pub struct Optimizer {
    kind: OptimKind,
    lr: f64,
    weight_decay: f64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimKind, lr: f64, weight_decay: f64, sizes: &[usize]) -> Self {
        let (m, v) = match kind {
            OptimKind::Sgd => (vec![], vec![]),
            OptimKind::Adam => (
                sizes.iter().map(|&s| vec![0.0; s]).collect(),
                sizes.iter().map(|&s| vec![0.0; s]).collect(),
            ),
        };
        Optimizer { kind, lr, weight_decay, m, v, t: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Applies one update. `params`, `grads`, and the mask slots must line up
    /// with the sizes given at construction.
    pub fn step(
        &mut self,
        params: &mut [&mut [f32]],
        grads: &[&[f32]],
        masks: &[Option<&[f32]>],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != masks.len() {
            return Err(Error::Shape(format!(
                "optimizer step with {} params, {} grads, {} masks",
                params.len(),
                grads.len(),
                masks.len()
            )));
        }
        let wd = self.weight_decay;
        let lr = self.lr;
        match self.kind {
            OptimKind::Sgd => {
                for ((p, g), mask) in params.iter_mut().zip(grads).zip(masks) {
                    if p.len() != g.len() {
                        return Err(Error::Shape(format!(
                            "param of {} elements with grad of {}",
                            p.len(),
                            g.len()
                        )));
                    }
                    for i in 0..p.len() {
                        if let Some(m) = mask {
                            if m[i] == 0.0 {
                                continue;
                            }
                        }
                        let upd = g[i] as f64 + wd * p[i] as f64;
                        p[i] = (p[i] as f64 - lr * upd) as f32;
                    }
                }
            }
            OptimKind::Adam => {
                self.t += 1;
                let bc1 = 1.0 - BETA1.powi(self.t);
                let bc2 = 1.0 - BETA2.powi(self.t);
                for (k, ((p, g), mask)) in params.iter_mut().zip(grads).zip(masks).enumerate() {
                    if p.len() != g.len() || p.len() != self.m[k].len() {
                        return Err(Error::Shape(format!(
                            "param of {} elements with grad of {} and state of {}",
                            p.len(),
                            g.len(),
                            self.m[k].len()
                        )));
                    }
                    let m = &mut self.m[k];
                    let v = &mut self.v[k];
                    for i in 0..p.len() {
                        if let Some(msk) = mask {
                            if msk[i] == 0.0 {
                                continue;
                            }
                        }
                        let gi = g[i] as f64 + wd * p[i] as f64;
                        let mi = BETA1 * m[i] as f64 + (1.0 - BETA1) * gi;
                        let vi = BETA2 * v[i] as f64 + (1.0 - BETA2) * gi * gi;
                        m[i] = mi as f32;
                        v[i] = vi as f32;
                        let mhat = mi / bc1;
                        let vhat = vi / bc2;
                        p[i] = (p[i] as f64 - lr * mhat / (vhat.sqrt() + EPS)) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}
