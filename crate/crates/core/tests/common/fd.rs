//! Finite-difference gradient oracle for the graph engine.
//!
//! Every scenario pairs a graph construction with an independent f64
//! reference forward written as naive loops in this file. Three things are
//! asserted per scenario: the engine forward agrees with the reference, and
//! the tape's analytic gradient for every parameter element agrees with a
//! central difference (h = 1e-3) of the reference within 1e-3 relative
//! error, measured as |num - ana| / max(1, |num| + |ana|).
//!
//! The scenarios live here rather than in the `gradients` target so that
//! the `acceptance` target can run the identical checks.

use zootwin_core::graph::{Activation, Graph, NodeId};
use zootwin_core::rng::{self, tag};
use zootwin_core::Tensor;

const H: f64 = 1e-3;
const TOL: f64 = 1e-3;

/// All finite-difference scenarios, named for reporting. Panics on failure.
pub const SCENARIOS: &[(&str, fn())] = &[
    ("conv2d_with_bias_stride_one", conv2d_with_bias_stride_one),
    ("conv2d_no_bias_stride_two", conv2d_no_bias_stride_two),
    ("linear_with_bias", linear_with_bias),
    ("maxpool_routes_to_window_maxima", maxpool_routes_to_window_maxima),
    ("every_activation", every_activation),
    ("cross_entropy_gradients", cross_entropy_gradients),
    ("elementwise_chain", elementwise_chain),
    ("exp_log_sqrt_softplus_chain", exp_log_sqrt_softplus_chain),
    ("layer_norm_full", layer_norm_full),
    ("softmax_rows_full", softmax_rows_full),
    ("matmul_both_layouts", matmul_both_layouts),
    ("slices_and_concats", slices_and_concats),
    ("row_normalize_and_nt_xent", row_normalize_and_nt_xent),
    ("variational_layer_loss_path", variational_layer_loss_path),
];

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs() + b.abs())
}

fn randn(seed: u64, n: usize, scale: f32) -> Vec<f32> {
    let mut r = rng::stream(seed, &[tag::DATA]);
    (0..n).map(|_| rng::normal(&mut r) * scale).collect()
}

fn to64(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&v| v as f64).collect()
}

/// Runs one scenario: engine forward + backward against the f64 reference.
fn check<E, O>(name: &str, params: &[Tensor], engine: E, reference: O)
where
    E: Fn(&mut Graph, &[NodeId]) -> NodeId,
    O: Fn(&[Vec<f64>]) -> f64,
{
    let p64: Vec<Vec<f64>> = params.iter().map(|t| to64(t.data())).collect();
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = engine(&mut g, &ids);
    let engine_val = g.value(loss).item().unwrap() as f64;
    let ref_val = reference(&p64);
    assert!(
        rel(engine_val, ref_val) < 1e-4,
        "{name}: forward {engine_val} vs reference {ref_val}"
    );
    let grads = g.backward(loss).unwrap();
    for (k, id) in ids.iter().enumerate() {
        let ana = grads.wrt(*id).unwrap_or_else(|| panic!("{name}: no grad for param {k}"));
        for i in 0..ana.numel() {
            let mut plus = p64.clone();
            plus[k][i] += H;
            let mut minus = p64.clone();
            minus[k][i] -= H;
            let num = (reference(&plus) - reference(&minus)) / (2.0 * H);
            let a = ana.data()[i] as f64;
            assert!(
                rel(num, a) < TOL,
                "{name}: param {k} elem {i}: analytic {a} vs numeric {num}"
            );
        }
    }
}

// ── f64 reference ops ────────────────────────────────────────────────────────

fn ref_conv2d(
    x: &[f64],
    (n, ci, h, w): (usize, usize, usize, usize),
    wgt: &[f64],
    (co, kh, kw): (usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
) -> Vec<f64> {
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for in_ in 0..n {
        for oc in 0..co {
            for ioh in 0..oh {
                for iow in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[oc]);
                    for icn in 0..ci {
                        for ikh in 0..kh {
                            for ikw in 0..kw {
                                let xv = x[((in_ * ci + icn) * h + ioh * stride + ikh) * w
                                    + iow * stride
                                    + ikw];
                                let wv = wgt[((oc * ci + icn) * kh + ikh) * kw + ikw];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((in_ * co + oc) * oh + ioh) * ow + iow] = acc;
                }
            }
        }
    }
    out
}

fn ref_linear(x: &[f64], (n, fi): (usize, usize), w: &[f64], fo: usize, b: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; n * fo];
    for i in 0..n {
        for o in 0..fo {
            let mut acc = b.map_or(0.0, |b| b[o]);
            for l in 0..fi {
                acc += x[i * fi + l] * w[o * fi + l];
            }
            out[i * fo + o] = acc;
        }
    }
    out
}

fn ref_maxpool(x: &[f64], (n, c, h, w): (usize, usize, usize, usize), window: usize) -> Vec<f64> {
    let oh = h / window;
    let ow = w / window;
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        for ioh in 0..oh {
            for iow in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..window {
                    for dx in 0..window {
                        let v = x[(p * h + ioh * window + dy) * w + iow * window + dx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(p * oh + ioh) * ow + iow] = best;
            }
        }
    }
    out
}

/// Abramowitz-Stegun 7.1.26, a different fit than the engine uses.
fn ref_erf(x: f64) -> f64 {
    let s = if x < 0.0 { -1.0 } else { 1.0 };
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * z);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    s * (1.0 - poly * (-z * z).exp())
}

fn ref_act(kind: Activation, v: f64) -> f64 {
    match kind {
        Activation::Tanh => v.tanh(),
        Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        Activation::Relu => v.max(0.0),
        Activation::Gelu => v * 0.5 * (1.0 + ref_erf(v / std::f64::consts::SQRT_2)),
    }
}

fn ref_cross_entropy(logits: &[f64], classes: usize, labels: &[u32]) -> f64 {
    let mut total = 0.0;
    for (row, &label) in logits.chunks_exact(classes).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        total += max + z.ln() - row[label as usize];
    }
    total / labels.len() as f64
}

fn ref_layer_norm(x: &[f64], (r, c): (usize, usize), gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x[i * c..][..c];
        let mean: f64 = row.iter().sum::<f64>() / c as f64;
        let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..c {
            out[i * c + j] = (row[j] - mean) * inv * gamma[j] + beta[j];
        }
    }
    out
}

fn ref_softmax_rows(x: &[f64], (r, c): (usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x[i * c..][..c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        for j in 0..c {
            out[i * c + j] = (row[j] - max).exp() / z;
        }
    }
    out
}

fn ref_weighted_sum(xs: &[f64], weights: &[f32]) -> f64 {
    xs.iter().zip(weights).map(|(&v, &w)| v * w as f64).sum()
}

// ── Scenarios ────────────────────────────────────────────────────────────────

pub fn conv2d_with_bias_stride_one() {
    let x = Tensor::new(vec![2, 2, 5, 5], randn(1, 100, 1.0)).unwrap();
    let w = Tensor::new(vec![3, 2, 2, 2], randn(2, 24, 0.5)).unwrap();
    let b = Tensor::new(vec![3], randn(3, 3, 0.5)).unwrap();
    let mix = randn(4, 2 * 3 * 4 * 4, 1.0);
    let mix_e = mix.clone();
    check(
        "conv2d stride 1",
        &[x, w, b],
        move |g, p| {
            let y = g.conv2d(p[0], p[1], Some(p[2]), 1).unwrap();
            let m = g.leaf(Tensor::new(vec![2, 3, 4, 4], mix_e.clone()).unwrap());
            let prod = g.mul(y, m).unwrap();
            g.sum(prod)
        },
        move |p| {
            let y = ref_conv2d(&p[0], (2, 2, 5, 5), &p[1], (3, 2, 2), Some(&p[2]), 1);
            ref_weighted_sum(&y, &mix)
        },
    );
}

pub fn conv2d_no_bias_stride_two() {
    let x = Tensor::new(vec![1, 1, 6, 6], randn(5, 36, 1.0)).unwrap();
    let w = Tensor::new(vec![2, 1, 3, 3], randn(6, 18, 0.5)).unwrap();
    let mix = randn(7, 2 * 2 * 2, 1.0);
    let mix_e = mix.clone();
    check(
        "conv2d stride 2",
        &[x, w],
        move |g, p| {
            let y = g.conv2d(p[0], p[1], None, 2).unwrap();
            let m = g.leaf(Tensor::new(vec![1, 2, 2, 2], mix_e.clone()).unwrap());
            let prod = g.mul(y, m).unwrap();
            g.sum(prod)
        },
        move |p| {
            let y = ref_conv2d(&p[0], (1, 1, 6, 6), &p[1], (2, 3, 3), None, 2);
            ref_weighted_sum(&y, &mix)
        },
    );
}

pub fn linear_with_bias() {
    let x = Tensor::new(vec![3, 4], randn(8, 12, 1.0)).unwrap();
    let w = Tensor::new(vec![5, 4], randn(9, 20, 0.5)).unwrap();
    let b = Tensor::new(vec![5], randn(10, 5, 0.5)).unwrap();
    let mix = randn(11, 15, 1.0);
    let mix_e = mix.clone();
    check(
        "linear",
        &[x, w, b],
        move |g, p| {
            let y = g.linear(p[0], p[1], Some(p[2])).unwrap();
            let m = g.leaf(Tensor::new(vec![3, 5], mix_e.clone()).unwrap());
            let prod = g.mul(y, m).unwrap();
            g.sum(prod)
        },
        move |p| {
            let y = ref_linear(&p[0], (3, 4), &p[1], 5, Some(&p[2]));
            ref_weighted_sum(&y, &mix)
        },
    );
}

pub fn maxpool_routes_to_window_maxima() {
    // Spread values far apart so h = 1e-3 never flips a window maximum.
    let mut vals = randn(12, 2 * 6 * 6, 1.0);
    for (i, v) in vals.iter_mut().enumerate() {
        *v = *v * 0.01 + (i as f32 % 9.0) * 0.5;
    }
    let x = Tensor::new(vec![1, 2, 6, 6], vals).unwrap();
    let mix = randn(13, 2 * 3 * 3, 1.0);
    let mix_e = mix.clone();
    check(
        "maxpool2d",
        &[x],
        move |g, p| {
            let y = g.maxpool2d(p[0], 2).unwrap();
            let m = g.leaf(Tensor::new(vec![1, 2, 3, 3], mix_e.clone()).unwrap());
            let prod = g.mul(y, m).unwrap();
            g.sum(prod)
        },
        move |p| {
            let y = ref_maxpool(&p[0], (1, 2, 6, 6), 2);
            ref_weighted_sum(&y, &mix)
        },
    );
}

pub fn every_activation() {
    for (kind, seed) in [
        (Activation::Tanh, 20),
        (Activation::Sigmoid, 21),
        (Activation::Relu, 22),
        (Activation::Gelu, 23),
    ] {
        // Keep relu inputs away from the kink at zero.
        let mut vals = randn(seed, 9, 1.0);
        if kind == Activation::Relu {
            for v in vals.iter_mut() {
                if v.abs() < 0.1 {
                    *v += 0.3;
                }
            }
        }
        let x = Tensor::new(vec![9], vals).unwrap();
        let mix = randn(seed + 100, 9, 1.0);
        let mix_e = mix.clone();
        check(
            &format!("activation {kind:?}"),
            &[x],
            move |g, p| {
                let y = g.activation(p[0], kind);
                let m = g.leaf(Tensor::new(vec![9], mix_e.clone()).unwrap());
                let prod = g.mul(y, m).unwrap();
                g.sum(prod)
            },
            move |p| p[0].iter().zip(&mix).map(|(&v, &w)| ref_act(kind, v) * w as f64).sum(),
        );
    }
}

pub fn cross_entropy_gradients() {
    let logits = Tensor::new(vec![4, 6], randn(30, 24, 2.0)).unwrap();
    let labels = [0u32, 3, 5, 2];
    check(
        "cross_entropy",
        &[logits],
        move |g, p| g.cross_entropy(p[0], &labels).unwrap(),
        move |p| ref_cross_entropy(&p[0], 6, &labels),
    );
}

pub fn elementwise_chain() {
    // sum( (a * b - c) / (c^2 + 1.5) ) exercises mul, sub, div, square,
    // add_scalar together.
    let a = Tensor::new(vec![6], randn(40, 6, 1.0)).unwrap();
    let b = Tensor::new(vec![6], randn(41, 6, 1.0)).unwrap();
    let c = Tensor::new(vec![6], randn(42, 6, 1.0)).unwrap();
    check(
        "elementwise chain",
        &[a, b, c],
        |g, p| {
            let ab = g.mul(p[0], p[1]).unwrap();
            let num = g.sub(ab, p[2]).unwrap();
            let c2 = g.square(p[2]);
            let den = g.add_scalar(c2, 1.5);
            let q = g.div(num, den).unwrap();
            g.sum(q)
        },
        |p| {
            (0..6)
                .map(|i| (p[0][i] * p[1][i] - p[2][i]) / (p[2][i] * p[2][i] + 1.5))
                .sum()
        },
    );
}

pub fn exp_log_sqrt_softplus_chain() {
    // mean( softplus(x) + log(exp(x) + 1.2) + sqrt(x^2 + 0.7) )
    let x = Tensor::new(vec![5], randn(50, 5, 1.5)).unwrap();
    check(
        "exp log sqrt softplus",
        &[x],
        |g, p| {
            let sp = g.softplus(p[0]);
            let e = g.exp(p[0]);
            let e1 = g.add_scalar(e, 1.2);
            let l = g.log(e1);
            let x2 = g.square(p[0]);
            let x2e = g.add_scalar(x2, 0.7);
            let r = g.sqrt(x2e);
            let s1 = g.add(sp, l).unwrap();
            let s2 = g.add(s1, r).unwrap();
            g.mean(s2)
        },
        |p| {
            let n = p[0].len() as f64;
            p[0]
                .iter()
                .map(|&v| {
                    let sp = if v > 0.0 { v + (-v).exp().ln_1p() } else { v.exp().ln_1p() };
                    sp + (v.exp() + 1.2).ln() + (v * v + 0.7).sqrt()
                })
                .sum::<f64>()
                / n
        },
    );
}

pub fn layer_norm_full() {
    let x = Tensor::new(vec![3, 6], randn(60, 18, 1.0)).unwrap();
    let gamma = Tensor::new(vec![6], randn(61, 6, 0.5)).unwrap();
    let beta = Tensor::new(vec![6], randn(62, 6, 0.5)).unwrap();
    let mix = randn(63, 18, 1.0);
    let mix_e = mix.clone();
    check(
        "layer_norm",
        &[x, gamma, beta],
        move |g, p| {
            let y = g.layer_norm(p[0], p[1], p[2], 1e-5).unwrap();
            let m = g.leaf(Tensor::new(vec![3, 6], mix_e.clone()).unwrap());
            let prod = g.mul(y, m).unwrap();
            g.sum(prod)
        },
        move |p| {
            let y = ref_layer_norm(&p[0], (3, 6), &p[1], &p[2], 1e-5);
            ref_weighted_sum(&y, &mix)
        },
    );
}

pub fn softmax_rows_full() {
    let x = Tensor::new(vec![3, 5], randn(70, 15, 1.5)).unwrap();
    let mix = randn(71, 15, 1.0);
    let mix_e = mix.clone();
    check(
        "softmax_rows",
        &[x],
        move |g, p| {
            let y = g.softmax_rows(p[0]).unwrap();
            let m = g.leaf(Tensor::new(vec![3, 5], mix_e.clone()).unwrap());
            let prod = g.mul(y, m).unwrap();
            g.sum(prod)
        },
        move |p| {
            let y = ref_softmax_rows(&p[0], (3, 5));
            ref_weighted_sum(&y, &mix)
        },
    );
}

pub fn matmul_both_layouts() {
    let a = Tensor::new(vec![3, 4], randn(80, 12, 1.0)).unwrap();
    let b = Tensor::new(vec![4, 5], randn(81, 20, 1.0)).unwrap();
    let bt = Tensor::new(vec![5, 4], randn(82, 20, 1.0)).unwrap();
    let mix = randn(83, 15, 1.0);
    let mix_nn = mix.clone();
    let mix_nt = mix.clone();
    let mix_r1 = mix.clone();
    check(
        "matmul nn",
        &[a.clone(), b],
        move |g, p| {
            let y = g.matmul(p[0], p[1], false).unwrap();
            let m = g.leaf(Tensor::new(vec![3, 5], mix_nn.clone()).unwrap());
            let prod = g.mul(y, m).unwrap();
            g.sum(prod)
        },
        move |p| {
            let mut y = vec![0.0; 15];
            for i in 0..3 {
                for j in 0..5 {
                    for l in 0..4 {
                        y[i * 5 + j] += p[0][i * 4 + l] * p[1][l * 5 + j];
                    }
                }
            }
            ref_weighted_sum(&y, &mix_r1)
        },
    );
    let mix_r2 = mix.clone();
    check(
        "matmul nt",
        &[a, bt],
        move |g, p| {
            let y = g.matmul(p[0], p[1], true).unwrap();
            let m = g.leaf(Tensor::new(vec![3, 5], mix_nt.clone()).unwrap());
            let prod = g.mul(y, m).unwrap();
            g.sum(prod)
        },
        move |p| {
            let mut y = vec![0.0; 15];
            for i in 0..3 {
                for j in 0..5 {
                    for l in 0..4 {
                        y[i * 5 + j] += p[0][i * 4 + l] * p[1][j * 4 + l];
                    }
                }
            }
            ref_weighted_sum(&y, &mix_r2)
        },
    );
}

pub fn slices_and_concats() {
    let a = Tensor::new(vec![2, 3], randn(90, 6, 1.0)).unwrap();
    let b = Tensor::new(vec![2, 3], randn(91, 6, 1.0)).unwrap();
    let mix = randn(92, 4, 1.0);
    let mix_e = mix.clone();
    check(
        "slice and concat",
        &[a, b],
        move |g, p| {
            // Stack rows, take the middle rows, then column-slice.
            let cat = g.concat_rows(&[p[0], p[1]]).unwrap();
            let mid = g.slice_rows(cat, 1, 2).unwrap();
            let left = g.slice_cols(mid, 0, 1).unwrap();
            let right = g.slice_cols(mid, 1, 2).unwrap();
            let back = g.concat_cols(&[right, left]).unwrap();
            let m = g.leaf(Tensor::new(vec![2, 2], mix_e[..4].to_vec()).unwrap());
            let narrowed = g.slice_cols(back, 1, 2).unwrap();
            let prod = g.mul(narrowed, m).unwrap();
            g.sum(prod)
        },
        move |p| {
            // Rows 1..3 of [a; b] are [a[1], b[0]]; columns reordered to
            // (1, 2, 0), then columns 1..3 selected: (2, 0).
            let rows = [&p[0][3..6], &p[1][0..3]];
            let mut y = Vec::new();
            for row in rows {
                y.push(row[2]);
                y.push(row[0]);
            }
            ref_weighted_sum(&y, &mix[..4])
        },
    );
}

pub fn row_normalize_and_nt_xent() {
    // Four embeddings (two pairs) through cosine similarity into the
    // contrastive loss, everything differentiated down to the embeddings.
    let z = Tensor::new(vec![4, 3], randn(95, 12, 1.0)).unwrap();
    let temp = 0.5f32;
    check(
        "nt_xent pipeline",
        &[z],
        move |g, p| {
            let zn = g.row_normalize(p[0]).unwrap();
            let sim = g.matmul(zn, zn, true).unwrap();
            g.nt_xent(sim, temp).unwrap()
        },
        move |p| {
            let rows: Vec<Vec<f64>> = p[0]
                .chunks_exact(3)
                .map(|r| {
                    let n = r.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-12;
                    r.iter().map(|v| v / n).collect()
                })
                .collect();
            let t = temp as f64;
            let sim = |i: usize, k: usize| -> f64 {
                rows[i].iter().zip(&rows[k]).map(|(a, b)| a * b).sum()
            };
            let mut total = 0.0;
            for i in 0..4 {
                let partner = i ^ 1;
                let mut z = 0.0;
                for k in 0..4 {
                    if k != i {
                        z += (sim(i, k) / t).exp();
                    }
                }
                total += z.ln() - sim(i, partner) / t;
            }
            total
        },
    );
}

pub fn variational_layer_loss_path() {
    // Mean path conv(x, theta) + bias, variance path conv(x^2, exp(ls)),
    // output mean + sqrt(var + eps) * noise, cross entropy plus the
    // approximate KL in log alpha. Gradients flow to theta, bias, and ls.
    const K1: f32 = 0.63576;
    const K2: f32 = 1.87320;
    const K3: f32 = 1.48695;
    let xs = randn(96, 16, 1.0);
    let noise = randn(97, 9, 1.0);
    let theta = Tensor::new(vec![1, 1, 2, 2], randn(98, 4, 0.8)).unwrap();
    let bias = Tensor::new(vec![1], randn(99, 1, 0.5)).unwrap();
    let ls = Tensor::new(vec![1, 1, 2, 2], randn(100, 4, 0.5)).unwrap();
    let label = [4u32];
    let kl_coeff = 0.05f32;
    let (xs_e, noise_e) = (xs.clone(), noise.clone());
    check(
        "variational layer",
        &[theta, bias, ls],
        move |g, p| {
            let x = g.leaf(Tensor::new(vec![1, 1, 4, 4], xs_e.clone()).unwrap());
            let x2 = {
                let sq: Vec<f32> = xs_e.iter().map(|&v| v * v).collect();
                g.leaf(Tensor::new(vec![1, 1, 4, 4], sq).unwrap())
            };
            let mean = g.conv2d(x, p[0], Some(p[1]), 1).unwrap();
            let sigma2 = g.exp(p[2]);
            let var = g.conv2d(x2, sigma2, None, 1).unwrap();
            let var_eps = g.add_scalar(var, 1e-8);
            let std = g.sqrt(var_eps);
            let nz = g.leaf(Tensor::new(vec![1, 1, 3, 3], noise_e.clone()).unwrap());
            let jitter = g.mul(std, nz).unwrap();
            let out = g.add(mean, jitter).unwrap();
            let logits = g.reshape(out, vec![1, 9]).unwrap();
            let ce = g.cross_entropy(logits, &label).unwrap();
            // log alpha = ls - log(theta^2 + 1e-12)
            let th2 = g.square(p[0]);
            let th2e = g.add_scalar(th2, 1e-12);
            let logth2 = g.log(th2e);
            let la = g.sub(p[2], logth2).unwrap();
            // kl = k1 + 0.5 softplus(-la) - k1 sigmoid(k2 + k3 la)
            let nla = g.mul_scalar(la, -1.0);
            let sp = g.softplus(nla);
            let half_sp = g.mul_scalar(sp, 0.5);
            let k3la = g.mul_scalar(la, K3);
            let inner = g.add_scalar(k3la, K2);
            let sig = g.activation(inner, Activation::Sigmoid);
            let k1sig = g.mul_scalar(sig, K1);
            let diff = g.sub(half_sp, k1sig).unwrap();
            let shifted = g.add_scalar(diff, K1);
            let kl = g.sum(shifted);
            let kl_scaled = g.mul_scalar(kl, kl_coeff);
            g.add(ce, kl_scaled).unwrap()
        },
        move |p| {
            let x64 = to64(&xs);
            let x2: Vec<f64> = x64.iter().map(|v| v * v).collect();
            let mean = ref_conv2d(&x64, (1, 1, 4, 4), &p[0], (1, 2, 2), Some(&p[1]), 1);
            let sig2: Vec<f64> = p[2].iter().map(|&v| v.exp()).collect();
            let var = ref_conv2d(&x2, (1, 1, 4, 4), &sig2, (1, 2, 2), None, 1);
            let logits: Vec<f64> = mean
                .iter()
                .zip(&var)
                .zip(&noise)
                .map(|((&m, &v), &n)| m + (v + 1e-8).sqrt() * n as f64)
                .collect();
            let ce = ref_cross_entropy(&logits, 9, &label);
            let mut kl = 0.0;
            for i in 0..4 {
                let la = p[2][i] - (p[0][i] * p[0][i] + 1e-12).ln();
                let sp = if -la > 0.0 { -la + la.exp().ln_1p() } else { (-la).exp().ln_1p() };
                let sig = 1.0 / (1.0 + (-(K2 as f64 + K3 as f64 * la)).exp());
                kl += K1 as f64 + 0.5 * sp - K1 as f64 * sig;
            }
            ce + kl_coeff as f64 * kl
        },
    );
}

pub fn deterministic_backward_is_bit_identical() {
    let run = || {
        let x = Tensor::new(vec![2, 1, 6, 6], randn(110, 72, 1.0)).unwrap();
        let w = Tensor::new(vec![2, 1, 3, 3], randn(111, 18, 0.5)).unwrap();
        let mut g = Graph::new();
        let xp = g.param(x);
        let wp = g.param(w);
        let y = g.conv2d(xp, wp, None, 1).unwrap();
        let a = g.activation(y, Activation::Tanh);
        let loss = g.mean(a);
        let grads = g.backward(loss).unwrap();
        (
            g.value(loss).data().to_vec(),
            grads.wrt(wp).unwrap().data().to_vec(),
        )
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
}
