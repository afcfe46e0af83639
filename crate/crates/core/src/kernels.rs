//! Raw numeric kernels behind the graph ops.
//!
//! Plain slice loops, shaped so the hot inner loop runs over a contiguous
//! output or input row and auto-vectorizes. Convolutions accumulate in f32;
//! fully connected layers, losses, and statistics accumulate in f64.

// ── Convolution ──────────────────────────────────────────────────────────────

/// Valid (no padding) cross-correlation. `x` is NCHW, `wgt` is (CO, CI, KH, KW).
pub fn conv2d_fwd(
    x: &[f32],
    (n, ci, h, w): (usize, usize, usize, usize),
    wgt: &[f32],
    (co, kh, kw): (usize, usize, usize),
    bias: Option<&[f32]>,
    stride: usize,
) -> Vec<f32> {
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let mut out = vec![0.0f32; n * co * oh * ow];
    for in_ in 0..n {
        for oc in 0..co {
            let tile = &mut out[(in_ * co + oc) * oh * ow..][..oh * ow];
            if let Some(b) = bias {
                tile.fill(b[oc]);
            }
            for icn in 0..ci {
                let plane = &x[(in_ * ci + icn) * h * w..][..h * w];
                for ikh in 0..kh {
                    for ikw in 0..kw {
                        let wv = wgt[((oc * ci + icn) * kh + ikh) * kw + ikw];
                        for ioh in 0..oh {
                            let row = &plane[(ioh * stride + ikh) * w + ikw..];
                            let orow = &mut tile[ioh * ow..][..ow];
                            if stride == 1 {
                                for iow in 0..ow {
                                    orow[iow] += wv * row[iow];
                                }
                            } else {
                                for iow in 0..ow {
                                    orow[iow] += wv * row[iow * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of `conv2d_fwd` w.r.t. the input.
pub fn conv2d_bwd_x(
    g: &[f32],
    (n, ci, h, w): (usize, usize, usize, usize),
    wgt: &[f32],
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
) -> Vec<f32> {
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let mut dx = vec![0.0f32; n * ci * h * w];
    for in_ in 0..n {
        for oc in 0..co {
            let tile = &g[(in_ * co + oc) * oh * ow..][..oh * ow];
            for icn in 0..ci {
                let plane = &mut dx[(in_ * ci + icn) * h * w..][..h * w];
                for ikh in 0..kh {
                    for ikw in 0..kw {
                        let wv = wgt[((oc * ci + icn) * kh + ikh) * kw + ikw];
                        for ioh in 0..oh {
                            let grow = &tile[ioh * ow..][..ow];
                            let xrow = &mut plane[(ioh * stride + ikh) * w + ikw..];
                            if stride == 1 {
                                for iow in 0..ow {
                                    xrow[iow] += wv * grow[iow];
                                }
                            } else {
                                for iow in 0..ow {
                                    xrow[iow * stride] += wv * grow[iow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradients of `conv2d_fwd` w.r.t. weight and bias.
pub fn conv2d_bwd_wb(
    g: &[f32],
    x: &[f32],
    (n, ci, h, w): (usize, usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    with_bias: bool,
) -> (Vec<f32>, Option<Vec<f32>>) {
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let mut dw = vec![0.0f32; co * ci * kh * kw];
    let mut db = if with_bias { Some(vec![0.0f32; co]) } else { None };
    for in_ in 0..n {
        for oc in 0..co {
            let tile = &g[(in_ * co + oc) * oh * ow..][..oh * ow];
            if let Some(db) = db.as_mut() {
                let mut acc = 0.0f64;
                for &gv in tile {
                    acc += gv as f64;
                }
                db[oc] += acc as f32;
            }
            for icn in 0..ci {
                let plane = &x[(in_ * ci + icn) * h * w..][..h * w];
                for ikh in 0..kh {
                    for ikw in 0..kw {
                        let mut acc = 0.0f32;
                        for ioh in 0..oh {
                            let grow = &tile[ioh * ow..][..ow];
                            let xrow = &plane[(ioh * stride + ikh) * w + ikw..];
                            if stride == 1 {
                                for iow in 0..ow {
                                    acc += grow[iow] * xrow[iow];
                                }
                            } else {
                                for iow in 0..ow {
                                    acc += grow[iow] * xrow[iow * stride];
                                }
                            }
                        }
                        dw[((oc * ci + icn) * kh + ikh) * kw + ikw] += acc;
                    }
                }
            }
        }
    }
    (dw, db)
}

// ── Max pooling ──────────────────────────────────────────────────────────────

/// Non-overlapping max pooling with a square window; remainder rows and
/// columns are dropped. Returns outputs and flat argmax indices into `x`.
/// Ties resolve to the first element in row-major window order.
pub fn maxpool_fwd(
    x: &[f32],
    (n, c, h, w): (usize, usize, usize, usize),
    window: usize,
) -> (Vec<f32>, Vec<u32>) {
    debug_assert!(x.len() < u32::MAX as usize);
    let oh = h / window;
    let ow = w / window;
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut arg = vec![0u32; n * c * oh * ow];
    for plane_idx in 0..n * c {
        let plane = &x[plane_idx * h * w..][..h * w];
        let base = plane_idx * h * w;
        for ioh in 0..oh {
            for iow in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_at = 0usize;
                for dy in 0..window {
                    let row = (ioh * window + dy) * w + iow * window;
                    for dx in 0..window {
                        let v = plane[row + dx];
                        if v > best {
                            best = v;
                            best_at = base + row + dx;
                        }
                    }
                }
                out[(plane_idx * oh + ioh) * ow + iow] = best;
                arg[(plane_idx * oh + ioh) * ow + iow] = best_at as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool_bwd(g: &[f32], arg: &[u32], input_len: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; input_len];
    for (gv, &at) in g.iter().zip(arg) {
        dx[at as usize] += gv;
    }
    dx
}

// ── Fully connected ──────────────────────────────────────────────────────────

/// `y = x W^T + b` with `x` (N, FI), `w` (FO, FI). Accumulates in f64.
pub fn linear_fwd(x: &[f32], (n, fi): (usize, usize), w: &[f32], fo: usize, b: Option<&[f32]>) -> Vec<f32> {
    let mut out = vec![0.0f32; n * fo];
    for in_ in 0..n {
        let xrow = &x[in_ * fi..][..fi];
        let orow = &mut out[in_ * fo..][..fo];
        for of in 0..fo {
            let wrow = &w[of * fi..][..fi];
            let mut acc = match b {
                Some(b) => b[of] as f64,
                None => 0.0,
            };
            for i in 0..fi {
                acc += xrow[i] as f64 * wrow[i] as f64;
            }
            orow[of] = acc as f32;
        }
    }
    out
}

/// Gradients of `linear_fwd` w.r.t. input, weight, and bias.
pub fn linear_bwd(
    g: &[f32],
    x: &[f32],
    (n, fi): (usize, usize),
    w: &[f32],
    fo: usize,
    with_bias: bool,
) -> (Vec<f32>, Vec<f32>, Option<Vec<f32>>) {
    let mut dx64 = vec![0.0f64; n * fi];
    let mut dw64 = vec![0.0f64; fo * fi];
    let mut db64 = if with_bias { Some(vec![0.0f64; fo]) } else { None };
    for in_ in 0..n {
        let grow = &g[in_ * fo..][..fo];
        let xrow = &x[in_ * fi..][..fi];
        let dxrow = &mut dx64[in_ * fi..][..fi];
        for of in 0..fo {
            let gv = grow[of] as f64;
            let wrow = &w[of * fi..][..fi];
            let dwrow = &mut dw64[of * fi..][..fi];
            for i in 0..fi {
                dxrow[i] += gv * wrow[i] as f64;
                dwrow[i] += gv * xrow[i] as f64;
            }
            if let Some(db) = db64.as_mut() {
                db[of] += gv;
            }
        }
    }
    let dx = dx64.iter().map(|&v| v as f32).collect();
    let dw = dw64.iter().map(|&v| v as f32).collect();
    let db = db64.map(|v| v.iter().map(|&x| x as f32).collect());
    (dx, dw, db)
}

// ── Matrix products (attention sized) ────────────────────────────────────────

/// `c = a b` with `a` (M, K), `b` (K, N).
pub fn matmul_nn(a: &[f32], (m, k): (usize, usize), b: &[f32], n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..][..n];
        for l in 0..k {
            let av = a[i * k + l];
            let brow = &b[l * n..][..n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// `c = a b^T` with `a` (M, K), `b` (N, K).
pub fn matmul_nt(a: &[f32], (m, k): (usize, usize), b: &[f32], n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..][..k];
        let crow = &mut c[i * n..][..n];
        for j in 0..n {
            let brow = &b[j * k..][..k];
            let mut acc = 0.0f32;
            for l in 0..k {
                acc += arow[l] * brow[l];
            }
            crow[j] = acc;
        }
    }
    c
}

/// `c = a^T b` with `a` (M, K), `b` (M, N); result (K, N).
pub fn matmul_tn(a: &[f32], (m, k): (usize, usize), b: &[f32], n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; k * n];
    for i in 0..m {
        let arow = &a[i * k..][..k];
        let brow = &b[i * n..][..n];
        for l in 0..k {
            let av = arow[l];
            let crow = &mut c[l * n..][..n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

// ── Scalar math ──────────────────────────────────────────────────────────────

/// Error function, fractional error below 1.3e-7.
pub fn erf(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
            .exp();
    if x >= 0.0 {
        1.0 - poly
    } else {
        poly - 1.0
    }
}

/// Numerically stable log(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
