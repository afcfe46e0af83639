//! Flattening model states into fixed-width token sequences and back, the
//! population statistics that normalize them, and the stochastic view
//! augmentations used by the self-supervised objective.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::rng;
use crate::tensor::Tensor;

/// Log-alpha value assigned to bias entries. Biases carry no dropout state
/// and are never pruned, so they sit far below any pruning threshold.
pub const ALPHA_BIAS: f32 = -20.0;

/// One contiguous run of flattened parameters belonging to a single layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// Index into the owning layer list (not the flat position).
    pub layer: usize,
    /// "conv1.weight", "conv1.bias", ...
    pub name: String,
    /// First flat position of this run.
    pub start: usize,
    pub len: usize,
}

/// Fixed geometry of the token view of one architecture: every model state of
/// that architecture flattens to the same positions, tokens, and boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLayout {
    pub d_tok: usize,
    /// Number of tokens (final one zero-padded).
    pub seq_len: usize,
    /// Real parameters: weights and biases, before padding.
    pub n_params: usize,
    pub n_layers: usize,
    /// Covers 0..n_params contiguously, in layer order, weight before bias.
    pub segments: Vec<Segment>,
}

impl TokenLayout {
    pub fn padded_len(&self) -> usize {
        self.seq_len * self.d_tok
    }

    pub fn pad_len(&self) -> usize {
        self.padded_len() - self.n_params
    }

    /// Layer index owning each flat position; `None` on the padded tail.
    pub fn position_layers(&self) -> Vec<Option<usize>> {
        let mut owners = vec![None; self.padded_len()];
        for seg in &self.segments {
            for slot in &mut owners[seg.start..seg.start + seg.len] {
                *slot = Some(seg.layer);
            }
        }
        owners
    }

    /// 1.0 on real positions, 0.0 on the padded tail, shaped `[S, d_tok]`.
    pub fn pad_mask(&self) -> Tensor {
        let mut data = vec![0.0f32; self.padded_len()];
        data[..self.n_params].fill(1.0);
        Tensor::new(vec![self.seq_len, self.d_tok], data).expect("layout dims")
    }

    /// Tokens that consist of padding only; such tokens are masked out of
    /// attention entirely.
    pub fn fully_padded_tokens(&self) -> Vec<bool> {
        (0..self.seq_len).map(|t| t * self.d_tok >= self.n_params).collect()
    }
}

/// Derives the token geometry of a model's architecture.
pub fn token_layout(model: &ModelState, d_tok: usize) -> Result<TokenLayout> {
    if d_tok == 0 {
        return Err(Error::Config("token width must be at least 1".into()));
    }
    let mut segments = Vec::with_capacity(model.layers.len() * 2);
    let mut pos = 0;
    for (li, layer) in model.layers.iter().enumerate() {
        for (suffix, len) in [("weight", layer.weight.numel()), ("bias", layer.bias.numel())] {
            segments.push(Segment {
                layer: li,
                name: format!("{}.{suffix}", layer.name),
                start: pos,
                len,
            });
            pos += len;
        }
    }
    if pos == 0 {
        return Err(Error::Config("model has no parameters to tokenize".into()));
    }
    Ok(TokenLayout {
        d_tok,
        seq_len: pos.div_ceil(d_tok),
        n_params: pos,
        n_layers: model.layers.len(),
        segments,
    })
}

/// Row-major flatten of all parameters in layer order, weight before bias.
pub fn flatten_weights(model: &ModelState) -> Vec<f32> {
    let mut flat = Vec::new();
    for layer in &model.layers {
        flat.extend_from_slice(layer.weight.data());
        flat.extend_from_slice(layer.bias.data());
    }
    flat
}

/// Flattens a per-layer log-alpha map into the same positions as
/// [`flatten_weights`]; bias positions receive the [`ALPHA_BIAS`] sentinel.
pub fn flatten_alpha(model: &ModelState, log_alpha: &[Tensor]) -> Result<Vec<f32>> {
    if log_alpha.len() != model.layers.len() {
        return Err(Error::Shape(format!(
            "{} alpha maps for {} layers",
            log_alpha.len(),
            model.layers.len()
        )));
    }
    let mut flat = Vec::new();
    for (layer, alpha) in model.layers.iter().zip(log_alpha) {
        if alpha.dims() != layer.weight.dims() {
            return Err(Error::Shape(format!(
                "alpha map {:?} for weight {:?} in layer {}",
                alpha.dims(),
                layer.weight.dims(),
                layer.name
            )));
        }
        flat.extend_from_slice(alpha.data());
        flat.extend(std::iter::repeat_n(ALPHA_BIAS, layer.bias.numel()));
    }
    Ok(flat)
}

fn to_tokens(mut flat: Vec<f32>, layout: &TokenLayout) -> Tensor {
    flat.resize(layout.padded_len(), 0.0);
    Tensor::new(vec![layout.seq_len, layout.d_tok], flat).expect("layout dims")
}

/// Flattens a model and its log-alpha map into aligned `[S, d_tok]` token
/// grids (weights, alphas) plus the shared layout.
pub fn tokenize(
    model: &ModelState,
    log_alpha: &[Tensor],
    d_tok: usize,
) -> Result<(Tensor, Tensor, TokenLayout)> {
    let layout = token_layout(model, d_tok)?;
    let w = to_tokens(flatten_weights(model), &layout);
    let a = to_tokens(flatten_alpha(model, log_alpha)?, &layout);
    Ok((w, a, layout))
}

/// Strips the padded tail off a token grid, recovering the flat parameters.
pub fn detokenize(tokens: &Tensor, layout: &TokenLayout) -> Result<Vec<f32>> {
    if tokens.dims() != [layout.seq_len, layout.d_tok] {
        return Err(Error::Shape(format!(
            "token grid {:?}, layout expects [{}, {}]",
            tokens.dims(),
            layout.seq_len,
            layout.d_tok
        )));
    }
    Ok(tokens.data()[..layout.n_params].to_vec())
}

/// Writes a flat parameter vector back into a model, inverse of
/// [`flatten_weights`].
pub fn write_flat(model: &mut ModelState, flat: &[f32]) -> Result<()> {
    let expected: usize =
        model.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum();
    if flat.len() != expected {
        return Err(Error::Shape(format!(
            "{} flat values for {} parameters",
            flat.len(),
            expected
        )));
    }
    let mut pos = 0;
    for layer in &mut model.layers {
        for tensor in [&mut layer.weight, &mut layer.bias] {
            let n = tensor.numel();
            tensor.data_mut().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
    }
    Ok(())
}

/// Per-layer mean and standard deviation of flattened parameters across a
/// population. The deviation is floored so normalization never divides by a
/// degenerate spread.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-6;

/// Accumulates [`LayerStats`] over flat parameter vectors (the training
/// split's states).
pub fn layer_stats<'a, I>(flats: I, layout: &TokenLayout) -> Result<LayerStats>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    let l = layout.n_layers;
    let mut count = vec![0u64; l];
    let mut sum = vec![0.0f64; l];
    let mut sq = vec![0.0f64; l];
    let mut samples = 0usize;
    for flat in flats {
        if flat.len() != layout.n_params {
            return Err(Error::Shape(format!(
                "flat vector of {} values, layout has {}",
                flat.len(),
                layout.n_params
            )));
        }
        samples += 1;
        for seg in &layout.segments {
            for &v in &flat[seg.start..seg.start + seg.len] {
                count[seg.layer] += 1;
                sum[seg.layer] += v as f64;
                sq[seg.layer] += v as f64 * v as f64;
            }
        }
    }
    if samples == 0 {
        return Err(Error::Config("layer statistics over an empty population".into()));
    }
    let mut mean = Vec::with_capacity(l);
    let mut std = Vec::with_capacity(l);
    for i in 0..l {
        let n = count[i].max(1) as f64;
        let m = sum[i] / n;
        let var = (sq[i] / n - m * m).max(0.0);
        mean.push(m);
        std.push(var.sqrt().max(STD_FLOOR));
    }
    Ok(LayerStats { mean, std })
}

/// Per-position `1/sigma_l^2` grid for the normalized reconstruction loss;
/// zero on the padded tail so padding never contributes.
pub fn inv_var_map(stats: &LayerStats, layout: &TokenLayout) -> Result<Tensor> {
    if stats.std.len() != layout.n_layers {
        return Err(Error::Shape(format!(
            "stats over {} layers, layout has {}",
            stats.std.len(),
            layout.n_layers
        )));
    }
    let mut data = vec![0.0f32; layout.padded_len()];
    for seg in &layout.segments {
        let iv = (1.0 / (stats.std[seg.layer] * stats.std[seg.layer])) as f32;
        data[seg.start..seg.start + seg.len].fill(iv);
    }
    Tensor::new(vec![layout.seq_len, layout.d_tok], data)
}

/// Per-position noise deviation `gamma * sigma_l`; zero on the padded tail.
pub fn noise_std_map(stats: &LayerStats, layout: &TokenLayout, gamma: f32) -> Result<Vec<f32>> {
    if stats.std.len() != layout.n_layers {
        return Err(Error::Shape(format!(
            "stats over {} layers, layout has {}",
            stats.std.len(),
            layout.n_layers
        )));
    }
    let mut data = vec![0.0f32; layout.padded_len()];
    for seg in &layout.segments {
        data[seg.start..seg.start + seg.len].fill(gamma * stats.std[seg.layer] as f32);
    }
    Ok(data)
}

/// Draws one stochastic view of a (weights, alphas) token pair: Gaussian
/// noise scaled per layer on the weight grid, then a fixed count of token
/// rows erased to zero in both grids jointly. Alphas receive no noise.
///
/// Consumes the stream in a frozen order: one normal draw per grid position,
/// then one shuffle for the erased-row choice.
pub fn augment(
    w: &Tensor,
    alpha: &Tensor,
    layout: &TokenLayout,
    noise_std: &[f32],
    rho: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor)> {
    let dims = [layout.seq_len, layout.d_tok];
    if w.dims() != dims || alpha.dims() != dims {
        return Err(Error::Shape(format!(
            "augment on grids {:?}/{:?}, layout expects {:?}",
            w.dims(),
            alpha.dims(),
            dims
        )));
    }
    if noise_std.len() != layout.padded_len() {
        return Err(Error::Shape(format!(
            "noise map of {} values for {} positions",
            noise_std.len(),
            layout.padded_len()
        )));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("erasing fraction {rho} outside [0, 1]")));
    }
    let mut wv = w.clone();
    let mut av = alpha.clone();
    for (x, &std) in wv.data_mut().iter_mut().zip(noise_std) {
        *x += std * rng::normal(rng);
    }
    let erase = ((rho * layout.seq_len as f64).round() as usize).min(layout.seq_len);
    let mut order: Vec<usize> = (0..layout.seq_len).collect();
    rng::shuffle(rng, &mut order);
    for &row in &order[..erase] {
        wv.data_mut()[row * layout.d_tok..(row + 1) * layout.d_tok].fill(0.0);
        av.data_mut()[row * layout.d_tok..(row + 1) * layout.d_tok].fill(0.0);
    }
    Ok((wv, av))
}
