//! CNN architecture configuration: layer stacks, shape inference, parameter
//! counting, and the bundled presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize, stride: usize },
    MaxPool { window: usize },
    Fc { out_features: usize },
}

/// Architecture: input shape plus an ordered layer stack. Convolutions use
/// valid padding; the activation (and optional dropout) between layers is a
/// per-model generating factor, not part of the architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub name: String,
    /// Input as (channels, height, width).
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

/// Shape of the activation entering each layer, plus the final feature count.
#[derive(Debug, Clone, PartialEq)]
pub enum StageShape {
    Map { c: usize, h: usize, w: usize },
    Flat { features: usize },
}

impl ArchConfig {
    /// Walks the stack and returns the input shape seen by every layer and
    /// the final output feature count. Errors on any impossible shape.
    pub fn stages(&self) -> Result<(Vec<StageShape>, usize)> {
        let (mut c, mut h, mut w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("empty input shape {:?}", self.input)));
        }
        let mut flat: Option<usize> = None;
        let mut stages = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv { out_channels, kernel, stride } => {
                    if flat.is_some() {
                        return Err(Error::Config(format!("layer {i}: conv after fc")));
                    }
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::Config(format!("layer {i}: zero-sized conv field")));
                    }
                    if kernel > h || kernel > w {
                        return Err(Error::Config(format!(
                            "layer {i}: kernel {kernel} exceeds input {h}x{w}"
                        )));
                    }
                    stages.push(StageShape::Map { c, h, w });
                    h = (h - kernel) / stride + 1;
                    w = (w - kernel) / stride + 1;
                    c = out_channels;
                }
                LayerSpec::MaxPool { window } => {
                    if flat.is_some() {
                        return Err(Error::Config(format!("layer {i}: pool after fc")));
                    }
                    if window < 2 || window > h || window > w {
                        return Err(Error::Config(format!(
                            "layer {i}: pool window {window} on {h}x{w}"
                        )));
                    }
                    stages.push(StageShape::Map { c, h, w });
                    h /= window;
                    w /= window;
                }
                LayerSpec::Fc { out_features } => {
                    if out_features == 0 {
                        return Err(Error::Config(format!("layer {i}: zero-width fc")));
                    }
                    let features = flat.unwrap_or(c * h * w);
                    stages.push(StageShape::Flat { features });
                    flat = Some(out_features);
                }
            }
        }
        match flat {
            Some(out) => Ok((stages, out)),
            None => Err(Error::Config("architecture has no fc output layer".into())),
        }
    }

    /// Number of output classes (width of the final fc layer).
    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.stages()?.1)
    }

    /// Total trainable parameter count (weights plus biases).
    pub fn param_count(&self) -> Result<usize> {
        let (stages, _) = self.stages()?;
        let mut total = 0;
        for (layer, stage) in self.layers.iter().zip(&stages) {
            match (*layer, stage) {
                (LayerSpec::Conv { out_channels, kernel, .. }, StageShape::Map { c, .. }) => {
                    total += out_channels * (c * kernel * kernel + 1);
                }
                (LayerSpec::Fc { out_features }, StageShape::Flat { features }) => {
                    total += out_features * (features + 1);
                }
                (LayerSpec::MaxPool { .. }, _) => {}
                _ => unreachable!("stages() aligns shapes with layers"),
            }
        }
        Ok(total)
    }

    /// Names of the weighted layers in order: conv1, conv2, ..., fc1, fc2, ...
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let (mut nconv, mut nfc) = (0, 0);
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv { .. } => {
                    nconv += 1;
                    names.push(format!("conv{nconv}"));
                }
                LayerSpec::Fc { .. } => {
                    nfc += 1;
                    names.push(format!("fc{nfc}"));
                }
                LayerSpec::MaxPool { .. } => {}
            }
        }
        names
    }

    /// Bundled architectures. The seed presets hit their exact parameter
    /// budgets: 2416 grayscale, 2816 color, 10760 large color.
    pub fn preset(name: &str) -> Option<ArchConfig> {
        let cfg = match name {
            "seed-gray" => ArchConfig {
                name: name.into(),
                input: (1, 28, 28),
                layers: vec![
                    LayerSpec::Conv { out_channels: 8, kernel: 5, stride: 2 },
                    LayerSpec::Conv { out_channels: 4, kernel: 5, stride: 1 },
                    LayerSpec::MaxPool { window: 2 },
                    LayerSpec::Conv { out_channels: 12, kernel: 2, stride: 1 },
                    LayerSpec::Fc { out_features: 10 },
                    LayerSpec::Fc { out_features: 10 },
                ],
            },
            "seed-color" => ArchConfig {
                name: name.into(),
                input: (3, 28, 28),
                layers: vec![
                    LayerSpec::Conv { out_channels: 8, kernel: 5, stride: 2 },
                    LayerSpec::Conv { out_channels: 4, kernel: 5, stride: 1 },
                    LayerSpec::MaxPool { window: 2 },
                    LayerSpec::Conv { out_channels: 12, kernel: 2, stride: 1 },
                    LayerSpec::Fc { out_features: 10 },
                    LayerSpec::Fc { out_features: 10 },
                ],
            },
            "large-color" => ArchConfig {
                name: name.into(),
                input: (3, 32, 32),
                layers: vec![
                    LayerSpec::Conv { out_channels: 4, kernel: 3, stride: 2 },
                    LayerSpec::MaxPool { window: 2 },
                    LayerSpec::Conv { out_channels: 10, kernel: 3, stride: 1 },
                    LayerSpec::Conv { out_channels: 16, kernel: 2, stride: 1 },
                    LayerSpec::Fc { out_features: 36 },
                    LayerSpec::Fc { out_features: 10 },
                ],
            },
            _ => return None,
        };
        Some(cfg)
    }
}
