//! Pose-regression encoder: three conv-conv-maxpool blocks, a ReLU MLP and a
//! linear head whose output feeds one of the SO(3) parameterizations.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::so3::{self, HeadKind, RotationMatrix};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Input image side.
    pub n: usize,
    /// Output channels of the three conv blocks.
    pub filters: [usize; 3],
    /// Widths of the hidden dense layers.
    pub mlp: Vec<usize>,
    pub head: HeadKind,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl EncoderConfig {
    /// The published architecture for side-`n` images.
    pub fn standard(n: usize, head: HeadKind) -> Self {
        EncoderConfig { n, filters: [32, 64, 128], mlp: alloc::vec![512, 512], head, activation: Activation::Relu }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.n < 8 || self.n % 8 != 0 {
            return Err(EncoderError::Config(format!("image side {} must be a positive multiple of 8", self.n)));
        }
        if self.filters.contains(&0) || self.mlp.contains(&0) {
            return Err(EncoderError::Config(String::from("layer widths must be positive")));
        }
        Ok(())
    }

    /// Length of the flattened feature vector after the conv blocks.
    pub fn flatten_len(&self) -> usize {
        let s = self.n / 8;
        s * s * self.filters[2]
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = 1;
        for (b, &c) in self.filters.iter().enumerate() {
            for (l, i) in [("a", cin), ("b", c)] {
                out.push((format!("block{}.conv{l}.weight", b + 1), alloc::vec![c, i, 3, 3]));
                out.push((format!("block{}.conv{l}.bias", b + 1), alloc::vec![c]));
            }
            cin = c;
        }
        let mut fan = self.flatten_len();
        for (i, &w) in self.mlp.iter().enumerate() {
            out.push((format!("dense{}.weight", i + 1), alloc::vec![fan, w]));
            out.push((format!("dense{}.bias", i + 1), alloc::vec![w]));
            fan = w;
        }
        out.push((String::from("head.weight"), alloc::vec![fan, self.head.raw_dim()]));
        out.push((String::from("head.bias"), alloc::vec![self.head.raw_dim()]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.manifest().iter().map(|(_, s)| numel(s)).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncoderError {
    Config(String),
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    WrongTensorCount { expected: usize, found: usize },
    NonFinite(String),
    ImageSize { expected: usize, found: usize },
}

impl fmt::Display for EncoderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderError::Config(m) => write!(f, "encoder config: {m}"),
            EncoderError::ShapeMismatch { name, expected, found } => {
                write!(f, "{name}: expected shape {expected:?}, found {found:?}")
            }
            EncoderError::WrongTensorCount { expected, found } => {
                write!(f, "expected {expected} weight tensors, found {found}")
            }
            EncoderError::NonFinite(name) => write!(f, "{name} contains non-finite values"),
            EncoderError::ImageSize { expected, found } => {
                write!(f, "image has {found} pixels, encoder expects {expected}")
            }
        }
    }
}

impl core::error::Error for EncoderError {}

/// All encoder parameters, one flat buffer per tensor in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    tensors: Vec<Vec<f64>>,
}

impl EncoderWeights {
    /// He-uniform weights, `U(+-sqrt(6 / fan_in))`, and `U(+-1/sqrt(fan_in))`
    /// biases.
    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Self {
        let manifest = config.manifest();
        let mut tensors = Vec::with_capacity(manifest.len());
        let mut fan_in = 1;
        for (name, shape) in &manifest {
            if name.ends_with(".weight") {
                fan_in = if shape.len() == 4 { shape[1] * 9 } else { shape[0] };
                let a = libm::sqrt(6.0 / fan_in as f64);
                tensors.push((0..numel(shape)).map(|_| rng.gen_range(-a..a)).collect());
            } else {
                let a = 1.0 / libm::sqrt(fan_in as f64);
                tensors.push((0..numel(shape)).map(|_| rng.gen_range(-a..a)).collect());
            }
        }
        EncoderWeights { tensors }
    }

    pub fn from_tensors(config: &EncoderConfig, tensors: Vec<Vec<f64>>) -> Result<Self, EncoderError> {
        let manifest = config.manifest();
        if manifest.len() != tensors.len() {
            return Err(EncoderError::WrongTensorCount { expected: manifest.len(), found: tensors.len() });
        }
        for ((name, shape), t) in manifest.iter().zip(&tensors) {
            if numel(shape) != t.len() {
                return Err(EncoderError::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: alloc::vec![t.len()],
                });
            }
            if !t.iter().all(|v| v.is_finite()) {
                return Err(EncoderError::NonFinite(name.clone()));
            }
        }
        Ok(EncoderWeights { tensors })
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Vec<f64>> {
        self.tensors
    }

    /// Registers every tensor on `g` (as parameters when `trainable`).
    pub fn register(&self, config: &EncoderConfig, g: &mut Graph, trainable: bool) -> Vec<Var> {
        config
            .manifest()
            .iter()
            .zip(&self.tensors)
            .map(|((_, shape), data)| {
                let t = Tensor::real(shape, data.clone());
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect()
    }
}

/// Zero-mean, unit-variance copy of an image (mean removal only when the
/// image is constant).
pub fn normalize_image(img: &[f64]) -> Vec<f64> {
    let n = img.len() as f64;
    let mean = img.iter().sum::<f64>() / n;
    let var = img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = if var > 0.0 { libm::sqrt(var) } else { 1.0 };
    img.iter().map(|v| (v - mean) / sd).collect()
}

/// Raw head outputs `[B, head_dim]` for `images` (`[B, n, n]`, already
/// normalized) through the registered parameters `params`.
pub fn encode_graph(g: &mut Graph, config: &EncoderConfig, params: &[Var], images: Var) -> Var {
    let s = g.shape(images).to_vec();
    assert!(s.len() == 3 && s[1] == config.n && s[2] == config.n, "encode: images {s:?} for n = {}", config.n);
    let b = s[0];
    let mut x = g.reshape(images, &[b, 1, config.n, config.n]);
    let mut p = params.iter().copied();
    let mut next = || p.next().expect("parameter list matches manifest");
    for _ in 0..3 {
        for _ in 0..2 {
            let (w, bias) = (next(), next());
            let y = g.conv2d(x, w);
            let y = g.add_bias(y, bias);
            x = g.relu(y);
        }
        x = g.maxpool2(x);
    }
    let mut h = g.reshape(x, &[b, config.flatten_len()]);
    for _ in &config.mlp {
        let (w, bias) = (next(), next());
        let y = g.matmul(h, w);
        let y = g.add_bias(y, bias);
        h = g.relu(y);
    }
    let (w, bias) = (next(), next());
    let y = g.matmul(h, w);
    g.add_bias(y, bias)
}

/// Normalized images stacked as `[B, n, n]`.
pub fn normalized_batch(config: &EncoderConfig, images: &[&[f64]]) -> Result<Tensor, EncoderError> {
    let px = config.n * config.n;
    let mut data = Vec::with_capacity(images.len() * px);
    for img in images {
        if img.len() != px {
            return Err(EncoderError::ImageSize { expected: px, found: img.len() });
        }
        data.extend(normalize_image(img));
    }
    Ok(Tensor::real(&[images.len(), config.n, config.n], data))
}

/// Raw head outputs for a batch of unnormalized images.
pub fn encode_batch(config: &EncoderConfig, w: &EncoderWeights, images: &[&[f64]]) -> Result<Vec<Vec<f64>>, EncoderError> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let x = g.constant(normalized_batch(config, images)?);
    let params = w.register(config, &mut g, false);
    let out = encode_graph(&mut g, config, &params, x);
    Ok(g.value(out).as_real().chunks_exact(config.head.raw_dim()).map(<[f64]>::to_vec).collect())
}

pub fn encode(config: &EncoderConfig, w: &EncoderWeights, image: &[f64]) -> Result<Vec<f64>, EncoderError> {
    Ok(encode_batch(config, w, &[image])?.pop().expect("one output"))
}

/// Rotation predicted for one image and whether a degenerate s2s2 output
/// had to be nudged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub rotation: RotationMatrix,
    pub perturbed: bool,
}

pub fn encode_to_rotation_batch(
    config: &EncoderConfig,
    w: &EncoderWeights,
    images: &[&[f64]],
) -> Result<Vec<Prediction>, EncoderError> {
    let raw = encode_batch(config, w, images)?;
    Ok(raw
        .iter()
        .map(|r| {
            let mut g = Graph::new();
            let v = g.constant(Tensor::real(&[1, r.len()], r.clone()));
            let m = g.rotation_head(v, config.head);
            let d = g.value(m).as_real();
            let rotation =
                RotationMatrix::from_matrix_unchecked([[d[0], d[1], d[2]], [d[3], d[4], d[5]], [d[6], d[7], d[8]]]);
            Prediction { rotation, perturbed: g.head_perturbations() > 0 }
        })
        .collect())
}

pub fn encode_to_rotation(config: &EncoderConfig, w: &EncoderWeights, image: &[f64]) -> Result<Prediction, EncoderError> {
    Ok(encode_to_rotation_batch(config, w, &[image])?.pop().expect("one output"))
}

/// Rotation for a raw head output without a graph.
pub fn head_rotation(kind: HeadKind, raw: &[f64]) -> Result<RotationMatrix, so3::So3Error> {
    so3::head_matrix(kind, raw).map(RotationMatrix::from_matrix_unchecked)
}

#[cfg(test)]
mod tests;
