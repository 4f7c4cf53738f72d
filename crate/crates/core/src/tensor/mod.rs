//! Minimal deterministic inference engine for small sequential networks.
//!
//! Activations are `f32`, single sample, channel-major `(C, H, W)` for
//! convolutional stages and `(N,)` after `flatten`. Shapes are checked once
//! when a [`Model`] is built; a valid model cannot fail a forward pass on an
//! input of its declared shape.

mod format;
pub mod ops;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use format::{
    read_model, read_tensor, write_model, write_tensor, FTEN_MAGIC, FTM_MAGIC,
};

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in tensor data")]
    NonFinite,
    #[error("layer {index} ({kind}): {message}")]
    Layer {
        index: usize,
        kind: LayerKind,
        message: String,
    },
    #[error("layer {0} is not a tappable conv2d/linear layer")]
    InvalidTap(usize),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major `f32` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::Shape(format!("dimensions must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite);
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv2d,
    Linear,
    Relu,
    MaxPool,
    AvgPool,
    Flatten,
    BatchNorm,
    Sigmoid,
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::Linear => "linear",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::AvgPool => "avgpool",
            LayerKind::Flatten => "flatten",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Sigmoid => "sigmoid",
        };
        f.write_str(s)
    }
}

/// Weight `(C_out, C_in, K_h, K_w)`, one bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: usize,
}

/// Weight `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool {
    pub window: usize,
    pub stride: usize,
}

/// Inference-mode batch normalization with frozen statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Linear(Linear),
    Relu,
    MaxPool(Pool),
    AvgPool(Pool),
    Flatten,
    BatchNorm(BatchNorm),
    Sigmoid,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::Linear(_) => LayerKind::Linear,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool(_) => LayerKind::MaxPool,
            Layer::AvgPool(_) => LayerKind::AvgPool,
            Layer::Flatten => LayerKind::Flatten,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::Sigmoid => LayerKind::Sigmoid,
        }
    }

    /// Conv2d and linear layers carry prunable weight tensors.
    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            Layer::Conv2d(c) => Some(&c.weight),
            Layer::Linear(l) => Some(&l.weight),
            _ => None,
        }
    }

    fn weight_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Layer::Conv2d(c) => Some(&mut c.weight),
            Layer::Linear(l) => Some(&mut l.weight),
            _ => None,
        }
    }

    /// Elementwise or per-channel layers that keep the producing layer's units intact.
    fn is_unit_preserving(&self) -> bool {
        matches!(self, Layer::Relu | Layer::Sigmoid | Layer::BatchNorm(_))
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match self {
            Layer::Conv2d(c) => ops::conv2d_output_shape(input, c),
            Layer::Linear(l) => ops::linear_output_shape(input, l),
            Layer::MaxPool(p) | Layer::AvgPool(p) => ops::pool_output_shape(input, p),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::BatchNorm(bn) => ops::batch_norm_check(input, bn).map(|_| input.to_vec()),
            Layer::Relu | Layer::Sigmoid => Ok(input.to_vec()),
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor, TensorError> {
        let shape_err = |m: String| TensorError::Shape(m);
        match self {
            Layer::Conv2d(c) => ops::conv2d(input, c).map_err(shape_err),
            Layer::Linear(l) => ops::linear(input, l).map_err(shape_err),
            Layer::Relu => Ok(ops::relu(input)),
            Layer::Sigmoid => Ok(ops::sigmoid(input)),
            Layer::MaxPool(p) => ops::max_pool(input, p).map_err(shape_err),
            Layer::AvgPool(p) => ops::avg_pool(input, p).map_err(shape_err),
            Layer::Flatten => Ok(ops::flatten(input)),
            Layer::BatchNorm(bn) => ops::batch_norm(input, bn).map_err(shape_err),
        }
    }
}

/// Where a tap records a prunable layer's output.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPoint {
    /// Raw conv/linear output, before any following nonlinearity.
    #[default]
    PreActivation,
    /// After the run of batchnorm/relu/sigmoid layers that directly follows.
    PostActivation,
}

/// Validated sequential network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    name: String,
    version: String,
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    // output shape of every layer
    shapes: Vec<Vec<usize>>,
}

impl Model {
    pub fn new(
        name: impl Into<String>,
        version: impl Into<String>,
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
    ) -> Result<Self, TensorError> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(TensorError::Shape(format!("invalid input shape {input_shape:?}")));
        }
        if layers.is_empty() {
            return Err(TensorError::Shape("model has no layers".into()));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut current = input_shape.clone();
        for (index, layer) in layers.iter().enumerate() {
            if let Some(w) = layer.weight() {
                if w.data().iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite);
                }
            }
            current = layer.output_shape(&current).map_err(|message| TensorError::Layer {
                index,
                kind: layer.kind(),
                message,
            })?;
            shapes.push(current.clone());
        }
        let out: usize = current.iter().product();
        if out != 1 {
            return Err(TensorError::Shape(format!(
                "final layer must produce a single value, got shape {current:?}"
            )));
        }
        Ok(Self {
            name: name.into(),
            version: version.into(),
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Output shape of layer `index`.
    pub fn layer_output_shape(&self, index: usize) -> &[usize] {
        &self.shapes[index]
    }

    /// Indices of conv2d (and, when `include_linear`, linear) layers.
    pub fn prunable_layers(&self, include_linear: bool) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| match l {
                Layer::Conv2d(_) => true,
                Layer::Linear(_) => include_linear,
                _ => false,
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Mutable view of a prunable layer's weight values (shape is fixed).
    pub fn weight_values_mut(&mut self, index: usize) -> Option<&mut [f32]> {
        self.layers
            .get_mut(index)
            .and_then(Layer::weight_mut)
            .map(Tensor::data_mut)
    }

    fn check_input(&self, input: &Tensor) -> Result<(), TensorError> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(TensorError::Shape(format!(
                "model expects input {:?}, got {:?}",
                self.input_shape,
                input.shape()
            )));
        }
        Ok(())
    }

    /// Raw network output (shape of the last layer).
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, TensorError> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    /// Probability of "fake": the final value, passed through a sigmoid
    /// unless the network already ends in one.
    pub fn score(&self, input: &Tensor) -> Result<f32, TensorError> {
        let out = self.forward(input)?;
        Ok(self.finish_score(out.data()[0]))
    }

    fn finish_score(&self, value: f32) -> f32 {
        match self.layers.last() {
            Some(Layer::Sigmoid) => value,
            _ => ops::sigmoid_scalar(value),
        }
    }

    /// Forward pass that also records the outputs of the requested layers.
    pub fn forward_with_taps(
        &self,
        input: &Tensor,
        taps: &BTreeSet<usize>,
        point: TapPoint,
    ) -> Result<(f32, BTreeMap<usize, Tensor>), TensorError> {
        // capture[j] lists the tapped layers whose output is recorded after layer j
        let mut capture: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &t in taps {
            if self.layers.get(t).and_then(Layer::weight).is_none() {
                return Err(TensorError::InvalidTap(t));
            }
            let mut at = t;
            if point == TapPoint::PostActivation {
                while at + 1 < self.layers.len() && self.layers[at + 1].is_unit_preserving() {
                    at += 1;
                }
            }
            capture.entry(at).or_default().push(t);
        }
        self.check_input(input)?;
        let mut recorded = BTreeMap::new();
        let mut x = input.clone();
        for (j, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if let Some(sources) = capture.get(&j) {
                for &t in sources {
                    recorded.insert(t, x.clone());
                }
            }
        }
        Ok((self.finish_score(x.data()[0]), recorded))
    }
}
