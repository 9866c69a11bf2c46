//! Sequential CNN description with a flat parameter store.
//!
//! Parameters are laid out layer by layer; within a parametric layer the
//! weights come first (filter-major, then channel, row, column for conv;
//! output-major for dense) followed by the biases. Every other module
//! addresses parameters through this canonical order.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Classification,
    Denoising,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub filters: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn new(filters: usize, channels: usize, kernel: usize) -> Self {
        Self { filters, channels, kernel, stride: 1, pad: kernel / 2 }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_pad(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    /// Scalars in one filter (`c * s * s`).
    pub fn filter_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.filters * self.filter_len()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let oh = (h + 2 * self.pad).checked_sub(self.kernel)? / self.stride + 1;
        let ow = (w + 2 * self.pad).checked_sub(self.kernel)? / self.stride + 1;
        Some((oh, ow))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    Conv(ConvSpec),
    Dense { in_dim: usize, out_dim: usize },
    /// Output layer appended to adapt a secret backbone to another label
    /// space. Identical to `Dense` on the wire.
    HeadAdapter { in_dim: usize, out_dim: usize },
    /// 2x2 max pooling with stride 2.
    MaxPool,
    Flatten,
    Activation(Activation),
}

impl LayerSpec {
    pub fn weight_len(&self) -> usize {
        match *self {
            LayerSpec::Conv(c) => c.weight_len(),
            LayerSpec::Dense { in_dim, out_dim } | LayerSpec::HeadAdapter { in_dim, out_dim } => {
                in_dim * out_dim
            }
            _ => 0,
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerSpec::Conv(c) => c.filters,
            LayerSpec::Dense { out_dim, .. } | LayerSpec::HeadAdapter { out_dim, .. } => out_dim,
            _ => 0,
        }
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.bias_len()
    }

    pub fn is_parametric(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv(_) | LayerSpec::Dense { .. } | LayerSpec::HeadAdapter { .. }
        )
    }

    pub fn as_conv(&self) -> Option<ConvSpec> {
        match *self {
            LayerSpec::Conv(c) => Some(c),
            _ => None,
        }
    }

    /// Equality as seen in a serialized file, where a head adapter is
    /// indistinguishable from a dense layer.
    pub fn wire_eq(&self, other: &LayerSpec) -> bool {
        self.wire_form() == other.wire_form()
    }

    pub(crate) fn wire_form(&self) -> LayerSpec {
        match *self {
            LayerSpec::HeadAdapter { in_dim, out_dim } => LayerSpec::Dense { in_dim, out_dim },
            other => other,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv(c) => c.filter_len(),
            LayerSpec::Dense { in_dim, .. } | LayerSpec::HeadAdapter { in_dim, .. } => in_dim,
            _ => 0,
        }
    }
}

/// Location of one parametric layer's scalars in the flat store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamRange {
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

impl ParamRange {
    pub fn all(&self) -> Range<usize> {
        self.weights.start..self.bias.end
    }
}

/// Uniform init bound for a layer with the given fan-in.
pub fn init_bound(fan_in: usize) -> f32 {
    1.0 / (fan_in.max(1) as f32).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    input_shape: [usize; 3],
    task: Task,
    layers: Vec<LayerSpec>,
    params: Vec<f32>,
}

impl ModelGraph {
    pub fn new(
        input_shape: [usize; 3],
        task: Task,
        layers: Vec<LayerSpec>,
        params: Vec<f32>,
    ) -> Result<Self> {
        check_layers(input_shape, &layers)?;
        let expected: usize = layers.iter().map(LayerSpec::param_len).sum();
        if expected != params.len() {
            return Err(invalid(format!(
                "layer table implies {expected} parameters, store holds {}",
                params.len()
            )));
        }
        Ok(Self { input_shape, task, layers, params })
    }

    /// Builds a model with fan-in scaled uniform weights and biases.
    pub fn with_random_params(
        input_shape: [usize; 3],
        task: Task,
        layers: Vec<LayerSpec>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for layer in &layers {
            let bound = init_bound(layer.fan_in());
            params.extend((0..layer.param_len()).map(|_| rng.random_range(-bound..bound)));
        }
        Self::new(input_shape, task, layers, params)
    }

    /// Same architecture, fresh random parameters.
    pub fn reinitialized(&self, seed: u64) -> Result<Self> {
        Self::with_random_params(self.input_shape, self.task, self.layers.clone(), seed)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn set_task(&mut self, task: Task) {
        self.task = task;
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn into_parts(self) -> ([usize; 3], Task, Vec<LayerSpec>, Vec<f32>) {
        (self.input_shape, self.task, self.layers, self.params)
    }

    /// Exact number of stored scalars (weights and biases).
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Per-layer parameter ranges; `None` for parameter-free layers.
    pub fn param_ranges(&self) -> Vec<Option<ParamRange>> {
        let mut offset = 0;
        self.layers
            .iter()
            .map(|layer| {
                if !layer.is_parametric() {
                    return None;
                }
                let w = offset..offset + layer.weight_len();
                let b = w.end..w.end + layer.bias_len();
                offset = b.end;
                Some(ParamRange { weights: w, bias: b })
            })
            .collect()
    }

    pub fn param_range(&self, layer: usize) -> Option<ParamRange> {
        self.param_ranges().into_iter().nth(layer).flatten()
    }

    /// Per-sample activation shape after each layer.
    pub fn layer_shapes(&self) -> Vec<Vec<usize>> {
        check_layers(self.input_shape, &self.layers).expect("validated at construction")
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.layer_shapes().pop().unwrap_or_else(|| self.input_shape.to_vec())
    }

    pub fn conv_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].as_conv().is_some()).collect()
    }

    pub fn conv_spec(&self, layer: usize) -> Option<ConvSpec> {
        self.layers.get(layer).and_then(LayerSpec::as_conv)
    }

    /// Index of the first parametric layer after `layer`.
    pub fn next_parametric(&self, layer: usize) -> Option<usize> {
        (layer + 1..self.layers.len()).find(|&i| self.layers[i].is_parametric())
    }

    /// Index of the conv layer whose outputs feed conv layer `layer` directly.
    pub fn feeding_conv(&self, layer: usize) -> Option<usize> {
        let prev = (0..layer).rev().find(|&i| self.layers[i].is_parametric())?;
        self.layers[prev].as_conv().map(|_| prev)
    }

    /// A conv layer accepts new filters only when the next parametric layer
    /// is also a conv layer, so the extra output channel can be absorbed.
    pub fn is_insertable(&self, layer: usize) -> bool {
        self.conv_spec(layer).is_some()
            && self
                .next_parametric(layer)
                .is_some_and(|n| self.layers[n].as_conv().is_some())
    }

    pub fn insertable_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.is_insertable(i)).collect()
    }

    /// Conv weights of one layer (biases excluded).
    pub fn conv_weights(&self, layer: usize) -> Option<&[f32]> {
        self.conv_spec(layer)?;
        let r = self.param_range(layer)?;
        Some(&self.params[r.weights])
    }

    /// All conv weights of the model in canonical order.
    pub fn all_conv_weights(&self) -> Vec<f32> {
        self.conv_layers()
            .into_iter()
            .flat_map(|l| self.conv_weights(l).unwrap_or(&[]).to_vec())
            .collect()
    }

    /// Drops every layer from `start` onwards.
    pub fn truncated(&self, start: usize) -> Result<Self> {
        if start > self.layers.len() {
            return Err(invalid(format!(
                "cannot truncate at layer {start} of {}",
                self.layers.len()
            )));
        }
        let keep: usize = self.layers[..start].iter().map(LayerSpec::param_len).sum();
        Self::new(
            self.input_shape,
            self.task,
            self.layers[..start].to_vec(),
            self.params[..keep].to_vec(),
        )
    }

    /// Same architecture (as serialized) and input shape.
    pub fn same_architecture(&self, other: &ModelGraph) -> bool {
        self.input_shape == other.input_shape
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.wire_eq(b))
    }
}

/// Validates dimensional compatibility and returns per-layer output shapes.
pub(crate) fn check_layers(input: [usize; 3], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    if input.contains(&0) {
        return Err(invalid(format!("input shape {input:?} has a zero extent")));
    }
    let mut shape = input.to_vec();
    let mut shapes = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        shape = match *layer {
            LayerSpec::Conv(c) => {
                if c.filters == 0 || c.channels == 0 || c.kernel == 0 || c.stride == 0 {
                    return Err(invalid(format!("layer {i}: degenerate conv {c:?}")));
                }
                let [ch, h, w] = three(&shape, i)?;
                if ch != c.channels {
                    return Err(invalid(format!(
                        "layer {i}: conv expects {} channels, input has {ch}",
                        c.channels
                    )));
                }
                let (oh, ow) = c
                    .output_hw(h, w)
                    .ok_or_else(|| invalid(format!("layer {i}: kernel larger than padded input")))?;
                vec![c.filters, oh, ow]
            }
            LayerSpec::MaxPool => {
                let [ch, h, w] = three(&shape, i)?;
                if h < 2 || w < 2 {
                    return Err(invalid(format!("layer {i}: pooling needs at least 2x2 input")));
                }
                vec![ch, h / 2, w / 2]
            }
            LayerSpec::Flatten => vec![shape.iter().product()],
            LayerSpec::Activation(_) => shape,
            LayerSpec::Dense { in_dim, out_dim } | LayerSpec::HeadAdapter { in_dim, out_dim } => {
                if matches!(layer, LayerSpec::HeadAdapter { .. }) && i + 1 != layers.len() {
                    return Err(invalid(format!("layer {i}: head adapter must be the final layer")));
                }
                if in_dim == 0 || out_dim == 0 {
                    return Err(invalid(format!("layer {i}: degenerate dense layer")));
                }
                if shape != [in_dim] {
                    return Err(Error::ShapeMismatch { expected: vec![in_dim], actual: shape });
                }
                vec![out_dim]
            }
        };
        shapes.push(shape.clone());
    }
    Ok(shapes)
}

fn three(shape: &[usize], layer: usize) -> Result<[usize; 3]> {
    match *shape {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(invalid(format!("layer {layer}: expected a 3-axis input, got {shape:?}"))),
    }
}

/// Ratio of stego to secret parameter counts.
pub fn expansion_rate(secret: &ModelGraph, stego: &ModelGraph) -> Result<f64> {
    if secret.param_count() == 0 {
        return Err(invalid("secret model has no parameters"));
    }
    Ok(stego.param_count() as f64 / secret.param_count() as f64)
}

/// Fraction of differing bits over the 32-bit encodings of all parameters.
pub fn ber(a: &ModelGraph, b: &ModelGraph) -> Result<f64> {
    if !a.same_architecture(b) {
        return Err(invalid("bit error rate needs identical layer tables"));
    }
    if a.param_count() == 0 {
        return Ok(0.0);
    }
    let flipped: u64 = a
        .params
        .iter()
        .zip(&b.params)
        .map(|(x, y)| (x.to_bits() ^ y.to_bits()).count_ones() as u64)
        .sum();
    Ok(flipped as f64 / (a.param_count() as f64 * 32.0))
}
