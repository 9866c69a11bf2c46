//! Reverse-mode differentiation for sequential CNNs.
//!
//! `forward` records one tape entry per layer. Activations are kept in f64
//! on the tape; parameters are widened from their stored f32 values, so the
//! engine's arithmetic is deterministic and independent of how the store
//! was produced. Batch reductions always run in sample order.

use std::ops::Range;

use crate::error::{invalid, Error, Result};
use crate::model::{Activation, ConvSpec, LayerSpec, ModelGraph};
use crate::tensor::Tensor;

/// Index of a value slot on the tape. Slot 0 holds the input batch.
pub type Slot = usize;

#[derive(Clone, Debug)]
struct Value {
    /// Includes the leading batch axis.
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Kind {
    Conv { spec: ConvSpec, weights: Range<usize>, bias: Range<usize> },
    Dense { in_dim: usize, out_dim: usize, weights: Range<usize>, bias: Range<usize> },
    Relu,
    Identity,
    MaxPool,
    Flatten,
}

#[derive(Clone, Debug)]
struct Op {
    layer: usize,
    kind: Kind,
    input: Slot,
    output: Slot,
    /// Winning input offset per pooled output.
    argmax: Vec<u32>,
}

/// Ordered record of the primitive operations of one forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Value>,
    params: Vec<f64>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// `(layer index, input slot, output slot)` for each recorded operation.
    pub fn entries(&self) -> Vec<(usize, Slot, Slot)> {
        self.ops.iter().map(|op| (op.layer, op.input, op.output)).collect()
    }

    /// Parameter slots read by the recorded operations.
    pub fn covered_params(&self) -> Vec<Range<usize>> {
        self.ops
            .iter()
            .filter_map(|op| match &op.kind {
                Kind::Conv { weights, bias, .. } | Kind::Dense { weights, bias, .. } => {
                    Some(weights.start..bias.end)
                }
                _ => None,
            })
            .collect()
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.values.last().expect("tape holds its input").shape
    }

    /// Final activations in full precision.
    pub fn output_values(&self) -> &[f64] {
        &self.values.last().expect("tape holds its input").data
    }

    pub fn output(&self) -> Tensor {
        to_tensor(self.values.last().expect("tape holds its input"))
    }

    /// Re-executes the recorded operations on the recorded input.
    pub fn replay(&self) -> Tensor {
        let mut current = self.values[0].clone();
        for op in &self.ops {
            current = execute(&op.kind, &self.params, &current).0;
        }
        to_tensor(&current)
    }
}

fn to_tensor(v: &Value) -> Tensor {
    Tensor::new(v.shape.clone(), v.data.iter().map(|&x| x as f32).collect())
        .expect("tape values are consistent")
}

pub fn forward(model: &ModelGraph, batch: &Tensor) -> Result<(Tensor, Tape)> {
    let tape = record(model, batch)?;
    Ok((tape.output(), tape))
}

/// Runs the forward pass and keeps every intermediate value.
pub fn record(model: &ModelGraph, batch: &Tensor) -> Result<Tape> {
    let [c, h, w] = model.input_shape();
    match batch.shape() {
        [n, bc, bh, bw] if *n > 0 && [*bc, *bh, *bw] == [c, h, w] => {}
        other => {
            return Err(Error::ShapeMismatch {
                expected: vec![batch.len().max(1), c, h, w],
                actual: other.to_vec(),
            })
        }
    }
    let params: Vec<f64> = model.params().iter().map(|&p| p as f64).collect();
    let ranges = model.param_ranges();
    let mut values = vec![Value {
        shape: batch.shape().to_vec(),
        data: batch.data().iter().map(|&x| x as f64).collect(),
    }];
    let mut ops = Vec::with_capacity(model.layers().len());
    for (i, layer) in model.layers().iter().enumerate() {
        let kind = match *layer {
            LayerSpec::Conv(spec) => {
                let r = ranges[i].clone().expect("conv has parameters");
                Kind::Conv { spec, weights: r.weights, bias: r.bias }
            }
            LayerSpec::Dense { in_dim, out_dim } | LayerSpec::HeadAdapter { in_dim, out_dim } => {
                let r = ranges[i].clone().expect("dense has parameters");
                Kind::Dense { in_dim, out_dim, weights: r.weights, bias: r.bias }
            }
            LayerSpec::Activation(Activation::Relu) => Kind::Relu,
            LayerSpec::Activation(Activation::Identity) => Kind::Identity,
            LayerSpec::MaxPool => Kind::MaxPool,
            LayerSpec::Flatten => Kind::Flatten,
        };
        let (out, argmax) = execute(&kind, &params, values.last().unwrap());
        ops.push(Op { layer: i, kind, input: i, output: i + 1, argmax });
        values.push(out);
    }
    Ok(Tape { ops, values, params })
}

fn execute(kind: &Kind, params: &[f64], x: &Value) -> (Value, Vec<u32>) {
    match kind {
        Kind::Conv { spec, weights, bias } => {
            (conv_forward(spec, &params[weights.clone()], &params[bias.clone()], x), Vec::new())
        }
        Kind::Dense { in_dim, out_dim, weights, bias } => (
            dense_forward(*in_dim, *out_dim, &params[weights.clone()], &params[bias.clone()], x),
            Vec::new(),
        ),
        Kind::Relu => (
            Value { shape: x.shape.clone(), data: x.data.iter().map(|&v| v.max(0.0)).collect() },
            Vec::new(),
        ),
        Kind::Identity => (x.clone(), Vec::new()),
        Kind::Flatten => {
            let n = x.shape[0];
            (Value { shape: vec![n, x.data.len() / n.max(1)], data: x.data.clone() }, Vec::new())
        }
        Kind::MaxPool => maxpool_forward(x),
    }
}

/// Range of output columns whose input column `ox * stride + kx - pad`
/// falls inside `[0, width)`.
fn valid_cols(kx: usize, pad: usize, stride: usize, width: usize, out_w: usize) -> Range<usize> {
    let lo = if pad > kx { (pad - kx).div_ceil(stride) } else { 0 };
    let hi = if width + pad > kx { ((width - 1 + pad - kx) / stride + 1).min(out_w) } else { 0 };
    lo..hi.max(lo)
}

fn conv_forward(spec: &ConvSpec, w: &[f64], b: &[f64], x: &Value) -> Value {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = spec.output_hw(h, wd).expect("validated shape");
    let (d, k, st, pad) = (spec.filters, spec.kernel, spec.stride, spec.pad);
    let cols: Vec<Range<usize>> = (0..k).map(|kx| valid_cols(kx, pad, st, wd, ow)).collect();
    let mut out = vec![0.0; n * d * oh * ow];
    for s in 0..n {
        let xs = &x.data[s * c * h * wd..(s + 1) * c * h * wd];
        for f in 0..d {
            let o = &mut out[(s * d + f) * oh * ow..(s * d + f + 1) * oh * ow];
            o.fill(b[f]);
            for ch in 0..c {
                let xp = &xs[ch * h * wd..(ch + 1) * h * wd];
                let wf = &w[(f * c + ch) * k * k..(f * c + ch + 1) * k * k];
                for ky in 0..k {
                    for oy in 0..oh {
                        let iy = (oy * st + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row_in = &xp[iy as usize * wd..(iy as usize + 1) * wd];
                        let row_out = &mut o[oy * ow..(oy + 1) * ow];
                        for kx in 0..k {
                            let wv = wf[ky * k + kx];
                            for ox in cols[kx].clone() {
                                row_out[ox] += wv * row_in[ox * st + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Value { shape: vec![n, d, oh, ow], data: out }
}

fn conv_backward(
    spec: &ConvSpec,
    w: &[f64],
    x: &Value,
    gy: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    mut gx: Option<&mut [f64]>,
) {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = spec.output_hw(h, wd).expect("validated shape");
    let (d, k, st, pad) = (spec.filters, spec.kernel, spec.stride, spec.pad);
    let cols: Vec<Range<usize>> = (0..k).map(|kx| valid_cols(kx, pad, st, wd, ow)).collect();
    for s in 0..n {
        let xs = &x.data[s * c * h * wd..(s + 1) * c * h * wd];
        for f in 0..d {
            let g = &gy[(s * d + f) * oh * ow..(s * d + f + 1) * oh * ow];
            gb[f] += g.iter().sum::<f64>();
            for ch in 0..c {
                let xp = &xs[ch * h * wd..(ch + 1) * h * wd];
                let base = (f * c + ch) * k * k;
                for ky in 0..k {
                    for oy in 0..oh {
                        let iy = (oy * st + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let row_in = &xp[iy * wd..(iy + 1) * wd];
                        let row_g = &g[oy * ow..(oy + 1) * ow];
                        for kx in 0..k {
                            let mut acc = 0.0;
                            for ox in cols[kx].clone() {
                                acc += row_g[ox] * row_in[ox * st + kx - pad];
                            }
                            gw[base + ky * k + kx] += acc;
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            let off = s * c * h * wd + ch * h * wd + iy * wd;
                            let row_gx = &mut gx[off..off + wd];
                            for kx in 0..k {
                                let wv = w[base + ky * k + kx];
                                for ox in cols[kx].clone() {
                                    row_gx[ox * st + kx - pad] += wv * row_g[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn dense_forward(in_dim: usize, out_dim: usize, w: &[f64], b: &[f64], x: &Value) -> Value {
    let n = x.shape[0];
    let mut out = vec![0.0; n * out_dim];
    for s in 0..n {
        let xs = &x.data[s * in_dim..(s + 1) * in_dim];
        for j in 0..out_dim {
            let row = &w[j * in_dim..(j + 1) * in_dim];
            out[s * out_dim + j] = b[j] + row.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Value { shape: vec![n, out_dim], data: out }
}

#[allow(clippy::too_many_arguments)]
fn dense_backward(
    in_dim: usize,
    out_dim: usize,
    w: &[f64],
    x: &Value,
    gy: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    mut gx: Option<&mut [f64]>,
) {
    let n = x.shape[0];
    for s in 0..n {
        let xs = &x.data[s * in_dim..(s + 1) * in_dim];
        for j in 0..out_dim {
            let g = gy[s * out_dim + j];
            gb[j] += g;
            let row_gw = &mut gw[j * in_dim..(j + 1) * in_dim];
            for (acc, xi) in row_gw.iter_mut().zip(xs) {
                *acc += g * xi;
            }
            if let Some(gx) = gx.as_deref_mut() {
                let row_w = &w[j * in_dim..(j + 1) * in_dim];
                for (acc, wi) in gx[s * in_dim..(s + 1) * in_dim].iter_mut().zip(row_w) {
                    *acc += g * wi;
                }
            }
        }
    }
}

fn maxpool_forward(x: &Value) -> (Value, Vec<u32>) {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    // Strict comparison: ties go to the first element in scan order.
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                out.push(x.data[best]);
                argmax.push(best as u32);
            }
        }
    }
    (Value { shape: vec![n, c, oh, ow], data: out }, argmax)
}

/// Propagates `seed` (d loss / d output) back through the tape and returns
/// one gradient per parameter slot, aligned with the model's store.
pub fn backward(tape: &Tape, seed: &[f64]) -> Result<Vec<f64>> {
    let out = tape.values.last().expect("tape holds its input");
    if seed.len() != out.data.len() {
        return Err(Error::Internal(format!(
            "loss gradient has {} entries, tape output has {}",
            seed.len(),
            out.data.len()
        )));
    }
    let mut grads = vec![0.0; tape.params.len()];
    let mut g = seed.to_vec();
    for op in tape.ops.iter().rev() {
        let x = &tape.values[op.input];
        let need_input_grad = op.input > 0;
        let mut gx = if need_input_grad { vec![0.0; x.data.len()] } else { Vec::new() };
        let gx_opt = need_input_grad.then_some(gx.as_mut_slice());
        match &op.kind {
            Kind::Conv { spec, weights, bias } => {
                let (gw, gb) = split_grads(&mut grads, weights, bias);
                conv_backward(spec, &tape.params[weights.clone()], x, &g, gw, gb, gx_opt);
            }
            Kind::Dense { in_dim, out_dim, weights, bias } => {
                let (gw, gb) = split_grads(&mut grads, weights, bias);
                dense_backward(*in_dim, *out_dim, &tape.params[weights.clone()], x, &g, gw, gb, gx_opt);
            }
            Kind::Relu => {
                if let Some(gx) = gx_opt {
                    for ((o, &xi), &gi) in gx.iter_mut().zip(&x.data).zip(&g) {
                        *o = if xi > 0.0 { gi } else { 0.0 };
                    }
                }
            }
            Kind::Identity | Kind::Flatten => {
                if let Some(gx) = gx_opt {
                    gx.copy_from_slice(&g);
                }
            }
            Kind::MaxPool => {
                if let Some(gx) = gx_opt {
                    for (&idx, &gi) in op.argmax.iter().zip(&g) {
                        gx[idx as usize] += gi;
                    }
                }
            }
        }
        if !need_input_grad {
            break;
        }
        g = gx;
    }
    Ok(grads)
}

fn split_grads<'a>(
    grads: &'a mut [f64],
    weights: &Range<usize>,
    bias: &Range<usize>,
) -> (&'a mut [f64], &'a mut [f64]) {
    let (w, b) = grads[weights.start..bias.end].split_at_mut(weights.len());
    (w, b)
}

/// Task losses, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskLoss {
    /// Softmax cross-entropy against class indices.
    CrossEntropy,
    /// Mean squared error over every output element.
    MeanSquared,
}

#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Classes(&'a [usize]),
    Values(&'a [f32]),
}

/// Loss value and its gradient with respect to the network output.
pub fn task_loss(
    loss: TaskLoss,
    output: &[f64],
    output_shape: &[usize],
    target: Target<'_>,
) -> Result<(f64, Vec<f64>)> {
    let n = output_shape.first().copied().unwrap_or(0);
    if n == 0 {
        return Err(invalid("loss over an empty batch"));
    }
    match (loss, target) {
        (TaskLoss::CrossEntropy, Target::Classes(labels)) => {
            let k = output.len() / n;
            if labels.len() != n || output_shape.len() != 2 {
                return Err(invalid("cross-entropy needs one label per row of a 2-axis output"));
            }
            let mut total = 0.0;
            let mut grad = vec![0.0; output.len()];
            for (s, &y) in labels.iter().enumerate() {
                if y >= k {
                    return Err(invalid(format!("label {y} outside {k} classes")));
                }
                let row = &output[s * k..(s + 1) * k];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                total += z.ln() + max - row[y];
                for j in 0..k {
                    let p = (row[j] - max).exp() / z;
                    grad[s * k + j] = (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
                }
            }
            Ok((total / n as f64, grad))
        }
        (TaskLoss::MeanSquared, Target::Values(t)) => {
            if t.len() != output.len() {
                return Err(invalid(format!(
                    "target has {} values, output has {}",
                    t.len(),
                    output.len()
                )));
            }
            let m = output.len() as f64;
            let mut total = 0.0;
            let grad = output
                .iter()
                .zip(t)
                .map(|(&o, &t)| {
                    let d = o - t as f64;
                    total += d * d;
                    2.0 * d / m
                })
                .collect();
            Ok((total / m, grad))
        }
        _ => Err(invalid(format!("target kind does not fit {loss:?}"))),
    }
}

/// A differentiable function of the parameters alone, added to a task loss.
pub trait ParamPenalty {
    fn value(&self, model: &ModelGraph) -> Result<f64>;
    /// Adds d(penalty)/d(param) into `grads`.
    fn add_gradient(&self, model: &ModelGraph, grads: &mut [f64]) -> Result<()>;
}

#[derive(Clone, Copy, Debug)]
pub enum OutputLoss<'a> {
    /// Sum of all outputs.
    Sum,
    /// Half the squared norm of the outputs.
    HalfSquaredNorm,
    Task(TaskLoss, Target<'a>),
}

#[derive(Clone, Copy)]
pub struct LossSpec<'a> {
    pub output: OutputLoss<'a>,
    pub penalty: Option<&'a dyn ParamPenalty>,
}

impl<'a> LossSpec<'a> {
    pub fn new(output: OutputLoss<'a>) -> Self {
        Self { output, penalty: None }
    }

    pub fn with_penalty(mut self, penalty: &'a dyn ParamPenalty) -> Self {
        self.penalty = Some(penalty);
        self
    }
}

fn output_loss(spec: &OutputLoss<'_>, tape: &Tape) -> Result<(f64, Vec<f64>)> {
    let out = tape.output_values();
    match spec {
        OutputLoss::Sum => Ok((out.iter().sum(), vec![1.0; out.len()])),
        OutputLoss::HalfSquaredNorm => {
            Ok((0.5 * out.iter().map(|v| v * v).sum::<f64>(), out.to_vec()))
        }
        OutputLoss::Task(loss, target) => task_loss(*loss, out, tape.output_shape(), *target),
    }
}

/// Loss value and analytic gradient for every parameter.
pub fn loss_and_gradients(
    model: &ModelGraph,
    batch: &Tensor,
    spec: &LossSpec<'_>,
) -> Result<(f64, Vec<f64>)> {
    let tape = record(model, batch)?;
    let (mut value, seed) = output_loss(&spec.output, &tape)?;
    let mut grads = backward(&tape, &seed)?;
    if let Some(p) = spec.penalty {
        value += p.value(model)?;
        p.add_gradient(model, &mut grads)?;
    }
    Ok((value, grads))
}

fn loss_value(model: &ModelGraph, batch: &Tensor, spec: &LossSpec<'_>) -> Result<f64> {
    let tape = record(model, batch)?;
    let mut value = output_loss(&spec.output, &tape)?.0;
    if let Some(p) = spec.penalty {
        value += p.value(model)?;
    }
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {value}")));
    }
    Ok(value)
}

/// Largest relative disagreement between analytic gradients and central
/// finite differences, `|a - n| / max(|a|, |n|, 1e-8)`, over all parameters.
///
/// The step is applied to the stored f32 value, and the numeric slope uses
/// the step actually realised after rounding.
pub fn finite_diff_gradcheck(
    model: &ModelGraph,
    batch: &Tensor,
    spec: &LossSpec<'_>,
    eps: f64,
) -> Result<f64> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(invalid(format!("gradcheck step must be positive, got {eps}")));
    }
    let (value, analytic) = loss_and_gradients(model, batch, spec)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {value}")));
    }
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = model.params()[i];
        let plus = (orig as f64 + eps) as f32;
        let minus = (orig as f64 - eps) as f32;
        probe.params_mut()[i] = plus;
        let lp = loss_value(&probe, batch, spec)?;
        probe.params_mut()[i] = minus;
        let lm = loss_value(&probe, batch, spec)?;
        probe.params_mut()[i] = orig;
        let numeric = (lp - lm) / (plus as f64 - minus as f64);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
