//! Masked training of interference parameters with statistical camouflage.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{forward, loss_and_gradients, task_loss, LossSpec, OutputLoss, ParamPenalty};
use crate::data::{psnr, LabeledDataset, Targets};
use crate::error::{invalid, Error, Result};
use crate::gfi::PositionBitmap;
use crate::model::{LayerSpec, ModelGraph, Task};
use crate::optim::{masked_step, AdamConfig, MaskSet, OptimState};
use crate::sih::SideLocator;

/// Trainable slots: interference filters, every successor-layer channel fed
/// by an interference or side filter, and the head adapter. Side filter
/// scalars are never trainable.
pub fn build_mask(
    stego: &ModelGraph,
    bitmap: &PositionBitmap,
    side: &SideLocator,
    adapter_start: Option<usize>,
) -> Result<MaskSet> {
    let convs = stego.conv_layers();
    let layers = bitmap.layers();
    if convs.len() != layers.len() || convs.iter().zip(layers.keys()).any(|(a, b)| a != b) {
        return Err(invalid("position bitmap and model disagree on conv layers"));
    }
    if !stego.is_insertable(side.layer) {
        return Err(invalid(format!("side filter layer {} is not insertable", side.layer)));
    }
    let ranges = stego.param_ranges();
    let mut mask = MaskSet::zeros(stego.param_count());
    // Per conv layer: for each filter, whether it is an added one.
    let mut added = Vec::new();
    for (&l, bits) in layers {
        let d = stego.conv_spec(l).unwrap().filters;
        let mut flags: Vec<bool> = bits.iter().map(|b| !b).collect();
        if l == side.layer {
            if side.filter > flags.len() {
                return Err(invalid("side filter position outside its layer"));
            }
            flags.insert(side.filter, true);
        }
        if flags.len() != d {
            return Err(invalid(format!("layer {l}: bitmap covers {} of {d} filters", flags.len())));
        }
        added.push((l, flags));
    }
    for (l, flags) in &added {
        let spec = stego.conv_spec(*l).unwrap();
        let r = ranges[*l].clone().unwrap();
        let n = spec.filter_len();
        for (f, &is_added) in flags.iter().enumerate() {
            let interference = is_added && !(*l == side.layer && f == side.filter);
            if interference {
                mask.set_range(r.weights.start + f * n..r.weights.start + (f + 1) * n, true);
                mask.set(r.bias.start + f, true);
            }
        }
        if flags.iter().any(|&a| a) {
            let next = stego
                .next_parametric(*l)
                .filter(|&n| stego.conv_spec(n).is_some())
                .ok_or_else(|| invalid(format!("layer {l} has added filters but no conv successor")))?;
            let ns = stego.conv_spec(next).unwrap();
            let nr = ranges[next].clone().unwrap();
            let ss = ns.kernel * ns.kernel;
            for g in 0..ns.filters {
                for (c, _) in flags.iter().enumerate().filter(|(_, &a)| a) {
                    let at = nr.weights.start + (g * ns.channels + c) * ss;
                    mask.set_range(at..at + ss, true);
                }
            }
        }
    }
    if let Some(start) = adapter_start {
        let head = &stego.layers()[start.min(stego.layers().len())..];
        if !head.iter().any(|l| matches!(l, LayerSpec::Dense { .. } | LayerSpec::HeadAdapter { .. }))
            || head.iter().any(|l| l.as_conv().is_some())
        {
            return Err(invalid(format!("no head adapter starts at layer {start}")));
        }
        for r in ranges[start..].iter().flatten() {
            mask.set_range(r.all(), true);
        }
    }
    for s in side.slots(stego)? {
        mask.set(s, false);
    }
    Ok(mask)
}

/// Population mean and standard deviation of each conv layer's weights,
/// indexed by conv ordinal.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    layers: Vec<(f64, f64)>,
}

fn moments(w: &[f32]) -> (f64, f64) {
    let n = w.len() as f64;
    let mean = w.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl LayerStats {
    pub fn new(layers: Vec<(f64, f64)>) -> Result<Self> {
        if layers.iter().any(|&(m, s)| !m.is_finite() || !s.is_finite() || s < 0.0) {
            return Err(invalid("layer statistics must be finite with non-negative spread"));
        }
        Ok(Self { layers })
    }

    pub fn of(model: &ModelGraph) -> Self {
        Self {
            layers: model.conv_layers().iter().map(|&l| moments(model.conv_weights(l).unwrap())).collect(),
        }
    }

    pub fn layers(&self) -> &[(f64, f64)] {
        &self.layers
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# conv_layer,mean,std\n");
        for (i, (m, sd)) in self.layers.iter().enumerate() {
            writeln!(s, "{i},{m:?},{sd:?}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut layers = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let parse = |s: &str| s.parse::<f64>().map_err(|_| invalid(format!("bad number in stats line {line:?}")));
            match fields.as_slice() {
                [i, m, s] if i.parse::<usize>().ok() == Some(layers.len()) => {
                    layers.push((parse(m)?, parse(s)?))
                }
                _ => return Err(invalid(format!("bad stats line {line:?}"))),
            }
        }
        Self::new(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

pub fn compute_reference_stats(clean: &ModelGraph) -> LayerStats {
    LayerStats::of(clean)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_layers(model: &ModelGraph, reference: &LayerStats) -> Result<Vec<usize>> {
    let convs = model.conv_layers();
    if convs.len() != reference.layers.len() {
        return Err(invalid(format!(
            "reference has {} conv layers, model has {}",
            reference.layers.len(),
            convs.len()
        )));
    }
    Ok(convs)
}

/// `(Σ|μ_l − γμ_l|, Σ|σ_l − γσ_l|)` over conv layers.
pub fn stat_losses(model: &ModelGraph, reference: &LayerStats) -> Result<(f64, f64)> {
    check_layers(model, reference)?;
    let own = LayerStats::of(model);
    Ok(own.layers.iter().zip(&reference.layers).fold((0.0, 0.0), |(a, b), (o, r)| {
        (a + (o.0 - r.0).abs(), b + (o.1 - r.1).abs())
    }))
}

pub fn total_loss(l_st: f64, l_mu: f64, l_sigma: f64, alpha: f64, beta: f64) -> f64 {
    l_st + alpha * l_mu + beta * l_sigma
}

/// `α·L_μ + β·L_σ` as a parameter penalty.
pub struct Camouflage<'a> {
    pub reference: &'a LayerStats,
    pub alpha: f64,
    pub beta: f64,
}

impl ParamPenalty for Camouflage<'_> {
    fn value(&self, model: &ModelGraph) -> Result<f64> {
        let (mu, sigma) = stat_losses(model, self.reference)?;
        Ok(self.alpha * mu + self.beta * sigma)
    }

    fn add_gradient(&self, model: &ModelGraph, grads: &mut [f64]) -> Result<()> {
        let convs = check_layers(model, self.reference)?;
        let ranges = model.param_ranges();
        for (l, &(rm, rs)) in convs.into_iter().zip(&self.reference.layers) {
            let w = model.conv_weights(l).unwrap();
            let (mean, std) = moments(w);
            let n = w.len() as f64;
            let gm = self.alpha * sign(mean - rm) / n;
            let gs = if std > 0.0 { self.beta * sign(std - rs) / (n * std) } else { 0.0 };
            let start = ranges[l].as_ref().unwrap().weights.start;
            for (i, &v) in w.iter().enumerate() {
                grads[start + i] += gm + gs * (v as f64 - mean);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { alpha: 20.0, beta: 1.0, lr: 1e-3, epochs: 20, batch_size: 32, seed: 0 }
    }
}

impl TrainConfig {
    /// Task loss only.
    pub fn plain(self) -> Self {
        Self { alpha: 0.0, beta: 0.0, ..self }
    }

    fn validate(&self) -> Result<()> {
        // NaN fails every comparison, so it is rejected here too
        let ok = self.alpha >= 0.0 && self.beta >= 0.0 && self.lr > 0.0 && self.batch_size > 0;
        if !ok {
            return Err(invalid("need alpha, beta >= 0, lr > 0 and a positive batch size"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean task loss over the epoch's batches.
    pub l_st: f64,
    /// Statistical losses after the epoch; zero without a reference.
    pub l_mu: f64,
    pub l_sigma: f64,
    pub l_all: f64,
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,l_st,l_mu,l_sigma,l_all\n");
    for m in metrics {
        writeln!(s, "{},{:?},{:?},{:?},{:?}", m.epoch, m.l_st, m.l_mu, m.l_sigma, m.l_all).unwrap();
    }
    s
}

/// Adam on the masked slots only. Every slot outside the mask keeps its
/// exact bit pattern. The statistical penalty, if any, enters each step's
/// gradient once, independent of batch composition.
pub fn train_masked(
    model: &mut ModelGraph,
    mask: &MaskSet,
    data: &LabeledDataset,
    reference: Option<&LayerStats>,
    config: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    if mask.len() != model.param_count() {
        return Err(invalid(format!("mask has {} slots, model {}", mask.len(), model.param_count())));
    }
    if data.is_empty() {
        return Err(invalid("training needs at least one sample"));
    }
    let camouflage = match reference {
        Some(r) => {
            check_layers(model, r)?;
            Some(Camouflage { reference: r, alpha: config.alpha, beta: config.beta })
        }
        None if config.alpha > 0.0 || config.beta > 0.0 => {
            return Err(invalid("camouflage weights given without reference statistics"))
        }
        None => None,
    };
    if mask.count() == 0 {
        log::warn!("training mask is empty; model left unchanged");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = OptimState::new(model.param_count(), AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut st_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = data.batch(chunk)?;
            let mut spec = LossSpec::new(OutputLoss::Task(data.loss(), y.as_target()));
            if let Some(c) = &camouflage {
                spec = spec.with_penalty(c);
            }
            let (value, grads) = loss_and_gradients(model, &x, &spec)?;
            if !value.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            if mask.count() > 0 {
                masked_step(model.params_mut(), &grads, mask, &mut state)?;
            }
            let penalty = match &camouflage {
                Some(c) => c.value(model)?,
                None => 0.0,
            };
            st_sum += value - penalty;
            batches += 1;
        }
        let (l_mu, l_sigma) = match reference {
            Some(r) => stat_losses(model, r)?,
            None => (0.0, 0.0),
        };
        let l_st = st_sum / batches as f64;
        if !l_st.is_finite() || model.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        metrics.push(EpochMetrics {
            epoch,
            l_st,
            l_mu,
            l_sigma,
            l_all: total_loss(l_st, l_mu, l_sigma, config.alpha, config.beta),
        });
        log::debug!("epoch {epoch}: l_st {l_st:.5} l_mu {l_mu:.6} l_sigma {l_sigma:.6}");
    }
    Ok(metrics)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// Fraction of correct predictions, for classification.
    pub accuracy: Option<f64>,
    /// PSNR in dB at peak 1.0, for denoising.
    pub psnr: Option<f64>,
}

/// Evaluates in batches of `batch_size` and averages per sample.
pub fn evaluate(model: &ModelGraph, data: &LabeledDataset, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() || batch_size == 0 {
        return Err(invalid("evaluation needs samples and a positive batch size"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in idx.chunks(batch_size) {
        let (x, y) = data.batch(chunk)?;
        let (out, _) = forward(model, &x)?;
        let values: Vec<f64> = out.data().iter().map(|&v| v as f64).collect();
        let (l, _) = task_loss(data.loss(), &values, out.shape(), y.as_target())?;
        loss += l * chunk.len() as f64;
        if let Targets::Classes { labels, .. } = data.targets() {
            let k = values.len() / chunk.len();
            for (row, &i) in values.chunks(k).zip(chunk) {
                let pred = (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best });
                correct += (pred == labels[i]) as usize;
            }
        }
    }
    let loss = loss / data.len() as f64;
    Ok(match data.task() {
        Task::Classification => Evaluation {
            loss,
            accuracy: Some(correct as f64 / data.len() as f64),
            psnr: None,
        },
        Task::Denoising => Evaluation { loss, accuracy: None, psnr: Some(psnr(loss)) },
    })
}
