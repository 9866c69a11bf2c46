//! Adam with a binary update mask.
//!
//! Masked-out slots are skipped entirely: neither the parameter nor its
//! moment accumulators are touched, so their bit patterns cannot change.
//! Masked-in slots receive exactly the update an unmasked step would give.

use crate::error::{invalid, Result};

/// Binary mask over a model's parameter store; `true` marks a trainable slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    bits: Vec<bool>,
}

impl MaskSet {
    pub fn zeros(len: usize) -> Self {
        Self { bits: vec![false; len] }
    }

    pub fn ones(len: usize) -> Self {
        Self { bits: vec![true; len] }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, slot: usize) -> bool {
        self.bits[slot]
    }

    pub fn set(&mut self, slot: usize, trainable: bool) {
        self.bits[slot] = trainable;
    }

    pub fn set_range(&mut self, range: std::ops::Range<usize>, trainable: bool) {
        self.bits[range].fill(trainable);
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of trainable slots.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct OptimState {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Self { config, m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0 }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }
}

/// One Adam step restricted to the mask's support.
pub fn masked_step(
    params: &mut [f32],
    grads: &[f64],
    mask: &MaskSet,
    state: &mut OptimState,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || mask.len() != n || state.m.len() != n {
        return Err(invalid(format!(
            "length mismatch: params {n}, grads {}, mask {}, optimizer {}",
            grads.len(),
            mask.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for i in mask.support() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let update = lr * (state.m[i] / c1) / ((state.v[i] / c2).sqrt() + eps);
        params[i] = (params[i] as f64 - update) as f32;
    }
    Ok(())
}
