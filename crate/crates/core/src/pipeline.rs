//! Toy architectures and the end-to-end sender/receiver steps.

use crate::data::LabeledDataset;
use crate::error::{invalid, Result};
use crate::extract::recover;
use crate::gfi::{
    apply_insertion, attach_adapter, budget_from_percent, gradient_plan, random_plan, InsertionPlan,
    PositionBitmap,
};
use crate::model::{expansion_rate, Activation, ConvSpec, LayerSpec, ModelGraph, Task};
use crate::optim::MaskSet;
use crate::sih::{insert_side_filter, write_payload, SideInfo, SideLocator, StegoKey, DEFAULT_LSB_BITS};
use crate::train::{build_mask, train_masked, EpochMetrics, LayerStats, TrainConfig};

/// Three conv blocks and a dense head. The 5x5 first layer gives every
/// insertable layer room for the side payload at 8 bits per scalar.
pub fn classifier_layers(image_size: usize, n_classes: usize) -> Vec<LayerSpec> {
    let relu = LayerSpec::Activation(Activation::Relu);
    let side = image_size / 4;
    vec![
        LayerSpec::Conv(ConvSpec::new(8, 1, 5)),
        relu,
        LayerSpec::MaxPool,
        LayerSpec::Conv(ConvSpec::new(16, 8, 3)),
        relu,
        LayerSpec::MaxPool,
        LayerSpec::Conv(ConvSpec::new(16, 16, 3)),
        relu,
        LayerSpec::Flatten,
        LayerSpec::Dense { in_dim: 16 * side * side, out_dim: n_classes },
    ]
}

/// Three same-padded convs mapping an image to an image.
pub fn denoiser_layers() -> Vec<LayerSpec> {
    let relu = LayerSpec::Activation(Activation::Relu);
    vec![
        LayerSpec::Conv(ConvSpec::new(8, 1, 5)),
        relu,
        LayerSpec::Conv(ConvSpec::new(8, 8, 3)),
        relu,
        LayerSpec::Conv(ConvSpec::new(1, 8, 3)),
    ]
}

pub fn new_classifier(image_size: usize, n_classes: usize, seed: u64) -> Result<ModelGraph> {
    ModelGraph::with_random_params(
        [1, image_size, image_size],
        Task::Classification,
        classifier_layers(image_size, n_classes),
        seed,
    )
}

pub fn new_denoiser(image_size: usize, seed: u64) -> Result<ModelGraph> {
    ModelGraph::with_random_params([1, image_size, image_size], Task::Denoising, denoiser_layers(), seed)
}

/// Independent seed for one step of a run.
pub fn sub_seed(seed: u64, step: u64) -> u64 {
    seed ^ step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains every parameter on the task loss alone.
pub fn train_full(model: &mut ModelGraph, data: &LabeledDataset, config: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    let mask = MaskSet::ones(model.param_count());
    train_masked(model, &mask, data, None, &config.plain())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    Count(usize),
    Percent(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Top positions by gradient importance.
    Gradient,
    /// Uniformly random positions.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbedConfig {
    pub budget: Budget,
    pub strategy: Strategy,
    pub lsb_bits: u32,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self { budget: Budget::Percent(30.0), strategy: Strategy::Gradient, lsb_bits: DEFAULT_LSB_BITS, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Embedded {
    pub stego: ModelGraph,
    pub plan: InsertionPlan,
    pub bitmap: PositionBitmap,
    pub side: SideLocator,
    pub adapter_start: Option<usize>,
    pub expansion_rate: f64,
    pub frame_bits: usize,
    pub capacity_bits: usize,
}

impl Embedded {
    pub fn capacity_margin(&self) -> isize {
        self.capacity_bits as isize - self.frame_bits as isize
    }
}

/// The secret as scored and trained on the stego task: the head adapter is
/// attached here when output shapes differ.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub model: ModelGraph,
    pub adapter_start: Option<usize>,
    pub secret_task: Task,
}

pub fn prepare(secret: &ModelGraph, stego_data: &LabeledDataset, seed: u64) -> Result<Prepared> {
    if secret.input_shape() != stego_data.input_shape() {
        return Err(invalid(format!(
            "secret expects inputs {:?}, stego data has {:?}",
            secret.input_shape(),
            stego_data.input_shape()
        )));
    }
    let (mut model, adapter_start) = attach_adapter(secret, &stego_data.output_shape(), sub_seed(seed, 0))?;
    model.set_task(stego_data.task());
    Ok(Prepared { model, adapter_start, secret_task: secret.task() })
}

pub fn plan_insertion(
    prepared: &Prepared,
    stego_data: &LabeledDataset,
    budget: Budget,
    strategy: Strategy,
    seed: u64,
) -> Result<InsertionPlan> {
    let n = match budget {
        Budget::Count(n) => n,
        Budget::Percent(p) => budget_from_percent(&prepared.model, p)?,
    };
    match strategy {
        Strategy::Gradient => gradient_plan(&prepared.model, stego_data, n),
        Strategy::Random => random_plan(&prepared.model, n, sub_seed(seed, 1)),
    }
}

/// Inserts the planned interference filters, then the key-located side
/// filter carrying the bitmap.
pub fn embed_plan(
    secret: &ModelGraph,
    prepared: &Prepared,
    plan: &InsertionPlan,
    key: &StegoKey,
    lsb_bits: u32,
    seed: u64,
) -> Result<Embedded> {
    let (skeleton, bitmap) = apply_insertion(&prepared.model, plan, sub_seed(seed, 2))?;
    let info = SideInfo {
        bitmap: bitmap.bits().collect(),
        adapter_start: prepared.adapter_start,
        secret_task: prepared.secret_task,
    };
    let (stego, side) = insert_side_filter(&skeleton, key, &info, lsb_bits, sub_seed(seed, 3))?;
    Ok(Embedded {
        expansion_rate: expansion_rate(secret, &stego)?,
        frame_bits: info.frame_bits(),
        capacity_bits: side.capacity(&stego, lsb_bits)?,
        stego,
        plan: plan.clone(),
        bitmap,
        side,
        adapter_start: prepared.adapter_start,
    })
}

/// Builds an untrained stego model from a trained secret.
pub fn embed(
    secret: &ModelGraph,
    stego_data: &LabeledDataset,
    key: &StegoKey,
    config: &EmbedConfig,
) -> Result<Embedded> {
    let prepared = prepare(secret, stego_data, config.seed)?;
    let plan = plan_insertion(&prepared, stego_data, config.budget, config.strategy, config.seed)?;
    embed_plan(secret, &prepared, &plan, key, config.lsb_bits, config.seed)
}

/// The training mask of a stego model, rebuilt from its payload.
pub fn stego_mask(stego: &ModelGraph, key: &StegoKey, lsb_bits: u32) -> Result<MaskSet> {
    let r = recover(stego, key, lsb_bits)?;
    build_mask(stego, &r.bitmap, &r.side, r.info.adapter_start)
}

/// Masked training of a stego model, then a fresh write of the payload.
pub fn train_stego(
    stego: &mut ModelGraph,
    key: &StegoKey,
    lsb_bits: u32,
    data: &LabeledDataset,
    reference: Option<&LayerStats>,
    config: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    let r = recover(stego, key, lsb_bits)?;
    let mask = build_mask(stego, &r.bitmap, &r.side, r.info.adapter_start)?;
    let metrics = train_masked(stego, &mask, data, reference, config)?;
    write_payload(stego, &r.side, key, &r.info, lsb_bits)?;
    Ok(metrics)
}

/// One stego model and its clean twin (same architecture, trained from
/// scratch on the same data; also the statistics reference).
#[derive(Clone, Debug)]
pub struct PoolPair {
    pub stego: ModelGraph,
    pub clean: ModelGraph,
}

/// Builds `pairs` stego/clean pairs, each with its own key and seeds derived
/// from `seed`. Pair `i` hides `secrets[i % secrets.len()]`; a pool that
/// reuses one secret lets a detector learn that secret instead of the method.
pub fn build_pool(
    secrets: &[ModelGraph],
    data: &LabeledDataset,
    pairs: usize,
    seed: u64,
    embed_config: &EmbedConfig,
    train_config: &TrainConfig,
) -> Result<Vec<PoolPair>> {
    use rand::SeedableRng;
    if secrets.is_empty() {
        return Err(invalid("pool needs at least one secret model"));
    }
    let mut key_rng = rand_chacha::ChaCha8Rng::seed_from_u64(sub_seed(seed, 90));
    (0..pairs as u64)
        .map(|i| {
            let run_seed = sub_seed(seed, 100 + i);
            let key = StegoKey::generate(&mut key_rng);
            let secret = &secrets[i as usize % secrets.len()];
            let e = embed(secret, data, &key, &EmbedConfig { seed: run_seed, ..*embed_config })?;
            let cfg = TrainConfig { seed: run_seed, ..*train_config };
            let mut clean = e.stego.reinitialized(sub_seed(run_seed, 50))?;
            train_full(&mut clean, data, &cfg)?;
            let reference = LayerStats::of(&clean);
            let mut stego = e.stego;
            train_stego(&mut stego, &key, embed_config.lsb_bits, data, Some(&reference), &cfg)?;
            log::info!("pool pair {} of {pairs} done", i + 1);
            Ok(PoolPair { stego, clean })
        })
        .collect()
}
