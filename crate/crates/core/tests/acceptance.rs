//! Acceptance suite. Prints one PASS/FAIL line per criterion and a summary.
//!
//! `NETSTEG_ACCEPTANCE=1,3,9 cargo test --test acceptance` runs a subset;
//! `NETSTEG_ACCEPTANCE_STRICT=1` exits non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use netsteg_core::autograd::{finite_diff_gradcheck, LossSpec, OutputLoss, Target, TaskLoss};
use netsteg_core::data::{gen_classification, ClassificationTask, LabeledDataset, Split};
use netsteg_core::error::Error;
use netsteg_core::extract::extract_secret;
use netsteg_core::gfi::{available_positions, random_plan, InsertionPlan};
use netsteg_core::model::{ber, Activation, ConvSpec, LayerSpec, ModelGraph, Task};
use netsteg_core::model_file::{deserialize, serialize};
use netsteg_core::optim::MaskSet;
use netsteg_core::pipeline::{
    build_pool, embed, embed_plan, new_classifier, plan_insertion, prepare, stego_mask, sub_seed, train_full,
    train_stego, Budget, EmbedConfig, Embedded, Strategy,
};
use netsteg_core::sih::{insert_side_filter, read_payload, SideInfo, StegoKey};
use netsteg_core::steganalysis::{evaluate_pool, histogram_features, DetectorConfig};
use netsteg_core::tensor::Tensor;
use netsteg_core::train::{evaluate, stat_losses, Camouflage, LayerStats, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const K: u32 = 8;
const PAIRS: u64 = 10;
const POOL: u64 = 20;
/// Small enough that random nets rarely have a ReLU input within one step
/// of zero; the loss is evaluated in f64, so the difference stays accurate.
const GRADCHECK_EPS: f64 = 1e-5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn key_for(seed: u64) -> StegoKey {
    StegoKey::generate(&mut ChaCha8Rng::seed_from_u64(1000 + seed))
}

/// One full sender run: embed at 30%, clean twin, camouflaged training.
struct Run {
    key: StegoKey,
    embedded: Embedded,
    mask: MaskSet,
    trained: ModelGraph,
    clean: ModelGraph,
    reference: LayerStats,
    pipeline_time: Duration,
}

struct Fixture {
    secret: ModelGraph,
    secret_train: LabeledDataset,
    secret_accuracy: f64,
    stego_train: LabeledDataset,
    stego_test: LabeledDataset,
    config: TrainConfig,
    runs: BTreeMap<u64, Run>,
}

impl Fixture {
    fn new() -> Self {
        let secret_task = ClassificationTask::new(1);
        let stego_task = ClassificationTask::new(2);
        let secret_train = gen_classification(&secret_task, 128, Split::Train).unwrap();
        let secret_test = gen_classification(&secret_task, 32, Split::Test).unwrap();
        let config = TrainConfig::default();
        let mut secret = new_classifier(16, 4, 10).unwrap();
        train_full(&mut secret, &secret_train, &config).unwrap();
        let secret_accuracy = evaluate(&secret, &secret_test, 64).unwrap().accuracy.unwrap();
        Self {
            secret,
            secret_train,
            secret_accuracy,
            stego_train: gen_classification(&stego_task, 128, Split::Train).unwrap(),
            stego_test: gen_classification(&stego_task, 32, Split::Test).unwrap(),
            config,
            runs: BTreeMap::new(),
        }
    }

    fn run(&mut self, seed: u64) -> &Run {
        if !self.runs.contains_key(&seed) {
            let run = self.make_run(seed);
            self.runs.insert(seed, run);
        }
        &self.runs[&seed]
    }

    fn make_run(&self, seed: u64) -> Run {
        let key = key_for(seed);
        let cfg = TrainConfig { seed, ..self.config };
        let t = Instant::now();
        let embedded =
            embed(&self.secret, &self.stego_train, &key, &EmbedConfig { seed, ..Default::default() }).unwrap();
        let embed_time = t.elapsed();
        let mut clean = embedded.stego.reinitialized(sub_seed(seed, 50)).unwrap();
        train_full(&mut clean, &self.stego_train, &cfg).unwrap();
        let reference = LayerStats::of(&clean);
        let t = Instant::now();
        let mask = stego_mask(&embedded.stego, &key, K).unwrap();
        let mut trained = embedded.stego.clone();
        train_stego(&mut trained, &key, K, &self.stego_train, Some(&reference), &cfg).unwrap();
        Run {
            key,
            embedded,
            mask,
            trained,
            clean,
            reference,
            pipeline_time: embed_time + t.elapsed(),
        }
    }
}

fn ac1(fx: &mut Fixture) -> Outcome {
    let mut exact = 0;
    let mut time = Duration::ZERO;
    for seed in 0..PAIRS {
        let run = fx.run(seed);
        let t = Instant::now();
        let recovered = extract_secret(&run.trained, &run.key, K).unwrap();
        time += run.pipeline_time + t.elapsed();
        let b = ber(&recovered, &fx.secret).unwrap();
        if b == 0.0 && serialize(&recovered) == serialize(&fx.secret) {
            exact += 1;
        }
    }
    outcome(
        exact == PAIRS && time < Duration::from_secs(300),
        format!(
            "lossless recovery: {exact}/{PAIRS} (seed, key) pairs with BER = 0 \
             (secret test accuracy {:.1}%, pipeline time {:.1}s, limit 300s)",
            100.0 * fx.secret_accuracy,
            time.as_secs_f64()
        ),
    )
}

fn frozen_violations(before: &ModelGraph, after: &ModelGraph, mask: &MaskSet) -> usize {
    before
        .params()
        .iter()
        .zip(after.params())
        .enumerate()
        .filter(|(i, (a, b))| !mask.get(*i) && a.to_bits() != b.to_bits())
        .count()
}

fn ac2(fx: &mut Fixture) -> Outcome {
    let mut slots = 0;
    let mut violations = 0;
    let mut runs = 0;
    for seed in 0..PAIRS {
        let run = fx.run(seed);
        // the payload rewrite after training touches only side-filter LSBs,
        // which were already in place, so the comparison covers it too
        violations += frozen_violations(&run.embedded.stego, &run.trained, &run.mask);
        slots += run.mask.len() - run.mask.count();
        runs += 1;
    }
    // a task-only run with a different seed and step size
    let cfg = TrainConfig { seed: 77, lr: 3e-2, epochs: 5, batch_size: 7, ..fx.config }.plain();
    let data = fx.stego_train.clone();
    let run = fx.run(0);
    let mut alt = run.embedded.stego.clone();
    train_stego(&mut alt, &run.key, K, &data, None, &cfg).unwrap();
    violations += frozen_violations(&run.embedded.stego, &alt, &run.mask);
    slots += run.mask.len() - run.mask.count();
    runs += 1;
    outcome(
        violations == 0,
        format!("freeze invariant: {violations} changed frozen slots out of {slots} over {runs} training runs"),
    )
}

fn random_net(rng: &mut ChaCha8Rng) -> (ModelGraph, Tensor, Vec<usize>, LayerStats) {
    let channels = rng.random_range(1..=2);
    let size = [6, 8][rng.random_range(0..2)];
    let mut layers = Vec::new();
    let mut c = channels;
    let mut hw = size;
    let n_conv = rng.random_range(1..=3);
    for i in 0..n_conv {
        let d = rng.random_range(1..=4);
        let s = [1, 3][rng.random_range(0..2)];
        layers.push(LayerSpec::Conv(ConvSpec::new(d, c, s)));
        let act = if rng.random_bool(0.7) { Activation::Relu } else { Activation::Identity };
        layers.push(LayerSpec::Activation(act));
        if i == 0 && rng.random_bool(0.5) {
            layers.push(LayerSpec::MaxPool);
            hw /= 2;
        }
        c = d;
    }
    let classes = rng.random_range(2..=3);
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Dense { in_dim: c * hw * hw, out_dim: classes });
    let model =
        ModelGraph::with_random_params([channels, size, size], Task::Classification, layers, rng.random()).unwrap();
    let batch = 2;
    let x = Tensor::new(
        vec![batch, channels, size, size],
        (0..batch * channels * size * size).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let reference = LayerStats::new(
        (0..n_conv).map(|_| (rng.random_range(-0.1..0.1), rng.random_range(0.05..0.6))).collect(),
    )
    .unwrap();
    (model, x, labels, reference)
}

fn ac3() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = 0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, x, labels, reference) = random_net(&mut rng);
        let penalty = Camouflage { reference: &reference, alpha: 20.0, beta: 1.0 };
        let spec = LossSpec::new(OutputLoss::Task(TaskLoss::CrossEntropy, Target::Classes(&labels)))
            .with_penalty(&penalty);
        let err = finite_diff_gradcheck(&model, &x, &spec, GRADCHECK_EPS).unwrap();
        worst = worst.max(err);
        failures += (err >= 1e-3) as usize;
    }
    let time = t.elapsed();
    outcome(
        failures == 0 && time < Duration::from_secs(60),
        format!(
            "gradient check: 20 random nets with camouflage penalty, eps {GRADCHECK_EPS:e}, worst relative \
             error {worst:.2e} (limit 1e-3), {:.1}s",
            time.as_secs_f64()
        ),
    )
}

/// Parameter count of the stego model derived from the plan alone: each
/// conv layer grows by its inserted filters (plus the side filter) and by
/// one input channel per filter added to its feeding conv layer.
fn hand_count(secret: &ModelGraph, e: &Embedded) -> usize {
    let mut added: BTreeMap<usize, usize> = BTreeMap::new();
    for &(l, _) in e.plan.positions() {
        *added.entry(l).or_default() += 1;
    }
    *added.entry(e.side.layer).or_default() += 1;
    let mut total = 0;
    let mut extra_channels = 0;
    for (l, layer) in secret.layers().iter().enumerate() {
        match layer {
            LayerSpec::Conv(s) => {
                let d = s.filters + added.get(&l).copied().unwrap_or(0);
                let c = s.channels + extra_channels;
                total += d * c * s.kernel * s.kernel + d;
                extra_channels = added.get(&l).copied().unwrap_or(0);
            }
            LayerSpec::Dense { in_dim, out_dim } => total += in_dim * out_dim + out_dim,
            _ => {}
        }
    }
    total
}

fn ac4(fx: &mut Fixture) -> Outcome {
    let secret = fx.secret.clone();
    let run = fx.run(0);
    let e = &run.embedded;
    let ratio = e.stego.param_count() as f64 / secret.param_count() as f64;
    let hand = hand_count(&secret, e);
    let pass = e.expansion_rate == ratio && hand == e.stego.param_count() && e.adapter_start.is_none();
    outcome(
        pass,
        format!(
            "expansion accounting: e = {:.6} = {} / {} (ratio {:.6}), hand count {} vs model {} \
             ({} interference filters, side filter in layer {})",
            e.expansion_rate,
            e.stego.param_count(),
            secret.param_count(),
            ratio,
            hand,
            e.stego.param_count(),
            e.plan.len(),
            e.side.layer
        ),
    )
}

/// The budget whose expansion rate lies closest to `target`.
fn matched_plan(
    fx: &Fixture,
    key: &StegoKey,
    seed: u64,
    target: f64,
    plan_for: impl Fn(usize) -> InsertionPlan,
) -> Embedded {
    let prepared = prepare(&fx.secret, &fx.stego_train, seed).unwrap();
    (0..=available_positions(&prepared.model))
        .map(|n| embed_plan(&fx.secret, &prepared, &plan_for(n), key, K, seed).unwrap())
        .min_by(|a, b| (a.expansion_rate - target).abs().total_cmp(&(b.expansion_rate - target).abs()))
        .unwrap()
}

fn ac5(fx: &mut Fixture) -> Outcome {
    let t = Instant::now();
    let prepared = prepare(&fx.secret, &fx.stego_train, 0).unwrap();
    let full = available_positions(&prepared.model);
    let ranking = plan_insertion(&prepared, &fx.stego_train, Budget::Count(full), Strategy::Gradient, 0).unwrap();
    let mut acc = [Vec::new(), Vec::new()];
    let mut rates = [Vec::new(), Vec::new()];
    for seed in 0..5 {
        let key = key_for(100 + seed);
        let gfi = matched_plan(fx, &key, seed, 1.3, |n| InsertionPlan::new(ranking.positions()[..n].to_vec()));
        let rfi = matched_plan(fx, &key, seed, 1.3, |n| {
            random_plan(&prepared.model, n, sub_seed(seed, 1)).unwrap()
        });
        for (i, e) in [gfi, rfi].into_iter().enumerate() {
            let mut stego = e.stego.clone();
            let cfg = TrainConfig { seed, ..fx.config }.plain();
            train_stego(&mut stego, &key, K, &fx.stego_train, None, &cfg).unwrap();
            acc[i].push(evaluate(&stego, &fx.stego_test, 64).unwrap().accuracy.unwrap());
            rates[i].push(e.expansion_rate);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (g, r) = (mean(&acc[0]), mean(&acc[1]));
    let time = t.elapsed();
    outcome(
        g >= r && time < Duration::from_secs(900),
        format!(
            "GFI vs RFI at e ~ 1.3: mean accuracy GFI {:.2}% (e {:.3}) vs RFI {:.2}% (e {:.3}), gap {:+.2} points, \
             {:.1}s",
            100.0 * g,
            mean(&rates[0]),
            100.0 * r,
            mean(&rates[1]),
            100.0 * (g - r),
            time.as_secs_f64()
        ),
    )
}

fn ac6(fx: &mut Fixture) -> Outcome {
    let t = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    let config = fx.config;
    let data = fx.stego_train.clone();
    for seed in 0..3 {
        let run = fx.run(seed);
        let mut plain = run.embedded.stego.clone();
        let cfg = TrainConfig { seed, ..config }.plain();
        train_stego(&mut plain, &run.key, K, &data, None, &cfg).unwrap();
        let (mu_all, sd_all) = stat_losses(&run.trained, &run.reference).unwrap();
        let (mu_st, sd_st) = stat_losses(&plain, &run.reference).unwrap();
        pass &= mu_all <= mu_st && sd_all <= sd_st;
        lines.push(format!("seed {seed}: mu {mu_all:.5}/{mu_st:.5} sigma {sd_all:.5}/{sd_st:.5}"));
    }
    let time = t.elapsed();
    outcome(
        pass && time < Duration::from_secs(600),
        format!("camouflage (L_all/L_st): {}; {:.1}s", lines.join(", "), time.as_secs_f64()),
    )
}

fn ac7(fx: &mut Fixture) -> Outcome {
    let t = Instant::now();
    let mut gaps = Vec::new();
    let mut stego_acc = 0.0;
    let mut clean_acc = 0.0;
    let test = fx.stego_test.clone();
    for seed in 0..3 {
        let run = fx.run(seed);
        let s = evaluate(&run.trained, &test, 64).unwrap().accuracy.unwrap();
        let c = evaluate(&run.clean, &test, 64).unwrap().accuracy.unwrap();
        stego_acc += s / 3.0;
        clean_acc += c / 3.0;
        gaps.push(c - s);
    }
    let gap = clean_acc - stego_acc;
    outcome(
        gap.abs() <= 0.05,
        format!(
            "fidelity: mean stego accuracy {:.2}% vs clean {:.2}% over 3 seeds, gap {:.2} points (limit 5); {:.1}s",
            100.0 * stego_acc,
            100.0 * clean_acc,
            100.0 * gap,
            t.elapsed().as_secs_f64()
        ),
    )
}

// Every pair hides its own secret, trained exactly like the fixture's but
// from a different initialisation; reusing one secret would let the detector
// memorise that secret's weights rather than detect the method.
fn ac8(fx: &mut Fixture) -> Outcome {
    let t = Instant::now();
    let secrets: Vec<ModelGraph> = (0..POOL)
        .map(|seed| {
            let mut m = new_classifier(16, 4, sub_seed(seed, 60)).unwrap();
            train_full(&mut m, &fx.secret_train, &TrainConfig { seed, ..fx.config }).unwrap();
            m
        })
        .collect();
    let pool =
        build_pool(&secrets, &fx.stego_train, POOL as usize, 8, &EmbedConfig::default(), &fx.config).unwrap();
    let stego: Vec<Vec<f64>> = pool.iter().map(|p| histogram_features(&p.stego).unwrap()).collect();
    let clean: Vec<Vec<f64>> = pool.iter().map(|p| histogram_features(&p.clean).unwrap()).collect();
    let report = evaluate_pool(&stego, &clean, 5, 8, &DetectorConfig::default()).unwrap();
    let mean = report.mean_accuracy();
    let accs: Vec<String> = report.accuracies.iter().map(|a| format!("{:.1}", 100.0 * a)).collect();
    outcome(
        (0.35..=0.65).contains(&mean) && t.elapsed() < Duration::from_secs(2700),
        format!(
            "undetectability: {POOL} stego + {POOL} clean (distinct secrets), held-out accuracy {:.2}% \
             (resamples {}), {:.1}s",
            100.0 * mean,
            accs.join("/"),
            t.elapsed().as_secs_f64()
        ),
    )
}

fn ac9(fx: &mut Fixture) -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let skeleton = fx.secret.clone();
    let mut round_trips = 0;
    for i in 0..1000u64 {
        let key = StegoKey::generate(&mut rng);
        let len = rng.random_range(0..=112);
        let info = SideInfo {
            bitmap: (0..len).map(|_| rng.random_bool(0.5)).collect(),
            adapter_start: rng.random_bool(0.3).then(|| rng.random_range(0..=u16::MAX as usize)),
            secret_task: if rng.random_bool(0.5) { Task::Denoising } else { Task::Classification },
        };
        let (stego, sent) = insert_side_filter(&skeleton, &key, &info, K, i).unwrap();
        let (got, decoded) = read_payload(&stego, &key, K).unwrap();
        round_trips += (got == sent && decoded == info) as usize;
    }
    let run = fx.run(0);
    let mut rejected = 0;
    for _ in 0..100 {
        let wrong = StegoKey::generate(&mut rng);
        rejected += matches!(extract_secret(&run.trained, &wrong, K), Err(Error::Integrity)) as usize;
    }
    let check = netsteg_core::crc::crc32(b"123456789");
    let time = t.elapsed();
    outcome(
        round_trips == 1000 && rejected == 100 && check == 0xCBF4_3926 && time < Duration::from_secs(60),
        format!(
            "side payload codec: {round_trips}/1000 round trips, {rejected}/100 wrong keys rejected by CRC, \
             CRC-32 check {check:#010X}; {:.1}s",
            time.as_secs_f64()
        ),
    )
}

fn ac10(fx: &mut Fixture) -> Outcome {
    let specials = [
        -0.0f32,
        0.0,
        f32::MAX,
        f32::MIN,
        f32::MIN_POSITIVE,
        -f32::MIN_POSITIVE,
        f32::from_bits(1),
        f32::from_bits(0x807F_FFFF),
        f32::INFINITY,
        f32::NEG_INFINITY,
        f32::from_bits(0x7FC0_1234),
        f32::from_bits(0xFFA0_0001),
    ];
    let mut model = fx.run(0).trained.clone();
    for (p, v) in model.params_mut().iter_mut().zip(specials.iter().cycle()).step_by(3) {
        *p = *v;
    }
    let mut exact = 0;
    let mut total = 0;
    for m in [&model, &fx.secret] {
        let bytes = serialize(m);
        let back = deserialize(&bytes).unwrap();
        let same_bits = m.params().iter().zip(back.params()).all(|(a, b)| a.to_bits() == b.to_bits());
        exact += (same_bits && serialize(&back) == bytes && back.same_architecture(m)) as usize;
        total += 1;
    }
    outcome(
        exact == total,
        format!("serialization: {exact}/{total} models bit-exact through .nsm, including -0, NaN payloads, infinities, subnormals"),
    )
}

type Check = fn(&mut Fixture) -> Outcome;

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("NETSTEG_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().is_none_or(|o| o.contains(&i));
    let started = Instant::now();
    let mut fx = Fixture::new();
    let criteria: [(usize, Check); 10] = [
        (1, ac1),
        (2, ac2),
        (3, |_| ac3()),
        (4, ac4),
        (5, ac5),
        (6, ac6),
        (7, ac7),
        (8, ac8),
        (9, ac9),
        (10, ac10),
    ];
    let mut failed = Vec::new();
    for (i, check) in criteria {
        if !wanted(i) {
            continue;
        }
        let o = check(&mut fx);
        if !o.pass {
            failed.push(i.to_string());
        }
        println!("AC{i:<2} {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!(
        "acceptance finished in {:.1}s, {} failing{}",
        started.elapsed().as_secs_f64(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" (AC{})", failed.join(", AC")) }
    );
    // the report is the result; strict mode turns failures into a non-zero exit
    let strict = std::env::var("NETSTEG_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed.is_empty() || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
