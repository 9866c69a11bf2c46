//! Weight-histogram features and a logistic-regression detector.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::model::ModelGraph;

pub const BINS: usize = 100;

/// Normalised 100-bin histogram of all conv weights over the model's own
/// `[min, max]`. The maximum falls in the last bin; a constant model puts
/// all mass in bin 0.
pub fn histogram_features(model: &ModelGraph) -> Result<Vec<f64>> {
    histogram(&model.all_conv_weights())
}

pub fn histogram(values: &[f32]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(invalid("histogram of an empty weight set"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("histogram of non-finite weights"));
    }
    let lo = values.iter().fold(f64::INFINITY, |a, &v| a.min(v as f64));
    let hi = values.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
    let mut counts = vec![0usize; BINS];
    for &v in values {
        let i = if hi > lo { (((v as f64 - lo) / (hi - lo)) * BINS as f64) as usize } else { 0 };
        counts[i.min(BINS - 1)] += 1;
    }
    Ok(counts.into_iter().map(|c| c as f64 / values.len() as f64).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorConfig {
    pub lr: f64,
    pub l2: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { lr: 0.5, l2: 1e-2, iterations: 500, seed: 0 }
    }
}

/// Linear classifier on standardised features; `true` means stego.
#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub weights: Vec<f64>,
    pub bias: f64,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Detector {
    pub fn score(&self, x: &[f64]) -> f64 {
        let z: f64 = x
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .zip(&self.weights)
            .map(|(((v, m), s), w)| (v - m) / s * w)
            .sum();
        sigmoid(z + self.bias)
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.score(x) >= 0.5
    }
}

/// Full-batch gradient descent on L2-regularised logistic loss.
pub fn train_detector(features: &[Vec<f64>], labels: &[bool], config: &DetectorConfig) -> Result<Detector> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(invalid("need one label per feature vector"));
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(invalid("detector training needs both classes"));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(invalid("feature vectors differ in length"));
    }
    let n = features.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..dim)
        .map(|j| {
            let var = features.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 { var.sqrt() } else { 1.0 }
        })
        .collect();
    let xs: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut w: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.01..0.01)).collect();
    let mut b = 0.0;
    for _ in 0..config.iterations {
        let mut gw: Vec<f64> = w.iter().map(|wi| config.l2 * wi).collect();
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(labels) {
            let z: f64 = x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            let err = (sigmoid(z) - y as u8 as f64) / n;
            for (g, a) in gw.iter_mut().zip(x) {
                *g += err * a;
            }
            gb += err;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= config.lr * g;
        }
        b -= config.lr * gb;
    }
    Ok(Detector { weights: w, bias: b, mean, scale })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    pub fn accuracy(&self) -> f64 {
        (self.true_pos + self.true_neg) as f64 / self.total() as f64
    }
}

pub fn confusion(detector: &Detector, features: &[Vec<f64>], labels: &[bool]) -> Confusion {
    let mut c = Confusion::default();
    for (f, &y) in features.iter().zip(labels) {
        match (detector.predict(f), y) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, false) => c.true_neg += 1,
            (false, true) => c.false_neg += 1,
        }
    }
    c
}

pub fn detection_rate(detector: &Detector, features: &[Vec<f64>], labels: &[bool]) -> Result<f64> {
    if features.is_empty() {
        return Err(invalid("detection rate over an empty test set"));
    }
    Ok(confusion(detector, features, labels).accuracy())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolReport {
    pub accuracies: Vec<f64>,
    pub confusion: Confusion,
}

impl PoolReport {
    pub fn mean_accuracy(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, a) in self.accuracies.iter().enumerate() {
            writeln!(s, "resample {i}: held-out accuracy {:.2}%", 100.0 * a).unwrap();
        }
        let c = &self.confusion;
        writeln!(s, "mean held-out accuracy: {:.2}%", 100.0 * self.mean_accuracy()).unwrap();
        writeln!(
            s,
            "confusion (summed): stego->stego {} stego->clean {} clean->clean {} clean->stego {}",
            c.true_pos, c.false_neg, c.true_neg, c.false_pos
        )
        .unwrap();
        s
    }
}

/// Pairs `stego[i]` with `clean[i]`, splits pairs 80/20 into train and test
/// and repeats with `resamples` different shuffles.
pub fn evaluate_pool(
    stego: &[Vec<f64>],
    clean: &[Vec<f64>],
    resamples: usize,
    seed: u64,
    config: &DetectorConfig,
) -> Result<PoolReport> {
    if stego.len() != clean.len() || stego.len() < 5 || resamples == 0 {
        return Err(invalid("pool needs equal stego/clean counts of at least 5 and one resample"));
    }
    let pairs = stego.len();
    let n_test = ((pairs as f64) * 0.2).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accuracies = Vec::with_capacity(resamples);
    let mut total = Confusion::default();
    for r in 0..resamples {
        let mut order: Vec<usize> = (0..pairs).collect();
        order.shuffle(&mut rng);
        let (test, train) = order.split_at(n_test);
        let gather = |idx: &[usize]| {
            let mut f = Vec::new();
            let mut l = Vec::new();
            for &i in idx {
                f.push(stego[i].clone());
                l.push(true);
                f.push(clean[i].clone());
                l.push(false);
            }
            (f, l)
        };
        let (tf, tl) = gather(train);
        let (ef, el) = gather(test);
        let det = train_detector(&tf, &tl, &DetectorConfig { seed: config.seed + r as u64, ..*config })?;
        let c = confusion(&det, &ef, &el);
        accuracies.push(c.accuracy());
        total.true_pos += c.true_pos;
        total.false_pos += c.false_pos;
        total.true_neg += c.true_neg;
        total.false_neg += c.false_neg;
    }
    Ok(PoolReport { accuracies, confusion: total })
}

/// One row per model: label (1 = stego) and the histogram values.
pub fn features_csv(rows: &[(bool, Vec<f64>)]) -> String {
    let mut s = String::from("label");
    for i in 0..BINS {
        write!(s, ",bin{i}").unwrap();
    }
    s.push('\n');
    for (label, f) in rows {
        s.push_str(if *label { "1" } else { "0" });
        for v in f {
            write!(s, ",{v:?}").unwrap();
        }
        s.push('\n');
    }
    s
}
