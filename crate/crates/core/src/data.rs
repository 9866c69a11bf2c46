//! Seeded synthetic image tasks.
//!
//! A classification task is defined by its seed: the seed picks one bar
//! orientation and one blob position per class. Samples are jittered,
//! amplitude-scaled renderings of the class prototype plus Gaussian noise.
//! Each split draws from its own ChaCha stream, so splits never share
//! samples and any split can be regenerated on its own.

use std::f32::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Target, TaskLoss};
use crate::crc::crc32;
use crate::error::{invalid, FormatError, Result};
use crate::model::Task;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }

    fn tag(self) -> u8 {
        self.stream() as u8
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Split::Train),
            2 => Some(Split::Val),
            3 => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, n_classes: usize },
    Images(Tensor),
}

/// Owned targets for one minibatch.
#[derive(Clone, Debug, PartialEq)]
pub enum BatchTargets {
    Classes(Vec<usize>),
    Values(Vec<f32>),
}

impl BatchTargets {
    pub fn as_target(&self) -> Target<'_> {
        match self {
            BatchTargets::Classes(l) => Target::Classes(l),
            BatchTargets::Values(v) => Target::Values(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    samples: Tensor,
    targets: Targets,
    split: Split,
}

impl LabeledDataset {
    pub fn new(samples: Tensor, targets: Targets, split: Split) -> Result<Self> {
        if samples.shape().len() != 4 {
            return Err(invalid("samples must be an n x c x h x w tensor"));
        }
        let n = samples.len();
        match &targets {
            Targets::Classes { labels, n_classes } => {
                if labels.len() != n {
                    return Err(invalid(format!("{} labels for {n} samples", labels.len())));
                }
                if *n_classes < 2 || labels.iter().any(|&l| l >= *n_classes) {
                    return Err(invalid("labels must lie in a label space of at least 2 classes"));
                }
            }
            Targets::Images(t) => {
                if t.shape() != samples.shape() {
                    return Err(invalid("denoising targets must match the sample shape"));
                }
            }
        }
        Ok(Self { samples, targets, split })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn task(&self) -> Task {
        match self.targets {
            Targets::Classes { .. } => Task::Classification,
            Targets::Images(_) => Task::Denoising,
        }
    }

    pub fn loss(&self) -> TaskLoss {
        match self.task() {
            Task::Classification => TaskLoss::CrossEntropy,
            Task::Denoising => TaskLoss::MeanSquared,
        }
    }

    pub fn n_classes(&self) -> Option<usize> {
        match self.targets {
            Targets::Classes { n_classes, .. } => Some(n_classes),
            Targets::Images(_) => None,
        }
    }

    /// Per-sample `[c, h, w]`.
    pub fn input_shape(&self) -> [usize; 3] {
        let s = self.samples.shape();
        [s[1], s[2], s[3]]
    }

    /// Per-sample shape a model must emit for this task.
    pub fn output_shape(&self) -> Vec<usize> {
        match self.targets {
            Targets::Classes { n_classes, .. } => vec![n_classes],
            Targets::Images(_) => self.input_shape().to_vec(),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, BatchTargets)> {
        let x = self.samples.gather(indices)?;
        let y = match &self.targets {
            Targets::Classes { labels, .. } => {
                BatchTargets::Classes(indices.iter().map(|&i| labels[i]).collect())
            }
            Targets::Images(t) => BatchTargets::Values(t.gather(indices)?.into_data()),
        };
        Ok((x, y))
    }

    /// Keeps only the first `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let samples = self.samples.gather(&idx)?;
        let targets = match &self.targets {
            Targets::Classes { labels, n_classes } => {
                Targets::Classes { labels: labels[..idx.len()].to_vec(), n_classes: *n_classes }
            }
            Targets::Images(t) => Targets::Images(t.gather(&idx)?),
        };
        Self::new(samples, targets, self.split)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassificationTask {
    pub seed: u64,
    pub n_classes: usize,
    pub image_size: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f32,
}

impl ClassificationTask {
    pub fn new(seed: u64) -> Self {
        Self { seed, n_classes: 4, image_size: 16, noise: 0.15 }
    }
}

#[derive(Clone, Copy, Debug)]
struct Prototype {
    angle: f32,
    bar_center: (f32, f32),
    blob_center: (f32, f32),
}

fn prototypes(task: &ClassificationTask) -> Vec<Prototype> {
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    rng.set_stream(0);
    let size = task.image_size as f32;
    let base: f32 = rng.random_range(0.0..PI);
    (0..task.n_classes)
        .map(|k| Prototype {
            angle: base + k as f32 * PI / task.n_classes as f32,
            bar_center: (
                rng.random_range(0.35..0.65) * size,
                rng.random_range(0.35..0.65) * size,
            ),
            blob_center: (
                rng.random_range(0.2..0.8) * size,
                rng.random_range(0.2..0.8) * size,
            ),
        })
        .collect()
}

/// Distance from `p` to the segment through `center` with direction
/// `angle` and half-length `half`.
fn segment_distance(p: (f32, f32), center: (f32, f32), angle: f32, half: f32) -> f32 {
    let (dx, dy) = (p.0 - center.0, p.1 - center.1);
    let (ux, uy) = (angle.cos(), angle.sin());
    let along = (dx * ux + dy * uy).clamp(-half, half);
    let (rx, ry) = (dx - along * ux, dy - along * uy);
    (rx * rx + ry * ry).sqrt()
}

fn render(
    size: usize,
    bars: &[((f32, f32), f32, f32)],
    blobs: &[((f32, f32), f32, f32)],
    out: &mut [f32],
) {
    let half = size as f32 * 0.35;
    for y in 0..size {
        for x in 0..size {
            let p = (x as f32 + 0.5, y as f32 + 0.5);
            let mut v = 0.0;
            for &(c, angle, amp) in bars {
                let d = segment_distance(p, c, angle, half);
                v += amp * (-d * d / (2.0 * 0.8 * 0.8)).exp();
            }
            for &(c, radius, amp) in blobs {
                let (dx, dy) = (p.0 - c.0, p.1 - c.1);
                v += amp * (-(dx * dx + dy * dy) / (2.0 * radius * radius)).exp();
            }
            out[y * size + x] = v;
        }
    }
}

/// Balanced classification split: sample `i` has label `i % n_classes`.
pub fn gen_classification(
    task: &ClassificationTask,
    n_per_class: usize,
    split: Split,
) -> Result<LabeledDataset> {
    if task.n_classes < 2 {
        return Err(invalid("need at least two classes"));
    }
    if task.image_size < 8 {
        return Err(invalid("image size must be at least 8"));
    }
    if n_per_class == 0 {
        return Err(invalid("empty dataset: n_per_class is 0"));
    }
    if !(task.noise >= 0.0 && task.noise.is_finite()) {
        return Err(invalid("noise level must be finite and non-negative"));
    }
    let protos = prototypes(task);
    let size = task.image_size;
    let n = n_per_class * task.n_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    rng.set_stream(split.stream());
    let noise = Normal::new(0.0f32, task.noise.max(0.0)).expect("valid sigma");
    let mut data = vec![0.0f32; n * size * size];
    let mut labels = Vec::with_capacity(n);
    for (i, img) in data.chunks_exact_mut(size * size).enumerate() {
        let k = i % task.n_classes;
        let p = protos[k];
        let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-1.5f32..1.5);
        let bar_c = (p.bar_center.0 + jitter(&mut rng), p.bar_center.1 + jitter(&mut rng));
        let angle = p.angle + rng.random_range(-0.12f32..0.12);
        let blob_c = (p.blob_center.0 + jitter(&mut rng), p.blob_center.1 + jitter(&mut rng));
        let amp = rng.random_range(0.7f32..1.0);
        render(size, &[(bar_c, angle, amp)], &[(blob_c, 1.6, amp * 0.8)], img);
        if task.noise > 0.0 {
            for v in img.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        labels.push(k);
    }
    LabeledDataset::new(
        Tensor::new(vec![n, 1, size, size], data)?,
        Targets::Classes { labels, n_classes: task.n_classes },
        split,
    )
}

/// Denoising split: clean targets of random bars and blobs in `[0, 1]`,
/// samples are targets plus N(0, sigma^2) noise (not clipped).
pub fn gen_denoising(
    seed: u64,
    n_samples: usize,
    image_size: usize,
    noise_sigma: f32,
    split: Split,
) -> Result<LabeledDataset> {
    if image_size < 8 {
        return Err(invalid("image size must be at least 8"));
    }
    if n_samples == 0 {
        return Err(invalid("empty dataset: n_samples is 0"));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(invalid("noise sigma must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.stream());
    let s = image_size as f32;
    let per = image_size * image_size;
    let mut clean = vec![0.0f32; n_samples * per];
    for img in clean.chunks_exact_mut(per) {
        let bars: Vec<_> = (0..rng.random_range(1..=2))
            .map(|_| {
                let c = (rng.random_range(0.2..0.8) * s, rng.random_range(0.2..0.8) * s);
                (c, rng.random_range(0.0..PI), rng.random_range(0.4f32..0.9))
            })
            .collect();
        let blobs: Vec<_> = (0..rng.random_range(1..=3))
            .map(|_| {
                let c = (rng.random_range(0.1..0.9) * s, rng.random_range(0.1..0.9) * s);
                (c, rng.random_range(1.0f32..2.5), rng.random_range(0.3f32..0.8))
            })
            .collect();
        render(image_size, &bars, &blobs, img);
        for v in img.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    let mut noisy = clean.clone();
    if noise_sigma > 0.0 {
        let noise = Normal::new(0.0f32, noise_sigma).expect("valid sigma");
        for v in noisy.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let shape = vec![n_samples, 1, image_size, image_size];
    LabeledDataset::new(
        Tensor::new(shape.clone(), noisy)?,
        Targets::Images(Tensor::new(shape, clean)?),
        split,
    )
}

/// Peak signal-to-noise ratio on a `[0, 1]` scale.
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

const DATA_MAGIC: [u8; 4] = *b"NSD1";
const DATA_VERSION: u16 = 1;

/// Binary dataset block:
///
/// ```text
/// magic "NSD1" | version u16 | task u8 (0 cls, 1 denoise) | split u8 (1 train, 2 val, 3 test)
/// n u32 | c u32 | h u32 | w u32 | n_classes u32 (0 for denoising)
/// samples f32 x n*c*h*w
/// targets u32 x n (classification) or f32 x n*c*h*w (denoising)
/// CRC-32 u32 of every preceding byte
/// ```
/// All values little-endian.
pub fn serialize_dataset(ds: &LabeledDataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&DATA_MAGIC);
    out.extend_from_slice(&DATA_VERSION.to_le_bytes());
    out.push(match ds.task() {
        Task::Classification => 0,
        Task::Denoising => 1,
    });
    out.push(ds.split.tag());
    let [c, h, w] = ds.input_shape();
    for v in [ds.len(), c, h, w, ds.n_classes().unwrap_or(0)] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in ds.samples.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match &ds.targets {
        Targets::Classes { labels, .. } => {
            for &l in labels {
                out.extend_from_slice(&(l as u32).to_le_bytes());
            }
        }
        Targets::Images(t) => {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let sum = crc32(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn deserialize_dataset(bytes: &[u8]) -> std::result::Result<LabeledDataset, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated);
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != DATA_MAGIC {
        return Err(FormatError::BadMagic { found: magic });
    }
    if bytes.len() < 30 {
        return Err(FormatError::Truncated);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != DATA_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let task = bytes[6];
    let split = Split::from_tag(bytes[7])
        .ok_or_else(|| FormatError::Malformed(format!("unknown split tag {}", bytes[7])))?;
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (n, c, h, w, n_classes) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20), u32_at(24));
    let per = c.checked_mul(h).and_then(|v| v.checked_mul(w)).ok_or(FormatError::Truncated)?;
    let sample_vals = n.checked_mul(per).ok_or(FormatError::Truncated)?;
    let target_vals = if task == 0 { n } else { sample_vals };
    let expected = 28 + 4 * (sample_vals + target_vals) + 4;
    if bytes.len() < expected {
        return Err(FormatError::Truncated);
    }
    if bytes.len() > expected {
        return Err(FormatError::Malformed("trailing bytes after checksum".into()));
    }
    let body = &bytes[..expected - 4];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    let computed = crc32(body);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }
    let floats = |range: std::ops::Range<usize>| -> Vec<f32> {
        bytes[range]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect()
    };
    let s_end = 28 + 4 * sample_vals;
    let shape = vec![n, c, h, w];
    let malformed = |e: crate::Error| FormatError::Malformed(e.to_string());
    let samples = Tensor::new(shape.clone(), floats(28..s_end)).map_err(malformed)?;
    let targets = match task {
        0 => Targets::Classes {
            labels: bytes[s_end..expected - 4]
                .chunks_exact(4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
                .collect(),
            n_classes,
        },
        1 => Targets::Images(Tensor::new(shape, floats(s_end..expected - 4)).map_err(malformed)?),
        t => return Err(FormatError::Malformed(format!("unknown task tag {t}"))),
    };
    LabeledDataset::new(samples, targets, split).map_err(malformed)
}

pub fn save_dataset(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, serialize_dataset(ds))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path)?;
    Ok(deserialize_dataset(&bytes)?)
}
