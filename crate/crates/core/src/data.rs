//! Image datasets: the CIFAR-10 binary format, seeded synthetic data,
//! augmentation and normalization.

use std::path::Path;

use mft_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const CIFAR_SIZE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_RECORD: usize = 1 + CIFAR_CHANNELS * CIFAR_SIZE * CIFAR_SIZE;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

/// Images stored as `count × C × H × W` bytes, channel-planar.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub channels: usize,
    pub size: usize,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Vec<u8>,
        labels: Vec<u8>,
        channels: usize,
        size: usize,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let ds = Self {
            images,
            labels,
            channels,
            size,
            num_classes,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() * self.image_len() {
            return Err(CoreError::Data(format!(
                "{} image bytes for {} labels of {} bytes each",
                self.images.len(),
                self.labels.len(),
                self.image_len()
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(CoreError::Label {
                label: l as usize,
                classes: self.num_classes,
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    /// Normalized, optionally augmented, `n × C × H × W` batch.
    pub fn batch(
        &self,
        indices: &[usize],
        stats: &NormStats,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            let img = match rng.as_deref_mut() {
                Some(r) => {
                    let aug = AugmentParams::sample(r);
                    augment(self.image(i), self.channels, self.size, aug)
                }
                None => self.image(i).to_vec(),
            };
            data.extend(normalize(&img, self.channels, stats));
        }
        let shape = vec![indices.len(), self.channels, self.size, self.size];
        let labels = indices.iter().map(|&i| self.label(i)).collect();
        (Tensor::new(shape, data).expect("batch size matches"), labels)
    }
}

/// Decodes concatenated 3073-byte CIFAR-10 records.
pub fn decode_cifar10(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(CoreError::Data(format!(
            "CIFAR-10 data is {} bytes, not a multiple of {CIFAR_RECORD}; partial record at offset {offset}",
            bytes.len()
        )));
    }
    let count = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(count * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(count);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0]);
        images.extend_from_slice(&rec[1..]);
    }
    Dataset::new(images, labels, CIFAR_CHANNELS, CIFAR_SIZE, 10, split)
}

pub fn encode_cifar10(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.channels != CIFAR_CHANNELS || ds.size != CIFAR_SIZE {
        return Err(CoreError::Data(format!(
            "CIFAR-10 records are 3×32×32, dataset is {}×{}×{}",
            ds.channels, ds.size, ds.size
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        out.push(ds.labels[i]);
        out.extend_from_slice(ds.image(i));
    }
    Ok(out)
}

pub fn load_cifar10_file(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = std::fs::read(path)
        .map_err(|e| CoreError::Data(format!("cannot read {}: {e}", path.display())))?;
    decode_cifar10(&bytes, split).map_err(|e| match e {
        CoreError::Data(m) => CoreError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads a split from a `cifar-10-batches-bin` directory.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<&str> = match split {
        Split::Train => CIFAR_TRAIN_FILES.to_vec(),
        Split::Test => vec![CIFAR_TEST_FILE],
    };
    let missing: Vec<&str> = files.iter().copied().filter(|f| !dir.join(f).is_file()).collect();
    if !missing.is_empty() {
        return Err(CoreError::Data(format!(
            "{} is missing {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    let mut bytes = Vec::new();
    for f in files {
        let path = dir.join(f);
        let chunk = std::fs::read(&path)
            .map_err(|e| CoreError::Data(format!("cannot read {}: {e}", path.display())))?;
        if chunk.len() % CIFAR_RECORD != 0 {
            return load_cifar10_file(&path, split);
        }
        bytes.extend(chunk);
    }
    decode_cifar10(&bytes, split)
}

/// Per-channel mean and standard deviation in `[0, 1]` pixel units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn compute(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(CoreError::EmptyDataset);
        }
        let plane = ds.size * ds.size;
        let mut sum = vec![0.0f64; ds.channels];
        let mut sq = vec![0.0f64; ds.channels];
        for i in 0..ds.len() {
            for (c, px) in ds.image(i).chunks(plane).enumerate() {
                for &p in px {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (ds.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(Self { mean, std })
    }
}

pub fn normalize(image: &[u8], channels: usize, stats: &NormStats) -> Vec<f32> {
    let plane = image.len() / channels.max(1);
    image
        .chunks(plane.max(1))
        .enumerate()
        .flat_map(|(c, px)| {
            let (m, s) = (stats.mean[c], stats.std[c]);
            px.iter().map(move |&p| ((p as f64 / 255.0 - m) / s) as f32)
        })
        .collect()
}

pub const PAD: i32 = 4;

/// One draw of the flip-and-crop augmentation. `dx`, `dy` are the crop
/// offsets into the zero-padded image minus the padding, so `(0, 0)` is
/// the centre crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentParams {
    pub flip: bool,
    pub dx: i32,
    pub dy: i32,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        flip: false,
        dx: 0,
        dy: 0,
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            flip: rng.random_bool(0.5),
            dx: rng.random_range(-PAD..=PAD),
            dy: rng.random_range(-PAD..=PAD),
        }
    }
}

pub fn flip_horizontal(image: &[u8], size: usize) -> Vec<u8> {
    image
        .chunks(size)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

/// Horizontal flip, then a shifted crop of the zero-padded image.
pub fn augment(image: &[u8], channels: usize, size: usize, p: AugmentParams) -> Vec<u8> {
    let src = if p.flip {
        flip_horizontal(image, size)
    } else {
        image.to_vec()
    };
    if p.dx == 0 && p.dy == 0 {
        return src;
    }
    let s = size as i32;
    let mut out = vec![0u8; image.len()];
    for c in 0..channels {
        let plane = c * size * size;
        for y in 0..s {
            let sy = y + p.dy;
            if !(0..s).contains(&sy) {
                continue;
            }
            for x in 0..s {
                let sx = x + p.dx;
                if (0..s).contains(&sx) {
                    out[plane + (y * s + x) as usize] = src[plane + (sy * s + sx) as usize];
                }
            }
        }
    }
    out
}

/// Order of sample indices for `epoch`; a pure function of its inputs.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

fn split_stream(split: Split) -> u64 {
    match split {
        Split::Train => 1,
        Split::Test => 2,
    }
}

/// Class templates drawn from `seed`; each sample is its class template
/// plus Gaussian pixel noise of standard deviation `sigma`, clamped to
/// `[0, 255]`. The two splits share templates and use independent noise.
pub fn make_synthetic(
    num_classes: usize,
    per_class: usize,
    sigma: f64,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    if num_classes < 2 || num_classes > 256 {
        return Err(CoreError::Data(format!("synthetic data needs 2..=256 classes, got {num_classes}")));
    }
    let templates = synthetic_templates(num_classes, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split_stream(split));
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| CoreError::Data(e.to_string()))?;
    let n = CIFAR_CHANNELS * CIFAR_SIZE * CIFAR_SIZE;
    let mut images = Vec::with_capacity(num_classes * per_class * n);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for i in 0..num_classes * per_class {
        let c = i % num_classes;
        for &t in &templates[c * n..(c + 1) * n] {
            let v = if sigma > 0.0 {
                t as f64 + noise.sample(&mut rng)
            } else {
                t as f64
            };
            images.push(v.round().clamp(0.0, 255.0) as u8);
        }
        labels.push(c as u8);
    }
    Dataset::new(images, labels, CIFAR_CHANNELS, CIFAR_SIZE, num_classes, split)
}

pub fn synthetic_templates(num_classes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = CIFAR_CHANNELS * CIFAR_SIZE * CIFAR_SIZE;
    (0..num_classes * n).map(|_| rng.random::<u8>()).collect()
}
