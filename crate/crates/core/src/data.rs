//! Labelled image sets: CIFAR binary batches, a seeded synthetic generator
//! and training-time augmentation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{ImageBatch, COMPONENTS};

pub const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * COMPONENTS;

pub const CIFAR10_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR10_TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    images: ImageBatch,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: ImageBatch, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != images.len() {
            return Err(Error::shape("dataset", &[images.len()], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidInput(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &ImageBatch {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn height(&self) -> usize {
        self.images.height()
    }

    pub fn width(&self) -> usize {
        self.images.width()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidInput("empty selection".into()));
        }
        Ok(Self {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }

    /// The first `per_class` examples of every class, in file order.
    pub fn first_per_class(&self, per_class: usize) -> Result<Self> {
        let mut seen = vec![0usize; self.num_classes];
        let indices: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = &mut seen[self.labels[i]];
                *c += 1;
                *c <= per_class
            })
            .collect();
        self.select(&indices)
    }

    pub fn take(&self, n: usize) -> Result<Self> {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// First `n` examples and the rest.
    pub fn split(&self, n: usize) -> Result<(Self, Self)> {
        if n == 0 || n >= self.len() {
            return Err(Error::InvalidInput(format!("cannot split {} examples at {n}", self.len())));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.select(&head)?, self.select(&tail)?))
    }

    /// Concatenates datasets with matching geometry and class count.
    pub fn concat(parts: &[Dataset]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidInput("no datasets to join".into()))?;
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.height() != first.height() || p.width() != first.width() || p.num_classes != first.num_classes {
                return Err(Error::InvalidInput("datasets differ in geometry or class count".into()));
            }
            pixels.extend_from_slice(p.images.pixels());
            labels.extend_from_slice(&p.labels);
        }
        let images = ImageBatch::new(labels.len(), first.height(), first.width(), pixels)?;
        Self::new(images, labels, first.num_classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarFormat {
    /// One label byte per record.
    Cifar10,
    /// Coarse and fine label bytes per record; the fine label is used.
    Cifar100,
}

impl CifarFormat {
    fn label_bytes(self) -> usize {
        match self {
            CifarFormat::Cifar10 => 1,
            CifarFormat::Cifar100 => 2,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarFormat::Cifar10 => 10,
            CifarFormat::Cifar100 => 100,
        }
    }
}

/// Parses a CIFAR binary batch: per record the label byte(s), then 1024
/// red, 1024 green and 1024 blue bytes in row-major order.
pub fn parse_cifar(bytes: &[u8], format: CifarFormat) -> Result<Dataset> {
    let record = format.label_bytes() + CIFAR_PIXELS;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::InvalidInput(format!(
            "CIFAR batch of {} bytes is not a positive multiple of {record}",
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut pixels = vec![0u8; n * CIFAR_PIXELS];
    let mut labels = Vec::with_capacity(n);
    for (rec, out) in bytes.chunks_exact(record).zip(pixels.chunks_exact_mut(CIFAR_PIXELS)) {
        labels.push(rec[format.label_bytes() - 1] as usize);
        let body = &rec[format.label_bytes()..];
        for (p, px) in out.chunks_exact_mut(COMPONENTS).enumerate() {
            for (c, v) in px.iter_mut().enumerate() {
                *v = body[c * plane + p];
            }
        }
    }
    Dataset::new(ImageBatch::new(n, CIFAR_SIDE, CIFAR_SIDE, pixels)?, labels, format.num_classes())
}

pub fn load_cifar_file(path: &Path, format: CifarFormat) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    parse_cifar(&bytes, format)
}

/// Train and test splits of a `cifar-10-batches-bin` directory.
pub fn load_cifar10_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = CIFAR10_TRAIN_FILES
        .iter()
        .map(|f| load_cifar_file(&dir.join(f), CifarFormat::Cifar10))
        .collect::<Result<Vec<_>>>()?;
    let test = load_cifar_file(&dir.join(CIFAR10_TEST_FILE), CifarFormat::Cifar10)?;
    Ok((Dataset::concat(&train)?, test))
}

/// Train and test splits of a `cifar-100-binary` directory.
pub fn load_cifar100_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((
        load_cifar_file(&dir.join("train.bin"), CifarFormat::Cifar100)?,
        load_cifar_file(&dir.join("test.bin"), CifarFormat::Cifar100)?,
    ))
}

/// Desk-scale CIFAR-10 protocol: the first 500 training images of each
/// class and the first 1000 test images.
pub fn cifar10_desk(dir: &Path) -> Result<(Dataset, Dataset)> {
    let (train, test) = load_cifar10_dir(dir)?;
    Ok((train.first_per_class(500)?, test.take(1000)?))
}

/// Seeded class-conditional images with smooth colour gradients, oriented
/// stripes and per-pixel noise. Classes differ in mean colour, stripe
/// orientation and frequency, so they are separable but not trivially so.
pub fn synthetic(n: usize, num_classes: usize, height: usize, width: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || num_classes == 0 {
        return Err(Error::InvalidInput("synthetic set needs images and classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos: Vec<([f32; 3], f32, f32)> = (0..num_classes)
        .map(|_| {
            (
                [rng.gen_range(40.0..215.0), rng.gen_range(40.0..215.0), rng.gen_range(40.0..215.0)],
                rng.gen_range(0.0..std::f32::consts::PI),
                rng.gen_range(0.3..1.2),
            )
        })
        .collect();
    let mut pixels = Vec::with_capacity(n * height * width * COMPONENTS);
    let labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    for &label in &labels {
        let (base, angle, freq) = protos[label];
        let angle = angle + rng.gen_range(-0.3..0.3);
        let phase = rng.gen_range(0.0..std::f32::consts::TAU);
        let shift: [f32; 3] = [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)];
        let (sin, cos) = angle.sin_cos();
        for y in 0..height {
            for x in 0..width {
                let t = (x as f32 * cos + y as f32 * sin) * freq + phase;
                let stripe = 45.0 * t.sin();
                let shade = 20.0 * (y as f32 / height as f32 - 0.5);
                for c in 0..COMPONENTS {
                    let noise: f32 = rng.gen_range(-18.0..18.0);
                    let v = base[c] + shift[c] + stripe * (1.0 - 0.3 * c as f32) + shade + noise;
                    pixels.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    Dataset::new(ImageBatch::new(n, height, width, pixels)?, labels, num_classes)
}

/// Sixteen 4×4 images in two classes split by brightness.
pub fn toy_separable(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(16 * 16 * COMPONENTS);
    let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();
    for &l in &labels {
        let (lo, hi) = if l == 0 { (0u8, 90u8) } else { (165, 255) };
        for _ in 0..16 * COMPONENTS {
            pixels.push(rng.gen_range(lo..=hi));
        }
    }
    Dataset::new(ImageBatch::new(16, 4, 4, pixels).expect("fixed geometry"), labels, 2).expect("valid labels")
}

/// Mirrors one `H × W × 3` image left to right.
pub fn flip_horizontal(image: &[u8], height: usize, width: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(image.len());
    for y in 0..height {
        for x in (0..width).rev() {
            let at = (y * width + x) * COMPONENTS;
            out.extend_from_slice(&image[at..at + COMPONENTS]);
        }
    }
    out
}

/// Zero-pads by `pad` on each side, then crops `H × W` at offset `(dy, dx)`
/// of the padded image.
pub fn pad_crop(image: &[u8], height: usize, width: usize, pad: usize, dy: usize, dx: usize) -> Vec<u8> {
    let mut out = vec![0u8; image.len()];
    for y in 0..height {
        let sy = (y + dy) as isize - pad as isize;
        if sy < 0 || sy >= height as isize {
            continue;
        }
        for x in 0..width {
            let sx = (x + dx) as isize - pad as isize;
            if sx < 0 || sx >= width as isize {
                continue;
            }
            let src = (sy as usize * width + sx as usize) * COMPONENTS;
            let dst = (y * width + x) * COMPONENTS;
            out[dst..dst + COMPONENTS].copy_from_slice(&image[src..src + COMPONENTS]);
        }
    }
    out
}

pub const AUGMENT_PAD: usize = 4;

/// Pad-4 random crop plus horizontal flip with probability one half.
pub fn augment(image: &[u8], height: usize, width: usize, rng: &mut impl Rng) -> Vec<u8> {
    let dy = rng.gen_range(0..=2 * AUGMENT_PAD);
    let dx = rng.gen_range(0..=2 * AUGMENT_PAD);
    let cropped = pad_crop(image, height, width, AUGMENT_PAD, dy, dx);
    if rng.gen_bool(0.5) {
        flip_horizontal(&cropped, height, width)
    } else {
        cropped
    }
}

pub fn augment_batch(batch: &ImageBatch, rng: &mut impl Rng) -> ImageBatch {
    let (h, w) = (batch.height(), batch.width());
    let mut pixels = Vec::with_capacity(batch.pixels().len());
    for i in 0..batch.len() {
        pixels.extend(augment(batch.image(i), h, w, rng));
    }
    ImageBatch::new(batch.len(), h, w, pixels).expect("same geometry")
}

/// Seeded epoch permutation.
pub fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
