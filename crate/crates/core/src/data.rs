//! Datasets: CIFAR-10 binary batches, a seeded synthetic generator and
//! the training-time augmentation policy.
//!
//! Pixels are stored as raw bytes on disk, scaled to `[0, 1]` and then
//! normalized per channel with statistics computed from the training split.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Shape3;
use crate::tensor::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.gather(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Consecutive mini-batches in storage order.
    pub fn chunks(&self, batch_size: usize) -> impl Iterator<Item = (Tensor, Vec<usize>)> + '_ {
        let n = self.len();
        (0..n).step_by(batch_size.max(1)).map(move |start| {
            let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
            self.batch(&idx)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub num_classes: usize,
    /// Per-channel statistics of the `[0, 1]`-scaled training pixels.
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Dataset {
    pub fn image_shape(&self) -> Shape3 {
        let s = self.train.images.shape();
        [s[1], s[2], s[3]]
    }
}

fn normalize_pair(train: &mut Tensor, test: &mut Tensor) -> (Vec<f32>, Vec<f32>) {
    let (n, c, h, w) = train.dims4();
    let plane = h * w;
    let mut mean = vec![0.0f32; c];
    let mut std = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        for i in 0..n {
            let off = (i * c + ch) * plane;
            for &v in &train.data()[off..off + plane] {
                sum += v as f64;
                sq += (v as f64) * (v as f64);
            }
        }
        let count = (n * plane) as f64;
        let m = sum / count;
        let var = (sq / count - m * m).max(0.0);
        mean[ch] = m as f32;
        std[ch] = (var.sqrt() as f32).max(1e-6);
    }
    for t in [train, test] {
        let (n, _, _, _) = t.dims4();
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                for v in &mut t.data_mut()[off..off + plane] {
                    *v = (*v - mean[ch]) / std[ch];
                }
            }
        }
    }
    (mean, std)
}

fn read_records(path: &Path, expected_records: Option<usize>) -> Result<(Vec<f32>, Vec<usize>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: String| Error::CorruptDataset {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(corrupt(format!(
            "size {} is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    let records = bytes.len() / CIFAR_RECORD_BYTES;
    if let Some(expected) = expected_records {
        if records != expected {
            return Err(corrupt(format!("expected {expected} records, found {records}")));
        }
    }
    let mut pixels = Vec::with_capacity(records * (CIFAR_RECORD_BYTES - 1));
    let mut labels = Vec::with_capacity(records);
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        if rec[0] >= 10 {
            return Err(corrupt(format!("label byte {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

/// Loads the standard CIFAR-10 binary distribution from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    load_cifar10_with(dir, Some(CIFAR_RECORDS_PER_FILE))
}

/// Like [`load_cifar10`]; `records_per_file = None` accepts files of any
/// whole record count (used for exported synthetic data).
pub fn load_cifar10_with(dir: &Path, records_per_file: Option<usize>) -> Result<Dataset> {
    let mut train_px = Vec::new();
    let mut train_labels = Vec::new();
    for file in CIFAR_TRAIN_FILES {
        let (px, labels) = read_records(&dir.join(file), records_per_file)?;
        train_px.extend(px);
        train_labels.extend(labels);
    }
    let (test_px, test_labels) = read_records(&dir.join(CIFAR_TEST_FILE), records_per_file)?;
    let mut train = Tensor::from_vec(&[train_labels.len(), 3, 32, 32], train_px)?;
    let mut test = Tensor::from_vec(&[test_labels.len(), 3, 32, 32], test_px)?;
    let (mean, std) = normalize_pair(&mut train, &mut test);
    Ok(Dataset {
        train: Split {
            images: train,
            labels: train_labels,
        },
        test: Split {
            images: test,
            labels: test_labels,
        },
        num_classes: 10,
        mean,
        std,
    })
}

/// Writes `dataset` in the CIFAR-10 record layout, spreading the training
/// split over the five batch files.
pub fn export_cifar_records(dataset: &Dataset, dir: &Path) -> Result<()> {
    if dataset.image_shape() != [3, 32, 32] || dataset.num_classes > 10 {
        return Err(Error::InvalidArgument(
            "CIFAR records need 3x32x32 images and at most 10 classes".into(),
        ));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let encode = |split: &Split, range: std::ops::Range<usize>| -> Vec<u8> {
        let plane = 32 * 32;
        let mut out = Vec::with_capacity(range.len() * CIFAR_RECORD_BYTES);
        for i in range {
            out.push(split.labels[i] as u8);
            for (j, &v) in split.images.item(i).iter().enumerate() {
                let ch = j / plane;
                let raw = (v * dataset.std[ch] + dataset.mean[ch]) * 255.0;
                out.push(raw.round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    };
    let n = dataset.train.len();
    let per_file = n.div_ceil(CIFAR_TRAIN_FILES.len());
    for (k, file) in CIFAR_TRAIN_FILES.iter().enumerate() {
        let range = (k * per_file).min(n)..((k + 1) * per_file).min(n);
        let path = dir.join(file);
        fs::write(&path, encode(&dataset.train, range)).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(CIFAR_TEST_FILE);
    fs::write(&path, encode(&dataset.test, 0..dataset.test.len())).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub image_shape: Shape3,
    /// Pixel noise relative to the class-prototype contrast.
    pub noise: f32,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, n_train: usize, n_test: usize, image_shape: Shape3, seed: u64) -> Self {
        Self {
            num_classes,
            n_train,
            n_test,
            image_shape,
            noise: 0.5,
            seed,
        }
    }
}

/// Class-conditional Gaussian-blob images. Each class has a per-channel
/// tint and a blob at a class-specific position; samples add i.i.d. noise.
/// Pixels are quantized to bytes like CIFAR so exports round-trip.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    let [c, h, w] = spec.image_shape;
    if spec.num_classes == 0 || spec.n_train == 0 || spec.n_test == 0 || c * h * w == 0 {
        return Err(Error::InvalidArgument(format!(
            "synthetic dataset parameters must be positive: {spec:?}"
        )));
    }
    if !(spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(Error::InvalidArgument("noise must be finite and non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let plane = h * w;
    let sigma = (h.min(w) as f32 / 4.0).max(1.0);
    let prototypes: Vec<Vec<f32>> = (0..spec.num_classes)
        .map(|_| {
            let tint: Vec<f32> = (0..c).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            let amp: Vec<f32> = (0..c).map(|_| 2.0 * rng.sample::<f32, _>(StandardNormal)).collect();
            let cy = rng.gen_range(0.0..h as f32);
            let cx = rng.gen_range(0.0..w as f32);
            let mut p = vec![0.0; c * plane];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                        p[ch * plane + y * w + x] = 0.5 * tint[ch] + amp[ch] * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
            p
        })
        .collect();
    let mut make_split = |n: usize| -> Result<(Tensor, Vec<usize>)> {
        let mut labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
        labels.shuffle(&mut rng);
        let mut data = Vec::with_capacity(n * c * plane);
        for &label in &labels {
            for &p in &prototypes[label] {
                let noise: f32 = StandardNormal.sample(&mut rng);
                let v = 0.5 + 0.15 * (p + spec.noise * noise);
                data.push((v * 255.0).round().clamp(0.0, 255.0) / 255.0);
            }
        }
        Ok((Tensor::from_vec(&[n, c, h, w], data)?, labels))
    };
    let (mut train, train_labels) = make_split(spec.n_train)?;
    let (mut test, test_labels) = make_split(spec.n_test)?;
    let (mean, std) = normalize_pair(&mut train, &mut test);
    Ok(Dataset {
        train: Split {
            images: train,
            labels: train_labels,
        },
        test: Split {
            images: test,
            labels: test_labels,
        },
        num_classes: spec.num_classes,
        mean,
        std,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    #[default]
    None,
    PadCropFlip,
}

const PAD: usize = 4;

/// Applies `policy` to a batch of NCHW images.
pub fn augment<R: Rng + ?Sized>(batch: &Tensor, policy: Augmentation, rng: &mut R) -> Tensor {
    match policy {
        Augmentation::None => batch.clone(),
        Augmentation::PadCropFlip => {
            let (n, c, h, w) = batch.dims4();
            let mut out = Tensor::zeros(batch.shape());
            // Reflection needs the padded border to stay inside the image.
            let pad = PAD.min(h - 1).min(w - 1);
            let reflect = |i: isize, len: usize| -> usize {
                let len = len as isize;
                let r = if i < 0 {
                    -i
                } else if i >= len {
                    2 * (len - 1) - i
                } else {
                    i
                };
                r as usize
            };
            for i in 0..n {
                let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
                let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
                let flip = rng.gen_bool(0.5);
                let src = batch.item(i);
                let dst = &mut out.data_mut()[i * c * h * w..(i + 1) * c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        let sy = reflect(y as isize + dy, h);
                        for x in 0..w {
                            let xx = if flip { w - 1 - x } else { x };
                            let sx = reflect(xx as isize + dx, w);
                            dst[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
                        }
                    }
                }
            }
            out
        }
    }
}
