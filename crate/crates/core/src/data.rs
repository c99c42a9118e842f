//! In-memory labeled image sets: the synthetic blob task, CIFAR-10 binary
//! batches, stratified splitting, batching and train-time augmentation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Seed of the class templates; sample seeds only drive the noise, so every
/// seed sees the same class structure.
const TEMPLATE_SEED: u64 = 0x5eed_b10b;

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];
const CIFAR_PAD: usize = 4;

/// Channel-planar images stored as `f64` with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    /// `[channels, height, width]`.
    pub image_shape: [usize; 3],
    pub num_classes: usize,
    /// Whether training batches get random crops and flips.
    pub augment: bool,
}

impl Dataset {
    pub fn new(images: Vec<f64>, labels: Vec<usize>, image_shape: [usize; 3], num_classes: usize) -> Result<Self> {
        let per = image_shape.iter().product::<usize>();
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Dataset(format!(
                "{} values for {} images of shape {image_shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!("label {bad} with {num_classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            image_shape,
            num_classes,
            augment: false,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Copy of the given samples, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            image_shape: self.image_shape,
            num_classes: self.num_classes,
            augment: self.augment,
        }
    }

    /// Batch tensor `[B, C, H, W]` and labels. Augmentation applies only when
    /// an RNG is supplied and the set is marked for augmentation.
    pub fn batch<T: Scalar, R: Rng + ?Sized>(
        &self,
        indices: &[usize],
        augment_rng: Option<&mut R>,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        let [c, h, w] = self.image_shape;
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        match augment_rng {
            Some(rng) if self.augment => {
                for &i in indices {
                    let dy = rng.random_range(0..=2 * CIFAR_PAD);
                    let dx = rng.random_range(0..=2 * CIFAR_PAD);
                    let flip = rng.random_bool(0.5);
                    crop_flip(self.image(i), self.image_shape, dy, dx, flip, &mut data);
                }
            }
            _ => {
                for &i in indices {
                    data.extend(self.image(i).iter().map(|&v| cast::<T>(v)));
                }
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(data, &[indices.len(), c, h, w])?, labels))
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// Crop of the reflection-padded image at offset `(dy, dx)`, optionally
/// mirrored horizontally.
fn crop_flip<T: Scalar>(img: &[f64], [c, h, w]: [usize; 3], dy: usize, dx: usize, flip: bool, out: &mut Vec<T>) {
    for ch in 0..c {
        for y in 0..h {
            let sy = reflect(y as isize + dy as isize - CIFAR_PAD as isize, h);
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = reflect(xx as isize + dx as isize - CIFAR_PAD as isize, w);
                out.push(cast(img[(ch * h + sy) * w + sx]));
            }
        }
    }
}

/// Generator for one epoch (or other numbered phase) of a seeded run;
/// distinct epochs use distinct ChaCha streams of the same key.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Shuffled sample order for one pass.
pub fn shuffled_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Class-conditional Gaussian-blob images.
///
/// Each class template places two blobs per channel with class-specific
/// centers and signed amplitudes; a sample is its template plus i.i.d.
/// `noise * N(0, 1)`. Labels cycle through the classes, so counts differ by
/// at most one, and the sample order is shuffled.
pub fn make_synthetic(
    num_classes: usize,
    samples: usize,
    image_shape: [usize; 3],
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::Dataset(format!("need at least 2 classes, got {num_classes}")));
    }
    if !(noise >= 0.0) {
        return Err(Error::Dataset(format!("noise {noise} must be >= 0")));
    }
    let templates = synthetic_templates(num_classes, image_shape);
    let per: usize = image_shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..samples).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);
    let mut images = Vec::with_capacity(samples * per);
    for &l in &labels {
        for &t in &templates[l] {
            let z: f64 = StandardNormal.sample(&mut rng);
            images.push(t + noise * z);
        }
    }
    Dataset::new(images, labels, image_shape, num_classes)
}

/// Noise-free class templates of [`make_synthetic`].
pub fn synthetic_templates(num_classes: usize, [c, h, w]: [usize; 3]) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(TEMPLATE_SEED);
    let sigma = (h.min(w) as f64 / 4.0).max(0.75);
    (0..num_classes)
        .map(|_| {
            let mut img = vec![0.0; c * h * w];
            for ch in 0..c {
                for _ in 0..2 {
                    let cy = rng.random_range(0.0..h as f64);
                    let cx = rng.random_range(0.0..w as f64);
                    let amp = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    for y in 0..h {
                        for x in 0..w {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            img[(ch * h + y) * w + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                        }
                    }
                }
            }
            img
        })
        .collect()
}

/// Stratified disjoint split: `round(fraction * n_c)` samples of each class
/// (kept within `1..n_c`) go to the first set.
pub fn split_dataset(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(
            "split_dataset",
            format!("fraction {fraction} outside (0, 1)"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = Vec::new();
    let mut second = Vec::new();
    for class in 0..data.num_classes {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::Dataset(format!("class {class} has fewer than 2 samples")));
        }
        idx.shuffle(&mut rng);
        let k = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        first.extend_from_slice(&idx[..k]);
        second.extend_from_slice(&idx[k..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((data.select(&first), data.select(&second)))
}

/// Stratified subset with `size / num_classes` samples per class.
pub fn stratified_subset(data: &Dataset, size: usize, seed: u64) -> Result<Dataset> {
    if !size.is_multiple_of(data.num_classes) {
        return Err(Error::Dataset(format!(
            "subset size {size} is not a multiple of {} classes",
            data.num_classes
        )));
    }
    let per = size / data.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(size);
    for class in 0..data.num_classes {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == class).collect();
        if idx.len() < per {
            return Err(Error::Dataset(format!(
                "class {class} has {} samples, need {per}",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..per]);
    }
    keep.sort_unstable();
    Ok(data.select(&keep))
}

/// Decodes CIFAR-10 binary records: pixels scaled to `[0, 1]` and then
/// standardized with the fixed per-channel dataset statistics.
pub fn decode_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Dataset(format!(
            "length {} is not a multiple of the {CIFAR_RECORD}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let plane = 32 * 32;
    let mut images = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Dataset(format!("record {r}: label byte {label} > 9")));
        }
        labels.push(label);
        for (ch, px) in rec[1..].chunks_exact(plane).enumerate() {
            images.extend(px.iter().map(|&b| (b as f64 / 255.0 - CIFAR_MEAN[ch]) / CIFAR_STD[ch]));
        }
    }
    Dataset::new(images, labels, [3, 32, 32], CIFAR_CLASSES)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarSplit {
    Train,
    Test,
}

/// Loads the standard CIFAR-10 binary batches from `dir`. With a subset size
/// a deterministic stratified subset is drawn. Training sets are marked for
/// augmentation.
pub fn load_cifar10(dir: &Path, split: CifarSplit, subset: Option<usize>, seed: u64) -> Result<Dataset> {
    let files: Vec<String> = match split {
        CifarSplit::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        CifarSplit::Test => vec!["test_batch.bin".to_string()],
    };
    let mut bytes = Vec::new();
    for f in files {
        let path = dir.join(&f);
        let chunk = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if chunk.len() % CIFAR_RECORD != 0 {
            return Err(Error::Dataset(format!(
                "{}: length {} is not a multiple of {CIFAR_RECORD}",
                path.display(),
                chunk.len()
            )));
        }
        bytes.extend_from_slice(&chunk);
    }
    let mut data = decode_cifar10(&bytes)?;
    if let Some(size) = subset {
        data = stratified_subset(&data, size, seed)?;
    }
    data.augment = split == CifarSplit::Train;
    Ok(data)
}
