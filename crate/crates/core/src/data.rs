//! Datasets, CIFAR-10 ingestion, augmentation and batching.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_CLASSES: usize = 10;

/// Images in `C,H,W` layout with either one label per image or one per pixel.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub image_shape: [usize; 3],
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Labels per image: 1 for classification, `H*W` for segmentation.
    pub labels_per_image: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len() / self.labels_per_image.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> &[usize] {
        let n = self.labels_per_image;
        &self.labels[i * n..(i + 1) * n]
    }

    pub fn is_segmentation(&self) -> bool {
        self.labels_per_image > 1
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n * self.labels_per_image].to_vec(),
            ..self.clone()
        }
    }

    pub fn channel_means(&self) -> Vec<f64> {
        let [c, h, w] = self.image_shape;
        let mut sums = vec![0.0; c];
        for (i, plane) in self.images.chunks(h * w).enumerate() {
            sums[i % c] += plane.iter().sum::<f64>();
        }
        let count = (self.len() * h * w).max(1) as f64;
        sums.iter().map(|s| s / count).collect()
    }

    pub fn subtract_channel_means(&mut self, means: &[f64]) -> Result<()> {
        let [c, h, w] = self.image_shape;
        if means.len() != c {
            return Err(Error::shape("channel means", &[c], &[means.len()]));
        }
        for (i, plane) in self.images.chunks_mut(h * w).enumerate() {
            let m = means[i % c];
            plane.iter_mut().for_each(|v| *v -= m);
        }
        Ok(())
    }

    /// Stacks the samples at `idx` into a batch tensor and label list.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.image_shape;
        let mut data = Vec::with_capacity(idx.len() * self.image_len());
        let mut labels = Vec::with_capacity(idx.len() * self.labels_per_image);
        for &i in idx {
            data.extend_from_slice(self.image(i));
            labels.extend_from_slice(self.label(i));
        }
        let t = Tensor {
            shape: vec![idx.len(), c, h, w],
            data,
            grad: None,
        };
        (t, labels)
    }
}

fn decode_cifar(bytes: &[u8], file: &Path, images: &mut Vec<f64>, labels: &mut Vec<usize>) -> Result<()> {
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(Error::Format(format!(
            "{}: truncated record at byte offset {whole} ({} trailing bytes, records are {CIFAR_RECORD})",
            file.display(),
            bytes.len() - whole
        )));
    }
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format(format!(
                "{}: label {label} at byte offset {} is outside 0-9",
                file.display(),
                r * CIFAR_RECORD
            )));
        }
        labels.push(label);
        images.extend(rec[1..].iter().map(|&p| f64::from(p) / 255.0));
    }
    Ok(())
}

/// Reads CIFAR-10 binary batch files in order. Pixels are scaled to
/// `[0,1]`; mean subtraction is left to the caller so a test split can
/// reuse the training means.
pub fn load_cifar10(files: &[PathBuf]) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let bytes = fs::read(f)?;
        decode_cifar(&bytes, f, &mut images, &mut labels)?;
    }
    Ok(Dataset {
        image_shape: [3, 32, 32],
        images,
        labels,
        num_classes: CIFAR_CLASSES,
        labels_per_image: 1,
    })
}

/// Batch files of the standard binary distribution under `dir`.
pub fn cifar10_files(dir: &Path, train: bool) -> Result<Vec<PathBuf>> {
    let names: Vec<String> = if train {
        (1..=5).map(|i| format!("data_batch_{i}.bin")).collect()
    } else {
        vec!["test_batch.bin".into()]
    };
    let mut out = Vec::new();
    for n in names {
        let p = dir.join(&n);
        if !p.is_file() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{} not found", p.display()),
            )));
        }
        out.push(p);
    }
    Ok(out)
}

/// Random horizontal flip and a 4-pixel zero-pad random crop, in place.
pub fn augment(image: &mut [f64], shape: [usize; 3], rng: &mut impl Rng) {
    const PAD: i64 = 4;
    let [c, h, w] = shape;
    let flip = rng.random_bool(0.5);
    let dy = rng.random_range(-PAD..=PAD) as isize;
    let dx = rng.random_range(-PAD..=PAD) as isize;
    let src = image.to_vec();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sy = y as isize + dy;
                let sx0 = x as isize + dx;
                let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                let inside = sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize;
                image[(ch * h + y) * w + x] = if inside {
                    src[(ch * h + sy as usize) * w + sx as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

/// Deterministic epoch order for `seed` and `epoch`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx
}

/// Produces the batches of one epoch on a worker thread, at most `depth`
/// ahead of the consumer. Output is identical to building them inline.
pub fn prefetch_epoch(
    data: Arc<Dataset>,
    seed: u64,
    epoch: usize,
    batch_size: usize,
    augment_images: bool,
    depth: usize,
) -> Receiver<(Tensor, Vec<usize>)> {
    let (tx, rx) = sync_channel(depth.max(1));
    thread::spawn(move || {
        let order = epoch_order(data.len(), seed, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1) ^ (epoch as u64) << 32);
        for chunk in order.chunks(batch_size.max(1)) {
            let (mut x, y) = data.batch(chunk);
            if augment_images {
                let n = data.image_len();
                for img in x.data.chunks_mut(n) {
                    augment(img, data.image_shape, &mut rng);
                }
            }
            if tx.send((x, y)).is_err() {
                return;
            }
        }
    });
    rx
}
