//! Dataset handling: CIFAR-10 binary ingestion, standard augmentation,
//! and a deterministic synthetic dataset for fast tests.
//!
//! Images are stored as raw bytes (the on-disk representation) and scaled
//! to `[0, 1]` reals when a batch is assembled; per-channel normalization
//! by [`DatasetStats`] happens after augmentation, at batch assembly time.

use crate::error::{Error, Result};
use crate::rng::{purpose, substream};
use crate::tensor::{Element, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const IMAGE_BYTES: usize = IMAGE_CHANNELS * IMAGE_PIXELS;
/// One record: a label byte followed by R, G, B planes.
pub const RECORD_BYTES: usize = 1 + IMAGE_BYTES;
pub const NUM_CLASSES: usize = 10;

/// A 32x32 RGB image with its class label. Pixels are the raw bytes;
/// [`LabeledImage::pixel`] scales to `[0, 1]`.
#[derive(Clone, PartialEq, Eq)]
pub struct LabeledImage {
    pub label: u8,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for LabeledImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "LabeledImage(label={}, {} bytes)", self.label, self.pixels.len())
    }
}

impl LabeledImage {
    pub fn new(label: u8, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != IMAGE_BYTES {
            return Err(Error::Format(format!(
                "image needs {IMAGE_BYTES} bytes, got {}",
                pixels.len()
            )));
        }
        if label as usize >= NUM_CLASSES {
            return Err(Error::Format(format!("label {label} out of range [0,10)")));
        }
        Ok(LabeledImage { label, pixels })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.pixels
    }

    /// Pixel value scaled to `[0, 1]`.
    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[c * IMAGE_PIXELS + y * IMAGE_SIDE + x] as f64 / 255.0
    }
}

/// Read a CIFAR-10 binary batch file: records of 1 label byte plus 3072
/// pixel bytes (1024 R, 1024 G, 1024 B, row-major 32x32).
pub fn read_cifar10_bin(path: &Path) -> Result<Vec<LabeledImage>> {
    let bytes = fs::read(path)?;
    parse_cifar10_bytes(&bytes)
}

pub fn parse_cifar10_bytes(bytes: &[u8]) -> Result<Vec<LabeledImage>> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Format(format!(
            "file size {} is not a multiple of the {RECORD_BYTES}-byte record",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        out.push(LabeledImage::new(rec[0], rec[1..].to_vec())?);
    }
    Ok(out)
}

/// Write images in the CIFAR-10 binary record layout.
pub fn write_cifar10_bin(path: &Path, images: &[LabeledImage]) -> Result<()> {
    let mut bytes = Vec::with_capacity(images.len() * RECORD_BYTES);
    for img in images {
        bytes.push(img.label);
        bytes.extend_from_slice(img.bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Load the standard CIFAR-10 directory layout: `data_batch_{1..5}.bin`
/// for training and `test_batch.bin` for evaluation.
pub fn load_cifar10_dir(dir: &Path) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let mut train = Vec::new();
    for i in 1..=5 {
        let p = dir.join(format!("data_batch_{i}.bin"));
        if !p.exists() {
            return Err(Error::Format(format!("missing {}", p.display())));
        }
        train.extend(read_cifar10_bin(&p)?);
    }
    let test = read_cifar10_bin(&dir.join("test_batch.bin"))?;
    Ok((train, test))
}

/// Per-channel mean and standard deviation over a training set, at the
/// `[0, 1]` pixel scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl DatasetStats {
    /// The identity normalization (mean 0, std 1).
    pub fn identity() -> Self {
        DatasetStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn compute(images: &[LabeledImage]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Usage("stats over an empty dataset".into()));
        }
        let n = (images.len() * IMAGE_PIXELS) as f64;
        let mut mean = [0.0f64; 3];
        for img in images {
            for (c, m) in mean.iter_mut().enumerate() {
                let plane = &img.bytes()[c * IMAGE_PIXELS..(c + 1) * IMAGE_PIXELS];
                *m += plane.iter().map(|&b| b as f64 / 255.0).sum::<f64>();
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = [0.0f64; 3];
        for img in images {
            for (c, v) in var.iter_mut().enumerate() {
                let plane = &img.bytes()[c * IMAGE_PIXELS..(c + 1) * IMAGE_PIXELS];
                *v += plane
                    .iter()
                    .map(|&b| {
                        let d = b as f64 / 255.0 - mean[c];
                        d * d
                    })
                    .sum::<f64>();
            }
        }
        let mut std = [0.0f64; 3];
        for c in 0..3 {
            std[c] = (var[c] / n).sqrt();
            // A genuinely varying channel has std >= ~(1/255)/sqrt(n);
            // anything at rounding-noise scale is a constant channel.
            if std[c] <= 1e-9 {
                return Err(Error::Format(format!(
                    "channel {c} has zero variance; normalization undefined"
                )));
            }
        }
        Ok(DatasetStats { mean, std })
    }
}

const AUGMENT_PAD: usize = 4;

/// Standard training augmentation: zero-pad 4 pixels per side, random
/// 32x32 crop, then horizontal flip with probability 0.5.
///
/// Draw order: crop dy, crop dx, flip. Crop offset (4, 4) with no flip is
/// the identity.
pub fn augment(image: &LabeledImage, rng: &mut ChaCha8Rng) -> LabeledImage {
    let dy = rng.random_range(0..=2 * AUGMENT_PAD);
    let dx = rng.random_range(0..=2 * AUGMENT_PAD);
    let flip = rng.random_bool(0.5);
    augment_fixed(image, dy, dx, flip)
}

/// Deterministic augmentation core: crop the 4-padded image at offset
/// `(dy, dx)` in `[0, 8]^2`, then optionally flip horizontally.
pub fn augment_fixed(image: &LabeledImage, dy: usize, dx: usize, flip: bool) -> LabeledImage {
    debug_assert!(dy <= 2 * AUGMENT_PAD && dx <= 2 * AUGMENT_PAD);
    let mut pixels = vec![0u8; IMAGE_BYTES];
    let src = image.bytes();
    for c in 0..IMAGE_CHANNELS {
        for y in 0..IMAGE_SIDE {
            // Source row in the padded frame.
            let sy = y as isize + dy as isize - AUGMENT_PAD as isize;
            if sy < 0 || sy >= IMAGE_SIDE as isize {
                continue;
            }
            for x in 0..IMAGE_SIDE {
                let sx = x as isize + dx as isize - AUGMENT_PAD as isize;
                if sx < 0 || sx >= IMAGE_SIDE as isize {
                    continue;
                }
                let tx = if flip { IMAGE_SIDE - 1 - x } else { x };
                pixels[c * IMAGE_PIXELS + y * IMAGE_SIDE + tx] =
                    src[c * IMAGE_PIXELS + sy as usize * IMAGE_SIDE + sx as usize];
            }
        }
    }
    LabeledImage {
        label: image.label,
        pixels,
    }
}

/// Deterministic class-conditional blob images: each class gets a Gaussian
/// bump at a class-specific position with a class-specific channel mix,
/// plus light pixel noise. Labels cycle `0..k`, so counts are balanced to
/// within one.
pub fn synthetic_dataset(num_classes: usize, n: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    if num_classes < 2 || num_classes > NUM_CLASSES {
        return Err(Error::Config(format!(
            "synthetic dataset supports 2..=10 classes, got {num_classes}"
        )));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % num_classes) as u8;
        let k = label as f64;
        let angle = std::f64::consts::TAU * k / num_classes as f64;
        let cx = 16.0 + 9.0 * angle.cos();
        let cy = 16.0 + 9.0 * angle.sin();
        let sigma = 4.0;
        let channel_gain = [
            0.9 - 0.25 * ((label % 3) as f64),
            0.4 + 0.2 * ((label % 2) as f64),
            0.3 + 0.07 * k,
        ];
        let mut rng = substream(seed, &[purpose::SYNTH, i as u64]);
        let mut pixels = vec![0u8; IMAGE_BYTES];
        for c in 0..IMAGE_CHANNELS {
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    let bump = 0.85 * (-d2 / (2.0 * sigma * sigma)).exp() * channel_gain[c];
                    let noise: f64 = rng.random::<f64>() * 0.08;
                    let v = (bump + 0.05 + noise).clamp(0.0, 1.0);
                    pixels[c * IMAGE_PIXELS + y * IMAGE_SIDE + x] = (v * 255.0).round() as u8;
                }
            }
        }
        out.push(LabeledImage { label, pixels });
    }
    Ok(out)
}

/// Iterator over an epoch's mini-batches of dataset indices. The final
/// short batch is included. Shuffling is a seeded permutation.
pub struct BatchIter {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl BatchIter {
    pub fn new(
        dataset_len: usize,
        batch_size: usize,
        shuffle: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if dataset_len == 0 {
            return Err(Error::Usage("batch iteration over an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let mut order: Vec<usize> = (0..dataset_len).collect();
        if shuffle {
            order.shuffle(rng);
        }
        Ok(BatchIter {
            order,
            pos: 0,
            batch_size,
        })
    }

    /// Epoch iterator with the shuffle stream derived from (seed, epoch).
    pub fn for_epoch(
        dataset_len: usize,
        batch_size: usize,
        shuffle: bool,
        seed: u64,
        epoch: usize,
    ) -> Result<Self> {
        let mut rng = substream(seed, &[purpose::SHUFFLE, epoch as u64]);
        Self::new(dataset_len, batch_size, shuffle, &mut rng)
    }
}

impl Iterator for BatchIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }
}

/// Augmentation context: per-image one-shot streams derived from
/// `(seed, epoch, dataset index)`, so the result is independent of batch
/// composition and iteration order.
#[derive(Debug, Clone, Copy)]
pub struct AugmentCtx {
    pub seed: u64,
    pub epoch: usize,
}

/// Assemble a batch tensor `[N, 3, 32, 32]` and its labels from dataset
/// indices, optionally augmenting, then normalizing by `stats`.
pub fn collate<T: Element>(
    dataset: &[LabeledImage],
    indices: &[usize],
    stats: &DatasetStats,
    augment_ctx: Option<AugmentCtx>,
) -> (Tensor<T>, Vec<usize>) {
    let n = indices.len();
    let mut data = vec![T::zero(); n * IMAGE_BYTES];
    let mut labels = Vec::with_capacity(n);
    for (slot, &idx) in indices.iter().enumerate() {
        let img = &dataset[idx];
        labels.push(img.label as usize);
        let processed;
        let img = match augment_ctx {
            Some(ctx) => {
                let mut rng =
                    substream(ctx.seed, &[purpose::AUGMENT, ctx.epoch as u64, idx as u64]);
                processed = augment(img, &mut rng);
                &processed
            }
            None => img,
        };
        let dst = &mut data[slot * IMAGE_BYTES..(slot + 1) * IMAGE_BYTES];
        for c in 0..IMAGE_CHANNELS {
            let mean = stats.mean[c];
            let inv_std = 1.0 / stats.std[c];
            let plane = &img.bytes()[c * IMAGE_PIXELS..(c + 1) * IMAGE_PIXELS];
            for (d, &b) in dst[c * IMAGE_PIXELS..(c + 1) * IMAGE_PIXELS]
                .iter_mut()
                .zip(plane)
            {
                *d = T::from_f64((b as f64 / 255.0 - mean) * inv_std);
            }
        }
    }
    let tensor = Tensor::from_vec(&[n, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data)
        .expect("collate shape is consistent by construction");
    (tensor, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_image(label: u8, fill: u8) -> LabeledImage {
        LabeledImage::new(label, vec![fill; IMAGE_BYTES]).unwrap()
    }

    #[test]
    fn parse_crafted_two_record_file() {
        let mut bytes = Vec::new();
        bytes.push(3u8);
        bytes.extend(std::iter::repeat_n(10u8, IMAGE_PIXELS)); // R
        bytes.extend(std::iter::repeat_n(20u8, IMAGE_PIXELS)); // G
        bytes.extend(std::iter::repeat_n(30u8, IMAGE_PIXELS)); // B
        bytes.push(7u8);
        bytes.extend(std::iter::repeat_n(40u8, IMAGE_BYTES));
        let images = parse_cifar10_bytes(&bytes).unwrap();
        assert_eq!(images.len(), 2);
        assert_eq!(images[0].label, 3);
        assert_eq!(images[1].label, 7);
        assert!((images[0].pixel(0, 0, 0) - 10.0 / 255.0).abs() < 1e-12);
        assert!((images[0].pixel(1, 5, 5) - 20.0 / 255.0).abs() < 1e-12);
        assert!((images[0].pixel(2, 31, 31) - 30.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        assert!(parse_cifar10_bytes(&[]).unwrap().is_empty());
    }

    #[test]
    fn short_file_is_format_error() {
        let bytes = vec![0u8; IMAGE_BYTES]; // 3072: one byte short of a record
        assert!(matches!(
            parse_cifar10_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn bad_label_is_format_error() {
        let mut bytes = vec![10u8]; // label > 9
        bytes.extend(std::iter::repeat_n(0u8, IMAGE_BYTES));
        assert!(matches!(
            parse_cifar10_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn roundtrip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.bin");
        let images = synthetic_dataset(4, 12, 99).unwrap();
        write_cifar10_bin(&path, &images).unwrap();
        let back = read_cifar10_bin(&path).unwrap();
        assert_eq!(images, back);
    }

    #[test]
    fn center_crop_no_flip_is_identity() {
        let img = synthetic_dataset(2, 1, 5).unwrap().pop().unwrap();
        let out = augment_fixed(&img, AUGMENT_PAD, AUGMENT_PAD, false);
        assert_eq!(img, out);
    }

    #[test]
    fn double_flip_is_identity() {
        let img = synthetic_dataset(3, 2, 6).unwrap().pop().unwrap();
        let once = augment_fixed(&img, AUGMENT_PAD, AUGMENT_PAD, true);
        let twice = augment_fixed(&once, AUGMENT_PAD, AUGMENT_PAD, true);
        assert_eq!(img, twice);
    }

    #[test]
    fn augment_is_seed_deterministic_and_preserves_label_shape() {
        let img = synthetic_dataset(5, 3, 7).unwrap().remove(1);
        let mut r1 = substream(1, &[purpose::AUGMENT, 0, 0]);
        let mut r2 = substream(1, &[purpose::AUGMENT, 0, 0]);
        let a = augment(&img, &mut r1);
        let b = augment(&img, &mut r2);
        assert_eq!(a, b);
        assert_eq!(a.label, img.label);
        assert_eq!(a.bytes().len(), IMAGE_BYTES);
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = synthetic_dataset(2, 100, 42).unwrap();
        let b = synthetic_dataset(2, 100, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        let zeros = a.iter().filter(|i| i.label == 0).count();
        assert_eq!(zeros, 50);
    }

    #[test]
    fn batch_iter_sizes_and_order() {
        let mut rng = substream(0, &[purpose::SHUFFLE, 0]);
        let batches: Vec<_> = BatchIter::new(10, 4, false, &mut rng).unwrap().collect();
        assert_eq!(
            batches.iter().map(|b| b.len()).collect::<Vec<_>>(),
            vec![4, 4, 2]
        );
        assert_eq!(batches[0], vec![0, 1, 2, 3]);

        let p1: Vec<_> = BatchIter::for_epoch(10, 4, true, 1, 0).unwrap().collect();
        let p2: Vec<_> = BatchIter::for_epoch(10, 4, true, 1, 0).unwrap().collect();
        assert_eq!(p1, p2);
        let p3: Vec<_> = BatchIter::for_epoch(10, 4, true, 1, 1).unwrap().collect();
        assert_ne!(p1, p3);
    }

    #[test]
    fn empty_dataset_is_usage_error() {
        let mut rng = substream(0, &[0]);
        assert!(matches!(
            BatchIter::new(0, 4, false, &mut rng),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn normalization_centers_training_set() {
        let images = synthetic_dataset(4, 64, 11).unwrap();
        let stats = DatasetStats::compute(&images).unwrap();
        let indices: Vec<usize> = (0..images.len()).collect();
        let (batch, _) = collate::<f64>(&images, &indices, &stats, None);
        // Per-channel mean ~0 and std ~1 on the set the stats came from.
        let per = IMAGE_PIXELS;
        let n = images.len();
        for c in 0..3 {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for img in 0..n {
                for i in 0..per {
                    let v = batch.data()[(img * 3 + c) * per + i];
                    sum += v;
                    sq += v * v;
                }
            }
            let count = (n * per) as f64;
            let mean = sum / count;
            let std = (sq / count - mean * mean).sqrt();
            assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
            assert!((std - 1.0).abs() < 1e-6, "channel {c} std {std}");
        }
    }

    #[test]
    fn stats_reject_constant_channel() {
        let images = vec![sample_image(0, 7), sample_image(1, 7)];
        assert!(DatasetStats::compute(&images).is_err());
    }
}
