//! Dataset ingestion: MNIST IDX, CIFAR-10 binary, synthetic Gaussian blobs,
//! and train-time augmentation (horizontal flips, pad-and-crop).

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    MnistIdx,
    Cifar10Binary,
    SyntheticBlobs {
        samples: usize,
        dim: usize,
        classes: usize,
        separation: f32,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AugmentSpec {
    #[serde(default)]
    pub hflip_prob: f32,
    #[serde(default)]
    pub crop_pad: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub source: DataSource,
    #[serde(default)]
    pub root: Option<PathBuf>,
    pub split: Split,
    /// Per-channel normalization statistics.
    #[serde(default)]
    pub normalize_mean: Vec<f32>,
    #[serde(default)]
    pub normalize_std: Vec<f32>,
    #[serde(default)]
    pub augment: AugmentSpec,
    /// Keep only the first n samples (desk-scale subsets).
    #[serde(default)]
    pub limit: Option<usize>,
}

/// In-memory dataset: normalized f32 samples in one contiguous buffer.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub sample_shape: Vec<usize>,
    pub labels: Vec<u8>,
    pub classes: usize,
    data: Vec<f32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Gathers the given samples into a batch tensor `[B, ...sample_shape]`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let n = self.sample_len();
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Usage(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i] as usize);
        }
        Ok((Tensor::from_vec(&shape, data)?, labels))
    }

    pub fn truncated(mut self, n: usize) -> Dataset {
        if n < self.len() {
            self.labels.truncate(n);
            self.data.truncate(n * self.sample_len());
        }
        self
    }
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let ds = match &spec.source {
        DataSource::MnistIdx => {
            let root = spec
                .root
                .as_ref()
                .ok_or_else(|| Error::Config("mnist_idx needs a root path".into()))?;
            load_mnist_idx(root, spec.split, &spec.normalize_mean, &spec.normalize_std)?
        }
        DataSource::Cifar10Binary => {
            let root = spec
                .root
                .as_ref()
                .ok_or_else(|| Error::Config("cifar10_binary needs a root path".into()))?;
            load_cifar10_binary(root, spec.split, &spec.normalize_mean, &spec.normalize_std)?
        }
        DataSource::SyntheticBlobs { samples, dim, classes, separation } => {
            let seed = match spec.split {
                Split::Train => 1,
                Split::Test => 2,
            };
            synthetic_blobs(*samples, *dim, *classes, *separation, seed)
        }
    };
    if ds.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    Ok(match spec.limit {
        Some(n) => ds.truncated(n),
        None => ds,
    })
}

fn read_be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    if at + 4 > bytes.len() {
        return Err(Error::Format("IDX file truncated".into()));
    }
    Ok(u32::from_be_bytes([
        bytes[at],
        bytes[at + 1],
        bytes[at + 2],
        bytes[at + 3],
    ]))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parses the big-endian IDX pair for the split and normalizes pixels as
/// (px/255 - mean) / std.
pub fn load_mnist_idx(
    root: &Path,
    split: Split,
    mean: &[f32],
    std: &[f32],
) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = std::fs::read(root.join(format!("{prefix}-images-idx3-ubyte")))?;
    let labels = std::fs::read(root.join(format!("{prefix}-labels-idx1-ubyte")))?;

    if read_be_u32(&images, 0)? != IDX_IMAGES_MAGIC {
        return Err(Error::Format("IDX images: bad magic".into()));
    }
    if read_be_u32(&labels, 0)? != IDX_LABELS_MAGIC {
        return Err(Error::Format("IDX labels: bad magic".into()));
    }
    let count = read_be_u32(&images, 4)? as usize;
    let rows = read_be_u32(&images, 8)? as usize;
    let cols = read_be_u32(&images, 12)? as usize;
    if read_be_u32(&labels, 4)? as usize != count {
        return Err(Error::Format("IDX: image/label counts disagree".into()));
    }
    let per = rows * cols;
    if images.len() != 16 + count * per {
        return Err(Error::Format("IDX images: truncated payload".into()));
    }
    if labels.len() != 8 + count {
        return Err(Error::Format("IDX labels: truncated payload".into()));
    }
    let (m, s) = single_channel_stats(mean, std)?;
    let data: Vec<f32> = images[16..]
        .iter()
        .map(|&px| (px as f32 / 255.0 - m) / s)
        .collect();
    Ok(Dataset {
        sample_shape: vec![1, rows, cols],
        labels: labels[8..].to_vec(),
        classes: 10,
        data,
    })
}

fn single_channel_stats(mean: &[f32], std: &[f32]) -> Result<(f32, f32)> {
    match (mean, std) {
        ([], []) => Ok((0.1307, 0.3081)),
        ([m], [s]) if *s > 0.0 => Ok((*m, *s)),
        _ => Err(Error::Config(
            "single-channel data needs one mean and one positive std".into(),
        )),
    }
}

const CIFAR_RECORD: usize = 3073;
pub const CIFAR10_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// Parses the CIFAR-10 binary batches (1 label byte + 3072 channel-major
/// pixel bytes per record).
pub fn load_cifar10_binary(
    root: &Path,
    split: Split,
    mean: &[f32],
    std: &[f32],
) -> Result<Dataset> {
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5)
            .map(|i| root.join(format!("data_batch_{i}.bin")))
            .collect(),
        Split::Test => vec![root.join("test_batch.bin")],
    };
    let (mean, std): (Vec<f32>, Vec<f32>) = match (mean, std) {
        ([], []) => (CIFAR10_MEAN.to_vec(), CIFAR10_STD.to_vec()),
        (m, s) if m.len() == 3 && s.len() == 3 && s.iter().all(|&v| v > 0.0) => {
            (m.to_vec(), s.to_vec())
        }
        _ => {
            return Err(Error::Config(
                "CIFAR-10 needs three means and three positive stds".into(),
            ))
        }
    };
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for f in files {
        let bytes = std::fs::read(&f)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: length {} is not a multiple of {CIFAR_RECORD}",
                f.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            let label = rec[0];
            if label > 9 {
                return Err(Error::Format(format!("CIFAR-10 label {label} out of range")));
            }
            labels.push(label);
            for c in 0..3 {
                for px in &rec[1 + c * 1024..1 + (c + 1) * 1024] {
                    data.push((*px as f32 / 255.0 - mean[c]) / std[c]);
                }
            }
        }
    }
    Ok(Dataset {
        sample_shape: vec![3, 32, 32],
        labels,
        classes: 10,
        data,
    })
}

/// Linearly separable sanity task: class centers spread on coordinate axes,
/// unit Gaussian noise around them.
pub fn synthetic_blobs(
    samples: usize,
    dim: usize,
    classes: usize,
    separation: f32,
    seed: u64,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(samples * dim);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let class = i % classes;
        labels.push(class as u8);
        for d in 0..dim {
            let center = if d % classes == class { separation } else { 0.0 };
            data.push(center + rng.gen_range(-1.0..1.0));
        }
    }
    Dataset {
        sample_shape: vec![dim],
        labels,
        classes,
        data,
    }
}

/// Train-time augmentation: per-sample Bernoulli horizontal flip, then
/// pad-by-edge-value and random crop back to the original size. Only
/// spatial batches `[B, C, H, W]` are augmented.
pub fn augment(batch: &Tensor, spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if spec.hflip_prob == 0.0 && spec.crop_pad == 0 {
        return Ok(batch.clone());
    }
    let [b, c, h, w] = batch.shape() else {
        return Err(Error::Data(
            "augmentation needs a [B, C, H, W] batch".into(),
        ));
    };
    let (b, c, h, w) = (*b, *c, *h, *w);
    let mut out = batch.clone();
    for bi in 0..b {
        let flip = spec.hflip_prob > 0.0 && rng.gen_range(0.0..1.0) < spec.hflip_prob;
        let (dy, dx) = if spec.crop_pad > 0 {
            (
                rng.gen_range(0..=2 * spec.crop_pad) as isize - spec.crop_pad as isize,
                rng.gen_range(0..=2 * spec.crop_pad) as isize - spec.crop_pad as isize,
            )
        } else {
            (0, 0)
        };
        if !flip && dy == 0 && dx == 0 {
            continue;
        }
        for ci in 0..c {
            let base = (bi * c + ci) * h * w;
            let src: Vec<f32> = batch.data()[base..base + h * w].to_vec();
            for y in 0..h {
                for x in 0..w {
                    // shifted source position, clamped to the edge
                    let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let sx_raw = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    let sx = if flip { w - 1 - sx_raw } else { sx_raw };
                    out.data_mut()[base + y * w + x] = src[sy * w + sx];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_idx_fixture(dir: &Path, prefix: &str, images: &[[u8; 4]], labels: &[u8]) {
        // 2x2 images
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(images.len() as u32).to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        for i in images {
            img.extend_from_slice(i);
        }
        std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lab.extend_from_slice(labels);
        std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lab).unwrap();
    }

    #[test]
    fn mnist_fixture_roundtrip_and_normalization() {
        let dir = tempfile::tempdir().unwrap();
        write_idx_fixture(dir.path(), "train", &[[0, 128, 255, 64]], &[7]);
        let ds = load_mnist_idx(dir.path(), Split::Train, &[0.1307], &[0.3081]).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels[0], 7);
        assert_eq!(ds.sample_shape, vec![1, 2, 2]);
        let want = (1.0 - 0.1307) / 0.3081;
        assert!((ds.sample(0)[2] - want).abs() <= 1e-6);
    }

    #[test]
    fn mnist_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        write_idx_fixture(dir.path(), "train", &[[0, 0, 0, 0]], &[1]);
        let img_path = dir.path().join("train-images-idx3-ubyte");
        let mut bytes = std::fs::read(&img_path).unwrap();
        bytes[3] = 0x99;
        std::fs::write(&img_path, &bytes).unwrap();
        assert!(matches!(
            load_mnist_idx(dir.path(), Split::Train, &[], &[]),
            Err(Error::Format(_))
        ));

        bytes[3] = 0x03;
        bytes.truncate(bytes.len() - 2);
        std::fs::write(&img_path, &bytes).unwrap();
        assert!(matches!(
            load_mnist_idx(dir.path(), Split::Train, &[], &[]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn cifar_fixture_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![9u8];
        rec.extend(std::iter::repeat(100u8).take(3072));
        std::fs::write(dir.path().join("test_batch.bin"), &rec).unwrap();
        let ds = load_cifar10_binary(dir.path(), Split::Test, &[], &[]).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels[0], 9);
        let want = (100.0 / 255.0 - CIFAR10_MEAN[0]) / CIFAR10_STD[0];
        assert!((ds.sample(0)[0] - want).abs() <= 1e-6);
    }

    #[test]
    fn cifar_misaligned_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("test_batch.bin"), vec![0u8; 3072]).unwrap();
        assert!(matches!(
            load_cifar10_binary(dir.path(), Split::Test, &[], &[]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn blobs_are_balanced_and_deterministic() {
        let a = synthetic_blobs(100, 8, 2, 4.0, 5);
        let b = synthetic_blobs(100, 8, 2, 4.0, 5);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.sample(0), b.sample(0));
        let ones = a.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(ones, 50);
    }

    #[test]
    fn double_flip_restores_image() {
        let batch = Tensor::from_vec(
            &[1, 1, 2, 2],
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        let spec = AugmentSpec { hflip_prob: 1.0, crop_pad: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let once = augment(&batch, &spec, &mut rng).unwrap();
        assert_eq!(once.data(), &[2.0, 1.0, 4.0, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let twice = augment(&once, &spec, &mut rng).unwrap();
        assert_eq!(twice, batch);
    }

    #[test]
    fn zero_augmentation_is_identity_and_deterministic() {
        let batch = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let spec = AugmentSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(augment(&batch, &spec, &mut rng).unwrap(), batch);

        let spec = AugmentSpec { hflip_prob: 0.5, crop_pad: 1 };
        let mut r1 = ChaCha8Rng::seed_from_u64(11);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let a = augment(&batch, &spec, &mut r1).unwrap();
        let b = augment(&batch, &spec, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_gathers_samples() {
        let ds = synthetic_blobs(10, 4, 2, 3.0, 9);
        let (t, y) = ds.batch(&[0, 3, 5]).unwrap();
        assert_eq!(t.shape(), &[3, 4]);
        assert_eq!(y.len(), 3);
        assert_eq!(&t.data()[4..8], ds.sample(3));
    }
}
