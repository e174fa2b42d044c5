//! Dataset ingestion: IDX (MNIST) files, CIFAR-10 binary batches and
//! deterministic synthetic generators, plus seeded mini-batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images (or feature vectors) with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Shape of one sample, e.g. `[1, 28, 28]` or `[2]`.
    pub sample_shape: Vec<usize>,
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(sample_shape: Vec<usize>, pixels: Vec<f64>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::invalid(
                "dataset",
                format!("{} values do not fit {} samples of shape {sample_shape:?}", pixels.len(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid("dataset", format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self { sample_shape, pixels, labels, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// First `k` samples (all of them when `k >= len`).
    pub fn take(mut self, k: usize) -> Self {
        if k < self.len() {
            let n = self.sample_len();
            self.pixels.truncate(k * n);
            self.labels.truncate(k);
        }
        self
    }

    /// Stacks the given samples into one `B × sample_shape` tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_parts(shape, data), labels)
    }

    /// Per-channel mean and standard deviation (first sample axis is the
    /// channel axis; 1-D samples count as one channel per feature).
    pub fn channel_stats(&self) -> ChannelStats {
        let channels = self.sample_shape[0];
        let per_channel = self.sample_len() / channels;
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        for i in 0..self.len() {
            let s = self.sample(i);
            for c in 0..channels {
                for &v in &s[c * per_channel..(c + 1) * per_channel] {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (self.len() * per_channel).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / count - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        ChannelStats { mean, std }
    }

    pub fn standardize(&mut self, stats: &ChannelStats) {
        let channels = self.sample_shape[0];
        let per_channel = self.sample_len() / channels;
        for (k, v) in self.pixels.iter_mut().enumerate() {
            let c = (k / per_channel) % channels;
            *v = (*v - stats.mean[c]) / stats.std[c];
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, format!("truncated header at byte {at}")))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::format(
            path,
            format!("bad IDX magic: expected 0x{expected:08x}, found 0x{found:08x}"),
        ));
    }
    Ok(())
}

/// Reads an IDX image file and its label file. Pixels are scaled by 1/255.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let img = read(images)?;
    check_magic(&img, IDX_IMAGES_MAGIC, images)?;
    let count = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    let body = &img[16..];
    if body.len() < count * rows * cols {
        return Err(Error::format(
            images,
            format!("truncated: {count}×{rows}×{cols} pixels declared, {} bytes present", body.len()),
        ));
    }

    let lab = read(labels)?;
    check_magic(&lab, IDX_LABELS_MAGIC, labels)?;
    let lcount = be_u32(&lab, 4, labels)? as usize;
    if lab.len() < 8 + lcount {
        return Err(Error::format(labels, format!("truncated: {lcount} labels declared, {} present", lab.len() - 8)));
    }
    if lcount != count {
        return Err(Error::format(labels, format!("{lcount} labels for {count} images")));
    }
    let label_vec: Vec<usize> = lab[8..8 + count].iter().map(|&b| b as usize).collect();
    let num_classes = label_vec.iter().max().map_or(10, |&m| (m + 1).max(10));
    let pixels = body[..count * rows * cols].iter().map(|&b| b as f64 / 255.0).collect();
    if count == 0 {
        log::warn!("{}: no images", images.display());
    }
    Dataset::new(vec![1, rows, cols], pixels, label_vec, num_classes, split)
}

/// Loads the standard MNIST file pair for `split` from `dir`.
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    load_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
        split,
    )
}

/// Writes `pixels` (bytes) and `labels` as an IDX pair.
pub fn write_idx(images: &Path, labels: &Path, rows: usize, cols: usize, pixels: &[u8], label_bytes: &[u8]) -> Result<()> {
    let count = label_bytes.len();
    if pixels.len() != count * rows * cols {
        return Err(Error::invalid("write_idx", "pixel count does not match labels × rows × cols"));
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    fs::write(images, img).map_err(|e| Error::io(images, e))?;
    let mut lab = Vec::with_capacity(8 + count);
    for v in [IDX_LABELS_MAGIC, count as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(label_bytes);
    fs::write(labels, lab).map_err(|e| Error::io(labels, e))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CifarOptions {
    pub subset: Option<usize>,
    pub standardize: bool,
}

/// Parses CIFAR-10 binary records (1 label byte + 3072 channel-major
/// pixel bytes). Pixels are scaled by 1/255 and, if requested,
/// standardized per channel with the file's own statistics.
pub fn load_cifar10_binary(path: &Path, opts: CifarOptions, split: Split) -> Result<Dataset> {
    let bytes = read(path)?;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(
            path,
            format!("size {} is not a multiple of the {CIFAR_RECORD}-byte record", bytes.len()),
        ));
    }
    let mut records = bytes.len() / CIFAR_RECORD;
    if records == 0 {
        log::warn!("{}: empty CIFAR-10 file", path.display());
    }
    if let Some(k) = opts.subset {
        records = records.min(k);
    }
    let mut labels = Vec::with_capacity(records);
    let mut pixels = Vec::with_capacity(records * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD).take(records) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::format(path, format!("label byte {label} out of range")));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let mut ds = Dataset::new(vec![3, 32, 32], pixels, labels, 10, split)?;
    if opts.standardize && !ds.is_empty() {
        let stats = ds.channel_stats();
        ds.standardize(&stats);
    }
    Ok(ds)
}

/// Concatenates CIFAR-10 batch files in order.
pub fn load_cifar10_files(paths: &[&Path], opts: CifarOptions, split: Split) -> Result<Dataset> {
    let raw = CifarOptions { standardize: false, ..opts };
    let mut all: Option<Dataset> = None;
    for p in paths {
        let ds = load_cifar10_binary(p, raw, split)?;
        match &mut all {
            None => all = Some(ds),
            Some(acc) => {
                acc.pixels.extend(ds.pixels);
                acc.labels.extend(ds.labels);
            }
        }
    }
    let mut ds = all.ok_or_else(|| Error::invalid("cifar10", "no input files"))?;
    if let Some(k) = opts.subset {
        ds = ds.take(k);
    }
    if opts.standardize && !ds.is_empty() {
        let stats = ds.channel_stats();
        ds.standardize(&stats);
    }
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    TwoGaussians,
    /// Class 0 inside the unit disc, class 1 on an annulus around it; not
    /// linearly separable.
    Ring,
}

/// Deterministic two-class 2-D dataset with alternating labels.
pub fn synthetic_dataset(kind: SyntheticKind, n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::invalid("synthetic_dataset", format!("need at least 2 samples, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let (x, y) = match kind {
            SyntheticKind::TwoGaussians => {
                let center = if label == 0 { -1.0 } else { 1.0 };
                let zx: f64 = StandardNormal.sample(&mut rng);
                let zy: f64 = StandardNormal.sample(&mut rng);
                (center + 0.5 * zx, center + 0.5 * zy)
            }
            SyntheticKind::Ring => {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let r = if label == 0 { rng.random_range(0.0..1.0f64).sqrt() } else { rng.random_range(1.5..2.5) };
                (r * angle.cos(), r * angle.sin())
            }
        };
        pixels.extend([x, y]);
        labels.push(label);
    }
    Dataset::new(vec![2], pixels, labels, 2, Split::Train)
}

/// One mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Index order for one epoch: a seeded permutation, or identity when
/// `shuffle_seed` is `None`.
pub fn epoch_order(len: usize, shuffle_seed: Option<u64>, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
    }
    order
}

/// Iterates one epoch of batches; the final partial batch is included.
pub struct BatchIter<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch: usize,
    pos: usize,
}

pub fn batch_iterator(data: &Dataset, batch_size: usize, shuffle_seed: Option<u64>, epoch: u64) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_iterator", "batch size must be at least 1"));
    }
    Ok(BatchIter { data, order: epoch_order(data.len(), shuffle_seed, epoch), batch: batch_size, pos: 0 })
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let (images, labels) = self.data.gather(&indices);
        Some(Batch { images, labels, indices })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_fixture_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&ip, &lp, 2, 2, &[0, 255, 51, 102, 10, 20, 30, 40], &[3, 7]).unwrap();
        let ds = load_idx(&ip, &lp, Split::Train).unwrap();
        assert_eq!(ds.sample_shape, vec![1, 2, 2]);
        assert_eq!(ds.labels, vec![3, 7]);
        assert_eq!(ds.sample(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.sample(1), &[10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0, 40.0 / 255.0]);

        // label count mismatch
        write_idx(&dir.path().join("i2"), &dir.path().join("l2"), 2, 2, &[0; 4], &[1]).unwrap();
        let err = load_idx(&ip, &dir.path().join("l2"), Split::Train).unwrap_err();
        assert!(err.to_string().contains("1 labels for 2 images"), "{err}");

        // swapped magic
        let err = load_idx(&lp, &ip, Split::Train).unwrap_err().to_string();
        assert!(err.contains("expected 0x00000803") && err.contains("found 0x00000801"), "{err}");

        // truncated pixel body
        let mut bytes = fs::read(&ip).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&ip, bytes).unwrap();
        assert!(load_idx(&ip, &lp, Split::Train).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn cifar_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        let mut rec = vec![7u8];
        rec.extend((0..3072).map(|i| (i % 256) as u8));
        let mut bytes = rec.clone();
        bytes.extend(&rec);
        bytes[CIFAR_RECORD] = 2;
        fs::write(&p, &bytes).unwrap();

        let ds = load_cifar10_binary(&p, CifarOptions::default(), Split::Train).unwrap();
        assert_eq!(ds.labels, vec![7, 2]);
        assert_eq!(ds.sample_shape, vec![3, 32, 32]);
        assert_eq!(ds.sample(0)[0], 0.0);
        assert_eq!(ds.sample(0)[1], 1.0 / 255.0);

        let sub = load_cifar10_binary(&p, CifarOptions { subset: Some(1), standardize: false }, Split::Train).unwrap();
        assert_eq!(sub.len(), 1);

        let std = load_cifar10_binary(&p, CifarOptions { subset: None, standardize: true }, Split::Train).unwrap();
        let stats = std.channel_stats();
        for c in 0..3 {
            assert!(stats.mean[c].abs() < 1e-9);
            assert!((stats.std[c] - 1.0).abs() < 1e-9);
        }

        fs::write(&p, &bytes[..100]).unwrap();
        assert!(load_cifar10_binary(&p, CifarOptions::default(), Split::Train).is_err());
        fs::write(&p, b"").unwrap();
        assert!(load_cifar10_binary(&p, CifarOptions::default(), Split::Train).unwrap().is_empty());
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        for kind in [SyntheticKind::TwoGaussians, SyntheticKind::Ring] {
            let a = synthetic_dataset(kind, 101, 5).unwrap();
            assert_eq!(a, synthetic_dataset(kind, 101, 5).unwrap());
            let ones = a.labels.iter().filter(|&&l| l == 1).count();
            assert!((a.len() - ones).abs_diff(ones) <= 1);
        }
        assert!(synthetic_dataset(SyntheticKind::Ring, 1, 0).is_err());
    }

    #[test]
    fn batches_partition_each_epoch() {
        let ds = synthetic_dataset(SyntheticKind::TwoGaussians, 10, 0).unwrap();
        let sizes: Vec<usize> = batch_iterator(&ds, 3, Some(1), 0).unwrap().map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);

        let a: Vec<Vec<usize>> = batch_iterator(&ds, 3, Some(9), 2).unwrap().map(|b| b.indices).collect();
        let b: Vec<Vec<usize>> = batch_iterator(&ds, 3, Some(9), 2).unwrap().map(|b| b.indices).collect();
        assert_eq!(a, b);
        let c: Vec<Vec<usize>> = batch_iterator(&ds, 3, Some(9), 3).unwrap().map(|b| b.indices).collect();
        assert_ne!(a, c);

        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(batch_iterator(&ds, 0, None, 0).is_err());
    }
}
