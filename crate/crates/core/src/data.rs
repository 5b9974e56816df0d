//! MNIST (IDX) and CIFAR-10 (binary batch) ingestion, normalization,
//! augmentation and seeded batching.
//!
//! Images are kept as raw bytes and converted to floats per batch.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_BATCH_RECORDS: usize = 10_000;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";
/// Subdirectory of the data root holding the CIFAR-10 batches.
pub const CIFAR_SUBDIR: &str = "cifar-10-batches-bin";
pub const MNIST_SUBDIR: &str = "mnist";
pub const MNIST_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    #[default]
    Cifar10,
    Mnist,
}

impl DatasetId {
    /// Directory under the data root where this dataset's files live.
    pub fn subdir(self) -> &'static str {
        match self {
            DatasetId::Cifar10 => CIFAR_SUBDIR,
            DatasetId::Mnist => MNIST_SUBDIR,
        }
    }

    pub fn input_shape(self) -> [usize; 3] {
        match self {
            DatasetId::Cifar10 => [3, 32, 32],
            DatasetId::Mnist => [1, 28, 28],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    /// `[C, H, W]` of each image.
    pub shape: [usize; 3],
    pub num_classes: usize,
    /// Row-major `[N, C, H, W]` bytes; pixel value `v` stands for `v / 255`.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(split: Split, shape: [usize; 3], num_classes: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 || pixels.len() != labels.len() * per {
            return Err(Error::shape(format!(
                "{} labels but {} pixel bytes for images of {shape:?}",
                labels.len(),
                pixels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::contract(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Self {
            split,
            shape,
            num_classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// The first `k` examples of every class, in file order.
    pub fn first_per_class(&self, k: usize) -> Self {
        let mut taken = vec![0; self.num_classes];
        let mut idx = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if taken[l as usize] < k {
                taken[l as usize] += 1;
                idx.push(i);
            }
        }
        self.select(&idx)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Self {
            split: self.split,
            shape: self.shape,
            num_classes: self.num_classes,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Images at `indices` as `[n, C, H, W]` in `[0, 1]`, plus their labels.
    pub fn gather<T: Element>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let per = self.image_len();
        let lut: Vec<T> = (0..=255u32).map(|v| T::lit(v as f64 / 255.0)).collect();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&b| lut[b as usize]));
        }
        let shape = [indices.len(), self.shape[0], self.shape[1], self.shape[2]];
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        (Tensor::from_parts(shape.to_vec(), data), labels)
    }
}

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Statistics of the `[0, 1]`-scaled pixels of `data`.
    pub fn fit(data: &Dataset) -> Self {
        let c = data.shape[0];
        let plane = data.shape[1] * data.shape[2];
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for img in data.pixels.chunks_exact(c * plane) {
            for (ch, p) in img.chunks_exact(plane).enumerate() {
                for &b in p {
                    let v = b as f64 / 255.0;
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let n = (data.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Self { mean, std }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    fn check<T: Element>(&self, x: &Tensor<T>) -> Result<usize> {
        if x.ndim() != 4 || x.shape()[1] != self.mean.len() {
            return Err(Error::shape(format!(
                "normalization for {} channels applied to {:?}",
                self.mean.len(),
                x.shape()
            )));
        }
        Ok(x.shape()[2] * x.shape()[3])
    }

    pub fn normalize<T: Element>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.affine(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize<T: Element>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.affine(x, |v, m, s| v * s + m)
    }

    fn affine<T: Element>(&self, x: &Tensor<T>, f: impl Fn(T, T, T) -> T) -> Result<Tensor<T>> {
        let plane = self.check(x)?;
        let c = self.mean.len();
        let mut out = x.clone();
        for (k, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
            let (m, s) = (T::lit(self.mean[k % c]), T::lit(self.std[k % c]));
            chunk.iter_mut().for_each(|v| *v = f(*v, m, s));
        }
        Ok(out)
    }
}

/// Training-time augmentation: zero-padded random crop and horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub crop_padding: usize,
    pub flip_probability: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            crop_padding: 4,
            flip_probability: 0.5,
        }
    }
}

impl AugmentPolicy {
    pub const NONE: Self = Self {
        crop_padding: 0,
        flip_probability: 0.0,
    };
}

/// Applies `policy` independently to every image of `[N, C, H, W]`.
pub fn augment<T: Element, R: Rng + ?Sized>(batch: &Tensor<T>, policy: &AugmentPolicy, rng: &mut R) -> Tensor<T> {
    let s = batch.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let pad = policy.crop_padding;
    let mut out = batch.clone();
    for img in out.data_mut().chunks_exact_mut(c * h * w) {
        let dy = rng.gen_range(0..=2 * pad);
        let dx = rng.gen_range(0..=2 * pad);
        let flip = rng.gen::<f64>() < policy.flip_probability;
        if dy != pad || dx != pad {
            let src = img.to_vec();
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let (y, x) = ((i + dy) as isize - pad as isize, (j + dx) as isize - pad as isize);
                        img[(ch * h + i) * w + j] = if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                            T::zero()
                        } else {
                            src[(ch * h + y as usize) * w + x as usize]
                        };
                    }
                }
            }
        }
        if flip {
            for row in img.chunks_exact_mut(w) {
                row.reverse();
            }
        }
    }
    out
}

/// Mirrors every image left to right.
pub fn hflip<T: Element>(batch: &Tensor<T>) -> Tensor<T> {
    let w = batch.shape()[3];
    let mut out = batch.clone();
    out.data_mut().chunks_exact_mut(w).for_each(<[T]>::reverse);
    out
}

/// Deterministic generator for `(seed, stream, epoch)`.
pub fn stream_rng(seed: u64, stream: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(1 << 32) ^ epoch);
    rng
}

pub const INIT_STREAM: u64 = 0;
pub const SHUFFLE_STREAM: u64 = 1;
pub const AUGMENT_STREAM: u64 = 2;

/// A seeded permutation of `0..n` split into batches; the last one may be short.
pub fn batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || n == 0 {
        return Err(Error::config(
            "batching needs a positive batch size and a non-empty split",
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn decode_cifar_record(record: &[u8]) -> Result<(u8, &[u8])> {
    if record.len() != CIFAR_RECORD {
        return Err(Error::shape(format!("CIFAR record of {} bytes", record.len())));
    }
    Ok((record[0], &record[1..]))
}

pub fn encode_cifar_record(label: u8, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(1 + pixels.len());
    out.push(label);
    out.extend_from_slice(pixels);
    out
}

/// Parses one CIFAR-10 binary batch file. `expected_records` enforces the
/// canonical 10,000-record size; `None` accepts any whole number of records.
pub fn read_cifar_batch(path: &Path, expected_records: Option<usize>) -> Result<(Vec<u8>, Vec<u8>)> {
    let bytes = read(path)?;
    let whole = bytes.len() % CIFAR_RECORD == 0 && !bytes.is_empty();
    if !whole || expected_records.is_some_and(|n| bytes.len() != n * CIFAR_RECORD) {
        return Err(Error::data(
            path,
            format!(
                "{} bytes; expected {} ({} records of {CIFAR_RECORD} bytes)",
                bytes.len(),
                expected_records.unwrap_or(bytes.len() / CIFAR_RECORD) * CIFAR_RECORD,
                expected_records.map_or("whole".to_string(), |n| n.to_string())
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let (label, px) = decode_cifar_record(rec)?;
        if label > 9 {
            return Err(Error::data(path, format!("record {i} has corrupt label byte {label}")));
        }
        labels.push(label);
        pixels.extend_from_slice(px);
    }
    Ok((pixels, labels))
}

fn cifar_split(dir: &Path, files: &[&str], split: Split, strict: bool) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let (p, l) = read_cifar_batch(&dir.join(f), strict.then_some(CIFAR_BATCH_RECORDS))?;
        pixels.extend(p);
        labels.extend(l);
    }
    Dataset::new(split, [3, 32, 32], 10, pixels, labels)
}

/// Loads the canonical CIFAR-10 binary distribution (5 training batches and
/// one test batch, each exactly 10,000 records).
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    load_cifar10_with(dir, true)
}

/// Like [`load_cifar10`]; with `strict = false` batch files may hold any
/// whole number of records (used for trimmed fixtures).
pub fn load_cifar10_with(dir: &Path, strict: bool) -> Result<(Dataset, Dataset)> {
    ensure_dir(dir)?;
    Ok((
        cifar_split(dir, &CIFAR_TRAIN_FILES, Split::Train, strict)?,
        cifar_split(dir, &[CIFAR_TEST_FILE], Split::Test, strict)?,
    ))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        return Err(Error::data(dir, "dataset directory not found"));
    }
    Ok(())
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses an IDX image file (`0x00000803`, dims `n, rows, cols`).
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    if bytes.len() < 16 {
        return Err(Error::data(path, "IDX image header truncated"));
    }
    let magic = be_u32(bytes, 0);
    if magic != MNIST_IMAGES_MAGIC {
        return Err(Error::data(path, format!("bad image magic {magic} (expected 2051)")));
    }
    let (n, r, c) = (
        be_u32(bytes, 4) as usize,
        be_u32(bytes, 8) as usize,
        be_u32(bytes, 12) as usize,
    );
    if bytes.len() != 16 + n * r * c {
        return Err(Error::data(
            path,
            format!(
                "{} bytes, header promises {n}x{r}x{c} images ({} bytes)",
                bytes.len(),
                16 + n * r * c
            ),
        ));
    }
    Ok((n, r, c, bytes[16..].to_vec()))
}

/// Parses an IDX label file (`0x00000801`, dim `n`).
pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() < 8 {
        return Err(Error::data(path, "IDX label header truncated"));
    }
    let magic = be_u32(bytes, 0);
    if magic != MNIST_LABELS_MAGIC {
        return Err(Error::data(path, format!("bad label magic {magic} (expected 2049)")));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(Error::data(
            path,
            format!("{} bytes, header promises {n} labels", bytes.len()),
        ));
    }
    if let Some(i) = bytes[8..].iter().position(|&l| l > 9) {
        return Err(Error::data(path, format!("label {i} is {}", bytes[8 + i])));
    }
    Ok(bytes[8..].to_vec())
}

fn mnist_split(dir: &Path, prefix: &str, split: Split) -> Result<Dataset> {
    let ipath = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lpath = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let (n, r, c, pixels) = parse_idx_images(&ipath, &read(&ipath)?)?;
    let labels = parse_idx_labels(&lpath, &read(&lpath)?)?;
    if labels.len() != n {
        return Err(Error::data(&lpath, format!("{} labels for {n} images", labels.len())));
    }
    Dataset::new(split, [1, r, c], 10, pixels, labels)
}

/// Loads MNIST from the four uncompressed IDX files.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    ensure_dir(dir)?;
    Ok((
        mnist_split(dir, "train", Split::Train)?,
        mnist_split(dir, "t10k", Split::Test)?,
    ))
}

/// Loads `id` from `root/<subdir>` (or `root` itself when the files sit there).
pub fn load(id: DatasetId, root: &Path, strict: bool) -> Result<(Dataset, Dataset)> {
    let nested: PathBuf = root.join(id.subdir());
    let dir = if nested.is_dir() { nested } else { root.to_path_buf() };
    match id {
        DatasetId::Cifar10 => load_cifar10_with(&dir, strict),
        DatasetId::Mnist => load_mnist(&dir),
    }
}

/// Writes `data` as IDX image and label files (used to build fixtures).
pub fn write_idx(images: &Path, labels: &Path, data: &Dataset) -> Result<()> {
    let mut img = Vec::with_capacity(16 + data.pixels.len());
    for v in [
        MNIST_IMAGES_MAGIC,
        data.len() as u32,
        data.shape[1] as u32,
        data.shape[2] as u32,
    ] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(&data.pixels);
    let mut lab = Vec::with_capacity(8 + data.len());
    lab.extend_from_slice(&MNIST_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(data.len() as u32).to_be_bytes());
    lab.extend_from_slice(&data.labels);
    fs::write(images, img).map_err(|e| Error::io(images, e))?;
    fs::write(labels, lab).map_err(|e| Error::io(labels, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let pixels: Vec<u8> = (0..6 * 2 * 2 * 2).map(|v| (v * 5) as u8).collect();
        Dataset::new(Split::Train, [2, 2, 2], 3, pixels, vec![0, 1, 2, 0, 1, 0]).unwrap()
    }

    #[test]
    fn cifar_record_codec() {
        let rec: Vec<u8> = (0..CIFAR_RECORD).map(|i| (i % 251) as u8).collect();
        let (label, px) = decode_cifar_record(&rec).unwrap();
        assert_eq!(encode_cifar_record(label, px), rec);
    }

    #[test]
    fn pixel_scaling() {
        let d = Dataset::new(Split::Test, [1, 1, 2], 10, vec![255, 0], vec![3]).unwrap();
        let (x, y) = d.gather::<f64>(&[0]);
        assert_eq!(x.data(), &[1.0, 0.0]);
        assert_eq!(y, vec![3]);
    }

    #[test]
    fn first_per_class_subset() {
        let s = toy().first_per_class(2);
        assert_eq!(s.labels, vec![0, 1, 2, 0, 1]);
        assert_eq!(s.image(4), toy().image(4));
    }

    #[test]
    fn normalization_inverts() {
        let d = toy();
        let norm = Normalization::fit(&d);
        let (x, _) = d.gather::<f64>(&[0, 1, 2]);
        let back = norm.denormalize(&norm.normalize(&x).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn null_policy_and_flip_involution() {
        let (x, _) = toy().gather::<f64>(&[0, 1, 2, 3]);
        let mut rng = stream_rng(7, AUGMENT_STREAM, 0);
        assert_eq!(augment(&x, &AugmentPolicy::NONE, &mut rng), x);
        assert_eq!(hflip(&hflip(&x)), x);
        let a = augment(&x, &AugmentPolicy::default(), &mut stream_rng(7, AUGMENT_STREAM, 0));
        let b = augment(&x, &AugmentPolicy::default(), &mut stream_rng(7, AUGMENT_STREAM, 0));
        assert_eq!(a, b);
    }

    #[test]
    fn batch_partition() {
        let b = batches(10, 3, &mut stream_rng(1, SHUFFLE_STREAM, 0)).unwrap();
        assert_eq!(b.len(), 4);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, batches(10, 3, &mut stream_rng(1, SHUFFLE_STREAM, 0)).unwrap());
        assert_ne!(b, batches(10, 3, &mut stream_rng(1, SHUFFLE_STREAM, 1)).unwrap());
    }

    #[test]
    fn idx_magic_numbers() {
        let p = Path::new("x");
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 1, 2];
        assert_eq!(parse_idx_images(p, &img).unwrap().3, vec![0, 255, 1, 2]);
        img[3] = 1;
        assert!(matches!(parse_idx_images(p, &img), Err(Error::Data { .. })));
        assert_eq!(parse_idx_labels(p, &[0, 0, 8, 1, 0, 0, 0, 1, 7]).unwrap(), vec![7]);
        assert!(parse_idx_labels(p, &[0, 0, 8, 3, 0, 0, 0, 1, 7]).is_err());
        assert!(parse_idx_labels(p, &[0, 0, 8, 1, 0, 0, 0, 2, 7]).is_err());
    }
}
