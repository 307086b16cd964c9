//! Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches, and a small
//! synthetic two-class task, plus deterministic shuffling and standardization.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_BATCH_RECORDS: usize = 10_000;

/// Unsigned-byte IDX array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn magic(&self) -> u32 {
        0x0800 | self.dims.len() as u32
    }
}

fn fmt_err(format: &'static str, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        format,
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Reads a whole file, transparently decompressing `.gz`.
pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path)?;
    let mut buf = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file).read_to_end(&mut buf)?;
    } else {
        file.read_to_end(&mut buf)?;
    }
    Ok(buf)
}

/// Parses an unsigned-byte IDX file (big-endian header).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(fmt_err("IDX", bytes.len(), "file shorter than the magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(fmt_err("IDX", 0, "magic number must start with two zero bytes"));
    }
    if bytes[2] != 0x08 {
        return Err(fmt_err("IDX", 2, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(fmt_err("IDX", 3, "zero dimensions"));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(fmt_err("IDX", bytes.len(), format!("truncated header, expected {} bytes", header)));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() < header + n {
        return Err(fmt_err(
            "IDX",
            bytes.len(),
            format!("truncated payload, expected {} bytes after the header", n),
        ));
    }
    if bytes.len() > header + n {
        return Err(fmt_err("IDX", header + n, "trailing bytes after payload"));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn load_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&read_bytes(path)?)
}

pub fn encode_idx(arr: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * arr.dims.len() + arr.data.len());
    out.extend_from_slice(&arr.magic().to_be_bytes());
    for &d in &arr.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&arr.data);
    out
}

pub fn write_idx(path: &Path, arr: &IdxArray) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    if path.extension().is_some_and(|e| e == "gz") {
        let mut gz = flate2::write::GzEncoder::new(w, flate2::Compression::best());
        gz.write_all(&encode_idx(arr))?;
        gz.finish()?.flush()?;
    } else {
        w.write_all(&encode_idx(arr))?;
        w.flush()?;
    }
    Ok(())
}

/// Images `[N, C, H, W]` (or `[N, F]` for feature data) with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(invalid(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(invalid(format!("label {} outside [0, {})", l, classes)));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Gathers the given samples, in order, as a batch tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let row = self.images.row_len();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * row..(i + 1) * row]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gathered shape"), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (images, labels) = self.gather(indices);
        Self {
            images,
            labels,
            classes: self.classes,
        }
    }

    /// Shuffles with `seed`, then splits into the first `first` samples and the rest.
    pub fn split(&self, first: usize, seed: u64) -> Result<(Self, Self)> {
        if first > self.len() {
            return Err(invalid(format!("cannot take {} of {} samples", first, self.len())));
        }
        let perm = permutation(self.len(), &mut ChaCha8Rng::seed_from_u64(seed));
        Ok((self.subset(&perm[..first]), self.subset(&perm[first..])))
    }
}

/// A uniformly random permutation of `0..n`.
pub fn permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn bytes_to_unit(data: &[u8]) -> Vec<f64> {
    data.iter().map(|&b| b as f64 / 255.0).collect()
}

/// Loads an MNIST-style image/label IDX pair as `[N, 1, H, W]` in `[0, 1]`.
pub fn load_mnist(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = load_idx(images)?;
    if img.magic() != IDX_IMAGES_MAGIC {
        return Err(fmt_err("IDX", 0, format!("expected image magic 0x{:08x}", IDX_IMAGES_MAGIC)));
    }
    let lab = load_idx(labels)?;
    if lab.magic() != IDX_LABELS_MAGIC {
        return Err(fmt_err("IDX", 0, format!("expected label magic 0x{:08x}", IDX_LABELS_MAGIC)));
    }
    let (n, h, w) = (img.dims[0], img.dims[1], img.dims[2]);
    let images = Tensor::new(vec![n, 1, h, w], bytes_to_unit(&img.data))?;
    let labels = lab.data.iter().map(|&l| l as usize).collect();
    Dataset::new(images, labels, 10)
}

/// Parses CIFAR-10 binary records (`label, R plane, G plane, B plane`).
pub fn parse_cifar10(bytes: &[u8], expected_records: Option<usize>) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(fmt_err(
            "CIFAR-10",
            bytes.len() - bytes.len() % CIFAR_RECORD,
            format!("{} bytes is not a whole number of {}-byte records", bytes.len(), CIFAR_RECORD),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    if let Some(want) = expected_records {
        if n != want {
            return Err(fmt_err("CIFAR-10", bytes.len(), format!("{} records, expected {}", n, want)));
        }
    }
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(fmt_err("CIFAR-10", i * CIFAR_RECORD, format!("label byte {} > 9", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, 10)
}

pub fn load_cifar10_batch(path: &Path) -> Result<Dataset> {
    parse_cifar10(&read_bytes(path)?, Some(CIFAR_BATCH_RECORDS))
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut images = Vec::with_capacity(50_000 * 3072);
    let mut labels = Vec::with_capacity(50_000);
    for i in 1..=5 {
        let part = load_cifar10_batch(&dir.join(format!("data_batch_{}.bin", i)))?;
        images.extend_from_slice(part.images.data());
        labels.extend(part.labels);
    }
    let n = labels.len();
    let train = Dataset::new(Tensor::new(vec![n, 3, 32, 32], images)?, labels, 10)?;
    let test = load_cifar10_batch(&dir.join("test_batch.bin"))?;
    Ok((train, test))
}

/// Per-channel standardization statistics, computed on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Channel axis is 1; for `[N, F]` data every feature is its own channel.
fn channel_geometry(shape: &[usize]) -> (usize, usize) {
    let channels = shape.get(1).copied().unwrap_or(1);
    let inner = shape.iter().skip(2).product::<usize>();
    (channels, inner)
}

impl ChannelStats {
    pub fn fit(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(invalid("cannot compute statistics of an empty dataset"));
        }
        let (channels, inner) = channel_geometry(data.images.shape());
        let count = (data.len() * inner) as f64;
        let mut mean = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        for (i, v) in data.images.data().iter().enumerate() {
            mean[(i / inner) % channels] += v;
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for (i, v) in data.images.data().iter().enumerate() {
            let c = (i / inner) % channels;
            sq[c] += (v - mean[c]).powi(2);
        }
        let std = sq.iter().map(|s| (s / count).sqrt().max(1e-12)).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, data: &mut Dataset) -> Result<()> {
        let (channels, inner) = channel_geometry(data.images.shape());
        if channels != self.mean.len() {
            return Err(invalid(format!(
                "statistics for {} channels applied to {} channels",
                self.mean.len(),
                channels
            )));
        }
        for (i, v) in data.images.data_mut().iter_mut().enumerate() {
            let c = (i / inner) % channels;
            *v = (*v - self.mean[c]) / self.std[c];
        }
        Ok(())
    }
}

/// Two interleaved half-circles in the plane, one per class, shifted apart
/// so that they are linearly separable when `noise` is zero.
///
/// Class 0 lies on the upper unit half-circle (`y >= 0`), class 1 on a
/// lower half-circle shifted to `y <= -0.25`. Gaussian noise of standard
/// deviation `noise` is added to both coordinates.
pub fn synth_two_moons_like(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n % 2 != 0 || n == 0 {
        return Err(invalid(format!("two-moons size must be even and positive, got {}", n)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = n / 2;
    let mut points = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = usize::from(i >= half);
        let t = PI * rng.gen::<f64>();
        let (x, y) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), -t.sin() - 0.25)
        };
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        points.push(x + noise * nx);
        points.push(y + noise * ny);
        labels.push(class);
    }
    // interleave classes deterministically
    let perm = permutation(n, &mut rng);
    let ds = Dataset::new(Tensor::new(vec![n, 2], points)?, labels, 2)?;
    Ok(ds.subset(&perm))
}
