//! Labelled image sets: MNIST IDX files and synthetic Gaussian blobs.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nets::Classifier;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Images in `[0, 1]` (one row each) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    pub split: Split,
    pub source: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split, source: impl Into<String>) -> Result<Self> {
        if !images.is_matrix() {
            return Err(Error::dim("images must be an [n x d] matrix"));
        }
        if labels.len() != images.rows() {
            return Err(Error::dim(format!(
                "{} labels for {} images",
                labels.len(),
                images.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::input(format!("label {bad} outside 0..{num_classes}")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::input("pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Rows gathered into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.images.select_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    /// The first `n` examples in storage order.
    pub fn take_first(&self, n: usize) -> Result<Dataset> {
        if n == 0 || n > self.len() {
            return Err(Error::usage(format!(
                "cannot take {n} of {} examples",
                self.len()
            )));
        }
        Ok(Dataset {
            images: self.images.slice_rows(0, n)?,
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            split: self.split,
            source: format!("{}[..{n}]", self.source),
        })
    }

    /// Splits into the first `n` examples and the rest.
    pub fn split_at(&self, n: usize, rest: Split) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::usage(format!("cannot split {} examples at {n}", self.len())));
        }
        let head = self.take_first(n)?;
        let tail = Dataset {
            images: self.images.slice_rows(n, self.len())?,
            labels: self.labels[n..].to_vec(),
            num_classes: self.num_classes,
            split: rest,
            source: format!("{}[{n}..]", self.source),
        };
        Ok((head, tail))
    }

    /// Percentage of examples `model` labels correctly, evaluated in chunks.
    pub fn accuracy<M: Classifier + ?Sized>(&self, model: &M) -> Result<f64> {
        Ok(100.0 * self.correct(model)?.iter().filter(|&&c| c).count() as f64 / self.len() as f64)
    }

    /// Per-example correctness of `model`'s predictions.
    pub fn correct<M: Classifier + ?Sized>(&self, model: &M) -> Result<Vec<bool>> {
        const CHUNK: usize = 1000;
        let mut out = Vec::with_capacity(self.len());
        for start in (0..self.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(self.len());
            let pred = model.predict(&self.images.slice_rows(start, end)?)?;
            out.extend(pred.iter().zip(&self.labels[start..end]).map(|(p, y)| p == y));
        }
        Ok(out)
    }
}

struct IdxReader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
}

impl<'a> IdxReader<'a> {
    fn open(path: &'a Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path, bytes })
    }

    fn u32_at(&self, offset: usize) -> Result<u32> {
        self.bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::format(self.path, offset as u64, "truncated header"))
    }

    /// Validates the magic number and returns the dimension extents.
    fn header(&self, magic: u32, ndims: usize) -> Result<Vec<usize>> {
        let found = self.u32_at(0)?;
        if found != magic {
            return Err(Error::format(
                self.path,
                0,
                format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
            ));
        }
        (0..ndims).map(|i| Ok(self.u32_at(4 + 4 * i)? as usize)).collect()
    }

    fn payload(&self, offset: usize, len: usize) -> Result<&[u8]> {
        if self.bytes.len() != offset + len {
            return Err(Error::format(
                self.path,
                self.bytes.len().min(offset + len) as u64,
                format!(
                    "payload holds {} bytes, header declares {len}",
                    self.bytes.len().saturating_sub(offset)
                ),
            ));
        }
        Ok(&self.bytes[offset..])
    }
}

/// Reads an IDX image file (`0x00000803`, dims `[n, rows, cols]`) and the
/// matching label file (`0x00000801`). Pixels are scaled by `1/255`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());

    let img = IdxReader::open(images_path)?;
    let dims = img.header(IDX_IMAGES_MAGIC, 3)?;
    let (n, d) = (dims[0], dims[1] * dims[2]);
    if n == 0 || d == 0 {
        return Err(Error::format(images_path, 4, "empty image file"));
    }
    let pixels = img.payload(16, n * d)?;

    let lab = IdxReader::open(labels_path)?;
    let count = lab.header(IDX_LABELS_MAGIC, 1)?[0];
    if count != n {
        return Err(Error::format(
            labels_path,
            4,
            format!("{count} labels for {n} images"),
        ));
    }
    let raw_labels = lab.payload(8, count)?;

    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1).max(2);
    let images = Tensor::matrix(n, d, pixels.iter().map(|&p| f64::from(p) / 255.0).collect())?;
    Dataset::new(
        images,
        labels,
        num_classes,
        split,
        images_path.display().to_string(),
    )
}

/// Canonical MNIST file names inside `dir`.
pub fn mnist_paths(dir: impl AsRef<Path>, split: Split) -> (PathBuf, PathBuf) {
    let dir = dir.as_ref();
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (images, labels) = mnist_paths(dir, split);
    load_idx(images, labels, split)
}

/// Per-coordinate standard deviation of each blob.
pub const BLOB_SIGMA: f64 = 0.05;

/// Isotropic Gaussian blobs with centers at least `separation * BLOB_SIGMA`
/// apart, clamped to `[0, 1]`. Examples are interleaved by class.
pub fn gen_blobs(classes: usize, n_per_class: usize, d: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || n_per_class == 0 || d == 0 {
        return Err(Error::usage("blobs need >= 2 classes, >= 1 point each, d >= 1"));
    }
    if !(separation > 0.0) {
        return Err(Error::usage(format!("separation must be > 0, got {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_dist = separation * BLOB_SIGMA;
    let (lo, hi) = (3.0 * BLOB_SIGMA, 1.0 - 3.0 * BLOB_SIGMA);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0;
    while centers.len() < classes {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::usage(format!(
                "cannot place {classes} centers {min_dist} apart in {d} dimensions"
            )));
        }
        let c: Vec<f64> = (0..d).map(|_| rng.random_range(lo..hi)).collect();
        let far = centers.iter().all(|o| {
            o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= min_dist
        });
        if far {
            centers.push(c);
        }
    }
    let n = classes * n_per_class;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n_per_class {
        for (label, c) in centers.iter().enumerate() {
            data.extend(c.iter().map(|&m| {
                (m + BLOB_SIGMA * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0)
            }));
            labels.push(label);
        }
    }
    Dataset::new(
        Tensor::matrix(n, d, data)?,
        labels,
        classes,
        Split::Train,
        format!("blobs(classes={classes}, n={n_per_class}, d={d}, sep={separation}, seed={seed})"),
    )
}
