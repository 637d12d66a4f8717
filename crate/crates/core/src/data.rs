//! Dataset ingestion: IDX, CIFAR-10 binary batches, CSV, and a synthetic
//! Gaussian-blob generator for desk-scale runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{DatasetConfig, InputShape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images normalized to `[0, 1]`, stored flat in `C x H x W` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    split: Split,
    shape: InputShape,
    classes: usize,
    images: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(split: Split, shape: InputShape, classes: usize, images: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let per = shape.channels * shape.height * shape.width;
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::format(format!(
                "{} pixel values do not form {} images of {}x{}x{}",
                images.len(),
                labels.len(),
                shape.channels,
                shape.height,
                shape.width
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::format(format!("label {bad} out of range for {classes} classes")));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("non-finite pixel value"));
        }
        Ok(Dataset {
            split,
            shape,
            classes,
            images,
            labels,
        })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn shape(&self) -> InputShape {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn image_len(&self) -> usize {
        self.shape.channels * self.shape.height * self.shape.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let per = self.image_len();
        &self.images[i * per..(i + 1) * per]
    }

    /// Stacks the examples at `indices` into an `[N, C, H, W]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("example {i} out of range for {} examples", self.len())));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let s = self.shape;
        Ok((Tensor::new(vec![indices.len(), s.channels, s.height, s.width], data)?, labels))
    }

    /// Keeps the first `n` examples.
    pub fn limit(mut self, n: usize) -> Self {
        let n = n.min(self.len());
        self.images.truncate(n * self.image_len());
        self.labels.truncate(n);
        self
    }

    /// `label,pixel0,pixel1,...` rows, one per example.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.len() {
            let _ = write!(out, "{}", self.labels[i]);
            for v in self.image(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(format!("{}: truncated IDX header", path.display())))
}

/// Parses an IDX image file (magic `0x00000803`) into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != 0x0000_0803 {
        return Err(Error::format(format!(
            "{}: bad IDX image magic {magic:#010x}, expected 0x00000803",
            path.display()
        )));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() < need {
        return Err(Error::format(format!(
            "{}: truncated IDX image data ({} of {need} bytes)",
            path.display(),
            body.len()
        )));
    }
    Ok((n, rows, cols, body[..need].iter().map(|&b| f64::from(b) / 255.0).collect()))
}

/// Parses an IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != 0x0000_0801 {
        return Err(Error::format(format!(
            "{}: bad IDX label magic {magic:#010x}, expected 0x00000801",
            path.display()
        )));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::format(format!("{}: truncated IDX label data", path.display())));
    }
    Ok(body[..n].iter().map(|&b| usize::from(b)).collect())
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses CIFAR-10 binary records: one label byte then 3072 channel-major pixels.
pub fn parse_cifar(bytes: &[u8], path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(format!(
            "{}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for rec in bytes.chunks(CIFAR_RECORD) {
        labels.push(usize::from(rec[0]));
        images.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok((images, labels))
}

/// Parses `label,pixel...` rows. A non-numeric first line is taken as a header.
pub fn parse_csv(text: &str, pixels: usize, path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let first = fields.next().unwrap_or_default().trim();
        let label = match first.parse::<usize>() {
            Ok(l) => l,
            Err(_) if lineno == 0 => continue,
            Err(_) => {
                return Err(Error::format(format!("{}:{}: bad label `{first}`", path.display(), lineno + 1)));
            }
        };
        let start = images.len();
        for f in fields {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::format(format!("{}:{}: bad pixel `{f}`", path.display(), lineno + 1)))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::format(format!(
                    "{}:{}: pixel {v} outside [0, 1]",
                    path.display(),
                    lineno + 1
                )));
            }
            images.push(v);
        }
        if images.len() - start != pixels {
            return Err(Error::format(format!(
                "{}:{}: expected {pixels} pixels, found {}",
                path.display(),
                lineno + 1,
                images.len() - start
            )));
        }
        labels.push(label);
    }
    Ok((images, labels))
}

/// Per-class prototype images made of a few random low-frequency waves.
fn prototypes(shape: InputShape, classes: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let (c, h, w) = (shape.channels, shape.height, shape.width);
    (0..classes)
        .map(|_| {
            let waves: Vec<[f64; 5]> = (0..c * 3)
                .map(|_| {
                    [
                        rng.random_range(0.5..2.5),
                        rng.random_range(0.5..2.5),
                        rng.random_range(0.0..std::f64::consts::TAU),
                        rng.random_range(0.0..std::f64::consts::TAU),
                        rng.random_range(0.5..1.0),
                    ]
                })
                .collect();
            let mut img = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let (u, v) = (y as f64 / h as f64, x as f64 / w as f64);
                        let s: f64 = waves[ch * 3..ch * 3 + 3]
                            .iter()
                            .map(|[fy, fx, py, px, a]| a * (std::f64::consts::TAU * fy * u + py).sin() * (std::f64::consts::TAU * fx * v + px).cos())
                            .sum();
                        img[(ch * h + y) * w + x] = (0.5 + s / 6.0).clamp(0.0, 1.0);
                    }
                }
            }
            img
        })
        .collect()
}

/// Gaussian blobs around per-class prototypes, clamped to `[0, 1]`.
/// Labels cycle through the classes so every split is balanced.
pub fn synthetic(
    shape: InputShape,
    classes: usize,
    train: usize,
    test: usize,
    noise: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    let normal = Normal::new(0.0, noise).map_err(|e| Error::invalid(format!("noise {noise}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = prototypes(shape, classes, &mut rng);
    let make = |split: Split, n: usize, rng: &mut ChaCha8Rng| -> Result<Dataset> {
        let mut images = Vec::with_capacity(n * protos[0].len());
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        for &l in &labels {
            images.extend(protos[l].iter().map(|&p| (p + normal.sample(rng)).clamp(0.0, 1.0)));
        }
        Dataset::new(split, shape, classes, images, labels)
    };
    let tr = make(Split::Train, train, &mut rng)?;
    let te = make(Split::Test, test, &mut rng)?;
    Ok((tr, te))
}

fn check_dims(path: &Path, got: (usize, usize, usize), want: InputShape) -> Result<()> {
    if got != (want.channels, want.height, want.width) {
        return Err(Error::format(format!(
            "{}: images are {}x{}x{} but the network expects {}x{}x{}",
            path.display(),
            got.0,
            got.1,
            got.2,
            want.channels,
            want.height,
            want.width
        )));
    }
    Ok(())
}

fn load_idx(images: &Path, labels: &Path, split: Split, shape: InputShape, classes: usize) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read(images)?, images)?;
    check_dims(images, (1, rows, cols), shape)?;
    let labels_v = parse_idx_labels(&read(labels)?, labels)?;
    if labels_v.len() != n {
        return Err(Error::format(format!(
            "{} has {n} images but {} has {} labels",
            images.display(),
            labels.display(),
            labels_v.len()
        )));
    }
    Dataset::new(split, shape, classes, pixels, labels_v)
}

fn load_cifar(files: &[PathBuf], split: Split, shape: InputShape, classes: usize) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        check_dims(f, (3, 32, 32), shape)?;
        let (i, l) = parse_cifar(&read(f)?, f)?;
        images.extend(i);
        labels.extend(l);
    }
    Dataset::new(split, shape, classes, images, labels)
}

fn load_csv(path: &Path, split: Split, shape: InputShape, classes: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let (images, labels) = parse_csv(&text, shape.channels * shape.height * shape.width, path)?;
    Dataset::new(split, shape, classes, images, labels)
}

/// Loads the train and test splits described by `source`. Relative paths
/// resolve against `base_dir`; `limit` keeps the first `N` of each split.
pub fn load_dataset(
    source: &DatasetConfig,
    shape: InputShape,
    classes: usize,
    base_dir: Option<&Path>,
    limit: Option<usize>,
) -> Result<(Dataset, Dataset)> {
    let p = |rel: &str| match base_dir {
        Some(d) => d.join(rel),
        None => PathBuf::from(rel),
    };
    let (train, test) = match source {
        DatasetConfig::Synthetic {
            train,
            test,
            noise,
            seed,
        } => synthetic(shape, classes, *train, *test, *noise, *seed)?,
        DatasetConfig::Csv { train, test } => (
            load_csv(&p(train), Split::Train, shape, classes)?,
            load_csv(&p(test), Split::Test, shape, classes)?,
        ),
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (
            load_idx(&p(train_images), &p(train_labels), Split::Train, shape, classes)?,
            load_idx(&p(test_images), &p(test_labels), Split::Test, shape, classes)?,
        ),
        DatasetConfig::Cifar { train, test } => (
            load_cifar(&train.iter().map(|f| p(f)).collect::<Vec<_>>(), Split::Train, shape, classes)?,
            load_cifar(&test.iter().map(|f| p(f)).collect::<Vec<_>>(), Split::Test, shape, classes)?,
        ),
    };
    Ok(match limit {
        Some(n) => (train.limit(n), test.limit(n)),
        None => (train, test),
    })
}
