//! Datasets: MNIST IDX files and seeded Gaussian blobs.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled samples stored row-major, one `sample_shape` block per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    data: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(sample_shape: Vec<usize>, data: Vec<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if sample_shape.is_empty() || per == 0 {
            return Err(Error::shape(format!("bad sample shape {sample_shape:?}")));
        }
        if data.len() != per * labels.len() {
            return Err(Error::shape(format!(
                "{} values for {} samples of {per}",
                data.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {l} outside {classes} classes")));
        }
        Ok(Self {
            sample_shape,
            data,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_size(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_size();
        &self.data[i * n..(i + 1) * n]
    }

    /// Gathers `indices` into a `(B, sample_shape...)` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(DenseTensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::ZeroMode(vec![0]));
        }
        let mut data = Vec::with_capacity(indices.len() * self.sample_size());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample {i} of {}", self.len())));
            }
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Ok((DenseTensor::new(shape, data)?, labels))
    }

    /// First `n` samples (all of them if fewer).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            sample_shape: self.sample_shape.clone(),
            data: self.data[..n * self.sample_size()].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("truncated header: {} bytes", bytes.len())))
}

fn idx_payload(bytes: &[u8], magic: u32, dims: usize) -> Result<(Vec<usize>, &[u8])> {
    let actual = be_u32(bytes, 0)?;
    if actual != magic {
        return Err(Error::BadMagic {
            expected: magic,
            actual,
        });
    }
    let header = 4 + 4 * dims;
    let shape = (0..dims)
        .map(|k| be_u32(bytes, 4 + 4 * k).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let want = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let body = &bytes[header..];
    if body.len() < want {
        return Err(Error::Format(format!(
            "truncated payload: {} of {want} bytes",
            body.len()
        )));
    }
    if body.len() > want {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - want)));
    }
    Ok((shape, body))
}

/// Parsed IDX image file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let (shape, body) = idx_payload(bytes, IDX_IMAGES_MAGIC, 3)?;
    Ok(IdxImages {
        count: shape[0],
        rows: shape[1],
        cols: shape[2],
        pixels: body.to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    Ok(idx_payload(bytes, IDX_LABELS_MAGIC, 1)?.1.to_vec())
}

/// Combines an image and a label file; pixels are scaled to `[0, 1]`.
pub fn mnist_from_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let img = parse_idx_images(images)?;
    let lab = parse_idx_labels(labels)?;
    if img.count != lab.len() {
        return Err(Error::Format(format!("{} images but {} labels", img.count, lab.len())));
    }
    if img.rows == 0 || img.cols == 0 {
        return Err(Error::Format(format!("image size {}x{}", img.rows, img.cols)));
    }
    let data = img.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels = lab.iter().map(|&l| usize::from(l)).collect();
    Dataset::new(vec![img.rows, img.cols, 1], data, labels, 10)
}

/// Reads `{train,t10k}-{images-idx3,labels-idx1}-ubyte` from `dir`.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let read = |name: &str| -> Result<Vec<u8>> {
        std::fs::read(dir.join(name)).map_err(|e| Error::Format(format!("{}: {e}", dir.join(name).display())))
    };
    let train = mnist_from_idx(&read("train-images-idx3-ubyte")?, &read("train-labels-idx1-ubyte")?)?;
    let test = mnist_from_idx(&read("t10k-images-idx3-ubyte")?, &read("t10k-labels-idx1-ubyte")?)?;
    Ok((train, test))
}

/// Serialises images in IDX format; used for fixtures.
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Unit-variance Gaussian clusters. Class `k` is centred on
/// `separation / sqrt(2) * e_k`, so every pair of means is exactly
/// `separation` apart. Samples cycle through the classes.
pub fn synthetic_blobs(
    classes: usize,
    per_class: usize,
    sample_shape: &[usize],
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    let dim: usize = sample_shape.iter().product();
    if classes == 0 || classes > dim {
        return Err(Error::invalid(format!("{classes} classes need 1..={dim} features")));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::invalid(format!("separation {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = separation / std::f64::consts::SQRT_2;
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(z + if j == k { offset } else { 0.0 });
        }
        labels.push(k);
    }
    Dataset::new(sample_shape.to_vec(), data, labels, classes)
}
