//! Datasets: MNIST IDX ingestion, a synthetic Gaussian-mixture generator and
//! the label-sorted shard partition used to build non-i.i.d. clients.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

/// Row-major `n x f` feature matrix with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f32>,
    labels: Vec<u8>,
    num_features: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f32>,
        labels: Vec<u8>,
        num_features: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::arg("dataset must contain at least one sample"));
        }
        if num_features == 0 || features.len() != labels.len() * num_features {
            return Err(Error::Consistency(format!(
                "{} feature values do not form {} rows of width {}",
                features.len(),
                labels.len(),
                num_features
            )));
        }
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::arg(format!("unsupported class count {num_classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Consistency(format!(
                "label {bad} is not below the class count {num_classes}"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Consistency("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            num_features,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Copies the listed rows into a new dataset, preserving order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.num_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::arg(format!("index {i} out of range")));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(features, labels, self.num_features, self.num_classes)
    }
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let file = BufReader::new(File::open(path)?);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(file)))
    } else {
        Ok(Box::new(file))
    }
}

fn read_u32_be(r: &mut dyn Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

fn read_idx(path: &Path, expected_magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut r = open_maybe_gz(path)?;
    let magic = read_u32_be(&mut r)?;
    if magic != expected_magic {
        return Err(Error::Format(format!(
            "{}: magic number {magic}, expected {expected_magic}",
            path.display()
        )));
    }
    let ndims = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        dims.push(read_u32_be(&mut r)? as usize);
    }
    let total: usize = dims.iter().product();
    let mut bytes = vec![0u8; total];
    r.read_exact(&mut bytes)?;
    Ok((dims, bytes))
}

/// Reads an IDX image file and its label file. Files ending in `.gz` are
/// decompressed on the fly.
pub fn load_mnist_idx(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let (img_dims, pixels) = read_idx(image_path, IDX_IMAGES_MAGIC)?;
    let (lbl_dims, labels) = read_idx(label_path, IDX_LABELS_MAGIC)?;
    if img_dims[0] != lbl_dims[0] {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            img_dims[0], lbl_dims[0]
        )));
    }
    let width = img_dims[1] * img_dims[2];
    let features = pixels.into_iter().map(|p| p as f32 / 255.0).collect();
    Dataset::new(features, labels, width, 10)
}

/// Locates the canonical file names (plain or gzipped) inside `dir`.
pub fn load_mnist_dir(dir: &Path, split: MnistSplit) -> Result<Dataset> {
    let stem = match split {
        MnistSplit::Train => "train",
        MnistSplit::Test => "t10k",
    };
    let find = |kind: &str| -> Result<std::path::PathBuf> {
        for name in [
            format!("{stem}-{kind}-ubyte"),
            format!("{stem}-{kind}-ubyte.gz"),
            format!("{stem}-{kind}.idx-ubyte"),
        ] {
            let p = dir.join(&name);
            if p.exists() {
                return Ok(p);
            }
        }
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no {stem}-{kind}-ubyte[.gz] in {}", dir.display()),
        )))
    };
    load_mnist_idx(&find("images-idx3")?, &find("labels-idx1")?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

/// Gaussian mixture with `classes` unit-variance clusters.
///
/// Centers are standard normal draws rescaled so the closest pair is exactly
/// `separation` apart. Labels cycle through the classes so every class gets
/// `n / classes` or one more samples. The whole sample is then mapped into
/// `[0, 1]` by one scalar affine transform, which keeps the geometry (and
/// hence linear separability) intact.
pub fn synthetic_logreg(
    d: usize,
    n: usize,
    classes: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if d == 0 {
        return Err(Error::arg("feature dimension must be at least 1"));
    }
    if classes == 0 || n < classes {
        return Err(Error::arg(format!(
            "need at least one sample per class (n = {n}, C = {classes})"
        )));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(Error::arg("separation must be finite and non-negative"));
    }
    let mut rng = rng::substream(seed, rng::NO_ROUND, rng::SERVER, Purpose::Synthetic);
    let mut centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..d).map(|_| rng::standard_normal(&mut rng)).collect())
        .collect();
    let mut closest = f64::INFINITY;
    for a in 0..classes {
        for b in a + 1..classes {
            let dist = centers[a]
                .iter()
                .zip(&centers[b])
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            closest = closest.min(dist);
        }
    }
    let scale = if closest.is_finite() && closest > 0.0 {
        separation / closest
    } else {
        0.0
    };
    for c in &mut centers {
        c.iter_mut().for_each(|v| *v *= scale);
    }

    let mut raw = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c as u8);
        for &mu in &centers[c][..d] {
            raw.push(mu + rng::standard_normal(&mut rng));
        }
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let features = raw.iter().map(|v| ((v - lo) / span) as f32).collect();
    Dataset::new(features, labels, d, classes)
}

/// Client index lists into a shared dataset plus aggregation weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientPartition {
    pub shards: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
}

impl ClientPartition {
    /// Builds weights `|D_i| / sum_j |D_j|` from arbitrary index lists.
    pub fn from_shards(shards: Vec<Vec<usize>>) -> Result<Self> {
        let total: usize = shards.iter().map(Vec::len).sum();
        if shards.is_empty() || total == 0 {
            return Err(Error::arg("partition must hold at least one sample"));
        }
        let weights = shards
            .iter()
            .map(|s| s.len() as f64 / total as f64)
            .collect();
        Ok(Self { shards, weights })
    }

    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }
}

/// Label-sorted shard partition.
///
/// Each label's samples (in original index order) are cut into `m * p / C`
/// equal shards, all labels sharing one shard size; leftovers are dropped.
/// Shards are listed label-major and shard `k` goes to client `k mod m`, so
/// client `i` receives `p` shards whose labels are pairwise distinct.
pub fn partition_noniid(data: &Dataset, m: usize, p: usize) -> Result<ClientPartition> {
    let classes = data.num_classes();
    if m == 0 {
        return Err(Error::arg("need at least one client"));
    }
    if p == 0 || p > classes {
        return Err(Error::arg(format!(
            "labels per client p = {p} must lie in [1, {classes}]"
        )));
    }
    if !(m * p).is_multiple_of(classes) {
        return Err(Error::arg(format!(
            "m * p = {} is not divisible by the class count {classes}",
            m * p
        )));
    }
    let shards_per_label = m * p / classes;
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for i in 0..data.len() {
        by_label[data.label(i)].push(i);
    }
    let shard_size = by_label
        .iter()
        .map(|idx| idx.len() / shards_per_label)
        .min()
        .unwrap_or(0);
    if shard_size == 0 {
        return Err(Error::arg(format!(
            "some label has fewer than {shards_per_label} samples, shards would be empty"
        )));
    }
    let mut shards = vec![Vec::with_capacity(p * shard_size); m];
    for (label, idx) in by_label.iter().enumerate() {
        for s in 0..shards_per_label {
            let k = label * shards_per_label + s;
            shards[k % m].extend_from_slice(&idx[s * shard_size..(s + 1) * shard_size]);
        }
    }
    ClientPartition::from_shards(shards)
}
