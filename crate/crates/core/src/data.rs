//! Datasets, IDX ingestion and client partitioning.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{Batch, InputShape};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Samples stored row-major as `f32` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Vec<f32>,
    labels: Vec<usize>,
    shape: InputShape,
    classes: usize,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f32>,
        labels: Vec<usize>,
        shape: InputShape,
        classes: usize,
    ) -> Result<Self> {
        if inputs.len() != labels.len() * shape.len() {
            return Err(Error::CountMismatch {
                images: inputs.len() / shape.len().max(1),
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            inputs,
            labels,
            shape,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> InputShape {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.shape.len();
        &self.inputs[i * n..(i + 1) * n]
    }

    /// Reinterprets the feature layout, e.g. 64 flat features as 8x8.
    pub fn with_shape(mut self, shape: InputShape) -> Result<Self> {
        if shape.len() != self.shape.len() {
            return Err(Error::DimensionMismatch {
                expected: self.shape.len(),
                actual: shape.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let n = self.shape.len();
        let mut inputs = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Batch {
            inputs,
            labels,
            input_len: n,
        }
    }

    /// Indices of each class, in ascending order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl IdxReader<'_> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let b = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Truncated {
                path: self.path.to_path_buf(),
                context: format!("missing {what}"),
            })?;
        self.pos = end;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32("magic number")?;
        if found != expected {
            return Err(Error::BadMagic {
                path: self.path.to_path_buf(),
                found,
                expected,
            });
        }
        Ok(())
    }

    fn payload(&mut self, len: usize) -> Result<&[u8]> {
        let available = self.bytes.len() - self.pos;
        if available < len {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                context: format!("expected {len} payload bytes, found {available}"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }
}

/// Reads an IDX image/label file pair (optionally gzip-compressed).
/// Pixels are scaled to `[0, 1]` by dividing by 255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());

    let bytes = read_maybe_gz(images_path)?;
    let mut r = IdxReader {
        bytes: &bytes,
        pos: 0,
        path: images_path,
    };
    r.magic(IDX_IMAGES_MAGIC)?;
    let n = r.u32("image count")? as usize;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    let inputs: Vec<f32> = r
        .payload(n * rows * cols)?
        .iter()
        .map(|&p| p as f32 / 255.0)
        .collect();

    let bytes = read_maybe_gz(labels_path)?;
    let mut r = IdxReader {
        bytes: &bytes,
        pos: 0,
        path: labels_path,
    };
    r.magic(IDX_LABELS_MAGIC)?;
    let n_labels = r.u32("label count")? as usize;
    let labels: Vec<usize> = r.payload(n_labels)?.iter().map(|&y| y as usize).collect();

    if n != n_labels {
        return Err(Error::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(inputs, labels, InputShape::image(rows, cols), classes)
}

/// Class centers are drawn from `U(0.25, 0.75)^dim`; each sample is its
/// class center plus `spread * N(0, I)`, clipped to `[0, 1]`. Samples are
/// ordered class by class.
pub fn synthetic_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    let centers = blob_centers(classes, dim, seed)?;
    blob_samples(&centers, per_class, spread, seed)
}

/// Train and test sets that share class centers but use independent noise.
pub fn synthetic_blobs_split(
    classes: usize,
    per_class_train: usize,
    per_class_test: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let centers = blob_centers(classes, dim, seed)?;
    let train = blob_samples(&centers, per_class_train, spread, seed)?;
    let test = blob_samples(
        &centers,
        per_class_test,
        spread,
        seed ^ 0x5eed_7e57_0000_0001,
    )?;
    Ok((train, test))
}

fn blob_centers(classes: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if classes < 2 || dim == 0 {
        return Err(Error::invalid(
            "blobs need at least 2 classes and 1 dimension",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..classes)
        .map(|_| (0..dim).map(|_| rng.random_range(0.25..0.75)).collect())
        .collect())
}

fn blob_samples(centers: &[Vec<f64>], per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if spread < 0.0 || !spread.is_finite() {
        return Err(Error::invalid(format!("spread must be >= 0, got {spread}")));
    }
    let dim = centers[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut inputs = Vec::with_capacity(centers.len() * per_class * dim);
    let mut labels = Vec::with_capacity(centers.len() * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &mu in center {
                let noise: f64 = rng.sample(StandardNormal);
                inputs.push((mu + spread * noise).clamp(0.0, 1.0) as f32);
            }
            labels.push(c);
        }
    }
    Dataset::new(inputs, labels, InputShape::flat(dim), centers.len())
}

/// Disjoint per-client index lists into a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn client(&self, i: usize) -> &[usize] {
        &self.assignments[i]
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }
}

fn check_clients(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if n < k {
        return Err(Error::invalid(format!(
            "{n} samples cannot cover {k} clients"
        )));
    }
    Ok(())
}

/// Shuffles each class and deals its samples round-robin; the dealer
/// position carries over between classes.
pub fn partition_iid(ds: &Dataset, k: usize, seed: u64) -> Result<Partition> {
    check_clients(ds.len(), k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![Vec::new(); k];
    let mut next = 0;
    for mut idx in ds.class_indices() {
        idx.shuffle(&mut rng);
        for i in idx {
            assignments[next].push(i);
            next = (next + 1) % k;
        }
    }
    Ok(Partition { assignments })
}

/// Per class, draws client proportions from `Dir(alpha)` and splits the
/// shuffled class by largest-remainder apportionment. Clients left empty
/// then take one sample from the currently largest client.
pub fn partition_dirichlet(ds: &Dataset, k: usize, alpha: f64, seed: u64) -> Result<Partition> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!(
            "Dirichlet alpha must be > 0, got {alpha}"
        )));
    }
    check_clients(ds.len(), k)?;
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![Vec::new(); k];

    for mut idx in ds.class_indices() {
        idx.shuffle(&mut rng);
        let mut p: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = p.iter().sum();
        if total > 0.0 && total.is_finite() {
            p.iter_mut().for_each(|x| *x /= total);
        } else {
            p.iter_mut().for_each(|x| *x = 1.0 / k as f64);
        }
        let counts = largest_remainder(&p, idx.len());
        let mut start = 0;
        for (client, &count) in counts.iter().enumerate() {
            assignments[client].extend_from_slice(&idx[start..start + count]);
            start += count;
        }
    }

    for client in 0..k {
        if !assignments[client].is_empty() {
            continue;
        }
        let donor = (0..k)
            .max_by(|&a, &b| {
                assignments[a]
                    .len()
                    .cmp(&assignments[b].len())
                    .then(b.cmp(&a))
            })
            .expect("k > 0");
        let moved = assignments[donor]
            .pop()
            .expect("n >= k leaves a donor with >= 2");
        assignments[client].push(moved);
    }
    Ok(Partition { assignments })
}

/// Integer apportionment of `total` by `weights` (summing to 1): floors
/// first, then the largest fractional remainders, ties to lower index.
pub(crate) fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Label-flip attack transform: `y -> (C - 1) - y`.
pub fn flip_label(y: usize, classes: usize) -> Result<usize> {
    if y >= classes {
        return Err(Error::LabelOutOfRange { label: y, classes });
    }
    Ok(classes - 1 - y)
}
