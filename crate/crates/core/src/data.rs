//! Datasets, mini-batches, training schedules, and the split/group plans
//! used by the forging algorithms.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::rng::{self, Domain};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const CONTAINER_MAGIC: &[u8; 4] = b"RPDS";
const CONTAINER_VERSION: u32 = 1;

/// Height x width x channels, stored row-major with channels innermost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An immutable labelled dataset with dense `f64` feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<u16>,
    dim: usize,
    classes: usize,
    image: Option<ImageShape>,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<u16>,
        dim: usize,
        classes: usize,
        image: Option<ImageShape>,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("dataset has no samples".into()));
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * dim,
                actual: features.len(),
            });
        }
        if classes < 2 {
            return Err(Error::InvalidConfig("datasets need at least two classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| usize::from(y) >= classes) {
            return Err(Error::InvalidConfig(format!("label {bad} outside [0, {classes})")));
        }
        if let Some(shape) = image {
            if shape.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: shape.len() });
            }
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Self { features, labels, dim, classes, image })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image_shape(&self) -> Option<ImageShape> {
        self.image
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        usize::from(self.labels[i])
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn check_index(&self, i: usize) -> Result<()> {
        if i < self.len() {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange { index: i, n: self.len() })
        }
    }

    /// Copies the selected rows, in the given order, into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            self.check_index(i)?;
            features.extend_from_slice(self.features(i));
            labels.push(self.labels[i]);
        }
        Self::new(features, labels, self.dim, self.classes, self.image)
    }

    /// Returns a copy with one extra sample appended at index `len()`.
    pub fn with_appended(&self, features: &[f64], label: usize) -> Result<Self> {
        if features.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: features.len() });
        }
        let mut out = self.clone();
        out.features.extend_from_slice(features);
        out.labels.push(label as u16);
        Self::new(out.features, out.labels, self.dim, self.classes, self.image)
    }

    /// Features of sample `i` with the horizontal flip applied when `flip` is set.
    pub fn sample_features(&self, i: usize, flip: bool) -> Result<std::borrow::Cow<'_, [f64]>> {
        self.check_index(i)?;
        let row = self.features(i);
        if !flip {
            return Ok(std::borrow::Cow::Borrowed(row));
        }
        let shape = self.image.ok_or(Error::FlipOnNonImage)?;
        let mut out = row.to_vec();
        flip_image_in_place(&mut out, shape);
        Ok(std::borrow::Cow::Owned(out))
    }
}

fn flip_image_in_place(pixels: &mut [f64], shape: ImageShape) {
    let (w, c) = (shape.width, shape.channels);
    for row in pixels.chunks_exact_mut(w * c) {
        for x in 0..w / 2 {
            for ch in 0..c {
                row.swap(x * c + ch, (w - 1 - x) * c + ch);
            }
        }
    }
}

/// Reverses each flagged image along its width axis.
///
/// `features` holds one image per flag, concatenated.
pub fn apply_flip(features: &[f64], shape: Option<ImageShape>, flags: &[bool]) -> Result<Vec<f64>> {
    let mut out = features.to_vec();
    if !flags.iter().any(|&f| f) {
        return Ok(out);
    }
    let shape = shape.ok_or(Error::FlipOnNonImage)?;
    if features.len() != flags.len() * shape.len() {
        return Err(Error::DimensionMismatch {
            expected: flags.len() * shape.len(),
            actual: features.len(),
        });
    }
    for (img, _) in out.chunks_exact_mut(shape.len()).zip(flags).filter(|(_, &f)| f) {
        flip_image_in_place(img, shape);
    }
    Ok(out)
}

/// Sample indices plus per-sample horizontal-flip flags.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MiniBatchSpec {
    pub indices: Vec<usize>,
    #[serde(with = "bits")]
    pub flips: Vec<bool>,
}

impl MiniBatchSpec {
    pub fn new(indices: Vec<usize>, flips: Vec<bool>) -> Result<Self> {
        let batch = Self { indices, flips };
        batch.check_shape()?;
        Ok(batch)
    }

    pub fn unflipped(indices: Vec<usize>) -> Self {
        let flips = vec![false; indices.len()];
        Self { indices, flips }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.contains(&index)
    }

    fn check_shape(&self) -> Result<()> {
        if self.indices.is_empty() {
            return Err(Error::InvalidBatch("empty batch".into()));
        }
        if self.indices.len() != self.flips.len() {
            return Err(Error::InvalidBatch(format!(
                "{} indices but {} flip flags",
                self.indices.len(),
                self.flips.len()
            )));
        }
        let mut sorted = self.indices.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidBatch("duplicate index within a batch".into()));
        }
        Ok(())
    }

    /// Checks the batch invariants against a dataset of `n` samples.
    pub fn validate(&self, n: usize) -> Result<()> {
        self.check_shape()?;
        match self.indices.iter().find(|&&i| i >= n) {
            Some(&index) => Err(Error::IndexOutOfRange { index, n }),
            None => Ok(()),
        }
    }
}

/// Serializes flip flags as a list of 0/1 integers.
mod bits {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(flags: &[bool], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(flags.iter().map(|&f| u8::from(f)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let raw = Vec::<u8>::deserialize(d)?;
        raw.into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!("flip bit must be 0 or 1, got {other}"))),
            })
            .collect()
    }
}

/// The ordered mini-batches of an honest training run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSchedule {
    pub batches: Vec<MiniBatchSpec>,
    pub seed: u64,
}

/// Per-epoch seeded permutations of `[0, n)` chunked into batches of `b`.
///
/// A trailing remainder of `n mod b` samples is dropped in every epoch.
/// Flip flags are Bernoulli(0.5) per batch occurrence when `augment` is set.
pub fn make_schedule(n: usize, b: usize, epochs: usize, seed: u64, augment: bool) -> Result<BatchSchedule> {
    if b == 0 || b > n {
        return Err(Error::InvalidConfig(format!("batch size {b} invalid for n = {n}")));
    }
    let per_epoch = n / b;
    let mut batches = Vec::with_capacity(per_epoch * epochs);
    for epoch in 0..epochs {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng::stream(seed, Domain::Schedule, epoch as u64));
        let mut flip_rng = rng::stream(seed, Domain::Flips, epoch as u64);
        for chunk in perm.chunks_exact(b) {
            let flips = if augment {
                (0..b).map(|_| flip_rng.random_bool(0.5)).collect()
            } else {
                vec![false; b]
            };
            batches.push(MiniBatchSpec { indices: chunk.to_vec(), flips });
        }
    }
    Ok(BatchSchedule { batches, seed })
}

/// Static groups of size `group_size` re-assigned to `splits` equal splits at every step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    n: usize,
    group_size: usize,
    splits: usize,
    steps: u64,
    seed: u64,
    groups: Vec<Vec<usize>>,
    group_of: Vec<usize>,
}

/// The partition used at one step: `members[k]` lists the group ids of split `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepSplit {
    pub split_of_group: Vec<usize>,
    pub members: Vec<Vec<usize>>,
}

pub fn make_split_plan(n: usize, group_size: usize, splits: usize, steps: u64, seed: u64) -> Result<SplitPlan> {
    if group_size == 0 || splits == 0 {
        return Err(Error::InvalidConfig("group size and split count must be positive".into()));
    }
    if n % (group_size * splits) != 0 {
        return Err(Error::InvalidConfig(format!(
            "n = {n} is not divisible by group_size * splits = {}",
            group_size * splits
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    if group_size > 1 {
        perm.shuffle(&mut rng::stream(seed, Domain::Groups, 0));
    }
    let groups: Vec<Vec<usize>> = perm.chunks_exact(group_size).map(|g| {
        let mut g = g.to_vec();
        g.sort_unstable();
        g
    }).collect();
    let mut group_of = vec![0; n];
    for (gid, g) in groups.iter().enumerate() {
        for &i in g {
            group_of[i] = gid;
        }
    }
    Ok(SplitPlan { n, group_size, splits, steps, seed, groups, group_of })
}

impl SplitPlan {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn splits(&self) -> usize {
        self.splits
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group(&self, g: usize) -> &[usize] {
        &self.groups[g]
    }

    pub fn group_of(&self, sample: usize) -> usize {
        self.group_of[sample]
    }

    /// Split assignment at step `t` (1-based), drawn independently per step.
    pub fn step(&self, t: u64) -> StepSplit {
        let mut order: Vec<usize> = (0..self.groups.len()).collect();
        order.shuffle(&mut rng::stream(self.seed, Domain::Splits, t));
        let per_split = self.groups.len() / self.splits;
        let mut split_of_group = vec![0; self.groups.len()];
        let members: Vec<Vec<usize>> = order
            .chunks_exact(per_split)
            .enumerate()
            .map(|(k, chunk)| {
                let mut ids = chunk.to_vec();
                ids.sort_unstable();
                for &g in &ids {
                    split_of_group[g] = k;
                }
                ids
            })
            .collect();
        StepSplit { split_of_group, members }
    }

    /// Sample indices of split `k` for a step partition, sorted ascending.
    pub fn split_samples(&self, step: &StepSplit, k: usize) -> Vec<usize> {
        let mut out: Vec<usize> = step.members[k].iter().flat_map(|&g| self.groups[g].iter().copied()).collect();
        out.sort_unstable();
        out
    }
}

/// Balanced Gaussian blobs; class `k` is centred at `separation / sqrt(2) * e_k`
/// (pairwise centre distance equals `separation` when `classes <= d`).
pub fn synth_gaussian(n: usize, d: usize, classes: usize, seed: u64, separation: f64) -> Result<Dataset> {
    if n < classes || d == 0 || classes < 2 {
        return Err(Error::InvalidConfig(format!("cannot build {classes} blobs from n = {n}, d = {d}")));
    }
    let mut rng = rng::stream(seed, Domain::Synthetic, 0);
    let scale = separation / std::f64::consts::SQRT_2;
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|k| {
            if k < d {
                let mut c = vec![0.0; d];
                c[k] = scale;
                c
            } else {
                let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                dir.iter().map(|v| v / norm * scale).collect()
            }
        })
        .collect();
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        for &c in &centres[y] {
            let noise: f64 = rng.sample(StandardNormal);
            features.push(c + noise);
        }
        labels.push(y as u16);
    }
    Dataset::new(features, labels, d, classes, None)
}

/// Output of [`synth_subspace`].
#[derive(Debug, Clone)]
pub struct SubspaceDataset {
    pub dataset: Dataset,
    pub outlier: usize,
    pub basis: Vec<Vec<f64>>,
}

/// Binary dataset where every sample except index 0 lies in the span of the
/// first `d - 1` coordinates, and sample 0 has a nonzero final coordinate.
pub fn synth_subspace(n: usize, d: usize, seed: u64) -> Result<SubspaceDataset> {
    if d < 2 || n < 3 {
        return Err(Error::InvalidConfig(format!("subspace dataset needs d >= 2 and n >= 3 (got n = {n}, d = {d})")));
    }
    let mut rng = rng::stream(seed, Domain::Synthetic, 1);
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        for _ in 0..d - 1 {
            features.push(rng.sample::<f64, _>(StandardNormal));
        }
        if i == 0 {
            let magnitude = rng.random_range(0.5..2.0);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            features.push(sign * magnitude);
        } else {
            features.push(0.0);
        }
        labels.push(u16::from(rng.random_bool(0.5)));
    }
    let basis = (0..d - 1)
        .map(|k| {
            let mut e = vec![0.0; d];
            e[k] = 1.0;
            e
        })
        .collect();
    Ok(SubspaceDataset { dataset: Dataset::new(features, labels, d, 2, None)?, outlier: 0, basis })
}

/// Euclidean distance from `x` to the span of `basis`.
pub fn dist_to_subspace(x: &[f64], basis: &[Vec<f64>]) -> Result<f64> {
    let ortho = orthonormalize(basis, x.len())?;
    let mut residual = x.to_vec();
    for q in &ortho {
        let c: f64 = q.iter().zip(x).map(|(a, b)| a * b).sum();
        residual.iter_mut().zip(q).for_each(|(r, qi)| *r -= c * qi);
    }
    Ok(residual.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Squared norm of the orthogonal projection of `x` onto the span of `basis`.
pub fn projection_norm_sq(x: &[f64], basis: &[Vec<f64>]) -> Result<f64> {
    let ortho = orthonormalize(basis, x.len())?;
    Ok(ortho
        .iter()
        .map(|q| {
            let c: f64 = q.iter().zip(x).map(|(a, b)| a * b).sum();
            c * c
        })
        .sum())
}

fn orthonormalize(basis: &[Vec<f64>], dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(basis.len());
    for v in basis {
        if v.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: v.len() });
        }
        let scale = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let mut r = v.clone();
        // Two passes of modified Gram-Schmidt keep the basis orthogonal to working precision.
        for _ in 0..2 {
            for q in &out {
                let c: f64 = q.iter().zip(&r).map(|(a, b)| a * b).sum();
                r.iter_mut().zip(q).for_each(|(ri, qi)| *ri -= c * qi);
            }
        }
        let norm = r.iter().map(|a| a * a).sum::<f64>().sqrt();
        if scale == 0.0 || norm <= 1e-10 * scale {
            return Err(Error::DegenerateBasis);
        }
        r.iter_mut().for_each(|a| *a /= norm);
        out.push(r);
    }
    Ok(out)
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Option<u32> {
    bytes.get(offset..offset + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Loads an IDX image/label file pair, scaling pixels to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let images = fs::read(images_path).map_err(io_err(images_path))?;
    let labels = fs::read(labels_path).map_err(io_err(labels_path))?;
    let idx_err = |path: &Path, reason: String| Error::Idx { path: path.to_path_buf(), reason };

    let magic = read_be_u32(&images, 0).ok_or_else(|| idx_err(images_path, "truncated header".into()))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_err(images_path, format!("bad magic {magic:#010x}")));
    }
    let (n, rows, cols) = match (read_be_u32(&images, 4), read_be_u32(&images, 8), read_be_u32(&images, 12)) {
        (Some(n), Some(r), Some(c)) => (n as usize, r as usize, c as usize),
        _ => return Err(idx_err(images_path, "truncated header".into())),
    };
    let pixels = &images[16..];
    if pixels.len() != n * rows * cols {
        return Err(idx_err(images_path, format!("expected {} pixel bytes, found {}", n * rows * cols, pixels.len())));
    }

    let magic = read_be_u32(&labels, 0).ok_or_else(|| idx_err(labels_path, "truncated header".into()))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(idx_err(labels_path, format!("bad magic {magic:#010x}")));
    }
    let label_count = read_be_u32(&labels, 4).ok_or_else(|| idx_err(labels_path, "truncated header".into()))? as usize;
    let label_bytes = &labels[8..];
    if label_bytes.len() != label_count {
        return Err(idx_err(labels_path, format!("expected {label_count} labels, found {}", label_bytes.len())));
    }
    if label_count != n {
        return Err(idx_err(labels_path, format!("{label_count} labels for {n} images")));
    }
    let classes = label_bytes.iter().map(|&b| usize::from(b) + 1).max().unwrap_or(2).max(2);
    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels = label_bytes.iter().map(|&b| u16::from(b)).collect();
    let shape = ImageShape { height: rows, width: cols, channels: 1 };
    Dataset::new(features, labels, rows * cols, classes, Some(shape))
}

/// Writes an IDX image/label pair; pixels are rescaled by 255 and rounded.
pub fn write_idx(dataset: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let shape = dataset.image_shape().ok_or_else(|| Error::InvalidConfig("IDX export needs an image shape".into()))?;
    if shape.channels != 1 {
        return Err(Error::InvalidConfig("IDX export supports single-channel images only".into()));
    }
    let mut images = Vec::with_capacity(16 + dataset.len() * dataset.dim());
    for v in [IDX_IMAGES_MAGIC, dataset.len() as u32, shape.height as u32, shape.width as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    for i in 0..dataset.len() {
        images.extend(dataset.features(i).iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    let mut labels = Vec::with_capacity(8 + dataset.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    labels.extend(dataset.labels().iter().map(|&y| y as u8));
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    fs::write(images_path, images).map_err(io_err(images_path))?;
    fs::write(labels_path, labels).map_err(io_err(labels_path))
}

/// Writes the self-describing little-endian dataset container.
///
/// Layout: `b"RPDS"`, version u32, n u64, d u64, classes u32, seed u64,
/// image height/width/channels u32 (all zero when absent), then `n * d`
/// f64 features and `n` u16 labels.
pub fn write_container(dataset: &Dataset, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(64 + dataset.len() * (dataset.dim() * 8 + 2));
    buf.extend_from_slice(CONTAINER_MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(dataset.dim() as u64).to_le_bytes());
    buf.extend_from_slice(&(dataset.classes() as u32).to_le_bytes());
    buf.extend_from_slice(&seed.to_le_bytes());
    let shape = dataset.image_shape().map_or([0u32; 3], |s| [s.height as u32, s.width as u32, s.channels as u32]);
    for v in shape {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &dataset.features {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for y in &dataset.labels {
        buf.extend_from_slice(&y.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

/// Reads a container written by [`write_container`], returning the dataset and its seed.
pub fn read_container(path: impl AsRef<Path>) -> Result<(Dataset, u64)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
    let header_len = 4 + 4 + 8 + 8 + 4 + 8 + 12;
    if bytes.len() < header_len || &bytes[..4] != CONTAINER_MAGIC {
        return Err(Error::Container("bad magic or truncated header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != CONTAINER_VERSION {
        return Err(Error::Container(format!("unsupported version {version}")));
    }
    let n = u64_at(8) as usize;
    let d = u64_at(16) as usize;
    let classes = u32_at(24) as usize;
    let seed = u64_at(28);
    let (h, w, c) = (u32_at(36) as usize, u32_at(40) as usize, u32_at(44) as usize);
    let expected = header_len + n * d * 8 + n * 2;
    if bytes.len() != expected {
        return Err(Error::Container(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let body = &bytes[header_len..];
    let features = body[..n * d * 8].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    let labels = body[n * d * 8..].chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
    let image = (h * w * c > 0).then_some(ImageShape { height: h, width: w, channels: c });
    Ok((Dataset::new(features, labels, d, classes, image)?, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_images() -> Dataset {
        // Two 2x2 single-channel images.
        Dataset::new(
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
            vec![0, 1],
            4,
            2,
            Some(ImageShape { height: 2, width: 2, channels: 1 }),
        )
        .unwrap()
    }

    #[test]
    fn flip_swaps_columns() {
        let (a, b, c, d) = (1.0, 2.0, 3.0, 4.0);
        let shape = Some(ImageShape { height: 2, width: 2, channels: 1 });
        assert_eq!(apply_flip(&[a, b, c, d], shape, &[true]).unwrap(), vec![b, a, d, c]);
        assert_eq!(apply_flip(&[a, b, c, d], shape, &[false]).unwrap(), vec![a, b, c, d]);
    }

    #[test]
    fn flip_is_an_involution() {
        let ds = tiny_images();
        let flags = [true, false];
        let mut all = ds.features(0).to_vec();
        all.extend_from_slice(ds.features(1));
        let once = apply_flip(&all, ds.image_shape(), &flags).unwrap();
        let twice = apply_flip(&once, ds.image_shape(), &flags).unwrap();
        assert_eq!(twice, all);
        assert_ne!(once, all);
    }

    #[test]
    fn flip_multichannel_keeps_channel_order() {
        let shape = Some(ImageShape { height: 1, width: 2, channels: 2 });
        assert_eq!(apply_flip(&[1.0, 2.0, 3.0, 4.0], shape, &[true]).unwrap(), vec![3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn flip_on_plain_features_is_an_error() {
        assert!(matches!(apply_flip(&[1.0, 2.0], None, &[true]), Err(Error::FlipOnNonImage)));
        assert_eq!(apply_flip(&[1.0, 2.0], None, &[false]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn schedule_partitions_each_epoch() {
        let s = make_schedule(6, 2, 1, 9, false).unwrap();
        assert_eq!(s.batches.len(), 3);
        let mut all: Vec<usize> = s.batches.iter().flat_map(|b| b.indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(s, make_schedule(6, 2, 1, 9, false).unwrap());
    }

    #[test]
    fn schedule_counts_over_epochs_and_drops_remainder() {
        let s = make_schedule(7, 3, 5, 1, true).unwrap();
        assert_eq!(s.batches.len(), 10);
        let mut counts = vec![0; 7];
        for b in &s.batches {
            b.validate(7).unwrap();
            b.indices.iter().for_each(|&i| counts[i] += 1);
        }
        assert_eq!(counts.iter().sum::<usize>(), 30);
        let s = make_schedule(20, 4, 6, 2, false).unwrap();
        let mut counts = vec![0; 20];
        s.batches.iter().flat_map(|b| &b.indices).for_each(|&i| counts[i] += 1);
        assert!(counts.iter().all(|&c| c == 6));
    }

    #[test]
    fn split_plan_arithmetic() {
        let plan = make_split_plan(12, 2, 3, 4, 5).unwrap();
        assert_eq!(plan.group_count(), 6);
        for t in 1..=4 {
            let step = plan.step(t);
            assert!(step.members.iter().all(|m| m.len() == 2));
            for k in 0..3 {
                assert_eq!(plan.split_samples(&step, k).len(), 4);
            }
        }
        assert!(make_split_plan(12, 5, 3, 4, 5).is_err());
    }

    #[test]
    fn singleton_groups_are_identity() {
        let plan = make_split_plan(10, 1, 5, 3, 1).unwrap();
        for i in 0..10 {
            assert_eq!(plan.group(i), &[i]);
            assert_eq!(plan.group_of(i), i);
        }
    }

    #[test]
    fn gaussian_blobs_are_balanced_and_seeded() {
        let a = synth_gaussian(100, 3, 2, 4, 2.0).unwrap();
        assert_eq!(a, synth_gaussian(100, 3, 2, 4, 2.0).unwrap());
        let ones = a.labels().iter().filter(|&&y| y == 1).count();
        assert_eq!(ones, 50);
        let b = synth_gaussian(101, 3, 3, 4, 0.0).unwrap();
        let mut counts = [0; 3];
        b.labels().iter().for_each(|&y| counts[y as usize] += 1);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn subspace_dataset_premises() {
        let s = synth_subspace(10, 4, 3).unwrap();
        for i in 1..10 {
            assert_eq!(s.dataset.features(i)[3], 0.0);
            assert_eq!(dist_to_subspace(s.dataset.features(i), &s.basis).unwrap(), 0.0);
        }
        let x1 = s.dataset.features(0);
        let dist = dist_to_subspace(x1, &s.basis).unwrap();
        assert!(dist > 0.0);
        assert!((dist - x1[3].abs()).abs() < 1e-12);
    }

    #[test]
    fn distance_to_subspace_cases() {
        assert_eq!(dist_to_subspace(&[3.0, 4.0], &[vec![1.0, 0.0]]).unwrap(), 4.0);
        assert_eq!(dist_to_subspace(&[0.0, 1.0], &[vec![1.0, 0.0]]).unwrap(), 1.0);
        assert!(dist_to_subspace(&[2.0, 2.0, 0.0], &[vec![1.0, 1.0, 0.0]]).unwrap() < 1e-12);
        assert!(matches!(
            dist_to_subspace(&[1.0, 2.0], &[vec![1.0, 1.0], vec![2.0, 2.0]]),
            Err(Error::DegenerateBasis)
        ));
    }

    #[test]
    fn batch_validation() {
        assert!(MiniBatchSpec::new(vec![1, 1], vec![false, false]).is_err());
        assert!(MiniBatchSpec::new(vec![1], vec![false, true]).is_err());
        let b = MiniBatchSpec::unflipped(vec![0, 5]);
        assert!(matches!(b.validate(5), Err(Error::IndexOutOfRange { index: 5, n: 5 })));
        let json = serde_json::to_string(&MiniBatchSpec::new(vec![3, 1], vec![true, false]).unwrap()).unwrap();
        assert_eq!(json, r#"{"indices":[3,1],"flips":[1,0]}"#);
    }

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_images();
        let path = dir.path().join("d.bin");
        write_container(&ds, 42, &path).unwrap();
        let (back, seed) = read_container(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(seed, 42);
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        fs::write(&path, bytes).unwrap();
        assert!(read_container(&path).is_err());
    }
}
