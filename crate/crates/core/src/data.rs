//! Toy datasets and the labeled-sample file formats.
//!
//! Surrogate files (`SURD`) and real dataset files (`DSET`) share one layout,
//! all little-endian:
//!
//! ```text
//! magic            4 bytes ("SURD" or "DSET")
//! version          u32 (= 1)
//! num_classes      u32
//! dim              u32
//! count            u64
//! count records    dim x f64 sample, then u32 label
//! metadata length  u32, then that many bytes of UTF-8 JSON
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

pub const SURROGATE_MAGIC: &[u8; 4] = b"SURD";
pub const DATASET_MAGIC: &[u8; 4] = b"DSET";
pub const FORMAT_VERSION: u32 = 1;

/// Samples stored row-major with one class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    dim: usize,
    num_classes: usize,
    data: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(dim: usize, num_classes: usize) -> Result<Self> {
        if dim == 0 || num_classes == 0 {
            return Err(Error::invalid(
                "dataset dim and class count must be positive",
            ));
        }
        Ok(Self {
            dim,
            num_classes,
            data: Vec::new(),
            labels: Vec::new(),
        })
    }

    pub fn from_parts(
        dim: usize,
        num_classes: usize,
        data: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let mut set = Self::new(dim, num_classes)?;
        if data.len() != labels.len() * dim {
            return Err(Error::invalid(format!(
                "{} values cannot hold {} samples of dim {dim}",
                data.len(),
                labels.len()
            )));
        }
        for (x, &c) in data.chunks(dim).zip(&labels) {
            set.push(x, c)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, x: &[f64], class: usize) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::dim_mismatch("sample", self.dim, x.len()));
        }
        if class >= self.num_classes {
            return Err(Error::invalid(format!(
                "label {class} out of range for {} classes",
                self.num_classes
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite sample value"));
        }
        self.data.extend_from_slice(x);
        self.labels.push(class);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn samples(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks(self.dim)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn flat_data(&self) -> &[f64] {
        &self.data
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &c in &self.labels {
            counts[c] += 1;
        }
        counts
    }

    /// The given indices, in order.
    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        let mut out = LabeledSet {
            dim: self.dim,
            num_classes: self.num_classes,
            data: Vec::with_capacity(indices.len() * self.dim),
            labels: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            out.data.extend_from_slice(self.sample(i));
            out.labels.push(self.labels[i]);
        }
        out
    }

    /// A class-balanced subset of `n` samples (round-robin over classes,
    /// taking each class's samples in stored order).
    pub fn balanced_subset(&self, n: usize) -> LabeledSet {
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes];
        for (i, &c) in self.labels.iter().enumerate() {
            per_class[c].push(i);
        }
        let mut picked = Vec::with_capacity(n);
        let mut k = 0;
        while picked.len() < n.min(self.len()) {
            for bucket in &per_class {
                if picked.len() == n {
                    break;
                }
                if let Some(&i) = bucket.get(k) {
                    picked.push(i);
                }
            }
            k += 1;
        }
        self.subset(&picked)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Unit-covariance Gaussians with means on a circle of radius `separation`.
    GaussianMixture,
    /// Class `k` lies near a ring of radius `(k + 1) * separation`.
    RingClasses,
    /// 64-dim 8x8 class glyphs scaled by `separation` plus unit pixel noise.
    GridDigits,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::GaussianMixture => "gaussian_mixture",
            DatasetKind::RingClasses => "ring_classes",
            DatasetKind::GridDigits => "grid_digits",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gaussian_mixture" => Some(DatasetKind::GaussianMixture),
            "ring_classes" => Some(DatasetKind::RingClasses),
            "grid_digits" => Some(DatasetKind::GridDigits),
            _ => None,
        }
    }

    pub fn default_dim(self) -> usize {
        match self {
            DatasetKind::GridDigits => 64,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub kind: DatasetKind,
    pub classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub separation: f64,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::GaussianMixture,
            classes: 4,
            dim: 2,
            samples_per_class: 500,
            separation: 6.0,
            seed: 0,
        }
    }
}

impl ToyDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("toy datasets need at least 2 classes"));
        }
        if self.dim == 0 {
            return Err(Error::invalid("dim must be at least 1"));
        }
        if self.kind == DatasetKind::GridDigits && self.dim != 64 {
            return Err(Error::invalid("grid_digits is 64-dimensional"));
        }
        if self.kind == DatasetKind::RingClasses && self.dim < 2 {
            return Err(Error::invalid("ring_classes needs dim >= 2"));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::invalid(format!(
                "separation must be finite and non-negative, got {}",
                self.separation
            )));
        }
        if self.samples_per_class < 2 {
            return Err(Error::invalid(
                "need at least 2 samples per class for a split",
            ));
        }
        Ok(())
    }
}

/// Mean of class `k` for the Gaussian mixture.
pub fn mixture_mean(spec: &ToyDatasetSpec, k: usize) -> Vec<f64> {
    let angle = 2.0 * PI * k as f64 / spec.classes as f64;
    let mut m = vec![0.0; spec.dim];
    m[0] = spec.separation * angle.cos();
    if spec.dim > 1 {
        m[1] = spec.separation * angle.sin();
    }
    m
}

/// Fixed 8x8 binary glyph for class `k`, independent of the dataset seed.
pub fn glyph(k: usize) -> [f64; 64] {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0x6c79_7068, k as u64));
    std::array::from_fn(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn draw<R: Rng>(spec: &ToyDatasetSpec, k: usize, rng: &mut R) -> Vec<f64> {
    match spec.kind {
        DatasetKind::GaussianMixture => mixture_mean(spec, k)
            .into_iter()
            .map(|m| m + gauss(rng))
            .collect(),
        DatasetKind::RingClasses => {
            let radius = (k + 1) as f64 * spec.separation;
            let theta = 2.0 * PI * rng.random::<f64>();
            let mut v = vec![0.0; spec.dim];
            let r = radius + 0.25 * gauss(rng);
            v[0] = r * theta.cos();
            v[1] = r * theta.sin();
            for x in v.iter_mut().skip(2) {
                *x = 0.25 * gauss(rng);
            }
            v
        }
        DatasetKind::GridDigits => glyph(k)
            .iter()
            .map(|&b| spec.separation * b + gauss(rng))
            .collect(),
    }
}

/// Stratified 80/20 train/test split, deterministic per seed.
pub fn synth_dataset(spec: &ToyDatasetSpec) -> Result<(LabeledSet, LabeledSet)> {
    spec.validate()?;
    let mut train = LabeledSet::new(spec.dim, spec.classes)?;
    let mut test = LabeledSet::new(spec.dim, spec.classes)?;
    let n_train = spec.samples_per_class * 4 / 5;
    for k in 0..spec.classes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 100 + k as u64));
        for i in 0..spec.samples_per_class {
            let x = draw(spec, k, &mut rng);
            if i < n_train {
                train.push(&x, k)?;
            } else {
                test.push(&x, k)?;
            }
        }
    }
    Ok((train, test))
}

pub(crate) fn encode_labeled(magic: &[u8; 4], set: &LabeledSet, metadata: &str) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    w.bytes(magic);
    w.u32(FORMAT_VERSION);
    w.usize_as_u32(set.num_classes, "class count")?;
    w.usize_as_u32(set.dim, "dim")?;
    w.u64(set.len() as u64);
    for (x, &c) in set.samples().zip(&set.labels) {
        w.f64s(x);
        w.usize_as_u32(c, "label")?;
    }
    w.usize_as_u32(metadata.len(), "metadata length")?;
    w.bytes(metadata.as_bytes());
    Ok(w.buf)
}

pub(crate) fn decode_labeled(magic: &[u8; 4], bytes: &[u8]) -> Result<(LabeledSet, String)> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(magic)?;
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let at = r.offset();
    let num_classes = r.u32("class count")? as usize;
    let dim = r.u32("dim")? as usize;
    if num_classes == 0 || dim == 0 {
        return Err(Error::Format {
            offset: at,
            message: "class count and dim must be positive".into(),
        });
    }
    let count = r.u64("count")? as usize;
    let record = dim * 8 + 4;
    if count > r.remaining() / record {
        return Err(r.error(format!(
            "count {count} needs {} bytes of records, only {} left",
            count.saturating_mul(record),
            r.remaining()
        )));
    }
    let mut set = LabeledSet::new(dim, num_classes)?;
    for _ in 0..count {
        let x = r.f64s(dim, "sample")?;
        let at = r.offset();
        let label = r.u32("label")? as usize;
        if label >= num_classes {
            return Err(Error::Format {
                offset: at,
                message: format!("label {label} out of range for {num_classes} classes"),
            });
        }
        set.data.extend(x);
        set.labels.push(label);
    }
    let len = r.u32("metadata length")? as usize;
    let at = r.offset();
    let text = r.take(len, "metadata")?;
    let text = String::from_utf8(text.to_vec()).map_err(|_| Error::Format {
        offset: at,
        message: "metadata is not UTF-8".into(),
    })?;
    r.finish()?;
    Ok((set, text))
}

/// Metadata stored with a real dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub split: String,
    pub spec: Option<ToyDatasetSpec>,
}

pub fn dataset_to_bytes(set: &LabeledSet, info: &DatasetInfo) -> Result<Vec<u8>> {
    let meta = serde_json::to_string(info).map_err(|e| Error::invalid(e.to_string()))?;
    encode_labeled(DATASET_MAGIC, set, &meta)
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<(LabeledSet, DatasetInfo)> {
    let (set, meta) = decode_labeled(DATASET_MAGIC, bytes)?;
    let info = serde_json::from_str(&meta).map_err(|e| Error::Format {
        offset: (bytes.len() - meta.len()) as u64,
        message: format!("bad metadata: {e}"),
    })?;
    Ok((set, info))
}

pub fn write_dataset(path: &Path, set: &LabeledSet, info: &DatasetInfo) -> Result<()> {
    fs::write(path, dataset_to_bytes(set, info)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(LabeledSet, DatasetInfo)> {
    dataset_from_bytes(&fs::read(path)?)
}
