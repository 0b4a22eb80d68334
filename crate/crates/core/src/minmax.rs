//! Real and synthesized feature buffers and the min-max representativeness
//! and diversity terms.
//!
//! Both terms compare a predicted clean latent `z_hat` against the stored
//! features of its class and differentiate only through `z_hat`:
//!
//! - representativeness: `-min_m cos(z_hat, z_m)` over the real buffer
//! - diversity: `+max_d cos(z_hat, z_d)` over the synthesized buffer
//!
//! Minimising the weighted sum pulls `z_hat` towards the least similar real
//! feature and away from the most similar synthesized one. Ties go to the
//! lowest buffer position (oldest entry).

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::array::{dot, norm, DenseArray};
use crate::error::{Error, Result};

/// Norm floor used by [`cosine_similarity`].
pub const COSINE_EPS: f64 = 1e-12;
pub const DEFAULT_CAPACITY: usize = 64;
pub const DEFAULT_LAMBDA_R: f64 = 1e-3;
pub const DEFAULT_LAMBDA_D: f64 = 2e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferKind {
    Real,
    Synthesized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferScope {
    /// One FIFO per class; terms compare only against the sample's class.
    PerClass,
    /// A single FIFO shared by all classes.
    Global,
}

impl BufferScope {
    pub fn name(self) -> &'static str {
        match self {
            BufferScope::PerClass => "per_class",
            BufferScope::Global => "global",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "per_class" => Some(BufferScope::PerClass),
            "global" => Some(BufferScope::Global),
            _ => None,
        }
    }
}

/// A stored feature and the training step that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    vector: Box<[f64]>,
    origin: u64,
}

impl BufferEntry {
    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn origin(&self) -> u64 {
        self.origin
    }
}

/// Fixed-capacity FIFO feature store, partitioned by class or global.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBuffer {
    kind: BufferKind,
    scope: BufferScope,
    capacity: usize,
    dim: usize,
    buckets: BTreeMap<usize, VecDeque<BufferEntry>>,
}

impl FeatureBuffer {
    pub fn new(kind: BufferKind, scope: BufferScope, capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::invalid("buffer capacity and dim must be positive"));
        }
        Ok(Self {
            kind,
            scope,
            capacity,
            dim,
            buckets: BTreeMap::new(),
        })
    }

    pub fn kind(&self) -> BufferKind {
        self.kind
    }

    pub fn scope(&self) -> BufferScope {
        self.scope
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn key(&self, class: usize) -> usize {
        match self.scope {
            BufferScope::PerClass => class,
            BufferScope::Global => 0,
        }
    }

    /// Entries compared against a sample of `class`, oldest first.
    pub fn entries(&self, class: usize) -> impl ExactSizeIterator<Item = &BufferEntry> + '_ {
        self.buckets
            .get(&self.key(class))
            .map(|b| b.iter())
            .unwrap_or_default()
    }

    pub fn len(&self, class: usize) -> usize {
        self.buckets.get(&self.key(class)).map_or(0, |b| b.len())
    }

    pub fn is_empty(&self, class: usize) -> bool {
        self.len(class) == 0
    }

    pub fn total_len(&self) -> usize {
        self.buckets.values().map(|b| b.len()).sum()
    }

    /// All entries of all buckets.
    pub fn iter_all(&self) -> impl Iterator<Item = &BufferEntry> + '_ {
        self.buckets.values().flatten()
    }

    pub fn push(&mut self, vector: &[f64], class: usize, origin: u64) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::dim_mismatch(
                "buffered feature",
                self.dim,
                vector.len(),
            ));
        }
        let cap = self.capacity;
        let bucket = self.buckets.entry(self.key(class)).or_default();
        if bucket.len() == cap {
            bucket.pop_front();
        }
        bucket.push_back(BufferEntry {
            vector: vector.into(),
            origin,
        });
        Ok(())
    }

    /// Pushes a batch of `(vector, class)` features tagged with `origin`.
    /// Dimensions are checked up front so a bad batch leaves the buffer
    /// untouched.
    pub fn push_batch<'a, I>(&mut self, features: I, origin: u64) -> Result<()>
    where
        I: IntoIterator<Item = (&'a [f64], usize)>,
    {
        let features: Vec<_> = features.into_iter().collect();
        if let Some((v, _)) = features.iter().find(|(v, _)| v.len() != self.dim) {
            return Err(Error::dim_mismatch("buffered feature", self.dim, v.len()));
        }
        for (v, c) in features {
            self.push(v, c, origin)?;
        }
        Ok(())
    }
}

/// The real and synthesized buffers used together by the training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBuffers {
    pub real: FeatureBuffer,
    pub synthesized: FeatureBuffer,
}

impl FeatureBuffers {
    pub fn new(scope: BufferScope, capacity: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            real: FeatureBuffer::new(BufferKind::Real, scope, capacity, dim)?,
            synthesized: FeatureBuffer::new(BufferKind::Synthesized, scope, capacity, dim)?,
        })
    }
}

pub fn cosine_similarity(a: &DenseArray, b: &DenseArray) -> Result<f64> {
    a.check_same_shape(b)?;
    if a.is_empty() {
        return Err(Error::invalid("cosine similarity of empty arrays"));
    }
    Ok(cosine(a.as_slice(), b.as_slice()))
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a).max(COSINE_EPS);
    let nb = norm(b).max(COSINE_EPS);
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// `cos(a, b)` and its gradient with respect to `a`.
pub(crate) fn cosine_with_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let ra = norm(a);
    let na = ra.max(COSINE_EPS);
    let nb = norm(b).max(COSINE_EPS);
    let sim = dot(a, b) / (na * nb);
    let grad = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| {
            let through_norm = if ra > COSINE_EPS {
                sim * ai / (ra * na)
            } else {
                0.0
            };
            bi / (na * nb) - through_norm
        })
        .collect();
    (sim, grad)
}

/// Value, gradient with respect to `z_hat`, and the selected buffer position
/// of one min-max term.
#[derive(Debug, Clone, PartialEq)]
pub struct TermOutcome {
    pub value: f64,
    pub grad: Vec<f64>,
    pub index: usize,
}

#[derive(Clone, Copy)]
enum Pick {
    Min,
    Max,
}

fn select(buffer: &FeatureBuffer, z_hat: &[f64], class: usize, pick: Pick) -> Result<(usize, f64)> {
    if z_hat.len() != buffer.dim() {
        return Err(Error::dim_mismatch("z_hat", buffer.dim(), z_hat.len()));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in buffer.entries(class).enumerate() {
        let s = cosine(z_hat, e.vector());
        let better = match (best, pick) {
            (None, _) => true,
            (Some((_, b)), Pick::Min) => s < b,
            (Some((_, b)), Pick::Max) => s > b,
        };
        if better {
            best = Some((i, s));
        }
    }
    best.ok_or(Error::BufferUnderflow { class })
}

fn term(
    buffer: &FeatureBuffer,
    expected: BufferKind,
    z_hat: &[f64],
    class: usize,
    pick: Pick,
) -> Result<TermOutcome> {
    if buffer.kind() != expected {
        return Err(Error::invalid(format!(
            "expected a {expected:?} buffer, got {:?}",
            buffer.kind()
        )));
    }
    let (index, _) = select(buffer, z_hat, class, pick)?;
    let selected = buffer
        .entries(class)
        .nth(index)
        .expect("selected index in range");
    let (sim, mut grad) = cosine_with_grad(z_hat, selected.vector());
    let value = match pick {
        Pick::Min => {
            grad.iter_mut().for_each(|g| *g = -*g);
            -sim
        }
        Pick::Max => sim,
    };
    Ok(TermOutcome { value, grad, index })
}

/// `-min_m cos(z_hat, z_m)` over the real features of `class`.
pub fn representativeness_term(
    buffer: &FeatureBuffer,
    z_hat: &DenseArray,
    class: usize,
) -> Result<TermOutcome> {
    term(buffer, BufferKind::Real, z_hat.as_slice(), class, Pick::Min)
}

/// `+max_d cos(z_hat, z_d)` over the synthesized features of `class`.
pub fn diversity_term(
    buffer: &FeatureBuffer,
    z_hat: &DenseArray,
    class: usize,
) -> Result<TermOutcome> {
    term(
        buffer,
        BufferKind::Synthesized,
        z_hat.as_slice(),
        class,
        Pick::Max,
    )
}

/// One batch element's inputs to [`combined_loss`].
#[derive(Debug, Clone, Copy)]
pub struct LossSample<'a> {
    pub eps: &'a [f64],
    pub eps_hat: &'a [f64],
    pub z_hat: &'a [f64],
    pub class: usize,
}

/// Signed loss values actually summed into `l_total`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_diff: f64,
    pub l_r: f64,
    pub l_d: f64,
    pub l_total: f64,
    pub lambda_r: f64,
    pub lambda_d: f64,
    /// Per-sample argmin position in the real buffer; `None` when skipped.
    pub rep_indices: Vec<Option<usize>>,
    /// Per-sample argmax position in the synthesized buffer; `None` when skipped.
    pub div_indices: Vec<Option<usize>>,
}

impl LossBreakdown {
    /// True when no sample in the batch had real features to compare with.
    pub fn r_skipped(&self) -> bool {
        self.rep_indices.iter().all(Option::is_none)
    }

    pub fn d_skipped(&self) -> bool {
        self.div_indices.iter().all(Option::is_none)
    }
}

/// Per-sample gradients of each loss component.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    /// d l_diff / d eps_hat
    pub diff_wrt_eps_hat: Vec<Vec<f64>>,
    /// d l_r / d z_hat
    pub r_wrt_z_hat: Vec<Vec<f64>>,
    /// d l_d / d z_hat
    pub d_wrt_z_hat: Vec<Vec<f64>>,
}

/// Diffusion loss (batch mean of `||eps - eps_hat||^2`) plus the weighted
/// batch means of the two min-max terms. Samples whose bucket is empty
/// contribute zero to the respective mean.
pub fn combined_loss(
    batch: &[LossSample<'_>],
    buffers: &FeatureBuffers,
    lambda_r: f64,
    lambda_d: f64,
) -> Result<(LossBreakdown, LossGradients)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if !(lambda_r >= 0.0 && lambda_d >= 0.0) {
        return Err(Error::invalid(format!(
            "loss weights must be non-negative, got lambda_r={lambda_r}, lambda_d={lambda_d}"
        )));
    }
    let n = batch.len() as f64;
    let dim = buffers.real.dim();
    let mut bd = LossBreakdown {
        l_diff: 0.0,
        l_r: 0.0,
        l_d: 0.0,
        l_total: 0.0,
        lambda_r,
        lambda_d,
        rep_indices: Vec::with_capacity(batch.len()),
        div_indices: Vec::with_capacity(batch.len()),
    };
    let mut grads = LossGradients {
        diff_wrt_eps_hat: Vec::with_capacity(batch.len()),
        r_wrt_z_hat: Vec::with_capacity(batch.len()),
        d_wrt_z_hat: Vec::with_capacity(batch.len()),
    };
    for s in batch {
        if s.eps.len() != dim || s.eps_hat.len() != dim || s.z_hat.len() != dim {
            return Err(Error::invalid(format!(
                "loss sample dims ({}, {}, {}) do not match latent dim {dim}",
                s.eps.len(),
                s.eps_hat.len(),
                s.z_hat.len()
            )));
        }
        let mut g_diff = Vec::with_capacity(dim);
        for (e, eh) in s.eps.iter().zip(s.eps_hat) {
            let r = e - eh;
            bd.l_diff += r * r / n;
            g_diff.push(-2.0 * r / n);
        }
        grads.diff_wrt_eps_hat.push(g_diff);

        let z_hat = s.z_hat;
        match term(&buffers.real, BufferKind::Real, z_hat, s.class, Pick::Min) {
            Ok(out) => {
                bd.l_r += out.value / n;
                grads
                    .r_wrt_z_hat
                    .push(out.grad.iter().map(|g| g / n).collect());
                bd.rep_indices.push(Some(out.index));
            }
            Err(Error::BufferUnderflow { .. }) => {
                grads.r_wrt_z_hat.push(vec![0.0; dim]);
                bd.rep_indices.push(None);
            }
            Err(e) => return Err(e),
        }
        match term(
            &buffers.synthesized,
            BufferKind::Synthesized,
            z_hat,
            s.class,
            Pick::Max,
        ) {
            Ok(out) => {
                bd.l_d += out.value / n;
                grads
                    .d_wrt_z_hat
                    .push(out.grad.iter().map(|g| g / n).collect());
                bd.div_indices.push(Some(out.index));
            }
            Err(Error::BufferUnderflow { .. }) => {
                grads.d_wrt_z_hat.push(vec![0.0; dim]);
                bd.div_indices.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    bd.l_total = total_loss(bd.l_diff, bd.l_r, bd.l_d, lambda_r, lambda_d);
    Ok((bd, grads))
}

pub fn total_loss(l_diff: f64, l_r: f64, l_d: f64, lambda_r: f64, lambda_d: f64) -> f64 {
    l_diff + lambda_r * l_r + lambda_d * l_d
}
