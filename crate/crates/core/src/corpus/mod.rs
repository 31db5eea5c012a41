//! Sentence/entity data model, boundary codec between word indices and
//! diffusion signal space, and entity-set expansion.

mod io;
mod synthetic;

pub use io::{load_dataset, write_span_json, DatasetFormat};
pub use synthetic::{make_synthetic_corpus, SyntheticSpec};

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use std::collections::HashMap;

use crate::error::{Error, Result};

/// A tokenized sentence. `M = tokens.len() >= 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
}

impl Sentence {
    pub fn new(id: impl Into<String>, tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Validation("sentence must have at least one token".into()));
        }
        Ok(Self { id: id.into(), tokens })
    }

    /// Token count `M`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // by construction M >= 1
    }
}

/// An entity mention: inclusive word-boundary indices plus a type id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Entity {
    pub left: usize,
    pub right: usize,
    pub label: usize,
}

impl Entity {
    pub fn new(left: usize, right: usize, label: usize) -> Result<Self> {
        if left > right {
            return Err(Error::Validation(format!(
                "entity has left boundary {left} > right boundary {right}"
            )));
        }
        Ok(Self { left, right, label })
    }
}

/// The (possibly empty, possibly overlapping) set of gold entities of one
/// sentence. Duplicates are permitted: nested corpora contain them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntitySet {
    pub entities: Vec<Entity>,
}

impl EntitySet {
    pub fn new(entities: Vec<Entity>) -> Self {
        Self { entities }
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// All boundaries inside `[0, m)`.
    pub fn check_bounds(&self, m: usize) -> Result<()> {
        for e in &self.entities {
            if e.right >= m {
                return Err(Error::Validation(format!(
                    "entity ({}, {}) out of bounds for sentence length {m}",
                    e.left, e.right
                )));
            }
        }
        Ok(())
    }
}

/// Stable mapping between type-label strings and dense ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelVocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelVocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names(names: &[&str]) -> Self {
        let mut v = Self::new();
        for n in names {
            v.intern(n);
        }
        v
    }

    /// Id for `name`, interning it on first sight.
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(|s| s.as_str())
    }

    /// Number of real entity types `C`.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// A loaded corpus: sentences with gold entities plus the label vocabulary.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub items: Vec<(Sentence, EntitySet)>,
    pub labels: LabelVocab,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Maps word boundaries of a length-`m` sentence into the `[0, lambda]`
/// signal interval; noisy values are clamped to `[-lambda, lambda]` on the
/// way back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanCodec {
    pub m: usize,
    pub lambda: f64,
}

impl SpanCodec {
    pub fn new(m: usize, lambda: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::Validation("codec sentence length must be >= 1".into()));
        }
        if !(lambda > 0.0) {
            return Err(Error::Validation(format!("scale factor lambda = {lambda} must be > 0")));
        }
        Ok(Self { m, lambda })
    }

    /// `i * lambda / m`.
    pub fn encode_index(&self, i: usize) -> f64 {
        i as f64 * self.lambda / self.m as f64
    }

    /// Signal-space boundaries of an in-bounds entity.
    pub fn encode_entity(&self, e: &Entity) -> (f64, f64) {
        (self.encode_index(e.left), self.encode_index(e.right))
    }

    /// Inverse map for one continuous value: clamp to `[-lambda, lambda]`,
    /// scale by `m / lambda`, round half away from zero, clamp to `[0, m-1]`.
    fn discretize_value(&self, v: f64) -> usize {
        let clamped = v.clamp(-self.lambda, self.lambda);
        let idx = (clamped * self.m as f64 / self.lambda).round();
        (idx.max(0.0) as usize).min(self.m - 1)
    }

    /// Discretize a `K x 2` block of signal-space boundaries into word-index
    /// pairs. Total on every real input (swapping inverted pairs, clamping
    /// out-of-range magnitudes including infinities); NaN is rejected.
    pub fn discretize(&self, x: &ArrayView2<f64>) -> Result<Vec<(usize, usize)>> {
        if x.ncols() != 2 {
            return Err(Error::Shape(format!(
                "boundary array must have 2 columns, got {}",
                x.ncols()
            )));
        }
        let mut out = Vec::with_capacity(x.nrows());
        for (row, pair) in x.rows().into_iter().enumerate() {
            if pair[0].is_nan() || pair[1].is_nan() {
                return Err(Error::Validation(format!(
                    "NaN boundary value in span row {row}"
                )));
            }
            let a = self.discretize_value(pair[0]);
            let b = self.discretize_value(pair[1]);
            out.push(if a <= b { (a, b) } else { (b, a) });
        }
        Ok(out)
    }
}

/// How the gold entity set is padded out to `K` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpansionStrategy {
    /// Repeat the gold entities cyclically.
    Repetition,
    /// Draw padding spans from the standard Gaussian, clamped to signal range.
    Random,
}

impl std::str::FromStr for ExpansionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "repetition" => Ok(ExpansionStrategy::Repetition),
            "random" => Ok(ExpansionStrategy::Random),
            other => Err(Error::Config(format!(
                "unknown expansion strategy {other:?} (expected \"repetition\" or \"random\")"
            ))),
        }
    }
}

impl std::fmt::Display for ExpansionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExpansionStrategy::Repetition => write!(f, "repetition"),
            ExpansionStrategy::Random => write!(f, "random"),
        }
    }
}

/// Provenance of one expanded boundary row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Gold,
    Padded,
}

/// The `K x 2` signal-space boundary block fed to the forward process.
#[derive(Debug, Clone)]
pub struct ExpandedBoundaries {
    pub b: Array2<f64>,
    pub origin: Vec<Origin>,
}

impl ExpandedBoundaries {
    pub fn k(&self) -> usize {
        self.b.nrows()
    }
}

/// Pad the gold set to `k` rows. The first `N` rows encode the gold entities
/// exactly; padding rows repeat them cyclically or draw Gaussian spans.
/// A repetition request with an empty gold set falls back to Gaussian draws.
pub fn expand_entities<R: Rng>(
    gold: &EntitySet,
    k: usize,
    strategy: ExpansionStrategy,
    codec: &SpanCodec,
    rng: &mut R,
) -> Result<ExpandedBoundaries> {
    if k == 0 {
        return Err(Error::Validation("expansion size K must be >= 1".into()));
    }
    let n = gold.len();
    if k < n {
        return Err(Error::Validation(format!(
            "expansion size K = {k} is smaller than gold entity count N = {n}"
        )));
    }
    gold.check_bounds(codec.m)?;

    let mut b = Array2::zeros((k, 2));
    let mut origin = Vec::with_capacity(k);
    for (i, e) in gold.entities.iter().enumerate() {
        let (l, r) = codec.encode_entity(e);
        b[[i, 0]] = l;
        b[[i, 1]] = r;
        origin.push(Origin::Gold);
    }
    for i in n..k {
        match strategy {
            ExpansionStrategy::Repetition if n > 0 => {
                let src = (i - n) % n;
                b[[i, 0]] = b[[src, 0]];
                b[[i, 1]] = b[[src, 1]];
            }
            _ => {
                for c in 0..2 {
                    let v: f64 = rng.sample(StandardNormal);
                    b[[i, c]] = v.clamp(-codec.lambda, codec.lambda);
                }
            }
        }
        origin.push(Origin::Padded);
    }
    Ok(ExpandedBoundaries { b, origin })
}
