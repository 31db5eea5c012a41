//! Deterministic synthetic corpus for desk-scale end-to-end runs.
//!
//! Entities are spans delimited by dedicated bracket tokens, one bracket
//! class per entity type ("<a ... a>" for ALPHA, "<b ... b>" for BETA), so
//! the correct labeling is derivable from the surface tokens alone. Spans
//! include their delimiter tokens; nested entities sit inside their parent.

use rand::distributions::Distribution;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;

use super::{Dataset, Entity, EntitySet, LabelVocab, Sentence};
use crate::error::{Error, Result};

pub const TYPE_NAMES: [&str; 2] = ["ALPHA", "BETA"];
const OPEN: [&str; 2] = ["<a", "<b"];
const CLOSE: [&str; 2] = ["a>", "b>"];
/// Top-level entities per sentence are capped to keep sentences short.
const MAX_TOP_LEVEL: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub sentences: usize,
    /// Filler-word vocabulary size (delimiters come on top).
    pub vocab_size: usize,
    /// Mean top-level entities per sentence (Poisson).
    pub avg_entities: f64,
    /// Probability that an entity contains one nested entity.
    pub nesting_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            sentences: 2000,
            vocab_size: 20,
            avg_entities: 2.0,
            nesting_rate: 0.2,
            seed: 13,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.sentences == 0 {
            return Err(Error::Validation("synthetic corpus needs at least 1 sentence".into()));
        }
        if self.vocab_size < 10 {
            return Err(Error::Validation(format!(
                "synthetic vocabulary size {} must be >= 10",
                self.vocab_size
            )));
        }
        if self.avg_entities < 0.0 || !self.avg_entities.is_finite() {
            return Err(Error::Validation(format!(
                "average entity density {} must be a finite non-negative number",
                self.avg_entities
            )));
        }
        if !(0.0..=1.0).contains(&self.nesting_rate) {
            return Err(Error::Validation(format!(
                "nesting rate {} must lie in [0, 1]",
                self.nesting_rate
            )));
        }
        Ok(())
    }
}

/// Generate a corpus. Identical spec (including seed) yields an identical
/// corpus.
pub fn make_synthetic_corpus(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut labels = LabelVocab::new();
    for name in TYPE_NAMES {
        labels.intern(name);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let poisson = if spec.avg_entities > 0.0 {
        Some(Poisson::new(spec.avg_entities).map_err(|e| Error::Validation(e.to_string()))?)
    } else {
        None
    };

    let mut items = Vec::with_capacity(spec.sentences);
    for i in 0..spec.sentences {
        let n_top = match &poisson {
            Some(p) => (p.sample(&mut rng) as u64).min(MAX_TOP_LEVEL),
            None => 0,
        };
        let mut tokens = Vec::new();
        let mut entities = Vec::new();
        push_fillers(&mut tokens, &mut rng, spec.vocab_size, 1..=3);
        for _ in 0..n_top {
            push_entity(&mut tokens, &mut entities, &mut rng, spec, true);
            push_fillers(&mut tokens, &mut rng, spec.vocab_size, 1..=3);
        }
        items.push((
            Sentence::new(format!("syn-{i:05}"), tokens)?,
            EntitySet::new(entities),
        ));
    }
    Ok(Dataset { items, labels })
}

fn push_fillers(
    tokens: &mut Vec<String>,
    rng: &mut ChaCha8Rng,
    vocab_size: usize,
    count: std::ops::RangeInclusive<usize>,
) {
    let n = rng.gen_range(count);
    for _ in 0..n {
        let w = rng.gen_range(0..vocab_size);
        tokens.push(format!("w{w:02}"));
    }
}

fn push_entity(
    tokens: &mut Vec<String>,
    entities: &mut Vec<Entity>,
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    allow_nesting: bool,
) {
    let label = rng.gen_range(0..2usize);
    let start = tokens.len();
    tokens.push(OPEN[label].to_string());
    if allow_nesting && rng.gen_bool(spec.nesting_rate) {
        push_fillers(tokens, rng, spec.vocab_size, 0..=1);
        push_entity(tokens, entities, rng, spec, false);
        push_fillers(tokens, rng, spec.vocab_size, 0..=1);
    } else {
        push_fillers(tokens, rng, spec.vocab_size, 1..=3);
    }
    tokens.push(CLOSE[label].to_string());
    entities.push(Entity { left: start, right: tokens.len() - 1, label });
}
