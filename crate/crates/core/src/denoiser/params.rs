//! Named parameter storage and per-forward-pass binding onto a tape.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub(crate) struct ParamEntry {
    pub name: String,
    pub value: Array2<f64>,
    /// Whether weight decay applies (false for biases and norm scales).
    pub decay: bool,
}

/// Flat registry of all learnable arrays, keyed by module path.
#[derive(Default)]
pub struct ParamSet {
    pub(crate) entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Array2<f64>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn decay(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Snapshot of all values, aligned with parameter indices.
    pub fn snapshot(&self) -> Vec<Array2<f64>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Array2<f64>]) {
        assert_eq!(snapshot.len(), self.entries.len());
        for (e, s) in self.entries.iter_mut().zip(snapshot) {
            e.value = s.clone();
        }
    }
}

/// One forward pass: a tape plus the lazy param-to-var binding for it.
pub struct Session<'p> {
    pub tape: Tape,
    params: &'p ParamSet,
    bound: Vec<Option<Var>>,
    freeze_encoder: bool,
}

pub const ENCODER_PREFIX: &str = "encoder.";

impl<'p> Session<'p> {
    pub fn new(params: &'p ParamSet, track: bool, freeze_encoder: bool) -> Self {
        Self {
            tape: Tape::new(track),
            params,
            bound: vec![None; params.len()],
            freeze_encoder,
        }
    }

    /// Var for a parameter, leafing its value onto the tape on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = &self.params.entries[id.0];
        let trainable = !(self.freeze_encoder && entry.name.starts_with(ENCODER_PREFIX));
        let v = self.tape.leaf(entry.value.clone(), trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Pull parameter gradients out of a backward pass, aligned with
    /// parameter indices. Unbound or frozen parameters yield `None`.
    pub fn extract_grads(&self, mut grads: Gradients) -> GradStore {
        let per_param = self
            .bound
            .iter()
            .map(|slot| slot.and_then(|v| grads.take(v)))
            .collect();
        GradStore { per_param }
    }
}

/// Gradients aligned with a `ParamSet`'s indices.
pub struct GradStore {
    pub per_param: Vec<Option<Array2<f64>>>,
}

impl GradStore {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.per_param[id.0].as_ref()
    }

    pub fn zeros_like(params: &ParamSet) -> Self {
        Self { per_param: vec![None; params.len()] }
    }

    pub fn add_assign(&mut self, other: &GradStore) {
        for (a, b) in self.per_param.iter_mut().zip(&other.per_param) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => *x += y,
                (None, Some(y)) => *a = Some(y.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.per_param.iter_mut().flatten() {
            *g *= c;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.per_param
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Deterministic initializers driven by one seeded stream.
pub struct Init {
    pub rng: ChaCha8Rng,
}

impl Init {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    /// Xavier/Glorot uniform.
    pub fn xavier(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| self.rng.gen_range(-limit..limit))
    }

    pub fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Array2<f64> {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, std).expect("valid std");
        Array2::from_shape_fn((rows, cols), |_| dist.sample(&mut self.rng))
    }
}

/// Validate a value against the registered shape before overwriting, used by
/// checkpoint loading.
pub fn assign_checked(params: &mut ParamSet, name: &str, value: Array2<f64>) -> Result<()> {
    let id = params
        .id_by_name(name)
        .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name:?}")))?;
    let expected = params.value(id).dim();
    if value.dim() != expected {
        return Err(Error::Checkpoint(format!(
            "parameter {name:?} has shape {:?}, expected {:?}",
            value.dim(),
            expected
        )));
    }
    *params.value_mut(id) = value;
    Ok(())
}
