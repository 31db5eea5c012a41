//! Sentence encoders: the trainable toy encoder (embeddings, self-attention
//! blocks, bidirectional GRU) and an adapter over precomputed contextual
//! features from an external pretrained encoder.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::layers::{position_table, AttentionBlock, BiGru};
use super::params::{Init, ParamId, ParamSet, Session};
use crate::autodiff::Var;
use crate::corpus::Sentence;
use crate::error::{Error, Result};

pub const UNK_TOKEN: &str = "<unk>";

/// Token-string to embedding-row mapping for the toy encoder. Row 0 is the
/// unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl TokenVocab {
    pub fn from_names(names: Vec<String>) -> Self {
        let mut index = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            index.insert(n.clone(), i);
        }
        Self { names, index }
    }

    /// Collect every token appearing in the corpus, unknown token first.
    pub fn build<'a>(sentences: impl Iterator<Item = &'a Sentence>) -> Self {
        let mut names = vec![UNK_TOKEN.to_string()];
        let mut index = HashMap::from([(UNK_TOKEN.to_string(), 0usize)]);
        for s in sentences {
            for tok in &s.tokens {
                if !index.contains_key(tok) {
                    index.insert(tok.clone(), names.len());
                    names.push(tok.clone());
                }
            }
        }
        Self { names, index }
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

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

/// Trainable toy encoder: token embeddings plus sinusoidal positions, a
/// stack of self-attention blocks, then one bidirectional GRU layer.
pub struct ToyEncoder {
    embed: ParamId,
    blocks: Vec<AttentionBlock>,
    gru: BiGru,
    hidden: usize,
}

impl ToyEncoder {
    pub fn new(
        params: &mut ParamSet,
        init: &mut Init,
        vocab_size: usize,
        hidden: usize,
        blocks: usize,
        ff_inner: usize,
    ) -> Self {
        let embed = params.register("encoder.embed", init.normal(vocab_size, hidden, 0.02), true);
        let blocks = (0..blocks)
            .map(|i| AttentionBlock::new(params, init, &format!("encoder.block{i}"), hidden, ff_inner))
            .collect();
        let gru = BiGru::new(params, init, "encoder.gru", hidden);
        Self { embed, blocks, gru, hidden }
    }

    pub fn forward(&self, s: &mut Session, vocab: &TokenVocab, sentence: &Sentence) -> Var {
        let ids: Vec<usize> = sentence.tokens.iter().map(|t| vocab.id(t)).collect();
        let table = s.param(self.embed);
        let emb = s.tape.gather_rows(table, &ids);
        let pos = s.tape.constant(position_table(sentence.len(), self.hidden));
        let mut x = s.tape.add(emb, pos);
        for block in &self.blocks {
            x = block.forward(s, x, x);
        }
        self.gru.forward(s, x)
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct FeatureRow {
    id: String,
    vectors: Vec<Vec<f64>>,
    alignment: Vec<Vec<usize>>,
}

/// Precomputed subword features keyed by sentence id, with a subword-to-word
/// alignment. Subword vectors are aggregated to words by max-pooling.
#[derive(Debug, Default)]
pub struct FeatureStore {
    rows: HashMap<String, (Array2<f64>, Vec<Vec<usize>>)>,
}

impl FeatureStore {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut rows = HashMap::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let record = lineno + 1;
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: FeatureRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                record,
                msg: e.to_string(),
            })?;
            let n_sub = row.vectors.len();
            let width = row.vectors.first().map_or(0, |v| v.len());
            if width == 0 || row.vectors.iter().any(|v| v.len() != width) {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    record,
                    msg: "feature vectors must be non-empty and rectangular".into(),
                });
            }
            let mut mat = Array2::zeros((n_sub, width));
            for (i, v) in row.vectors.iter().enumerate() {
                for (j, x) in v.iter().enumerate() {
                    mat[[i, j]] = *x;
                }
            }
            rows.insert(row.id, (mat, row.alignment));
        }
        Ok(Self { rows })
    }

    pub fn insert(&mut self, id: impl Into<String>, vectors: Array2<f64>, alignment: Vec<Vec<usize>>) {
        self.rows.insert(id.into(), (vectors, alignment));
    }

    /// Word-level encoding for a sentence: max-pool each word's subword
    /// vectors. Enforces `expected_width` and the word count of `sentence`.
    pub fn encode(&self, sentence: &Sentence, expected_width: usize) -> Result<Array2<f64>> {
        let (vectors, alignment) = self.rows.get(&sentence.id).ok_or_else(|| Error::Encoder {
            sentence_id: sentence.id.clone(),
            msg: "no precomputed features for this sentence id".into(),
        })?;
        if vectors.ncols() != expected_width {
            return Err(Error::Encoder {
                sentence_id: sentence.id.clone(),
                msg: format!(
                    "feature width {} does not match model hidden size {expected_width}",
                    vectors.ncols()
                ),
            });
        }
        if alignment.len() != sentence.len() {
            return Err(Error::Encoder {
                sentence_id: sentence.id.clone(),
                msg: format!(
                    "alignment covers {} words but sentence has {}",
                    alignment.len(),
                    sentence.len()
                ),
            });
        }
        let mut out = Array2::zeros((sentence.len(), expected_width));
        for (w, subwords) in alignment.iter().enumerate() {
            if subwords.is_empty() {
                return Err(Error::Encoder {
                    sentence_id: sentence.id.clone(),
                    msg: format!("word {w} has no aligned subwords"),
                });
            }
            if let Some(&bad) = subwords.iter().find(|&&sub| sub >= vectors.nrows()) {
                return Err(Error::Encoder {
                    sentence_id: sentence.id.clone(),
                    msg: format!("subword index {bad} out of range for word {w}"),
                });
            }
            out.row_mut(w).assign(&vectors.row(subwords[0]));
            for &sub in &subwords[1..] {
                for j in 0..expected_width {
                    out[[w, j]] = out[[w, j]].max(vectors[[sub, j]]);
                }
            }
        }
        Ok(out)
    }
}

/// Which sentence-encoder implementation the model uses.
pub enum EncoderAdapter {
    Toy,
    External(FeatureStore),
}

impl EncoderAdapter {
    pub fn kind_name(&self) -> &'static str {
        match self {
            EncoderAdapter::Toy => "toy",
            EncoderAdapter::External(_) => "external",
        }
    }
}
