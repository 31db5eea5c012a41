//! Dataset readers and writers: span_json (JSON lines, inclusive `end`) and
//! CoNLL-style BIO tagging files.

use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use super::{Dataset, Entity, EntitySet, LabelVocab, Sentence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    SpanJson,
    ConllBio,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "span_json" | "span-json" | "jsonl" => Ok(DatasetFormat::SpanJson),
            "conll_bio" | "conll-bio" | "conll" => Ok(DatasetFormat::ConllBio),
            other => Err(Error::Config(format!(
                "unknown dataset format {other:?} (expected \"span_json\" or \"conll_bio\")"
            ))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct SpanJsonEntity {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub type_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct SpanJsonRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub tokens: Vec<String>,
    pub entities: Vec<SpanJsonEntity>,
}

/// Load a dataset, interning labels into `vocab` (extend an existing vocab
/// to keep ids aligned across train/dev/test splits).
pub fn load_dataset(
    path: impl AsRef<Path>,
    format: DatasetFormat,
    mut vocab: LabelVocab,
) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let items = match format {
        DatasetFormat::SpanJson => read_span_json(reader, path, &mut vocab)?,
        DatasetFormat::ConllBio => read_conll_bio(reader, path, &mut vocab)?,
    };
    Ok(Dataset { items, labels: vocab })
}

fn read_span_json(
    reader: impl BufRead,
    path: &Path,
    vocab: &mut LabelVocab,
) -> Result<Vec<(Sentence, EntitySet)>> {
    let mut items = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let record = lineno + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: SpanJsonRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            record,
            msg: e.to_string(),
        })?;
        let id = row.id.unwrap_or_else(|| format!("{record}"));
        let sentence = Sentence::new(id, row.tokens).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            record,
            msg: e.to_string(),
        })?;
        let m = sentence.len();
        let mut entities = Vec::with_capacity(row.entities.len());
        for ent in row.entities {
            if ent.start > ent.end || ent.end >= m {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    record,
                    msg: format!(
                        "entity ({}, {}) out of bounds for sentence of length {m}",
                        ent.start, ent.end
                    ),
                });
            }
            let label = vocab.intern(&ent.type_name);
            entities.push(Entity { left: ent.start, right: ent.end, label });
        }
        items.push((sentence, EntitySet::new(entities)));
    }
    Ok(items)
}

fn read_conll_bio(
    reader: impl BufRead,
    path: &Path,
    vocab: &mut LabelVocab,
) -> Result<Vec<(Sentence, EntitySet)>> {
    let mut items = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let mut first_record = 1usize;

    let flush = |tokens: &mut Vec<String>,
                     tags: &mut Vec<String>,
                     record: usize,
                     vocab: &mut LabelVocab,
                     items: &mut Vec<(Sentence, EntitySet)>|
     -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let entities = bio_tags_to_entities(tags, vocab).map_err(|msg| Error::Parse {
            path: path.display().to_string(),
            record,
            msg,
        })?;
        let id = format!("{}", items.len() + 1);
        items.push((
            Sentence::new(id, std::mem::take(tokens))?,
            EntitySet::new(entities),
        ));
        tags.clear();
        Ok(())
    };

    for (lineno, line) in reader.lines().enumerate() {
        let record = lineno + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            flush(&mut tokens, &mut tags, first_record, vocab, &mut items)?;
            first_record = record + 1;
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let token = fields.next().unwrap().to_string();
        let tag = match fields.last() {
            Some(t) => t.to_string(),
            None => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    record,
                    msg: format!("line {trimmed:?} has a token but no tag"),
                })
            }
        };
        tokens.push(token);
        tags.push(tag);
    }
    flush(&mut tokens, &mut tags, first_record, vocab, &mut items)?;
    Ok(items)
}

/// Convert one sentence's BIO tags into inclusive spans. A stray `I-` tag
/// (no matching open entity) starts a new span, the usual lenient reading.
fn bio_tags_to_entities(
    tags: &[String],
    vocab: &mut LabelVocab,
) -> std::result::Result<Vec<Entity>, String> {
    let mut entities = Vec::new();
    let mut open: Option<(usize, String)> = None; // (start, type)
    for (i, tag) in tags.iter().enumerate() {
        let (head, name) = match tag.split_once('-') {
            Some((h, n)) => (h, Some(n)),
            None => (tag.as_str(), None),
        };
        match (head, name) {
            ("O", None) => {
                if let Some((start, ty)) = open.take() {
                    entities.push(Entity { left: start, right: i - 1, label: vocab.intern(&ty) });
                }
            }
            ("B", Some(ty)) => {
                if let Some((start, prev)) = open.take() {
                    entities.push(Entity { left: start, right: i - 1, label: vocab.intern(&prev) });
                }
                open = Some((i, ty.to_string()));
            }
            ("I", Some(ty)) => match &open {
                Some((_, prev)) if prev == ty => {}
                _ => {
                    if let Some((start, prev)) = open.take() {
                        entities.push(Entity {
                            left: start,
                            right: i - 1,
                            label: vocab.intern(&prev),
                        });
                    }
                    open = Some((i, ty.to_string()));
                }
            },
            _ => return Err(format!("malformed BIO tag {tag:?} at token {i}")),
        }
    }
    if let Some((start, ty)) = open {
        entities.push(Entity { left: start, right: tags.len() - 1, label: vocab.intern(&ty) });
    }
    Ok(entities)
}

/// Write a dataset as span_json lines. `scores`, when given, must align with
/// `items` and adds a per-entity "score" field (used by prediction files).
pub fn write_span_json(
    items: &[(Sentence, EntitySet)],
    labels: &LabelVocab,
    scores: Option<&[Vec<f64>]>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for (i, (sentence, set)) in items.iter().enumerate() {
        let entities = set
            .entities
            .iter()
            .enumerate()
            .map(|(j, e)| SpanJsonEntity {
                start: e.left,
                end: e.right,
                type_name: labels
                    .name(e.label)
                    .unwrap_or("<unknown>")
                    .to_string(),
                score: scores.map(|s| s[i][j]),
            })
            .collect();
        let row = SpanJsonRow {
            id: Some(sentence.id.clone()),
            tokens: sentence.tokens.clone(),
            entities,
        };
        serde_json::to_writer(&mut w, &row)
            .map_err(|e| Error::Runtime(format!("serializing record {}: {e}", i + 1)))?;
        w.write_all(b"\n")
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn minimal_span_json_record() {
        let f = write_temp(
            r#"{"tokens": ["John", "runs"], "entities": [{"start": 0, "end": 0, "type": "PER"}]}"#,
        );
        let ds = load_dataset(f.path(), DatasetFormat::SpanJson, LabelVocab::new()).unwrap();
        assert_eq!(ds.len(), 1);
        let (s, e) = &ds.items[0];
        assert_eq!(s.len(), 2);
        assert_eq!(e.entities, vec![Entity { left: 0, right: 0, label: 0 }]);
        assert_eq!(ds.labels.name(0), Some("PER"));
    }

    #[test]
    fn bio_file_matches_span_json_equivalent() {
        let f = write_temp("John\tB-PER\nruns\tO\n");
        let ds = load_dataset(f.path(), DatasetFormat::ConllBio, LabelVocab::new()).unwrap();
        assert_eq!(ds.len(), 1);
        let (s, e) = &ds.items[0];
        assert_eq!(s.tokens, vec!["John", "runs"]);
        assert_eq!(e.entities, vec![Entity { left: 0, right: 0, label: 0 }]);
    }

    #[test]
    fn bio_multi_sentence_and_spans() {
        let f = write_temp(
            "Mary\tB-PER\nJane\tI-PER\nvisited\tO\nParis\tB-LOC\n\nhello\tO\n\n",
        );
        let ds = load_dataset(f.path(), DatasetFormat::ConllBio, LabelVocab::new()).unwrap();
        assert_eq!(ds.len(), 2);
        let (_, e) = &ds.items[0];
        assert_eq!(
            e.entities,
            vec![
                Entity { left: 0, right: 1, label: 0 },
                Entity { left: 3, right: 3, label: 1 }
            ]
        );
        assert!(ds.items[1].1.is_empty());
    }

    #[test]
    fn empty_entity_list_is_valid() {
        let f = write_temp(r#"{"tokens": ["a"], "entities": []}"#);
        let ds = load_dataset(f.path(), DatasetFormat::SpanJson, LabelVocab::new()).unwrap();
        assert_eq!(ds.items[0].1.len(), 0);
    }

    #[test]
    fn malformed_records_name_the_line() {
        let f = write_temp("{\"tokens\": [\"a\"], \"entities\": []}\nnot json\n");
        let err = load_dataset(f.path(), DatasetFormat::SpanJson, LabelVocab::new()).unwrap_err();
        assert!(err.to_string().contains("record 2"), "{err}");

        let f = write_temp(r#"{"tokens": ["a"], "entities": [{"start": 0, "end": 3, "type": "X"}]}"#);
        let err = load_dataset(f.path(), DatasetFormat::SpanJson, LabelVocab::new()).unwrap_err();
        assert!(err.to_string().contains("out of bounds"), "{err}");

        let f = write_temp("John\tB-PER\nbroken\tZ-PER\n");
        let err = load_dataset(f.path(), DatasetFormat::ConllBio, LabelVocab::new()).unwrap_err();
        assert!(err.to_string().contains("Z-PER"), "{err}");
    }

    #[test]
    fn span_json_round_trips_through_writer() {
        let mut vocab = LabelVocab::new();
        let per = vocab.intern("PER");
        let items = vec![(
            Sentence::new("s1", vec!["John".into(), "runs".into()]).unwrap(),
            EntitySet::new(vec![Entity { left: 0, right: 0, label: per }]),
        )];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.jsonl");
        write_span_json(&items, &vocab, None, &path).unwrap();
        let ds = load_dataset(&path, DatasetFormat::SpanJson, LabelVocab::new()).unwrap();
        assert_eq!(ds.items, items);
    }
}
