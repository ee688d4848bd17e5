//! Annotated examples, type descriptions, and their JSONL loaders.

mod synth;

pub use synth::{coarse_cue, fine_cue, generate_synthetic, SynthCorpus, SynthSpec};

use std::collections::{BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{is_other_type, parse_type, validate_example_types, Taxonomy, TypePath};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: span [{start}, {end}) invalid for {len} tokens")]
    Span {
        line: usize,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A sentence with one marked entity span `[entity_start, entity_end)` and
/// its gold types.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub tokens: Vec<String>,
    pub entity_start: usize,
    pub entity_end: usize,
    pub gold_types: BTreeSet<TypePath>,
}

impl Example {
    pub fn entity_tokens(&self) -> &[String] {
        &self.tokens[self.entity_start..self.entity_end]
    }

    pub fn fine_types(&self) -> impl Iterator<Item = &TypePath> {
        self.gold_types.iter().filter(|t| t.is_fine())
    }

    fn to_record(&self) -> ExampleRecord {
        ExampleRecord {
            id: Some(self.id.clone()),
            tokens: self.tokens.clone(),
            entity_start: self.entity_start as i64,
            entity_end: self.entity_end as i64,
            types: self.gold_types.iter().map(|t| t.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeDescription {
    pub type_path: TypePath,
    pub descriptions: Vec<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExampleRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    tokens: Vec<String>,
    entity_start: i64,
    entity_end: i64,
    types: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DescriptionRecord {
    #[serde(rename = "type")]
    type_path: String,
    descriptions: Vec<Vec<String>>,
}

/// Parses examples JSONL. Gold types outside the taxonomy are kept and
/// logged; `/other` types are dropped when the taxonomy drops them.
pub fn parse_examples(text: &str, tax: &Taxonomy) -> Result<Vec<Example>, CorpusError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: ExampleRecord = serde_json::from_str(raw).map_err(|e| CorpusError::Parse {
            line,
            message: e.to_string(),
        })?;
        let len = rec.tokens.len();
        if len == 0 {
            return Err(CorpusError::Parse {
                line,
                message: "empty token list".into(),
            });
        }
        if rec.entity_start < 0 || rec.entity_end <= rec.entity_start || rec.entity_end as usize > len
        {
            return Err(CorpusError::Span {
                line,
                start: rec.entity_start.max(0) as usize,
                end: rec.entity_end.max(0) as usize,
                len,
            });
        }
        let mut gold = BTreeSet::new();
        for t in &rec.types {
            let t = parse_type(t).map_err(|e| CorpusError::Parse {
                line,
                message: e.to_string(),
            })?;
            if tax.drops_other() && is_other_type(&t) {
                continue;
            }
            gold.insert(t);
        }
        if gold.is_empty() {
            if rec.types.is_empty() {
                return Err(CorpusError::Parse {
                    line,
                    message: "no gold types".into(),
                });
            }
            log::warn!("line {line}: only /other types, record skipped");
            continue;
        }
        let id = rec.id.unwrap_or_else(|| format!("line-{line}"));
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId { line, id });
        }
        for w in validate_example_types(tax, &gold) {
            log::warn!("example {id}: {w}");
        }
        out.push(Example {
            id,
            tokens: rec.tokens,
            entity_start: rec.entity_start as usize,
            entity_end: rec.entity_end as usize,
            gold_types: gold,
        });
    }
    Ok(out)
}

pub fn load_examples(path: impl AsRef<Path>, tax: &Taxonomy) -> Result<Vec<Example>, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    parse_examples(&text, tax)
}

pub fn parse_descriptions(text: &str, tax: &Taxonomy) -> Result<Vec<TypeDescription>, CorpusError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| CorpusError::Parse { line, message };
        let rec: DescriptionRecord =
            serde_json::from_str(raw).map_err(|e| parse_err(e.to_string()))?;
        let t = parse_type(&rec.type_path).map_err(|e| parse_err(e.to_string()))?;
        if rec.descriptions.is_empty() {
            return Err(parse_err(format!("{t}: empty description list")));
        }
        if rec.descriptions.iter().any(Vec::is_empty) {
            return Err(parse_err(format!("{t}: empty description")));
        }
        if !tax.contains(&t) {
            log::warn!("line {line}: description for unknown type {t}");
        }
        out.push(TypeDescription {
            type_path: t,
            descriptions: rec.descriptions,
        });
    }
    Ok(out)
}

pub fn load_descriptions(
    path: impl AsRef<Path>,
    tax: &Taxonomy,
) -> Result<Vec<TypeDescription>, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    parse_descriptions(&text, tax)
}

pub fn write_examples(mut w: impl Write, examples: &[Example]) -> std::io::Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut w, &ex.to_record())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_descriptions(mut w: impl Write, descs: &[TypeDescription]) -> std::io::Result<()> {
    for d in descs {
        let rec = DescriptionRecord {
            type_path: d.type_path.to_string(),
            descriptions: d.descriptions.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::TaxonomyOptions;

    fn tax() -> Taxonomy {
        Taxonomy::parse(
            "/person\n/person/actor\n/person/coach\n/other\n",
            TaxonomyOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn loads_vivien_leigh() {
        let text = r#"{"tokens":["Vivien","Leigh","won","an","Oscar"],"entity_start":0,"entity_end":2,"types":["/person","/person/actor"]}"#;
        let exs = parse_examples(text, &tax()).unwrap();
        assert_eq!(exs.len(), 1);
        assert_eq!(exs[0].entity_tokens().join(" "), "Vivien Leigh");
        assert_eq!(exs[0].id, "line-1");
        assert_eq!(exs[0].gold_types.len(), 2);
    }

    #[test]
    fn span_out_of_range() {
        let text = r#"{"tokens":["a","b"],"entity_start":1,"entity_end":3,"types":["/person"]}"#;
        assert!(matches!(
            parse_examples(text, &tax()),
            Err(CorpusError::Span { line: 1, .. })
        ));
        let text = r#"{"tokens":["a","b"],"entity_start":1,"entity_end":1,"types":["/person"]}"#;
        assert!(matches!(parse_examples(text, &tax()), Err(CorpusError::Span { .. })));
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(parse_examples("", &tax()).unwrap().is_empty());
    }

    #[test]
    fn bad_json_reports_line() {
        let text = "\n{\"tokens\": [}\n";
        assert!(matches!(
            parse_examples(text, &tax()),
            Err(CorpusError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let rec = r#"{"id":"x","tokens":["a"],"entity_start":0,"entity_end":1,"types":["/person"]}"#;
        let text = format!("{rec}\n{rec}\n");
        assert!(matches!(
            parse_examples(&text, &tax()),
            Err(CorpusError::DuplicateId { line: 2, .. })
        ));
    }

    #[test]
    fn other_types_dropped_from_gold() {
        let text = r#"{"tokens":["a"],"entity_start":0,"entity_end":1,"types":["/person","/other"]}
{"tokens":["b"],"entity_start":0,"entity_end":1,"types":["/other"]}"#;
        let exs = parse_examples(text, &tax()).unwrap();
        assert_eq!(exs.len(), 1);
        assert_eq!(exs[0].gold_types.len(), 1);
    }

    #[test]
    fn descriptions() {
        let d = parse_descriptions(
            r#"{"type":"/person/actor","descriptions":[["person","who","can","perform"]]}"#,
            &tax(),
        )
        .unwrap();
        assert_eq!(d[0].type_path.to_string(), "/person/actor");
        assert_eq!(d[0].descriptions[0].join(" "), "person who can perform");

        let err = parse_descriptions(r#"{"type":"/person/actor","descriptions":[]}"#, &tax());
        assert!(matches!(err, Err(CorpusError::Parse { .. })));
        let err = parse_descriptions(r#"{"type":"/person/actor","descriptions":[[]]}"#, &tax());
        assert!(matches!(err, Err(CorpusError::Parse { .. })));
    }

    #[test]
    fn write_then_parse_is_identity() {
        let text = r#"{"id":"a","tokens":["x","y"],"entity_start":1,"entity_end":2,"types":["/person","/person/coach"]}"#;
        let exs = parse_examples(text, &tax()).unwrap();
        let mut buf = Vec::new();
        write_examples(&mut buf, &exs).unwrap();
        assert_eq!(parse_examples(std::str::from_utf8(&buf).unwrap(), &tax()).unwrap(), exs);
    }
}
