use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::vocab::{TokenId, Vocab};
use crate::encoder::ImageGrid;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerType {
    Close,
    Open,
}

/// Ground truth of a sample. Close-ended answers also carry the class
/// string tokenized, which serves as their answer text for alignment.
#[derive(Clone, Debug, PartialEq)]
pub enum Answer {
    Close { class: String, text: Vec<TokenId> },
    Open { text: Vec<TokenId> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageGrid,
    pub question: Vec<TokenId>,
    pub answer: Answer,
}

impl Sample {
    pub fn answer_type(&self) -> AnswerType {
        match self.answer {
            Answer::Close { .. } => AnswerType::Close,
            Answer::Open { .. } => AnswerType::Open,
        }
    }

    pub fn answer_tokens(&self) -> &[TokenId] {
        match &self.answer {
            Answer::Close { text, .. } | Answer::Open { text } => text,
        }
    }

    pub fn class(&self) -> Option<&str> {
        match &self.answer {
            Answer::Close { class, .. } => Some(class),
            Answer::Open { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    split: Split,
    samples: Vec<Sample>,
}

impl Dataset {
    /// Fails on an empty sample list or duplicate ids.
    pub fn new(split: Split, samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("dataset has no samples"));
        }
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::contract(format!("duplicate sample id {:?}", s.id)));
            }
        }
        Ok(Dataset { split, samples })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sample> {
        self.samples.iter()
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    pub fn from_records(split: Split, records: &[Record], vocab: &Vocab) -> Result<Self> {
        let samples = records
            .iter()
            .map(|r| r.to_sample(vocab))
            .collect::<Result<Vec<_>>>()?;
        Self::new(split, samples)
    }
}

/// One JSONL line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub image: Vec<Vec<u8>>,
    pub question: String,
    pub answer_type: AnswerType,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer_class: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer_text: Option<String>,
}

impl Record {
    pub fn image_grid(&self) -> Result<ImageGrid> {
        grid_from_rows(&self.image)
    }

    /// Text that feeds vocabulary construction: question plus answer.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.question.as_str())
            .chain(self.answer_class.as_deref())
            .chain(self.answer_text.as_deref())
    }

    pub fn to_sample(&self, vocab: &Vocab) -> Result<Sample> {
        let answer = match (self.answer_type, &self.answer_class, &self.answer_text) {
            (AnswerType::Close, Some(class), None) => Answer::Close {
                class: class.clone(),
                text: vocab.encode(class, true),
            },
            (AnswerType::Open, None, Some(text)) => Answer::Open {
                text: vocab.encode(text, true),
            },
            _ => {
                return Err(Error::contract(format!(
                    "record {:?}: answer fields do not match answer_type",
                    self.id
                )))
            }
        };
        Ok(Sample {
            id: self.id.clone(),
            image: self.image_grid()?,
            question: vocab.encode(&self.question, true),
            answer,
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

fn grid_from_rows(rows: &[Vec<u8>]) -> Result<ImageGrid> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(Error::contract("image must be a non-empty rectangular grid"));
    }
    ImageGrid::new(h, w, rows.iter().flatten().map(|&v| v as f64).collect())
}

/// Parses a JSONL file of [`Record`]s, reporting the offending line and field.
pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let value: Value = serde_json::from_str(line).map_err(|e| err(format!("malformed JSON: {e}")))?;
        out.push(parse_record(&value, false).map_err(err)?);
    }
    Ok(out)
}

/// Like [`read_records`] but answer fields are optional; used for inference
/// inputs that carry only an image and a question.
pub fn read_queries(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let value: Value = serde_json::from_str(line).map_err(|e| err(format!("malformed JSON: {e}")))?;
        let mut rec = parse_record(&value, true).map_err(err)?;
        if rec.id.is_empty() {
            rec.id = format!("query-{}", i + 1);
        }
        out.push(rec);
    }
    Ok(out)
}

fn parse_record(v: &Value, query: bool) -> std::result::Result<Record, String> {
    let obj = v.as_object().ok_or("line is not a JSON object")?;
    let string = |field: &str, required: bool| -> std::result::Result<Option<String>, String> {
        match obj.get(field) {
            None | Some(Value::Null) if !required => Ok(None),
            None | Some(Value::Null) => Err(format!("missing required field \"{field}\"")),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(format!("field \"{field}\" must be a string")),
        }
    };
    let id = string("id", !query)?.unwrap_or_default();
    let question = string("question", true)?.expect("required");
    let rows = obj
        .get("image")
        .ok_or("missing required field \"image\"")?
        .as_array()
        .ok_or("field \"image\" must be an array of rows")?;
    let mut image = Vec::with_capacity(rows.len());
    for row in rows {
        let row = row.as_array().ok_or("field \"image\" must be an array of rows")?;
        let mut px = Vec::with_capacity(row.len());
        for p in row {
            let p = p
                .as_u64()
                .filter(|&p| p <= 255)
                .ok_or("field \"image\" values must be integers in 0-255")?;
            px.push(p as u8);
        }
        image.push(px);
    }
    grid_from_rows(&image).map_err(|e| format!("field \"image\": {e}"))?;

    let answer_type = match string("answer_type", !query)? {
        Some(t) if t == "close" => AnswerType::Close,
        Some(t) if t == "open" => AnswerType::Open,
        Some(t) => return Err(format!("field \"answer_type\" must be \"close\" or \"open\", got {t:?}")),
        None => AnswerType::Open,
    };
    let answer_class = string("answer_class", false)?;
    let answer_text = string("answer_text", false)?;
    if !query {
        match answer_type {
            AnswerType::Close => {
                if answer_text.is_some() {
                    return Err("close-ended record must not have field \"answer_text\"".into());
                }
                if answer_class.is_none() {
                    return Err("missing required field \"answer_class\"".into());
                }
            }
            AnswerType::Open => {
                if answer_class.is_some() {
                    return Err("open-ended record must not have field \"answer_class\"".into());
                }
                if answer_text.is_none() {
                    return Err("missing required field \"answer_text\"".into());
                }
            }
        }
    }
    Ok(Record {
        id,
        image,
        question,
        answer_type,
        answer_class,
        answer_text,
    })
}

/// Reads `path` and tokenizes every record with `vocab`.
pub fn load_jsonl(path: &Path, vocab: &Vocab, split: Split) -> Result<Dataset> {
    let records = read_records(path)?;
    Dataset::from_records(split, &records, vocab)
}

pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_json_line());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}
