//! Binary parameter file plus the sidecar files of a checkpoint directory.
//!
//! A checkpoint directory holds `model.ckpt` (config and named tensors),
//! `vocab.txt`, `classes.txt` when the model has answer classes, and
//! `index.rnix` once an answer index was built.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::RepsNet;
use crate::retrieval::{AnswerIndex, Reader};
use crate::tensor::{ParamSet, Tensor};
use crate::vqa::AnswerVocab;

const MAGIC: &[u8; 4] = b"RSNC";
const VERSION: u32 = 1;

pub const MODEL_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CLASSES_FILE: &str = "classes.txt";
pub const INDEX_FILE: &str = "index.rnix";

pub fn encode_params(config: &Config, params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = config.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<(Config, ParamSet)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("checkpoint: bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("checkpoint: unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("checkpoint: config is not UTF-8".into()))?;
    let config = Config::parse(text)?;
    let count = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Format("checkpoint: tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let numel = numel
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| Error::Format(format!("checkpoint: tensor {name} truncated")))?;
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("checkpoint: tensor {name}: {e}")))?;
        params.add(name, t)?;
    }
    if r.remaining() != 0 {
        return Err(Error::Format("checkpoint: trailing bytes".into()));
    }
    Ok((config, params))
}

fn classes_text(answers: &AnswerVocab) -> String {
    let mut s = format!("# min_occurrence = {}\n", answers.min_occurrence());
    for (i, c) in answers.classes().iter().enumerate() {
        s.push_str(&format!("{}\t{}\n", answers.count(i), c));
    }
    s
}

fn parse_classes(path: &Path) -> Result<AnswerVocab> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    let min_occurrence = lines
        .next()
        .and_then(|l| l.strip_prefix("# min_occurrence = "))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing min_occurrence header"))?;
    let mut entries = Vec::new();
    for line in lines {
        let (count, class) = line.split_once('\t').ok_or_else(|| bad("expected count<TAB>class"))?;
        let count = count.parse().map_err(|_| bad("bad class count"))?;
        entries.push((class.to_owned(), count));
    }
    AnswerVocab::new(entries, min_occurrence)
}

/// Writes every artifact of `model` into `dir`, creating it if needed.
pub fn save(model: &RepsNet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MODEL_FILE), encode_params(&model.config, &model.params))?;
    model.vocab.save(&dir.join(VOCAB_FILE))?;
    if let Some(answers) = &model.answers {
        fs::write(dir.join(CLASSES_FILE), classes_text(answers))?;
    }
    if let Some(idx) = &model.index {
        idx.save(&dir.join(INDEX_FILE))?;
    }
    Ok(())
}

pub fn index_path(dir: &Path) -> PathBuf {
    dir.join(INDEX_FILE)
}

/// Restores a model. The index is loaded when present.
pub fn load(dir: &Path) -> Result<RepsNet> {
    let (config, params) = decode_params(&fs::read(dir.join(MODEL_FILE))?)?;
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    if vocab.len() != config.vocab_size || vocab.fingerprint() != config.vocab_fingerprint {
        return Err(Error::contract(format!(
            "vocabulary in {} does not match the checkpoint",
            dir.display()
        )));
    }
    let answers = if config.num_classes > 0 {
        let a = parse_classes(&dir.join(CLASSES_FILE))?;
        if a.len() != config.num_classes {
            return Err(Error::contract("answer classes do not match the checkpoint"));
        }
        Some(a)
    } else {
        None
    };
    let mut model = RepsNet::new(config.clone(), vocab, answers)?;
    if model.config != config {
        return Err(Error::contract("checkpoint config is inconsistent with its sidecar files"));
    }
    model.params.load_from(&params)?;
    let idx_path = index_path(dir);
    if idx_path.exists() {
        let idx = AnswerIndex::load(&idx_path)?;
        if idx.dim() != model.config.d {
            return Err(Error::contract("answer index width does not match the model"));
        }
        model.index = Some(idx);
    }
    Ok(model)
}
