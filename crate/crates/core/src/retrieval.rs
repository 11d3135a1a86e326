//! Exact cosine top-k search over stored train-answer embeddings, and the
//! little-endian index file.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::tensor::kernels;

const MAGIC: &[u8; 4] = b"RNIX";
const VERSION: u32 = 1;

/// Unit-norm rows with their answer tokens and sample ids, in insertion
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerIndex {
    dim: usize,
    rows: Vec<f64>,
    tokens: Vec<Vec<TokenId>>,
    ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub score: f64,
    /// Insertion position in the index.
    pub row: usize,
    pub tokens: Vec<TokenId>,
    pub id: String,
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let norm = kernels::dot(v, v).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::contract("answer index: vector has zero or non-finite norm"));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

impl AnswerIndex {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::contract("answer index dimension must be positive"));
        }
        Ok(AnswerIndex {
            dim,
            rows: Vec::new(),
            tokens: Vec::new(),
            ids: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn tokens(&self, i: usize) -> &[TokenId] {
        &self.tokens[i]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    /// Appends `v / |v|` with its payload.
    pub fn add(&mut self, v: &[f64], tokens: Vec<TokenId>, id: impl Into<String>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::shape("index_add", &[self.dim], &[v.len()]));
        }
        self.rows.extend(unit(v)?);
        self.tokens.push(tokens);
        self.ids.push(id.into());
        Ok(())
    }

    /// Cosine similarity of `query` against every row, in row order.
    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(Error::shape("index_topk", &[self.dim], &[query.len()]));
        }
        let q = unit(query)?;
        Ok(self.rows.chunks(self.dim).map(|r| kernels::dot(&q, r)).collect())
    }

    /// The `min(k, len)` rows most similar to `query`, best first; equal
    /// scores keep insertion order.
    pub fn topk(&self, query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        if self.is_empty() {
            return Err(Error::contract("index_topk: index is empty"));
        }
        if k == 0 {
            return Err(Error::contract("index_topk: k must be at least 1"));
        }
        let scores = self.scores(query)?;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        Ok(order
            .into_iter()
            .take(k)
            .map(|row| Neighbor {
                score: scores[row],
                row,
                tokens: self.tokens[row].clone(),
                id: self.ids[row].clone(),
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for i in 0..self.len() {
            for x in self.row(i) {
                out.extend_from_slice(&x.to_le_bytes());
            }
            out.extend_from_slice(&(self.tokens[i].len() as u32).to_le_bytes());
            for t in &self.tokens[i] {
                out.extend_from_slice(&t.to_le_bytes());
            }
            out.extend_from_slice(&(self.ids[i].len() as u32).to_le_bytes());
            out.extend_from_slice(self.ids[i].as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("answer index: bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("answer index: unsupported version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        let mut idx = AnswerIndex::new(dim).map_err(|_| Error::Format("answer index: zero dimension".into()))?;
        for _ in 0..count {
            for _ in 0..dim {
                idx.rows.push(r.f64()?);
            }
            let n = r.u32()? as usize;
            let mut toks = Vec::with_capacity(n.min(r.remaining() / 4));
            for _ in 0..n {
                toks.push(r.u32()?);
            }
            idx.tokens.push(toks);
            let len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("answer index: id is not UTF-8".into()))?;
            idx.ids.push(id.to_owned());
        }
        if r.remaining() != 0 {
            return Err(Error::Format("answer index: trailing bytes".into()));
        }
        Ok(idx)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Little-endian cursor shared by the binary formats.
pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
