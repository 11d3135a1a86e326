use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::{AnswerType, Dataset};
use super::vocab::{TokenId, EOS, PAD};
use crate::encoder::ImageGrid;
use crate::error::{Error, Result};

/// Hard cap on question length.
pub const MAX_QUESTION_TOKENS: usize = 12;
/// Hard cap on answer length.
pub const MAX_ANSWER_TOKENS: usize = 200;

/// Truncates to `cap` tokens, forcing EOS into the last slot when cut.
pub fn cap_tokens(ids: &[TokenId], cap: usize) -> Vec<TokenId> {
    if ids.len() <= cap {
        return ids.to_vec();
    }
    let mut out = ids[..cap].to_vec();
    out[cap - 1] = EOS;
    out
}

fn pad_all(seqs: Vec<Vec<TokenId>>) -> (Vec<Vec<TokenId>>, Vec<Vec<bool>>, Vec<usize>) {
    let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
    let padded: Vec<Vec<TokenId>> = seqs
        .into_iter()
        .map(|mut s| {
            s.resize(width, PAD);
            s
        })
        .collect();
    let masks = padded
        .iter()
        .map(|s| s.iter().map(|&t| t != PAD).collect())
        .collect();
    (padded, masks, lens)
}

/// A padded group of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Positions of the samples in their dataset.
    pub indices: Vec<usize>,
    pub ids: Vec<String>,
    pub images: Vec<ImageGrid>,
    pub questions: Vec<Vec<TokenId>>,
    pub question_mask: Vec<Vec<bool>>,
    pub question_lens: Vec<usize>,
    pub answers: Vec<Vec<TokenId>>,
    pub answer_mask: Vec<Vec<bool>>,
    pub answer_lens: Vec<usize>,
    pub kinds: Vec<AnswerType>,
    pub classes: Vec<Option<String>>,
}

impl Batch {
    pub fn from_indices(ds: &Dataset, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let samples: Vec<_> = indices
            .iter()
            .map(|&i| {
                ds.samples()
                    .get(i)
                    .ok_or_else(|| Error::contract(format!("sample index {i} out of range")))
            })
            .collect::<Result<_>>()?;
        let (questions, question_mask, question_lens) = pad_all(
            samples
                .iter()
                .map(|s| cap_tokens(&s.question, MAX_QUESTION_TOKENS))
                .collect(),
        );
        let (answers, answer_mask, answer_lens) = pad_all(
            samples
                .iter()
                .map(|s| cap_tokens(s.answer_tokens(), MAX_ANSWER_TOKENS))
                .collect(),
        );
        Ok(Batch {
            indices: indices.to_vec(),
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            images: samples.iter().map(|s| s.image.clone()).collect(),
            questions,
            question_mask,
            question_lens,
            answers,
            answer_mask,
            answer_lens,
            kinds: samples.iter().map(|s| s.answer_type()).collect(),
            classes: samples.iter().map(|s| s.class().map(str::to_owned)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Unpadded question tokens of sample `i`.
    pub fn question(&self, i: usize) -> &[TokenId] {
        &self.questions[i][..self.question_lens[i]]
    }

    /// Unpadded answer tokens of sample `i`.
    pub fn answer(&self, i: usize) -> &[TokenId] {
        &self.answers[i][..self.answer_lens[i]]
    }
}

/// Splits a dataset into batches; the final batch may be short. With
/// `shuffle`, the order is a permutation drawn from `seed`.
pub fn make_batches(ds: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::contract("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|chunk| Batch::from_indices(ds, chunk))
        .collect()
}
