//! Vocabulary, JSONL records, minimum-occurrence filtering, batching and
//! the synthetic corpus.

mod batch;
mod dataset;
mod filter;
pub mod synth;
mod vocab;

pub use batch::{cap_tokens, make_batches, Batch, MAX_ANSWER_TOKENS, MAX_QUESTION_TOKENS};
pub use dataset::{
    load_jsonl, read_queries, read_records, write_jsonl, Answer, AnswerType, Dataset, Record, Sample, Split,
};
pub use filter::{class_counts, filter_min_occurrence, FilteredSplits};
pub use synth::{generate_synthetic, SynthMode, SynthSpec, SyntheticCorpus};
pub use vocab::{normalize, TokenId, Vocab, BOS, EOS, PAD, UNK};
