use std::collections::BTreeMap;

use super::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::vqa::AnswerVocab;

/// Outcome of minimum-occurrence filtering.
#[derive(Clone, Debug)]
pub struct FilteredSplits {
    pub train: Dataset,
    /// Unchanged eval split; unseen samples stay in place and are skipped
    /// by accuracy evaluation.
    pub eval: Dataset,
    pub answers: AnswerVocab,
    pub removed_train: usize,
    pub unseen_eval: usize,
}

/// Per-class counts of close-ended train samples.
pub fn class_counts(ds: &Dataset) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for s in ds.iter() {
        if let Some(c) = s.class() {
            *counts.entry(c.to_owned()).or_insert(0) += 1;
        }
    }
    counts
}

/// Drops close-ended classes with fewer than `min_occurrence` train samples
/// (and their train samples). Eval samples whose class is not retained are
/// counted as unseen. Open-ended samples pass through untouched.
pub fn filter_min_occurrence(train: &Dataset, eval: &Dataset, min_occurrence: usize) -> Result<FilteredSplits> {
    let counts = class_counts(train);
    if counts.is_empty() {
        return Err(Error::contract("minimum-occurrence filtering needs close-ended train samples"));
    }
    let retained: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_occurrence)
        .collect();
    if retained.is_empty() {
        return Err(Error::contract(format!(
            "every answer class has fewer than {min_occurrence} train instances"
        )));
    }
    let answers = AnswerVocab::new(retained, min_occurrence)?;
    let kept: Vec<_> = train
        .iter()
        .filter(|s| s.class().map_or(true, |c| answers.id(c).is_some()))
        .cloned()
        .collect();
    let removed_train = train.len() - kept.len();
    let unseen_eval = eval
        .iter()
        .filter(|s| s.class().is_some_and(|c| answers.id(c).is_none()))
        .count();
    Ok(FilteredSplits {
        train: Dataset::new(Split::Train, kept)?,
        eval: eval.clone(),
        answers,
        removed_train,
        unseen_eval,
    })
}
