//! Sentence-level BLEU and its average over a corpus.

use std::collections::HashMap;
use std::hash::Hash;

use serde::Serialize;

use crate::error::{Error, Result};

/// Replaces a zero higher-order match count when some lower order matched.
pub const SMOOTHING_EPSILON: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BleuMode {
    /// Geometric mean of precisions for orders `1..=n`.
    #[default]
    Cumulative,
    /// Precision of order `n` alone.
    Individual,
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    for w in seq.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// `(clipped matches, hypothesis n-grams)` for order `n`.
fn clipped<T: Eq + Hash>(hyp: &[T], refs: &[&[T]], n: usize) -> (usize, usize) {
    let hyp_counts = ngram_counts(hyp, n);
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in refs {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = hyp_counts
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

/// Closest reference length to `h`, shorter one on ties.
fn closest_ref_len<T>(refs: &[&[T]], h: usize) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&r| (r.abs_diff(h), r))
        .unwrap_or(0)
}

fn brevity_penalty(r: usize, h: usize) -> f64 {
    if h >= r {
        1.0
    } else {
        (1.0 - r as f64 / h as f64).exp()
    }
}

/// Smoothed modified precisions for orders `1..=n`; `None` when nothing
/// matches at order 1.
fn precisions<T: Eq + Hash>(hyp: &[T], refs: &[&[T]], n: usize) -> Option<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for order in 1..=n {
        let (m, total) = clipped(hyp, refs, order);
        if order == 1 && m == 0 {
            return None;
        }
        out.push(if m == 0 {
            SMOOTHING_EPSILON / total.max(1) as f64
        } else {
            m as f64 / total as f64
        });
    }
    Some(out)
}

/// Sentence BLEU of order `n` in `1..=4`.
pub fn bleu_n<T: Eq + Hash>(hyp: &[T], refs: &[&[T]], n: usize, mode: BleuMode) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::contract(format!("BLEU order must be 1..=4, got {n}")));
    }
    if refs.is_empty() {
        return Err(Error::contract("BLEU needs at least one reference"));
    }
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let Some(p) = precisions(hyp, refs, n) else {
        return Ok(0.0);
    };
    let bp = brevity_penalty(closest_ref_len(refs, hyp.len()), hyp.len());
    let score = match mode {
        BleuMode::Cumulative => {
            let mut log_sum = 0.0;
            for x in &p {
                log_sum += x.ln();
            }
            bp * (log_sum / n as f64).exp()
        }
        BleuMode::Individual => bp * p[n - 1],
    };
    Ok(score)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuReport {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    /// `[B1, B2, B3, B4]` of every pair.
    #[serde(skip)]
    pub per_sample: Vec<[f64; 4]>,
}

/// Mean sentence BLEU-1..4 over `(hypothesis, reference)` pairs.
pub fn corpus_eval<T: Eq + Hash>(pairs: &[(&[T], &[T])], mode: BleuMode) -> Result<BleuReport> {
    if pairs.is_empty() {
        return Err(Error::contract("BLEU evaluation needs at least one pair"));
    }
    let mut per_sample = Vec::with_capacity(pairs.len());
    let mut sums = [0.0; 4];
    for (hyp, reference) in pairs {
        let mut row = [0.0; 4];
        for (n, slot) in row.iter_mut().enumerate() {
            *slot = bleu_n(hyp, &[*reference], n + 1, mode)?;
            sums[n] += *slot;
        }
        per_sample.push(row);
    }
    let k = pairs.len() as f64;
    Ok(BleuReport {
        b1: sums[0] / k,
        b2: sums[1] / k,
        b3: sums[2] / k,
        b4: sums[3] / k,
        per_sample,
    })
}
