use std::collections::HashSet;

use crate::data::{TokenId, BOS, EOS, PAD};
use crate::error::{Error, Result};

/// Anything that scores the next token after a BOS-less prefix.
pub trait NextToken {
    fn vocab_size(&self) -> usize;
    fn next_logits(&self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenerationConstraints {
    /// Tokens that must be emitted before EOS becomes legal.
    pub min_len: usize,
    /// Size of n-grams that may not repeat; 0 disables the rule.
    pub no_repeat_ngram: usize,
    /// Upper bound on emitted tokens, EOS included.
    pub max_tokens: usize,
    /// 1 means greedy.
    pub beam: usize,
}

impl Default for GenerationConstraints {
    fn default() -> Self {
        GenerationConstraints {
            min_len: 5,
            no_repeat_ngram: 2,
            max_tokens: crate::data::MAX_ANSWER_TOKENS,
            beam: 1,
        }
    }
}

impl GenerationConstraints {
    pub fn validate(&self) -> Result<()> {
        if self.min_len >= self.max_tokens {
            return Err(Error::Config(format!(
                "min_len {} must be below max_tokens {}",
                self.min_len, self.max_tokens
            )));
        }
        if self.beam == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sets forbidden entries to -inf: PAD and BOS always, EOS before
/// `min_len`, and any token that would repeat an n-gram of `seq`.
fn apply_masks(logits: &mut [f64], seq: &[TokenId], cons: &GenerationConstraints) -> Result<()> {
    for special in [PAD, BOS] {
        if let Some(l) = logits.get_mut(special as usize) {
            *l = f64::NEG_INFINITY;
        }
    }
    if seq.len() < cons.min_len {
        if let Some(l) = logits.get_mut(EOS as usize) {
            *l = f64::NEG_INFINITY;
        }
    }
    let n = cons.no_repeat_ngram;
    if n > 0 && seq.len() >= n - 1 {
        let tail = &seq[seq.len() + 1 - n..];
        for w in seq.windows(n) {
            if &w[..n - 1] == tail {
                logits[w[n - 1] as usize] = f64::NEG_INFINITY;
            }
        }
    }
    if logits.iter().all(|l| *l == f64::NEG_INFINITY) {
        return Err(Error::contract("generation: every token is masked"));
    }
    if logits.iter().any(|l| l.is_nan()) {
        return Err(Error::NonFinite { op: "generation logits" });
    }
    Ok(())
}

fn checked_logits<M: NextToken + ?Sized>(model: &M, seq: &[TokenId], cons: &GenerationConstraints) -> Result<Vec<f64>> {
    let mut logits = model.next_logits(seq)?;
    if logits.len() != model.vocab_size() {
        return Err(Error::shape("generation logits", &[logits.len()], &[model.vocab_size()]));
    }
    apply_masks(&mut logits, seq, cons)?;
    Ok(logits)
}

/// Argmax decoding under the constraints. The result excludes BOS and
/// ends with EOS unless `max_tokens` ran out first.
pub fn greedy_decode<M: NextToken + ?Sized>(model: &M, cons: &GenerationConstraints) -> Result<Vec<TokenId>> {
    cons.validate()?;
    let mut seq = Vec::new();
    while seq.len() < cons.max_tokens {
        let logits = checked_logits(model, &seq, cons)?;
        let next = crate::vqa::argmax(&logits) as TokenId;
        seq.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(seq)
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits {
        sum += (l - max).exp();
    }
    let lse = max + sum.ln();
    logits.iter().map(|l| l - lse).collect()
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<TokenId>,
    logprob: f64,
}

impl Hyp {
    fn normalized(&self) -> f64 {
        self.logprob / self.tokens.len() as f64
    }
}

/// Beam search with length-normalized final scores (sum of log-probs
/// divided by length). Candidates are ranked by cumulative log-prob, then
/// by token id, then by parent beam order.
pub fn beam_decode<M: NextToken + ?Sized>(model: &M, cons: &GenerationConstraints) -> Result<Vec<TokenId>> {
    cons.validate()?;
    let width = cons.beam;
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        logprob: 0.0,
    }];
    let mut done: Vec<Hyp> = Vec::new();
    for _ in 0..cons.max_tokens {
        let mut cands: Vec<(f64, TokenId, usize)> = Vec::new();
        for (b, hyp) in live.iter().enumerate() {
            let logits = checked_logits(model, &hyp.tokens, cons)?;
            for (tok, lp) in log_softmax(&logits).into_iter().enumerate() {
                if lp != f64::NEG_INFINITY {
                    cands.push((hyp.logprob + lp, tok as TokenId, b));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(width);
        for (score, tok, b) in cands.into_iter().take(width) {
            let mut tokens = live[b].tokens.clone();
            tokens.push(tok);
            let hyp = Hyp { tokens, logprob: score };
            if tok == EOS {
                done.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
        if live.is_empty() || done.len() >= width {
            break;
        }
    }
    let mut pool: Vec<Hyp> = if done.is_empty() { live } else { done };
    let mut best = pool.swap_remove(0);
    for h in pool {
        if h.normalized() > best.normalized() {
            best = h;
        }
    }
    Ok(best.tokens)
}

/// True when no n-gram of size `n` occurs twice in `seq`.
pub fn has_no_repeated_ngram(seq: &[TokenId], n: usize) -> bool {
    let mut seen = HashSet::new();
    seq.windows(n).all(|w| seen.insert(w))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<f64>);

    impl NextToken for Fixed {
        fn vocab_size(&self) -> usize {
            self.0.len()
        }
        fn next_logits(&self, _: &[TokenId]) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn eos_lover_emits_min_len_then_eos() {
        // EOS favoured, then 4, 5, 6, ...
        let logits = vec![0.0, 0.0, 10.0, 0.0, 5.0, 4.0, 3.0, 2.0, 1.0];
        let cons = GenerationConstraints::default();
        let out = greedy_decode(&Fixed(logits), &cons).unwrap();
        assert_eq!(out.len(), cons.min_len + 1);
        assert_eq!(*out.last().unwrap(), EOS);
        assert!(out[..cons.min_len].iter().all(|&t| t != EOS));
        assert!(has_no_repeated_ngram(&out, 2));
    }

    #[test]
    fn degenerate_constraints_error() {
        let cons = GenerationConstraints {
            min_len: 5,
            no_repeat_ngram: 2,
            max_tokens: 10,
            beam: 1,
        };
        // one content token: the third step would repeat 4 -> 4 while EOS
        // is still illegal.
        let err = greedy_decode(&Fixed(vec![0.0, 0.0, 0.0, f64::NEG_INFINITY, 1.0]), &cons);
        assert!(err.is_err());
        assert!(GenerationConstraints { min_len: 10, ..cons }.validate().is_err());
    }

    #[test]
    fn max_tokens_caps_length() {
        let cons = GenerationConstraints {
            min_len: 2,
            no_repeat_ngram: 0,
            max_tokens: 4,
            beam: 1,
        };
        let out = greedy_decode(&Fixed(vec![0.0, 0.0, -5.0, 0.0, 3.0]), &cons).unwrap();
        assert_eq!(out, vec![4, 4, 4, 4]);
        let beam = beam_decode(&Fixed(vec![0.0, 0.0, -5.0, 0.0, 3.0]), &GenerationConstraints { beam: 3, ..cons }).unwrap();
        assert!(beam.len() <= 4);
    }
}
