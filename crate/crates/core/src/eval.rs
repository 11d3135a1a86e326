//! Accuracy and BLEU over an evaluation split.

use serde_json::{json, Value};

use crate::data::{AnswerType, Dataset, TokenId, Vocab, BOS, EOS, PAD};
use crate::error::Result;
use crate::metrics::{corpus_eval, BleuReport};
use crate::model::RepsNet;
use crate::vqa::{accuracy_eval, AccuracyReport};

#[derive(Clone, Debug)]
pub struct Generation {
    pub id: String,
    pub hypothesis: Vec<TokenId>,
    pub reference: Vec<TokenId>,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: Option<AccuracyReport>,
    pub bleu: Option<BleuReport>,
    pub generations: Vec<Generation>,
    pub notes: Vec<String>,
}

/// Answer tokens without BOS, EOS and PAD.
pub fn strip_specials(tokens: &[TokenId]) -> Vec<TokenId> {
    tokens
        .iter()
        .copied()
        .filter(|&t| t != BOS && t != EOS && t != PAD)
        .collect()
}

pub fn evaluate(model: &RepsNet, eval: &Dataset) -> Result<EvalReport> {
    let mut notes = Vec::new();
    let has_close = eval.iter().any(|s| s.answer_type() == AnswerType::Close);
    let accuracy = match (&model.answers, has_close) {
        (_, false) => {
            notes.push("accuracy omitted: no close-ended samples".to_owned());
            None
        }
        (None, true) => {
            notes.push("accuracy omitted: model has no answer classes".to_owned());
            None
        }
        (Some(answers), true) => {
            let mut preds = Vec::with_capacity(eval.len());
            for s in eval.iter() {
                preds.push(match s.answer_type() {
                    AnswerType::Close => Some(model.infer_close(&s.image, &s.question)?),
                    AnswerType::Open => None,
                });
            }
            match accuracy_eval(&preds, eval, answers) {
                Ok(r) => Some(r),
                Err(_) => {
                    notes.push("accuracy omitted: every close-ended class is unseen".to_owned());
                    None
                }
            }
        }
    };
    let mut generations = Vec::new();
    for s in eval.iter().filter(|s| s.answer_type() == AnswerType::Open) {
        let out = model.infer_open(&s.image, &s.question)?;
        generations.push(Generation {
            id: s.id.clone(),
            hypothesis: strip_specials(&out.tokens),
            reference: strip_specials(s.answer_tokens()),
        });
    }
    let bleu = if generations.is_empty() {
        notes.push("bleu omitted: no open-ended samples".to_owned());
        None
    } else {
        let pairs: Vec<(&[TokenId], &[TokenId])> = generations
            .iter()
            .map(|g| (g.hypothesis.as_slice(), g.reference.as_slice()))
            .collect();
        Some(corpus_eval(&pairs, model.config.bleu_mode)?)
    };
    Ok(EvalReport {
        samples: eval.len(),
        accuracy,
        bleu,
        generations,
        notes,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Value {
        json!({
            "accuracy": self.accuracy.as_ref().map(|a| a.accuracy),
            "unseen": self.accuracy.as_ref().map_or(0, |a| a.unseen),
            "bleu": self.bleu.as_ref().map(|b| json!({"b1": b.b1, "b2": b.b2, "b3": b.b3, "b4": b.b4})),
            "samples": self.samples,
        })
    }

    pub fn to_text(&self, vocab: &Vocab) -> String {
        let mut s = format!("samples: {}\n", self.samples);
        if let Some(a) = &self.accuracy {
            s.push_str(&format!(
                "accuracy: {:.4} ({}/{} eligible, {} unseen excluded)\n",
                a.accuracy, a.correct, a.eligible, a.unseen
            ));
        }
        if let Some(b) = &self.bleu {
            s.push_str(&format!(
                "bleu: b1={:.4} b2={:.4} b3={:.4} b4={:.4} over {} answers\n",
                b.b1,
                b.b2,
                b.b3,
                b.b4,
                self.generations.len()
            ));
        }
        for note in &self.notes {
            s.push_str(&format!("note: {note}\n"));
        }
        for g in &self.generations {
            let text = vocab.decode(&g.hypothesis).unwrap_or_default();
            s.push_str(&format!("{}\t{}\n", g.id, text));
        }
        s
    }
}
