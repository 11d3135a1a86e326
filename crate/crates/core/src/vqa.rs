//! Close-ended answer classes, the classifier head and accuracy with
//! unseen-class exclusion.

use std::collections::HashMap;

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

/// Retained answer classes with contiguous ids in lexicographic order.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerVocab {
    classes: Vec<String>,
    counts: Vec<usize>,
    min_occurrence: usize,
    lookup: HashMap<String, usize>,
}

impl AnswerVocab {
    pub fn new(mut entries: Vec<(String, usize)>, min_occurrence: usize) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::contract("answer vocabulary needs at least one class"));
        }
        entries.sort();
        let mut lookup = HashMap::with_capacity(entries.len());
        for (i, (class, count)) in entries.iter().enumerate() {
            if *count < min_occurrence {
                return Err(Error::contract(format!(
                    "class {class:?} has {count} train instances, below {min_occurrence}"
                )));
            }
            if lookup.insert(class.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate answer class {class:?}")));
            }
        }
        let (classes, counts) = entries.into_iter().unzip();
        Ok(AnswerVocab {
            classes,
            counts,
            min_occurrence,
            lookup,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn id(&self, class: &str) -> Option<usize> {
        self.lookup.get(class).copied()
    }

    pub fn class(&self, id: usize) -> Option<&str> {
        self.classes.get(id).map(String::as_str)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn count(&self, id: usize) -> usize {
        self.counts[id]
    }

    pub fn min_occurrence(&self) -> usize {
        self.min_occurrence
    }
}

/// Hidden projection, GELU, output projection. The output layer starts at
/// zero so an untrained head is uniform over classes.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub hidden: Linear,
    pub out: Linear,
    d_in: usize,
    classes: usize,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, d_in: usize, hidden: usize, classes: usize, rng: &mut R) -> Result<Self> {
        if classes == 0 || hidden == 0 {
            return Err(Error::Config("classifier needs positive hidden width and class count".into()));
        }
        let hidden_layer = Linear::new(ps, "vqa.hidden", d_in, hidden, true, rng)?;
        let out = Linear::new(ps, "vqa.out", hidden, classes, true, rng)?;
        *ps.get_mut(out.weight) = Tensor::zeros(&[hidden, classes]);
        Ok(ClassifierHead {
            hidden: hidden_layer,
            out,
            d_in,
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Logits `[rows x classes]` for pooled features `[rows x d_in]`.
    pub fn forward(&self, t: &mut Tape<'_>, pooled: Var) -> Result<Var> {
        let shape = t.shape(pooled);
        if shape.len() != 2 || shape[1] != self.d_in {
            return Err(Error::shape("classify_answer", shape, &[1, self.d_in]));
        }
        let h = self.hidden.forward(t, pooled)?;
        let h = t.gelu(h)?;
        self.out.forward(t, h)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub correct: usize,
    /// Close-ended samples whose class is retained.
    pub eligible: usize,
    /// Close-ended samples whose class is not retained.
    pub unseen: usize,
    /// Close-ended samples overall.
    pub total: usize,
}

/// `predictions[i]` is the predicted class id for eval sample `i`; entries
/// for open-ended samples are ignored.
pub fn accuracy_eval(predictions: &[Option<usize>], eval: &Dataset, answers: &AnswerVocab) -> Result<AccuracyReport> {
    if predictions.len() != eval.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} eval samples",
            predictions.len(),
            eval.len()
        )));
    }
    let (mut correct, mut eligible, mut unseen, mut total) = (0, 0, 0, 0);
    for (pred, s) in predictions.iter().zip(eval.iter()) {
        let Some(class) = s.class() else { continue };
        total += 1;
        let Some(truth) = answers.id(class) else {
            unseen += 1;
            continue;
        };
        eligible += 1;
        let pred = pred.ok_or_else(|| Error::contract(format!("no prediction for close-ended sample {}", s.id)))?;
        if pred == truth {
            correct += 1;
        }
    }
    if eligible == 0 {
        return Err(Error::contract("accuracy: no eval sample has a retained class"));
    }
    Ok(AccuracyReport {
        accuracy: correct as f64 / eligible as f64,
        correct,
        eligible,
        unseen,
        total,
    })
}
