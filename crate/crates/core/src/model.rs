//! End-to-end wiring: encoder, alignment loss, answer index, decoder and
//! classifier, with the training loop and inference paths.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, RetrievalKey};
use crate::contrastive::encoder_loss;
use crate::data::{make_batches, AnswerType, Batch, Dataset, TokenId, Vocab, EOS};
use crate::decoder::{beam_decode, greedy_decode, Decoder};
use crate::encoder::{augment_image, Encoder, ImageGrid, Normalization};
use crate::error::{Error, Result};
use crate::retrieval::{AnswerIndex, Neighbor};
use crate::tensor::{AdamW, ParamSet, Reduction, Tape, Tensor, Var};
use crate::vqa::{argmax, AnswerVocab, ClassifierHead};

/// Mixes a seed with a counter (splitmix64 finalizer).
pub fn mix_seed(seed: u64, n: u64) -> u64 {
    let mut z = seed ^ n.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct RepsNet {
    pub config: Config,
    pub params: ParamSet,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub classifier: Option<ClassifierHead>,
    pub vocab: Vocab,
    pub answers: Option<AnswerVocab>,
    pub index: Option<AnswerIndex>,
}

/// Loss terms of one batch on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub contrastive: Option<Var>,
    pub classification: Option<Var>,
    pub generation: Option<Var>,
}

/// Scalar values of [`LossTerms`]; absent terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub contrastive: f64,
    pub classification: f64,
    pub generation: f64,
}

impl LossTerms {
    pub fn values(&self, t: &Tape<'_>) -> LossValues {
        let get = |v: Option<Var>| v.map_or(0.0, |v| t.value(v).data()[0]);
        LossValues {
            total: get(Some(self.total)),
            contrastive: get(self.contrastive),
            classification: get(self.classification),
            generation: get(self.generation),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    /// Mean over the epoch's batches.
    pub loss: LossValues,
}

impl EpochStats {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} steps={} total={:.6} contrastive={:.6} classification={:.6} generation={:.6}",
            self.epoch, self.steps, self.loss.total, self.loss.contrastive, self.loss.classification, self.loss.generation
        )
    }
}

/// Result of running the encoder on one image/question pair.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `n_x x d_x` fused features.
    pub fused: Tensor,
    /// Unit-norm fused embedding.
    pub embedding: Vec<f64>,
    /// Unit-norm embedding of the image features alone.
    pub image_embedding: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct OpenAnswer {
    /// Generated tokens without BOS or the final EOS.
    pub tokens: Vec<TokenId>,
    pub neighbors: Vec<Neighbor>,
}

impl RepsNet {
    /// Fresh weights drawn from `config.seed`. `vocab_size`,
    /// `vocab_fingerprint` and `num_classes` are taken from the arguments.
    pub fn new(mut config: Config, vocab: Vocab, answers: Option<AnswerVocab>) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.vocab_fingerprint = vocab.fingerprint();
        config.num_classes = answers.as_ref().map_or(0, AnswerVocab::len);
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let encoder = Encoder::new(config.encoder(), &mut params, &mut rng)?;
        let decoder = Decoder::new(config.decoder(), &mut params, &mut rng)?;
        let classifier = match config.num_classes {
            0 => None,
            n => Some(ClassifierHead::new(&mut params, config.d_x, config.classifier_hidden, n, &mut rng)?),
        };
        Ok(RepsNet {
            config,
            params,
            encoder,
            decoder,
            classifier,
            vocab,
            answers,
            index: None,
        })
    }

    fn class_target(&self, class: Option<&String>) -> Option<usize> {
        let answers = self.answers.as_ref()?;
        answers.id(class?)
    }

    /// Builds the training graph for a batch on `t` (which must read
    /// `self.params`). `aug_seed` drives random erasing.
    pub fn forward_train(&self, t: &mut Tape<'_>, batch: &Batch, aug_seed: u64) -> Result<LossTerms> {
        let cfg = &self.config;
        let norm = Normalization::default();
        let use_contrastive = cfg.contrastive_weight > 0.0;
        let mut img_rows = Vec::with_capacity(batch.len());
        let mut txt_rows = Vec::with_capacity(batch.len());
        let mut class_logits = Vec::new();
        let mut class_targets = Vec::new();
        let mut gen_sum: Option<Var> = None;
        let mut gen_count = 0;
        for i in 0..batch.len() {
            let img = augment_image(&batch.images[i], norm, mix_seed(aug_seed, i as u64), cfg.augment);
            let q = batch.question(i);
            let q_keep = vec![true; q.len()];
            let pair = self.encoder.encode_pair(t, &img, q, &q_keep)?;
            let answer = batch.answer(i);
            if use_contrastive {
                img_rows.push(pair.embedding);
                txt_rows.push(self.encoder.embed_answer(t, answer, &vec![true; answer.len()])?);
            }
            match batch.kinds[i] {
                AnswerType::Close => {
                    if let (Some(head), Some(target)) = (&self.classifier, self.class_target(batch.classes[i].as_ref())) {
                        let pooled = t.mean_rows(pair.fused, None)?;
                        class_logits.push(head.forward(t, pooled)?);
                        class_targets.push(Some(target));
                    }
                }
                AnswerType::Open => {
                    let context = if cfg.k > 0 {
                        self.decoder.embed_context(t, &[answer])?
                    } else {
                        None
                    };
                    let (loss, n) = self.decoder.sequence_loss(t, answer, Some(pair.fused), context)?;
                    gen_count += n;
                    gen_sum = Some(match gen_sum {
                        Some(acc) => t.add(acc, loss)?,
                        None => loss,
                    });
                }
            }
        }
        let contrastive = if use_contrastive {
            let x = t.concat_rows(&img_rows)?;
            let y = t.concat_rows(&txt_rows)?;
            Some(encoder_loss(t, x, y, &cfg.contrastive())?)
        } else {
            None
        };
        let classification = if class_logits.is_empty() {
            None
        } else {
            let logits = t.concat_rows(&class_logits)?;
            Some(t.cross_entropy(logits, &class_targets, Reduction::Mean)?)
        };
        let generation = match gen_sum {
            Some(s) => Some(t.scale(s, 1.0 / gen_count as f64)?),
            None => None,
        };
        let mut total: Option<Var> = None;
        for term in [contrastive, classification, generation].into_iter().flatten() {
            total = Some(match total {
                Some(acc) => t.add(acc, term)?,
                None => term,
            });
        }
        let total = total.ok_or_else(|| Error::contract("batch produced no loss term"))?;
        Ok(LossTerms {
            total,
            contrastive,
            classification,
            generation,
        })
    }

    /// Batch loss values without gradients.
    pub fn batch_loss(&self, batch: &Batch, aug_seed: u64) -> Result<LossValues> {
        let mut t = Tape::new(&self.params);
        let terms = self.forward_train(&mut t, batch, aug_seed)?;
        Ok(terms.values(&t))
    }

    /// One optimizer step on a batch; returns the pre-step losses.
    pub fn train_step(&mut self, opt: &mut AdamW, batch: &Batch, aug_seed: u64) -> Result<LossValues> {
        let (values, grads) = {
            let mut t = Tape::new(&self.params);
            let terms = self.forward_train(&mut t, batch, aug_seed)?;
            let grads = t.backward(terms.total)?;
            (terms.values(&t), grads.into_param_grads(self.params.len()))
        };
        opt.step(&mut self.params, &grads)?;
        Ok(values)
    }

    /// Runs `config.epochs` epochs over `train`, calling `on_epoch` after
    /// each one. Batch order and augmentation derive from `config.seed`.
    pub fn fit(&mut self, train: &Dataset, mut on_epoch: impl FnMut(&EpochStats)) -> Result<Vec<EpochStats>> {
        let mut opt = AdamW::new(&self.params, self.config.optimizer());
        let mut history = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            let epoch_seed = mix_seed(self.config.seed, 1 + epoch as u64);
            let batches = make_batches(train, self.config.batch_size, epoch_seed, true)?;
            let mut sum = LossValues::default();
            for (b, batch) in batches.iter().enumerate() {
                let v = self.train_step(&mut opt, batch, mix_seed(epoch_seed, b as u64))?;
                sum.total += v.total;
                sum.contrastive += v.contrastive;
                sum.classification += v.classification;
                sum.generation += v.generation;
            }
            let n = batches.len() as f64;
            let stats = EpochStats {
                epoch: epoch + 1,
                steps: batches.len(),
                loss: LossValues {
                    total: sum.total / n,
                    contrastive: sum.contrastive / n,
                    classification: sum.classification / n,
                    generation: sum.generation / n,
                },
            };
            on_epoch(&stats);
            history.push(stats);
        }
        Ok(history)
    }

    /// Evaluation-mode encoding of an unnormalized image and question.
    pub fn encode(&self, image: &ImageGrid, question: &[TokenId]) -> Result<Encoded> {
        let img = augment_image(image, Normalization::default(), 0, false);
        let mut t = Tape::new(&self.params);
        let keep = vec![true; question.len()];
        let pair = self.encoder.encode_pair(&mut t, &img, question, &keep)?;
        let x = self.encoder.encode_image(&mut t, &img)?;
        let image_embedding = self
            .encoder
            .project_embed(&mut t, x, None, self.encoder.image_projection())?;
        Ok(Encoded {
            fused: t.value(pair.fused).clone(),
            embedding: t.value(pair.embedding).data().to_vec(),
            image_embedding: t.value(image_embedding).data().to_vec(),
        })
    }

    /// Unit-norm embedding of an answer token sequence.
    pub fn embed_answer(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        let mut t = Tape::new(&self.params);
        let y = self.encoder.embed_answer(&mut t, tokens, &vec![true; tokens.len()])?;
        Ok(t.value(y).data().to_vec())
    }

    /// Index of every open-ended train answer, in dataset order.
    pub fn build_index(&self, train: &Dataset) -> Result<AnswerIndex> {
        let mut idx = AnswerIndex::new(self.config.d)?;
        for s in train.iter().filter(|s| s.answer_type() == AnswerType::Open) {
            let tokens = crate::data::cap_tokens(s.answer_tokens(), crate::data::MAX_ANSWER_TOKENS);
            let y = self.embed_answer(&tokens)?;
            idx.add(&y, tokens, s.id.clone())?;
        }
        if idx.is_empty() {
            return Err(Error::contract("answer index needs open-ended train samples"));
        }
        Ok(idx)
    }

    fn query_key<'a>(&self, enc: &'a Encoded) -> &'a [f64] {
        match self.config.retrieval_key {
            RetrievalKey::Fused => &enc.embedding,
            RetrievalKey::Image => &enc.image_embedding,
        }
    }

    /// Nearest stored answers to an encoded query.
    pub fn retrieve(&self, enc: &Encoded, k: usize) -> Result<Vec<Neighbor>> {
        let idx = self
            .index
            .as_ref()
            .ok_or_else(|| Error::contract("no answer index loaded"))?;
        idx.topk(self.query_key(enc), k)
    }

    /// Decodes with explicit fused features and prior-context answers.
    pub fn decode_with_context(&self, fused: &Tensor, context: &[Vec<TokenId>]) -> Result<Vec<TokenId>> {
        let cons = self.config.generation();
        let stepper = self.decoder.stepper(&self.params, Some(fused), context);
        let mut out = if cons.beam > 1 {
            beam_decode(&stepper, &cons)?
        } else {
            greedy_decode(&stepper, &cons)?
        };
        if out.last() == Some(&EOS) {
            out.pop();
        }
        Ok(out)
    }

    /// Encode, retrieve `config.k` answers, decode.
    pub fn infer_open(&self, image: &ImageGrid, question: &[TokenId]) -> Result<OpenAnswer> {
        let enc = self.encode(image, question)?;
        let neighbors = if self.config.k > 0 {
            self.retrieve(&enc, self.config.k)?
        } else {
            Vec::new()
        };
        let context: Vec<Vec<TokenId>> = neighbors.iter().map(|n| n.tokens.clone()).collect();
        let tokens = self.decode_with_context(&enc.fused, &context)?;
        Ok(OpenAnswer { tokens, neighbors })
    }

    /// Class logits for an image and question.
    pub fn class_logits(&self, image: &ImageGrid, question: &[TokenId]) -> Result<Vec<f64>> {
        let head = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::contract("model has no answer classes"))?;
        let img = augment_image(image, Normalization::default(), 0, false);
        let mut t = Tape::new(&self.params);
        let keep = vec![true; question.len()];
        let pair = self.encoder.encode_pair(&mut t, &img, question, &keep)?;
        let pooled = t.mean_rows(pair.fused, None)?;
        let logits = head.forward(&mut t, pooled)?;
        Ok(t.value(logits).data().to_vec())
    }

    pub fn infer_close(&self, image: &ImageGrid, question: &[TokenId]) -> Result<usize> {
        Ok(argmax(&self.class_logits(image, question)?))
    }

    /// Teacher-forced mean loss of one answer given fused features and
    /// explicit context answers.
    pub fn answer_loss(&self, fused: &Tensor, answer: &[TokenId], context: &[Vec<TokenId>]) -> Result<f64> {
        let mut t = Tape::new(&self.params);
        let x = t.constant(fused.clone());
        let c = self.decoder.embed_context(&mut t, context)?;
        let (loss, n) = self.decoder.sequence_loss(&mut t, answer, Some(x), c)?;
        Ok(t.value(loss).data()[0] / n as f64)
    }
}
