//! Autoregressive transformer decoder whose attention also reads image
//! features and prior answer context as extra key/value rows.

mod generate;

pub use generate::{beam_decode, greedy_decode, has_no_repeated_ngram, GenerationConstraints, NextToken};

use rand::Rng;

use crate::data::{TokenId, BOS};
use crate::error::{Error, Result};
use crate::nn::{attend, LayerNorm, Linear, Mlp};
use crate::tensor::{ParamId, ParamSet, Reduction, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    /// Total model width `heads * d_head`; also the context row width.
    pub width: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Image feature width.
    pub d_x: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 2,
            heads: 2,
            width: 64,
            max_len: crate::data::MAX_ANSWER_TOKENS,
            vocab_size: 64,
            d_x: 32,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.max_len < 6 {
            return Err(Error::Config(format!("decoder max_len {} leaves no room for 5 tokens", self.max_len)));
        }
        if self.layers == 0 || self.vocab_size < 5 || self.d_x == 0 {
            return Err(Error::Config("decoder needs layers, a vocabulary and an image width".into()));
        }
        Ok(())
    }
}

/// Projections of one multimodal attention layer.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k_self: Linear,
    pub v_self: Linear,
    pub k_image: Linear,
    pub v_image: Linear,
    pub k_context: Linear,
    pub v_context: Linear,
    pub out: Linear,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, width: usize, d_x: usize, rng: &mut R) -> Result<Self> {
        let lin = |ps: &mut ParamSet, part: &str, d_in: usize, bias: bool, rng: &mut R| {
            Linear::new(ps, &format!("{name}.{part}"), d_in, width, bias, rng)
        };
        Ok(AttentionParams {
            q: lin(ps, "q", width, false, rng)?,
            k_self: lin(ps, "k_self", width, false, rng)?,
            v_self: lin(ps, "v_self", width, false, rng)?,
            k_image: lin(ps, "k_image", d_x, false, rng)?,
            v_image: lin(ps, "v_image", d_x, false, rng)?,
            k_context: lin(ps, "k_context", width, false, rng)?,
            v_context: lin(ps, "v_context", width, false, rng)?,
            out: lin(ps, "out", width, true, rng)?,
        })
    }
}

/// Attention of `y[n_y x D]` over the row-concatenation of its own keys,
/// the image keys and the context keys. Only the token block is causal.
pub fn multimodal_attention(
    t: &mut Tape<'_>,
    p: &AttentionParams,
    heads: usize,
    y: Var,
    image: Option<Var>,
    context: Option<Var>,
) -> Result<Var> {
    let n_y = t.shape(y)[0];
    let q = p.q.forward(t, y)?;
    let mut keys = vec![p.k_self.forward(t, y)?];
    let mut values = vec![p.v_self.forward(t, y)?];
    let mut n_cond = 0;
    if let Some(x) = image {
        keys.push(p.k_image.forward(t, x)?);
        values.push(p.v_image.forward(t, x)?);
        n_cond += t.shape(x)[0];
    }
    if let Some(c) = context {
        keys.push(p.k_context.forward(t, c)?);
        values.push(p.v_context.forward(t, c)?);
        n_cond += t.shape(c)[0];
    }
    let (k, v) = if keys.len() == 1 {
        (keys[0], values[0])
    } else {
        (t.concat_rows(&keys)?, t.concat_rows(&values)?)
    };
    let m = n_y + n_cond;
    let keep: Vec<bool> = (0..n_y)
        .flat_map(|i| (0..m).map(move |j| j >= n_y || j <= i))
        .collect();
    let a = attend(t, q, k, v, heads, &keep)?;
    p.out.forward(t, a)
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: AttentionParams,
    ln2: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(config: DecoderConfig, ps: &mut ParamSet, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let tok_emb = ps.add("dec.tok_emb", Tensor::randn(&[c.vocab_size, c.width], 1.0, rng))?;
        let pos_emb = ps.add("dec.pos_emb", Tensor::randn(&[c.max_len, c.width], 0.02, rng))?;
        let mut blocks = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let name = format!("dec.{l}");
            blocks.push(Block {
                ln1: LayerNorm::new(ps, &format!("{name}.ln1"), c.width)?,
                attn: AttentionParams::new(ps, &format!("{name}.attn"), c.width, c.d_x, rng)?,
                ln2: LayerNorm::new(ps, &format!("{name}.ln2"), c.width)?,
                mlp: Mlp::new(ps, &format!("{name}.mlp"), c.width, 4 * c.width, rng)?,
            });
        }
        let ln_f = LayerNorm::new(ps, "dec.ln_f", c.width)?;
        let head = Linear::new(ps, "dec.head", c.width, c.vocab_size, true, rng)?;
        Ok(Decoder {
            config,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn attention(&self, layer: usize) -> &AttentionParams {
        &self.blocks[layer].attn
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Token plus position embeddings, `len x D`.
    pub fn embed(&self, t: &mut Tape<'_>, ids: &[TokenId]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::contract("decoder: empty token sequence"));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::contract(format!(
                "decoder: {} tokens exceed max_len {}",
                ids.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::contract(format!("decoder: token {bad} outside vocabulary")));
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let table = t.param(self.tok_emb)?;
        let tok = t.gather_rows(table, &idx)?;
        let pos_table = t.param(self.pos_emb)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = t.gather_rows(pos_table, &positions)?;
        t.add(tok, pos)
    }

    /// Prior-context rows: every answer is embedded on its own (positions
    /// restart) and the results are stacked. `None` when there is nothing.
    pub fn embed_context<S: AsRef<[TokenId]>>(&self, t: &mut Tape<'_>, answers: &[S]) -> Result<Option<Var>> {
        let mut parts = Vec::with_capacity(answers.len());
        for a in answers.iter().map(AsRef::as_ref).filter(|a| !a.is_empty()) {
            parts.push(self.embed(t, a)?);
        }
        match parts.len() {
            0 => Ok(None),
            1 => Ok(Some(parts[0])),
            _ => t.concat_rows(&parts).map(Some),
        }
    }

    /// Logits `len x vocab` for a sequence starting with BOS.
    pub fn forward(&self, t: &mut Tape<'_>, ids: &[TokenId], image: Option<Var>, context: Option<Var>) -> Result<Var> {
        if ids.first() != Some(&BOS) {
            return Err(Error::contract("decoder input must start with BOS"));
        }
        if let Some(x) = image {
            if t.shape(x).len() != 2 || t.shape(x)[1] != self.config.d_x {
                return Err(Error::shape("decoder image", t.shape(x), &[0, self.config.d_x]));
            }
        }
        if let Some(c) = context {
            if t.shape(c).len() != 2 || t.shape(c)[1] != self.config.width {
                return Err(Error::shape("decoder context", t.shape(c), &[0, self.config.width]));
            }
        }
        let mut h = self.embed(t, ids)?;
        for b in &self.blocks {
            let n = b.ln1.forward(t, h)?;
            let a = multimodal_attention(t, &b.attn, self.config.heads, n, image, context)?;
            h = t.add(h, a)?;
            let n = b.ln2.forward(t, h)?;
            let m = b.mlp.forward(t, n)?;
            h = t.add(h, m)?;
        }
        let h = self.ln_f.forward(t, h)?;
        self.head.forward(t, h)
    }

    /// Summed next-token cross-entropy over the non-PAD targets of one
    /// answer `[BOS, ..., EOS, PAD...]`, and the number of targets.
    pub fn sequence_loss(
        &self,
        t: &mut Tape<'_>,
        answer: &[TokenId],
        image: Option<Var>,
        context: Option<Var>,
    ) -> Result<(Var, usize)> {
        if answer.len() < 2 {
            return Err(Error::contract("teacher forcing needs at least one target token"));
        }
        let targets: Vec<Option<usize>> = answer[1..]
            .iter()
            .map(|&id| (id != crate::data::PAD).then_some(id as usize))
            .collect();
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::contract("teacher forcing: all targets are padding"));
        }
        let logits = self.forward(t, &answer[..answer.len() - 1], image, context)?;
        Ok((t.cross_entropy(logits, &targets, Reduction::Sum)?, count))
    }

    /// Mean over all non-PAD target positions of a batch. Each item is
    /// `(answer tokens, image features, context rows)`.
    pub fn teacher_forced_loss(&self, t: &mut Tape<'_>, items: &[(&[TokenId], Option<Var>, Option<Var>)]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::contract("teacher forcing: empty batch"));
        }
        let mut total: Option<Var> = None;
        let mut count = 0;
        for &(answer, image, context) in items {
            let (loss, n) = self.sequence_loss(t, answer, image, context)?;
            count += n;
            total = Some(match total {
                Some(acc) => t.add(acc, loss)?,
                None => loss,
            });
        }
        t.scale(total.expect("non-empty"), 1.0 / count as f64)
    }

    /// Next-token logits source for generation with fixed conditioning.
    pub fn stepper<'a>(&'a self, params: &'a ParamSet, image: Option<&'a Tensor>, context: &'a [Vec<TokenId>]) -> Stepper<'a> {
        Stepper {
            decoder: self,
            params,
            image,
            context,
        }
    }
}

/// Runs the decoder on a prefix and returns the last row of logits.
pub struct Stepper<'a> {
    decoder: &'a Decoder,
    params: &'a ParamSet,
    image: Option<&'a Tensor>,
    context: &'a [Vec<TokenId>],
}

impl NextToken for Stepper<'_> {
    fn vocab_size(&self) -> usize {
        self.decoder.config.vocab_size
    }

    fn next_logits(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut t = Tape::new(self.params);
        let image = self.image.map(|x| t.constant(x.clone()));
        let context = self.decoder.embed_context(&mut t, self.context)?;
        let mut ids = Vec::with_capacity(prefix.len() + 1);
        ids.push(BOS);
        ids.extend_from_slice(prefix);
        let logits = self.decoder.forward(&mut t, &ids, image, context)?;
        Ok(t.value(logits).row(ids.len() - 1).to_vec())
    }
}
