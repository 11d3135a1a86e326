//! Image patch encoder, bidirectional text encoder, bilinear attention
//! fusion and the bias-free projections into the shared embedding space.

mod image;

pub use image::{augment_image, ImageGrid, Normalization};

use rand::Rng;

use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::nn::{attend, init_std, LayerNorm, Linear, Mlp};
use crate::tensor::{ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    /// Image feature width.
    pub d_x: usize,
    /// Text feature width.
    pub d_q: usize,
    /// Shared embedding width.
    pub d: usize,
    pub glimpses: usize,
    pub ban_rank: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    /// Longest token sequence the text encoder accepts.
    pub text_max_len: usize,
    pub vocab_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_height: 16,
            image_width: 16,
            patch_size: 4,
            d_x: 32,
            d_q: 32,
            d: 16,
            glimpses: 2,
            ban_rank: 8,
            text_layers: 2,
            text_heads: 2,
            text_max_len: crate::data::MAX_ANSWER_TOKENS,
            vocab_size: 64,
        }
    }
}

impl EncoderConfig {
    /// Number of image regions (patches).
    pub fn n_x(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_height < p || self.image_width < p {
            return Err(Error::Config(format!(
                "patch size {p} does not fit a {}x{} image",
                self.image_height, self.image_width
            )));
        }
        if self.image_height % p != 0 || self.image_width % p != 0 {
            return Err(Error::Config(format!(
                "{}x{} image is not divisible into {p}x{p} patches",
                self.image_height, self.image_width
            )));
        }
        if self.glimpses == 0 || self.ban_rank == 0 || self.text_heads == 0 {
            return Err(Error::Config("glimpses, ban_rank and text_heads must be positive".into()));
        }
        if self.d < 2 || self.d_x < 2 || self.d_q < 2 {
            return Err(Error::Config("feature widths must be at least 2".into()));
        }
        if self.d_q % self.text_heads != 0 {
            return Err(Error::Config(format!(
                "d_q = {} not divisible by {} text heads",
                self.d_q, self.text_heads
            )));
        }
        if self.vocab_size < 5 || self.text_max_len == 0 {
            return Err(Error::Config("vocabulary or text length too small".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct TextBlock {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct Glimpse {
    pub u: ParamId,
    pub v: ParamId,
    pub w: ParamId,
}

/// Fused image(+question) features together with their projection.
#[derive(Clone, Copy, Debug)]
pub struct EncodedPair {
    /// `n_x x d_x` fused features.
    pub fused: Var,
    /// `n_q x d_q` question features.
    pub question: Var,
    /// `1 x d` unit-norm projection of the fused features.
    pub embedding: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    patch: Linear,
    pos_image: ParamId,
    tok_emb: ParamId,
    pos_text: ParamId,
    blocks: Vec<TextBlock>,
    ln_text: LayerNorm,
    glimpses: Vec<Glimpse>,
    proj_image: Linear,
    proj_text: Linear,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, ps: &mut ParamSet, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let p2 = c.patch_size * c.patch_size;
        let patch = Linear::new(ps, "enc.patch", p2, c.d_x, true, rng)?;
        let pos_image = ps.add("enc.pos_image", Tensor::randn(&[c.n_x(), c.d_x], 0.02, rng))?;
        let tok_emb = ps.add("enc.tok_emb", Tensor::randn(&[c.vocab_size, c.d_q], 1.0, rng))?;
        let pos_text = ps.add("enc.pos_text", Tensor::randn(&[c.text_max_len, c.d_q], 0.02, rng))?;
        let mut blocks = Vec::with_capacity(c.text_layers);
        for l in 0..c.text_layers {
            let name = format!("enc.text.{l}");
            blocks.push(TextBlock {
                ln1: LayerNorm::new(ps, &format!("{name}.ln1"), c.d_q)?,
                wq: Linear::new(ps, &format!("{name}.wq"), c.d_q, c.d_q, false, rng)?,
                wk: Linear::new(ps, &format!("{name}.wk"), c.d_q, c.d_q, false, rng)?,
                wv: Linear::new(ps, &format!("{name}.wv"), c.d_q, c.d_q, false, rng)?,
                wo: Linear::new(ps, &format!("{name}.wo"), c.d_q, c.d_q, true, rng)?,
                ln2: LayerNorm::new(ps, &format!("{name}.ln2"), c.d_q)?,
                mlp: Mlp::new(ps, &format!("{name}.mlp"), c.d_q, 4 * c.d_q, rng)?,
            });
        }
        let ln_text = LayerNorm::new(ps, "enc.text.ln_f", c.d_q)?;
        let mut glimpses = Vec::with_capacity(c.glimpses);
        for g in 0..c.glimpses {
            let name = format!("enc.ban.{g}");
            glimpses.push(Glimpse {
                u: ps.add(format!("{name}.u"), Tensor::randn(&[c.d_x, c.ban_rank], init_std(c.d_x), rng))?,
                v: ps.add(format!("{name}.v"), Tensor::randn(&[c.d_q, c.ban_rank], init_std(c.d_q), rng))?,
                w: ps.add(format!("{name}.w"), Tensor::randn(&[c.ban_rank, c.d_x], init_std(c.ban_rank), rng))?,
            });
        }
        let proj_image = Linear::new(ps, "enc.proj_image", c.d_x, c.d, false, rng)?;
        let proj_text = Linear::new(ps, "enc.proj_text", c.d_q, c.d, false, rng)?;
        Ok(Encoder {
            config,
            patch,
            pos_image,
            tok_emb,
            pos_text,
            blocks,
            ln_text,
            glimpses,
            proj_image,
            proj_text,
        })
    }

    pub fn glimpse_params(&self) -> &[Glimpse] {
        &self.glimpses
    }

    pub fn pos_image(&self) -> ParamId {
        self.pos_image
    }

    pub fn patch_layer(&self) -> &Linear {
        &self.patch
    }

    pub fn image_projection(&self) -> &Linear {
        &self.proj_image
    }

    pub fn text_projection(&self) -> &Linear {
        &self.proj_text
    }

    /// Non-overlapping patches in row-major order, each flattened row-major,
    /// as an `n_x x patch_size^2` matrix.
    pub fn patchify(&self, img: &ImageGrid) -> Result<Tensor> {
        let p = self.config.patch_size;
        let (h, w) = (img.height(), img.width());
        if h % p != 0 || w % p != 0 || h < p || w < p {
            return Err(Error::contract(format!("{h}x{w} image is not divisible into {p}x{p} patches")));
        }
        if (h, w) != (self.config.image_height, self.config.image_width) {
            return Err(Error::contract(format!(
                "image is {h}x{w}, encoder expects {}x{}",
                self.config.image_height, self.config.image_width
            )));
        }
        let mut data = Vec::with_capacity(h * w);
        for pr in 0..h / p {
            for pc in 0..w / p {
                for r in 0..p {
                    for c in 0..p {
                        data.push(img.get(pr * p + r, pc * p + c));
                    }
                }
            }
        }
        Tensor::new(vec![(h / p) * (w / p), p * p], data)
    }

    /// `n_x x d_x` region features of an already-normalized image. Row `i`
    /// depends only on patch `i` and its position embedding.
    pub fn encode_image(&self, t: &mut Tape<'_>, img: &ImageGrid) -> Result<Var> {
        let patches = t.constant(self.patchify(img)?);
        let x = self.patch.forward(t, patches)?;
        let pos = t.param(self.pos_image)?;
        t.add(x, pos)
    }

    /// Contextual token features `len x d_q`. Positions with `keep == false`
    /// are hidden from attention, so their ids do not affect other rows.
    pub fn encode_text(&self, t: &mut Tape<'_>, ids: &[TokenId], keep: &[bool]) -> Result<Var> {
        let n = ids.len();
        if n == 0 || keep.len() != n {
            return Err(Error::contract("text encoder needs ids with one mask flag each"));
        }
        if n > self.config.text_max_len {
            return Err(Error::contract(format!(
                "text of {n} tokens exceeds the {}-token cap",
                self.config.text_max_len
            )));
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::contract("text is entirely padding"));
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let table = t.param(self.tok_emb)?;
        let tok = t.gather_rows(table, &idx)?;
        let pos_table = t.param(self.pos_text)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = t.gather_rows(pos_table, &positions)?;
        let mut x = t.add(tok, pos)?;
        let mask: Vec<bool> = (0..n).flat_map(|_| keep.iter().copied()).collect();
        for b in &self.blocks {
            let h = b.ln1.forward(t, x)?;
            let q = b.wq.forward(t, h)?;
            let k = b.wk.forward(t, h)?;
            let v = b.wv.forward(t, h)?;
            let a = attend(t, q, k, v, self.config.text_heads, &mask)?;
            let a = b.wo.forward(t, a)?;
            x = t.add(x, a)?;
            let h = b.ln2.forward(t, x)?;
            let m = b.mlp.forward(t, h)?;
            x = t.add(x, m)?;
        }
        self.ln_text.forward(t, x)
    }

    /// Low-rank bilinear attention: every glimpse attends from image regions
    /// over question tokens and adds the pooled question context back onto
    /// the image features.
    pub fn ban_fuse(&self, t: &mut Tape<'_>, x: Var, q: Var, q_keep: &[bool]) -> Result<Var> {
        let (n_x, d_x) = (t.shape(x)[0], t.shape(x)[1]);
        let (n_q, d_q) = (t.shape(q)[0], t.shape(q)[1]);
        if d_x != self.config.d_x || d_q != self.config.d_q || q_keep.len() != n_q {
            return Err(Error::shape("ban_fuse", t.shape(x), t.shape(q)));
        }
        if !q_keep.iter().any(|&k| k) {
            return Err(Error::contract("ban_fuse: question is entirely padding"));
        }
        let keep: Vec<bool> = (0..n_x).flat_map(|_| q_keep.iter().copied()).collect();
        let scale = 1.0 / (self.config.ban_rank as f64).sqrt();
        let mut x = x;
        for g in &self.glimpses {
            let u = t.param(g.u)?;
            let v = t.param(g.v)?;
            let w = t.param(g.w)?;
            let xu = t.matmul(x, u)?;
            let qv = t.matmul(q, v)?;
            let logits = t.matmul_t(xu, qv)?;
            let logits = t.scale(logits, scale)?;
            let attn = t.masked_softmax(logits, &keep)?;
            let pooled = t.matmul(attn, qv)?;
            let update = t.matmul(pooled, w)?;
            x = t.add(x, update)?;
        }
        Ok(x)
    }

    /// Attention maps of every glimpse for inspection; one `n_x x n_q`
    /// tensor per glimpse.
    pub fn ban_attention(&self, t: &mut Tape<'_>, x: Var, q: Var, q_keep: &[bool]) -> Result<Vec<Tensor>> {
        let n_x = t.shape(x)[0];
        let keep: Vec<bool> = (0..n_x).flat_map(|_| q_keep.iter().copied()).collect();
        let scale = 1.0 / (self.config.ban_rank as f64).sqrt();
        let mut maps = Vec::new();
        let mut x = x;
        for g in &self.glimpses {
            let u = t.param(g.u)?;
            let v = t.param(g.v)?;
            let w = t.param(g.w)?;
            let xu = t.matmul(x, u)?;
            let qv = t.matmul(q, v)?;
            let logits = t.matmul_t(xu, qv)?;
            let logits = t.scale(logits, scale)?;
            let attn = t.masked_softmax(logits, &keep)?;
            maps.push(t.value(attn).clone());
            let pooled = t.matmul(attn, qv)?;
            let update = t.matmul(pooled, w)?;
            x = t.add(x, update)?;
        }
        Ok(maps)
    }

    /// Mean of the kept rows, bias-free linear map, unit L2 norm: `1 x d`.
    pub fn project_embed(&self, t: &mut Tape<'_>, feats: Var, keep: Option<&[bool]>, proj: &Linear) -> Result<Var> {
        let pooled = t.mean_rows(feats, keep)?;
        let z = proj.forward(t, pooled)?;
        t.l2_normalize_rows(z)
    }

    /// Image and question through fusion and the image projection.
    pub fn encode_pair(&self, t: &mut Tape<'_>, img: &ImageGrid, question: &[TokenId], q_keep: &[bool]) -> Result<EncodedPair> {
        let x = self.encode_image(t, img)?;
        let q = self.encode_text(t, question, q_keep)?;
        let fused = self.ban_fuse(t, x, q, q_keep)?;
        let embedding = self.project_embed(t, fused, None, &self.proj_image)?;
        Ok(EncodedPair {
            fused,
            question: q,
            embedding,
        })
    }

    /// Unit-norm projection of the raw image features (no question).
    pub fn embed_image_only(&self, t: &mut Tape<'_>, img: &ImageGrid) -> Result<Var> {
        let x = self.encode_image(t, img)?;
        self.project_embed(t, x, None, &self.proj_image)
    }

    /// Unit-norm `1 x d` embedding of an answer text.
    pub fn embed_answer(&self, t: &mut Tape<'_>, ids: &[TokenId], keep: &[bool]) -> Result<Var> {
        let feats = self.encode_text(t, ids, keep)?;
        self.project_embed(t, feats, Some(keep), &self.proj_text)
    }
}
