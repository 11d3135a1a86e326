//! Small layer building blocks shared by the encoder and decoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamSet, Tape, Tensor, Var};

/// Standard deviation used for projection weights with `fan_in` inputs.
pub fn init_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = ps.add(
            format!("{name}.weight"),
            Tensor::randn(&[d_in, d_out], init_std(d_in), rng),
        )?;
        let bias = if bias {
            Some(ps.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = t.param(self.weight)?;
        let y = t.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = t.param(b)?;
                t.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: ps.add(format!("{name}.gain"), Tensor::ones(&[d]))?,
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = t.param(self.gain)?;
        let b = t.param(self.bias)?;
        t.layer_norm(x, g, b)
    }
}

/// Two-layer feed-forward block with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, d: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(ps, &format!("{name}.fc1"), d, hidden, true, rng)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, d, true, rng)?,
        })
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(t, x)?;
        let h = t.gelu(h)?;
        self.fc2.forward(t, h)
    }
}

/// Multi-head scaled dot-product attention over already-projected
/// `q[n x D]`, `k[m x D]`, `v[m x D]`. `keep` is an `n x m` visibility
/// mask, row-major. Heads are contiguous column blocks.
pub fn attend(t: &mut Tape<'_>, q: Var, k: Var, v: Var, heads: usize, keep: &[bool]) -> Result<Var> {
    let (n, width) = (t.shape(q)[0], t.shape(q)[1]);
    let m = t.shape(k)[0];
    if t.shape(k)[1] != width || t.shape(v) != t.shape(k) {
        return Err(Error::shape("attention", t.shape(q), t.shape(k)));
    }
    if keep.len() != n * m {
        return Err(Error::shape("attention mask", &[n, m], &[keep.len()]));
    }
    if heads == 0 || width % heads != 0 {
        return Err(Error::contract(format!("width {width} not divisible into {heads} heads")));
    }
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                t.slice_cols(q, h * dh, dh)?,
                t.slice_cols(k, h * dh, dh)?,
                t.slice_cols(v, h * dh, dh)?,
            )
        };
        let logits = t.matmul_t(qh, kh)?;
        let logits = t.scale(logits, scale)?;
        let probs = t.masked_softmax(logits, keep)?;
        outs.push(t.matmul(probs, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        t.concat_cols(&outs)
    }
}
