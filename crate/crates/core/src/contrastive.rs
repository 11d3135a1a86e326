//! Bidirectional InfoNCE alignment between image(+question) and answer
//! embeddings.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Reduction, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    /// Weight on the summed directional losses. Zero switches the term off.
    pub weight: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.07,
            weight: 1.0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.weight >= 0.0) || !self.weight.is_finite() {
            return Err(Error::Config(format!("contrastive weight must be non-negative, got {}", self.weight)));
        }
        Ok(())
    }
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_sim", &[a.len()], &[b.len()]));
    }
    let na = kernels::dot(a, a).sqrt();
    let nb = kernels::dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::contract("cosine_sim: zero vector"));
    }
    Ok(kernels::dot(a, b) / (na * nb))
}

/// `-(1/N) sum_i log softmax_j(<x_i, y_j> / tau)[i]` over unit rows.
pub fn info_nce_directional(t: &mut Tape<'_>, x: Var, y: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::contract(format!("temperature must be positive, got {temperature}")));
    }
    if t.shape(x) != t.shape(y) || t.shape(x).len() != 2 {
        return Err(Error::shape("info_nce", t.shape(x), t.shape(y)));
    }
    let n = t.shape(x)[0];
    let sims = t.matmul_t(x, y)?;
    let logits = t.scale(sims, 1.0 / temperature)?;
    let targets: Vec<Option<usize>> = (0..n).map(Some).collect();
    t.cross_entropy(logits, &targets, Reduction::Mean)
}

/// `weight * (L(x -> y) + L(y -> x))`.
pub fn encoder_loss(t: &mut Tape<'_>, x: Var, y: Var, cfg: &ContrastiveConfig) -> Result<Var> {
    let forward = info_nce_directional(t, x, y, cfg.temperature)?;
    let backward = info_nce_directional(t, y, x, cfg.temperature)?;
    let total = t.add(forward, backward)?;
    t.scale(total, cfg.weight)
}
