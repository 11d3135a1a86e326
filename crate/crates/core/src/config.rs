//! Flat `key = value` configuration with `#` comments.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::contrastive::ContrastiveConfig;
use crate::decoder::{DecoderConfig, GenerationConstraints};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::BleuMode;
use crate::tensor::AdamWConfig;

/// Which query embedding searches the answer index.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RetrievalKey {
    /// Projection of the image features after question fusion.
    #[default]
    Fused,
    /// Projection of the image features alone.
    Image,
}

impl FromStr for RetrievalKey {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fused" => Ok(RetrievalKey::Fused),
            "image" => Ok(RetrievalKey::Image),
            _ => Err("expected \"fused\" or \"image\"".into()),
        }
    }
}

impl RetrievalKey {
    fn as_str(self) -> &'static str {
        match self {
            RetrievalKey::Fused => "fused",
            RetrievalKey::Image => "image",
        }
    }
}

fn bleu_mode_str(m: BleuMode) -> &'static str {
    match m {
        BleuMode::Cumulative => "cumulative",
        BleuMode::Individual => "individual",
    }
}

fn parse_bleu_mode(s: &str) -> std::result::Result<BleuMode, String> {
    match s {
        "cumulative" => Ok(BleuMode::Cumulative),
        "individual" => Ok(BleuMode::Individual),
        _ => Err("expected \"cumulative\" or \"individual\"".into()),
    }
}

/// Every hyperparameter of a run. Full-scale reference values are noted
/// in the serialized comments; defaults are desk-scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub image_size: usize,
    pub patch_size: usize,
    pub d_x: usize,
    pub d_q: usize,
    pub d: usize,
    pub glimpses: usize,
    pub ban_rank: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub dec_width: usize,
    pub max_len: usize,
    pub classifier_hidden: usize,
    pub temperature: f64,
    pub contrastive_weight: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub augment: bool,
    pub min_occurrence: usize,
    pub k: usize,
    pub retrieval_key: RetrievalKey,
    pub min_len: usize,
    pub no_repeat_ngram: usize,
    pub max_tokens: usize,
    pub beam: usize,
    pub bleu_mode: BleuMode,
    pub train_data: String,
    pub eval_data: String,
    /// Filled in from the training data.
    pub vocab_size: usize,
    pub vocab_fingerprint: u64,
    pub num_classes: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            image_size: 16,
            patch_size: 4,
            d_x: 32,
            d_q: 32,
            d: 16,
            glimpses: 2,
            ban_rank: 8,
            text_layers: 2,
            text_heads: 2,
            dec_layers: 2,
            dec_heads: 2,
            dec_width: 64,
            max_len: crate::data::MAX_ANSWER_TOKENS,
            classifier_hidden: 64,
            temperature: 0.07,
            contrastive_weight: 1.0,
            lr: 5e-5,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 20,
            augment: true,
            min_occurrence: 0,
            k: 1,
            retrieval_key: RetrievalKey::Fused,
            min_len: 5,
            no_repeat_ngram: 2,
            max_tokens: crate::data::MAX_ANSWER_TOKENS,
            beam: 1,
            bleu_mode: BleuMode::Cumulative,
            train_data: String::new(),
            eval_data: String::new(),
            vocab_size: 0,
            vocab_fingerprint: 0,
            num_classes: 0,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| Error::Config(format!("key \"{key}\": cannot parse {raw:?}: {e}")))
}

impl Config {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            image_height: self.image_size,
            image_width: self.image_size,
            patch_size: self.patch_size,
            d_x: self.d_x,
            d_q: self.d_q,
            d: self.d,
            glimpses: self.glimpses,
            ban_rank: self.ban_rank,
            text_layers: self.text_layers,
            text_heads: self.text_heads,
            text_max_len: self.max_len,
            vocab_size: self.vocab_size,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            layers: self.dec_layers,
            heads: self.dec_heads,
            width: self.dec_width,
            max_len: self.max_len,
            vocab_size: self.vocab_size,
            d_x: self.d_x,
        }
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.temperature,
            weight: self.contrastive_weight,
        }
    }

    pub fn generation(&self) -> GenerationConstraints {
        GenerationConstraints {
            min_len: self.min_len,
            no_repeat_ngram: self.no_repeat_ngram,
            max_tokens: self.max_tokens,
            beam: self.beam,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Checks ranges of everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("d_x", self.d_x),
            ("d_q", self.d_q),
            ("d", self.d),
            ("glimpses", self.glimpses),
            ("ban_rank", self.ban_rank),
            ("text_heads", self.text_heads),
            ("dec_layers", self.dec_layers),
            ("dec_heads", self.dec_heads),
            ("dec_width", self.dec_width),
            ("max_len", self.max_len),
            ("classifier_hidden", self.classifier_hidden),
            ("batch_size", self.batch_size),
            ("max_tokens", self.max_tokens),
            ("beam", self.beam),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("key \"{key}\" must be positive")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("key \"lr\" must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("key \"weight_decay\" must be non-negative".into()));
        }
        if self.d < 2 {
            return Err(Error::Config("key \"d\" must be at least 2".into()));
        }
        if self.max_tokens > self.max_len {
            return Err(Error::Config("key \"max_tokens\" must not exceed max_len".into()));
        }
        self.contrastive().validate()?;
        self.generation().validate()?;
        let mut enc = self.encoder();
        enc.vocab_size = enc.vocab_size.max(5);
        enc.validate()?;
        let mut dec = self.decoder();
        dec.vocab_size = dec.vocab_size.max(5);
        dec.validate()
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, raw)?,
            "image_size" => self.image_size = parse_value(key, raw)?,
            "patch_size" => self.patch_size = parse_value(key, raw)?,
            "d_x" => self.d_x = parse_value(key, raw)?,
            "d_q" => self.d_q = parse_value(key, raw)?,
            "d" => self.d = parse_value(key, raw)?,
            "glimpses" => self.glimpses = parse_value(key, raw)?,
            "ban_rank" => self.ban_rank = parse_value(key, raw)?,
            "text_layers" => self.text_layers = parse_value(key, raw)?,
            "text_heads" => self.text_heads = parse_value(key, raw)?,
            "dec_layers" => self.dec_layers = parse_value(key, raw)?,
            "dec_heads" => self.dec_heads = parse_value(key, raw)?,
            "dec_width" => self.dec_width = parse_value(key, raw)?,
            "max_len" => self.max_len = parse_value(key, raw)?,
            "classifier_hidden" => self.classifier_hidden = parse_value(key, raw)?,
            "temperature" => self.temperature = parse_value(key, raw)?,
            "contrastive_weight" => self.contrastive_weight = parse_value(key, raw)?,
            "lr" => self.lr = parse_value(key, raw)?,
            "weight_decay" => self.weight_decay = parse_value(key, raw)?,
            "batch_size" => self.batch_size = parse_value(key, raw)?,
            "epochs" => self.epochs = parse_value(key, raw)?,
            "augment" => self.augment = parse_value(key, raw)?,
            "min_occurrence" => self.min_occurrence = parse_value(key, raw)?,
            "k" => self.k = parse_value(key, raw)?,
            "retrieval_key" => self.retrieval_key = parse_value(key, raw)?,
            "min_len" => self.min_len = parse_value(key, raw)?,
            "no_repeat_ngram" => self.no_repeat_ngram = parse_value(key, raw)?,
            "max_tokens" => self.max_tokens = parse_value(key, raw)?,
            "beam" => self.beam = parse_value(key, raw)?,
            "bleu_mode" => {
                self.bleu_mode = parse_bleu_mode(raw).map_err(|e| Error::Config(format!("key \"{key}\": {e}")))?
            }
            "train_data" => self.train_data = raw.to_owned(),
            "eval_data" => self.eval_data = raw.to_owned(),
            "vocab_size" => self.vocab_size = parse_value(key, raw)?,
            "vocab_fingerprint" => self.vocab_fingerprint = parse_value(key, raw)?,
            "num_classes" => self.num_classes = parse_value(key, raw)?,
            _ => return Err(Error::Config(format!("unknown key \"{key}\""))),
        }
        Ok(())
    }

    /// Parses text over the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_owned()) {
                return Err(Error::Config(format!("key \"{key}\" given twice")));
            }
            cfg.set(key, value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form; `parse(to_text())` gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |key: &str, value: String, note: &str| {
            if note.is_empty() {
                let _ = writeln!(s, "{key} = {value}");
            } else {
                let _ = writeln!(s, "{key} = {value}  # {note}");
            }
        };
        kv("seed", self.seed.to_string(), "");
        kv("image_size", self.image_size.to_string(), "square grid side");
        kv("patch_size", self.patch_size.to_string(), "");
        kv("d_x", self.d_x.to_string(), "image feature width; full scale 2048 over 14x14 regions");
        kv("d_q", self.d_q.to_string(), "text feature width");
        kv("d", self.d.to_string(), "shared embedding width");
        kv("glimpses", self.glimpses.to_string(), "");
        kv("ban_rank", self.ban_rank.to_string(), "");
        kv("text_layers", self.text_layers.to_string(), "");
        kv("text_heads", self.text_heads.to_string(), "");
        kv("dec_layers", self.dec_layers.to_string(), "");
        kv("dec_heads", self.dec_heads.to_string(), "");
        kv("dec_width", self.dec_width.to_string(), "");
        kv("max_len", self.max_len.to_string(), "");
        kv("classifier_hidden", self.classifier_hidden.to_string(), "full scale 1024");
        kv("temperature", self.temperature.to_string(), "");
        kv("contrastive_weight", self.contrastive_weight.to_string(), "0 disables the alignment loss");
        kv("lr", self.lr.to_string(), "");
        kv("weight_decay", self.weight_decay.to_string(), "");
        kv("batch_size", self.batch_size.to_string(), "full scale 16");
        kv("epochs", self.epochs.to_string(), "full scale 200");
        kv("augment", self.augment.to_string(), "random erasing during training");
        kv("min_occurrence", self.min_occurrence.to_string(), "");
        kv("k", self.k.to_string(), "retrieved answers; 0 disables prior context");
        kv("retrieval_key", self.retrieval_key.as_str().to_owned(), "fused | image");
        kv("min_len", self.min_len.to_string(), "");
        kv("no_repeat_ngram", self.no_repeat_ngram.to_string(), "");
        kv("max_tokens", self.max_tokens.to_string(), "");
        kv("beam", self.beam.to_string(), "1 = greedy");
        kv("bleu_mode", bleu_mode_str(self.bleu_mode).to_owned(), "cumulative | individual");
        kv("train_data", self.train_data.clone(), "");
        kv("eval_data", self.eval_data.clone(), "");
        kv("vocab_size", self.vocab_size.to_string(), "set by training");
        kv("vocab_fingerprint", self.vocab_fingerprint.to_string(), "set by training");
        kv("num_classes", self.num_classes.to_string(), "set by training");
        s
    }
}
