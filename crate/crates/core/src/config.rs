//! Flat `key = value` training configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! unparsable values are errors naming the key. Later assignments win, so
//! command-line overrides are applied with [`TrainConfig::set`] after the
//! file is read.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelDims;
use crate::retriever::RetrieverKind;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Retrieved samples per query.
    pub k: usize,
    pub refresh_interval: usize,
    pub embed: usize,
    /// Decoder state size; the encoder state (two directions) matches it.
    pub hidden: usize,
    pub attn: usize,
    pub max_len: usize,
    pub lr: f64,
    pub lm_lr: f64,
    pub clip: f64,
    pub batch: usize,
    pub retriever: RetrieverKind,
    pub seed: u64,
    pub steps: usize,
    pub weights: LossWeights,
    pub disc_maps: usize,
    pub min_count: usize,
    pub lm_epochs: usize,
    pub checkpoint_every: usize,
    /// Gradient steps on reconstruction alone before joint training.
    pub warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 5,
            refresh_interval: 200,
            embed: 256,
            hidden: 512,
            attn: 512,
            max_len: 32,
            lr: 1e-4,
            lm_lr: 1e-3,
            clip: 5.0,
            batch: 32,
            retriever: RetrieverKind::Dense,
            seed: 0,
            steps: 10_000,
            weights: LossWeights::default(),
            disc_maps: 64,
            min_count: 2,
            lm_epochs: 1,
            checkpoint_every: 1000,
            warmup_steps: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "k",
    "refresh_interval",
    "embed",
    "hidden",
    "attn",
    "max_len",
    "lr",
    "lm_lr",
    "clip",
    "batch",
    "retriever",
    "seed",
    "steps",
    "w_rec",
    "w_cyc",
    "w_adv",
    "w_ret",
    "w_bow",
    "disc_maps",
    "min_count",
    "lm_epochs",
    "checkpoint_every",
    "warmup_steps",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::ConfigValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "k" => self.k = parse(key, v)?,
            "refresh_interval" => self.refresh_interval = parse(key, v)?,
            "embed" => self.embed = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "attn" => self.attn = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lm_lr" => self.lm_lr = parse(key, v)?,
            "clip" => self.clip = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "retriever" => self.retriever = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "w_rec" => self.weights.rec = parse(key, v)?,
            "w_cyc" => self.weights.cyc = parse(key, v)?,
            "w_adv" => self.weights.adv = parse(key, v)?,
            "w_ret" => self.weights.ret = parse(key, v)?,
            "w_bow" => self.weights.bow = parse(key, v)?,
            "disc_maps" => self.disc_maps = parse(key, v)?,
            "min_count" => self.min_count = parse(key, v)?,
            "lm_epochs" => self.lm_epochs = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            other => return Err(Error::ConfigKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line without `=`: {line}")))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, value: String| Err(Error::ConfigValue { key: key.into(), value });
        if self.k == 0 {
            return bad("k", "0".into());
        }
        if self.refresh_interval == 0 {
            return bad("refresh_interval", "0".into());
        }
        if self.hidden == 0 || self.hidden % 2 != 0 {
            return bad("hidden", self.hidden.to_string());
        }
        for (key, v) in [
            ("embed", self.embed),
            ("attn", self.attn),
            ("max_len", self.max_len),
            ("batch", self.batch),
            ("disc_maps", self.disc_maps),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                return bad(key, "0".into());
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", self.lr.to_string());
        }
        Ok(())
    }

    pub fn model_dims(&self, vocab: usize) -> ModelDims {
        ModelDims {
            vocab,
            embed: self.embed,
            enc_hidden: self.hidden / 2,
            dec_hidden: self.hidden,
            attn: self.attn,
            max_len: self.max_len,
        }
    }

    /// Serializes every key; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let values: [String; 23] = [
            self.k.to_string(),
            self.refresh_interval.to_string(),
            self.embed.to_string(),
            self.hidden.to_string(),
            self.attn.to_string(),
            self.max_len.to_string(),
            self.lr.to_string(),
            self.lm_lr.to_string(),
            self.clip.to_string(),
            self.batch.to_string(),
            self.retriever.to_string(),
            self.seed.to_string(),
            self.steps.to_string(),
            w.rec.to_string(),
            w.cyc.to_string(),
            w.adv.to_string(),
            w.ret.to_string(),
            w.bow.to_string(),
            self.disc_maps.to_string(),
            self.min_count.to_string(),
            self.lm_epochs.to_string(),
            self.checkpoint_every.to_string(),
            self.warmup_steps.to_string(),
        ];
        let mut out = String::new();
        for (key, value) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }
}
