//! Run configuration as flat `section.key = value` pairs.

use std::fmt::Display;
use std::str::FromStr;

use crate::autodiff::ConvAlgo;
use crate::error::{Error, Result};
use crate::model::{Estimator, LossKind, ModelConfig, Objective};
use crate::params::fnv1a;
use crate::stl::KernelKind;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Evaluations without a validation BLEU-4 gain before stopping; 0 disables.
    pub patience: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    /// Stop once training exact-match accuracy reaches this; 0 disables.
    pub stop_accuracy: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 8,
            lr: 1e-3,
            clip_norm: 5.0,
            patience: 0,
            eval_every: 1,
            checkpoint_every: 10,
            stop_accuracy: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub objective: Objective,
    pub train: TrainConfig,
    pub min_count: usize,
    pub beam: usize,
    pub max_len: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            objective: Objective::default(),
            train: TrainConfig::default(),
            min_count: 5,
            beam: 3,
            max_len: 12,
        }
    }
}

/// Every recognized key, in file order.
pub const KEYS: &[&str] = &[
    "seed",
    "enc.channels",
    "enc.algo",
    "stl.kernel",
    "stl.hidden_size",
    "stl.mask.enabled",
    "attn.N",
    "attn.mode",
    "text.min_count",
    "text.embed",
    "dec.hidden",
    "dec.attn_dim",
    "dec.k",
    "dec.beam",
    "dec.max_len",
    "loop.steps",
    "loss.kind",
    "loss.lambda",
    "loss.beta",
    "loss.ls_estimator",
    "loss.mc_samples",
    "vae.latent",
    "vae.hidden",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.clip_norm",
    "train.patience",
    "train.eval_every",
    "train.checkpoint_every",
    "train.stop_accuracy",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.trim().parse().map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

fn positive(key: &str, value: &str) -> Result<usize> {
    let v: usize = parse(key, value)?;
    if v == 0 {
        return Err(Error::Config(format!("{key} must be at least 1")));
    }
    Ok(v)
}

fn non_negative(key: &str, value: &str) -> Result<f64> {
    let v: f64 = parse(key, value)?;
    if !(v >= 0.0) || !v.is_finite() {
        return Err(Error::Config(format!("{key} must be a finite value >= 0")));
    }
    Ok(v)
}

fn choice<'a>(key: &str, value: &str, options: &[&'a str]) -> Result<&'a str> {
    options
        .iter()
        .find(|o| **o == value.trim())
        .copied()
        .ok_or_else(|| Error::Config(format!("{key} must be one of {}, got `{value}`", options.join(", "))))
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let o = &mut self.objective;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "enc.channels" => {
                let ch: Vec<usize> = value.split(',').map(|c| positive(key, c)).collect::<Result<_>>()?;
                if ch.is_empty() {
                    return Err(Error::Config("enc.channels needs at least one block".into()));
                }
                m.encoder.channels = ch;
            }
            "enc.algo" => {
                m.encoder.algo = match choice(key, value, &["im2col", "direct"])? {
                    "direct" => ConvAlgo::Direct,
                    _ => ConvAlgo::Im2col,
                }
            }
            "stl.kernel" => {
                m.stl.kernel = match choice(key, value, &["bilinear", "gaussian"])? {
                    "gaussian" => KernelKind::Gaussian,
                    _ => KernelKind::Bilinear,
                }
            }
            "stl.hidden_size" => m.stl.hidden = positive(key, value)?,
            "stl.mask.enabled" => m.stl.mask = parse(key, value)?,
            "attn.N" => m.filter.n = positive(key, value)?,
            "attn.mode" => m.filter.mode = value.trim().parse()?,
            "text.min_count" => self.min_count = parse(key, value)?,
            "text.embed" => m.text_dim = positive(key, value)?,
            "dec.hidden" => m.decoder.hidden = positive(key, value)?,
            "dec.attn_dim" => m.decoder.attn_dim = positive(key, value)?,
            "dec.k" => m.decoder.k = positive(key, value)?,
            "dec.beam" => self.beam = positive(key, value)?,
            "dec.max_len" => self.max_len = positive(key, value)?,
            "loop.steps" => m.loops = positive(key, value)?,
            "loss.kind" => {
                o.kind = match choice(key, value, &["attention", "variational"])? {
                    "variational" => LossKind::Variational,
                    _ => LossKind::Attention,
                }
            }
            "loss.lambda" => o.lambda = non_negative(key, value)?,
            "loss.beta" => o.beta = non_negative(key, value)?,
            "loss.ls_estimator" => {
                o.estimator = match choice(key, value, &["soft", "mc"])? {
                    "mc" => Estimator::MonteCarlo,
                    _ => Estimator::Soft,
                }
            }
            "loss.mc_samples" => o.mc_samples = positive(key, value)?,
            "vae.latent" => m.vae.latent = positive(key, value)?,
            "vae.hidden" => m.vae.hidden = positive(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = positive(key, value)?,
            "train.lr" => t.lr = non_negative(key, value)?,
            "train.clip_norm" => t.clip_norm = non_negative(key, value)?,
            "train.patience" => t.patience = parse(key, value)?,
            "train.eval_every" => t.eval_every = positive(key, value)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "train.stop_accuracy" => t.stop_accuracy = non_negative(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let o = &self.objective;
        let t = &self.train;
        Some(match key {
            "seed" => self.seed.to_string(),
            "enc.channels" => m.encoder.channels.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            "enc.algo" => match m.encoder.algo {
                ConvAlgo::Direct => "direct",
                ConvAlgo::Im2col => "im2col",
            }
            .into(),
            "stl.kernel" => match m.stl.kernel {
                KernelKind::Bilinear => "bilinear",
                KernelKind::Gaussian => "gaussian",
            }
            .into(),
            "stl.hidden_size" => m.stl.hidden.to_string(),
            "stl.mask.enabled" => m.stl.mask.to_string(),
            "attn.N" => m.filter.n.to_string(),
            "attn.mode" => m.filter.mode.to_string(),
            "text.min_count" => self.min_count.to_string(),
            "text.embed" => m.text_dim.to_string(),
            "dec.hidden" => m.decoder.hidden.to_string(),
            "dec.attn_dim" => m.decoder.attn_dim.to_string(),
            "dec.k" => m.decoder.k.to_string(),
            "dec.beam" => self.beam.to_string(),
            "dec.max_len" => self.max_len.to_string(),
            "loop.steps" => m.loops.to_string(),
            "loss.kind" => match o.kind {
                LossKind::Attention => "attention",
                LossKind::Variational => "variational",
            }
            .into(),
            "loss.lambda" => o.lambda.to_string(),
            "loss.beta" => o.beta.to_string(),
            "loss.ls_estimator" => match o.estimator {
                Estimator::Soft => "soft",
                Estimator::MonteCarlo => "mc",
            }
            .into(),
            "loss.mc_samples" => o.mc_samples.to_string(),
            "vae.latent" => m.vae.latent.to_string(),
            "vae.hidden" => m.vae.hidden.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.clip_norm" => t.clip_norm.to_string(),
            "train.patience" => t.patience.to_string(),
            "train.eval_every" => t.eval_every.to_string(),
            "train.checkpoint_every" => t.checkpoint_every.to_string(),
            "train.stop_accuracy" => t.stop_accuracy.to_string(),
            _ => return None,
        })
    }

    /// `key=value` lines; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key=value", n + 1)));
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k}={}\n", self.get(k).expect("known key"))).collect()
    }

    /// Hash of the canonical text, stored in checkpoints.
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }

    /// Hash of the keys that shape the parameter set; a checkpoint loads
    /// into any config that agrees on these.
    pub fn architecture_hash(&self) -> u64 {
        const ARCH: &[&str] = &[
            "enc.channels",
            "stl.kernel",
            "stl.hidden_size",
            "stl.mask.enabled",
            "attn.N",
            "attn.mode",
            "text.embed",
            "dec.hidden",
            "dec.attn_dim",
            "vae.latent",
            "vae.hidden",
        ];
        let s: String = ARCH.iter().map(|k| format!("{k}={}\n", self.get(k).expect("known key"))).collect();
        fnv1a(s.as_bytes())
    }
}
