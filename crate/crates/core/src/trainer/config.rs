//! Experiment configuration as a flat `key = value` file with `#` comments.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::autodiff::AdamConfig;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, Variant, VariantFlags};
use crate::models::ModelDims;
use crate::toyworld::DataConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub variant: Variant,
    /// Supervised loss on pairs; off with `cyclegan` gives the purely
    /// unpaired baseline.
    pub paired_ce: bool,
    pub seed: u64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Examples drawn from each of the paired, unpaired-image and
    /// unpaired-caption sets per step.
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub pool_fraction: f64,
    pub clip_norm: f64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub data: DataConfig,
    pub dims: ModelDims,
    /// Beam width at evaluation; 1 decodes greedily.
    pub beam_width: usize,
    /// Candidates per caption query in retrieval recall.
    pub retrieval_pool: usize,
    /// Unpaired images and captions probed per epoch for pseudo-label accuracy.
    pub probe_count: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Final,
            paired_ce: true,
            seed: 0,
            epochs: 10,
            steps_per_epoch: 20,
            batch_size: 100,
            pretrain_steps: 200,
            pool_fraction: 0.01,
            clip_norm: 5.0,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            data: DataConfig::default(),
            dims: ModelDims::default(),
            beam_width: 3,
            retrieval_pool: 100,
            probe_count: 200,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config { key: key.to_string(), msg: format!("cannot parse {value:?}") })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config { key: key.to_string(), msg: format!("expected a boolean, got {value:?}") }),
    }
}

impl ExperimentConfig {
    pub const KEYS: [&'static str; 33] = [
        "variant",
        "paired_ce",
        "seed",
        "epochs",
        "steps_per_epoch",
        "batch_size",
        "pretrain_steps",
        "pool_fraction",
        "clip_norm",
        "lr",
        "beta1",
        "beta2",
        "adam_eps",
        "lambda_x",
        "lambda_y",
        "lambda_reg",
        "lambda_1",
        "lambda_2",
        "lambda_3",
        "total",
        "paired_fraction",
        "noise_std",
        "test_size",
        "novel_word",
        "domain_shift",
        "hidden",
        "latent",
        "embed",
        "dec_hidden",
        "disc_hidden",
        "beam_width",
        "retrieval_pool",
        "probe_count",
    ];

    pub fn flags(&self) -> VariantFlags {
        VariantFlags { paired_ce: self.paired_ce, ..self.variant.flags() }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "variant" => self.variant = v.parse().map_err(|e: Error| Error::Config { key: key.into(), msg: e.to_string() })?,
            "paired_ce" => self.paired_ce = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, v)?,
            "pool_fraction" => self.pool_fraction = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "lr" => self.adam.lr = parse(key, v)?,
            "beta1" => self.adam.beta1 = parse(key, v)?,
            "beta2" => self.adam.beta2 = parse(key, v)?,
            "adam_eps" => self.adam.epsilon = parse(key, v)?,
            "lambda_x" => self.weights.lambda_x = parse(key, v)?,
            "lambda_y" => self.weights.lambda_y = parse(key, v)?,
            "lambda_reg" => self.weights.lambda_reg = parse(key, v)?,
            "lambda_1" => self.weights.lambda_1 = parse(key, v)?,
            "lambda_2" => self.weights.lambda_2 = parse(key, v)?,
            "lambda_3" => self.weights.lambda_3 = parse(key, v)?,
            "total" => self.data.total = parse(key, v)?,
            "paired_fraction" => self.data.paired_fraction = parse(key, v)?,
            "noise_std" => self.data.noise_std = parse(key, v)?,
            "test_size" => self.data.test_size = parse(key, v)?,
            "novel_word" => self.data.novel_word = parse_bool(key, v)?,
            "domain_shift" => self.data.domain_shift = parse_bool(key, v)?,
            "hidden" => self.dims.hidden = parse(key, v)?,
            "latent" => self.dims.latent = parse(key, v)?,
            "embed" => self.dims.embed = parse(key, v)?,
            "dec_hidden" => self.dims.dec_hidden = parse(key, v)?,
            "disc_hidden" => self.dims.disc_hidden = parse(key, v)?,
            "beam_width" => self.beam_width = parse(key, v)?,
            "retrieval_pool" => self.retrieval_pool = parse(key, v)?,
            "probe_count" => self.probe_count = parse(key, v)?,
            _ => return Err(Error::Config { key: key.to_string(), msg: "unknown key".into() }),
        }
        Ok(())
    }

    /// Applies `key = value` lines over the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(Error::Parse { line: n + 1, msg: format!("expected key = value, got {line:?}") })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Every key with its resolved value; `from_text` reads it back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("known key"));
        }
        s
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "variant" => self.variant.to_string(),
            "paired_ce" => self.paired_ce.to_string(),
            "seed" => self.seed.to_string(),
            "epochs" => self.epochs.to_string(),
            "steps_per_epoch" => self.steps_per_epoch.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "pretrain_steps" => self.pretrain_steps.to_string(),
            "pool_fraction" => self.pool_fraction.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "lr" => self.adam.lr.to_string(),
            "beta1" => self.adam.beta1.to_string(),
            "beta2" => self.adam.beta2.to_string(),
            "adam_eps" => self.adam.epsilon.to_string(),
            "lambda_x" => self.weights.lambda_x.to_string(),
            "lambda_y" => self.weights.lambda_y.to_string(),
            "lambda_reg" => self.weights.lambda_reg.to_string(),
            "lambda_1" => self.weights.lambda_1.to_string(),
            "lambda_2" => self.weights.lambda_2.to_string(),
            "lambda_3" => self.weights.lambda_3.to_string(),
            "total" => self.data.total.to_string(),
            "paired_fraction" => self.data.paired_fraction.to_string(),
            "noise_std" => self.data.noise_std.to_string(),
            "test_size" => self.data.test_size.to_string(),
            "novel_word" => self.data.novel_word.to_string(),
            "domain_shift" => self.data.domain_shift.to_string(),
            "hidden" => self.dims.hidden.to_string(),
            "latent" => self.dims.latent.to_string(),
            "embed" => self.dims.embed.to_string(),
            "dec_hidden" => self.dims.dec_hidden.to_string(),
            "disc_hidden" => self.dims.disc_hidden.to_string(),
            "beam_width" => self.beam_width.to_string(),
            "retrieval_pool" => self.retrieval_pool.to_string(),
            "probe_count" => self.probe_count.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config { key: key.into(), msg: msg.into() });
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return bad("epochs", "epochs and steps_per_epoch must be >= 1");
        }
        if !(self.pool_fraction > 0.0 && self.pool_fraction <= 1.0) {
            return bad("pool_fraction", "must be in (0, 1]");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm", "must be > 0");
        }
        if self.beam_width == 0 {
            return bad("beam_width", "must be >= 1");
        }
        if self.retrieval_pool == 0 || self.retrieval_pool > self.data.test_size {
            return bad("retrieval_pool", "must be in 1..=test_size");
        }
        if self.data.test_size == 0 {
            return bad("test_size", "must be >= 1");
        }
        self.adam.validate()?;
        self.weights.validate()?;
        self.dims.validate()?;
        self.flags().validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig { variant: Variant::CycleGan, ..Default::default() };
        c.data.paired_fraction = 0.005;
        c.adam.lr = 1e-3;
        c.data.novel_word = true;
        let back = ExperimentConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn comments_and_errors() {
        let c = ExperimentConfig::from_text("# header\nvariant = ver2  # inline\n\nepochs=3\n").unwrap();
        assert_eq!((c.variant, c.epochs), (Variant::Ver2, 3));
        let e = ExperimentConfig::from_text("learning_rate = 0.1").unwrap_err();
        assert!(matches!(&e, Error::Config { key, .. } if key == "learning_rate"), "{e}");
        let e = ExperimentConfig::from_text("epochs = many").unwrap_err();
        assert!(matches!(&e, Error::Config { key, .. } if key == "epochs"));
        assert!(matches!(ExperimentConfig::from_text("epochs 3"), Err(Error::Parse { line: 1, .. })));
        assert!(ExperimentConfig::from_text("batch_size = 0").is_err());
        assert!(ExperimentConfig::from_text("variant = sideways").is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let c = ExperimentConfig::default();
        for k in ExperimentConfig::KEYS {
            let mut d = c.clone();
            d.set(k, &c.get(k).unwrap()).unwrap();
            assert_eq!(d, c, "{k}");
        }
    }
}
