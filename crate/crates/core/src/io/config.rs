//! `key = value` run configuration.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::loss::{LossWeights, EXTRACTOR_SEED};
use crate::network::NetworkConfig;
use crate::optim::AdamConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub image_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub seed: u64,
    pub extractor_seed: u64,
    pub block_side: usize,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let a = AdamConfig::default();
        RunConfig {
            image_size: 64,
            steps: 200,
            learning_rate: a.lr,
            adam_beta1: a.beta1,
            adam_beta2: a.beta2,
            adam_eps: a.eps,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            delta: w.delta,
            seed: 0,
            extractor_seed: EXTRACTOR_SEED,
            block_side: 8,
            data: None,
            checkpoint: None,
        }
    }
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config { line, msg: format!("cannot parse {key} = {value:?}") })
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut lines: HashMap<String, usize> = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config { line, msg: format!("expected `key = value`, got {content:?}") })?;
            if lines.insert(key.to_string(), line).is_some() {
                return Err(Error::Config { line, msg: format!("duplicate key {key}") });
            }
            match key {
                "image_size" => cfg.image_size = parse(line, key, value)?,
                "steps" => cfg.steps = parse(line, key, value)?,
                "learning_rate" => cfg.learning_rate = parse(line, key, value)?,
                "adam_beta1" => cfg.adam_beta1 = parse(line, key, value)?,
                "adam_beta2" => cfg.adam_beta2 = parse(line, key, value)?,
                "adam_eps" => cfg.adam_eps = parse(line, key, value)?,
                "alpha" => cfg.alpha = parse(line, key, value)?,
                "beta" => cfg.beta = parse(line, key, value)?,
                "gamma" => cfg.gamma = parse(line, key, value)?,
                "delta" => cfg.delta = parse(line, key, value)?,
                "seed" => cfg.seed = parse(line, key, value)?,
                "extractor_seed" => cfg.extractor_seed = parse(line, key, value)?,
                "block_side" => cfg.block_side = parse(line, key, value)?,
                "data" => cfg.data = Some(PathBuf::from(value)),
                "checkpoint" => cfg.checkpoint = Some(PathBuf::from(value)),
                _ => return Err(Error::Config { line, msg: format!("unknown key {key}") }),
            }
        }
        cfg.validate_at(|k| lines.get(k).copied().unwrap_or(0))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_at(|_| 0)
    }

    fn validate_at(&self, line_of: impl Fn(&str) -> usize) -> Result<()> {
        let err = |key: &str, msg: String| Err(Error::Config { line: line_of(key), msg });
        if self.block_side == 0 {
            return err("block_side", "block_side must be positive".into());
        }
        if self.image_size == 0 || self.image_size % self.block_side != 0 {
            return err(
                "image_size",
                format!("image_size {} is not a positive multiple of block_side {}", self.image_size, self.block_side),
            );
        }
        if let Err(e) = self.adam().validate() {
            return err("learning_rate", e.to_string());
        }
        if let Err(e) = self.loss_weights().validate() {
            return err("alpha", e.to_string());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha, beta: self.beta, gamma: self.gamma, delta: self.delta }
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig { block_side: self.block_side, ..NetworkConfig::default() }
    }

    /// The effective configuration in the same syntax it is read from.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("image_size", self.image_size.to_string());
        kv("steps", self.steps.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("adam_beta1", self.adam_beta1.to_string());
        kv("adam_beta2", self.adam_beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("alpha", self.alpha.to_string());
        kv("beta", self.beta.to_string());
        kv("gamma", self.gamma.to_string());
        kv("delta", self.delta.to_string());
        kv("seed", self.seed.to_string());
        kv("extractor_seed", self.extractor_seed.to_string());
        kv("block_side", self.block_side.to_string());
        if let Some(d) = &self.data {
            kv("data", d.display().to_string());
        }
        if let Some(c) = &self.checkpoint {
            kv("checkpoint", c.display().to_string());
        }
        s
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::parse_str(&std::fs::read_to_string(path)?)
}
