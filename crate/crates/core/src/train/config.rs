use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Optimization and schedule settings, read from `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    /// First step at which pyramid and atrous-branch parameters are updated.
    pub spap_update_start: usize,
    pub lambda_cyc: f64,
    pub seed: u64,
    /// Latent dimension of the GAN generator input.
    pub dz: usize,
    pub metrics_every: usize,
    /// Zero disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: usize,
    pub fid_samples: usize,
    /// Step from which learning rates fall linearly to zero at `total_steps`.
    pub decay_start: Option<usize>,
    /// Generator minimizes `log(1 − D(G(z)))` instead of `−log D(G(z))`.
    pub minimax: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_g: 1e-4,
            lr_d: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            total_steps: 100_000,
            spap_update_start: 40_000,
            lambda_cyc: 10.0,
            seed: 0,
            dz: 128,
            metrics_every: 50,
            checkpoint_every: 500,
            fid_samples: 256,
            decay_start: None,
            minimax: false,
        }
    }
}

fn parse<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("line {line}: `{key}` cannot take value `{v}`")))
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" => Ok(false),
        _ => Err(Error::Config(format!("line {line}: `{key}` expects true or false, got `{v}`"))),
    }
}

impl TrainConfig {
    /// Schedule used for quick single-core runs.
    pub fn desk() -> Self {
        TrainConfig { batch_size: 16, total_steps: 2000, spap_update_start: 800, ..Self::default() }
    }

    /// Overrides fields of `self` from `key = value` lines; `#` starts a comment.
    pub fn apply_text(mut self, text: &str) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {line}: expected key = value")))?;
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {line}: `{key}` given twice")));
            }
            match key {
                "lr_g" => self.lr_g = parse(line, key, value)?,
                "lr_d" => self.lr_d = parse(line, key, value)?,
                "beta1" => self.beta1 = parse(line, key, value)?,
                "beta2" => self.beta2 = parse(line, key, value)?,
                "adam_eps" => self.adam_eps = parse(line, key, value)?,
                "batch_size" => self.batch_size = parse(line, key, value)?,
                "total_steps" => self.total_steps = parse(line, key, value)?,
                "spap_update_start" => self.spap_update_start = parse(line, key, value)?,
                "lambda_cyc" => self.lambda_cyc = parse(line, key, value)?,
                "seed" => self.seed = parse(line, key, value)?,
                "dz" => self.dz = parse(line, key, value)?,
                "metrics_every" => self.metrics_every = parse(line, key, value)?,
                "checkpoint_every" => self.checkpoint_every = parse(line, key, value)?,
                "fid_samples" => self.fid_samples = parse(line, key, value)?,
                "decay_start" => self.decay_start = if value == "none" { None } else { Some(parse(line, key, value)?) },
                "minimax" => self.minimax = parse_bool(line, key, value)?,
                _ => return Err(Error::Config(format!("line {line}: unknown key `{key}`"))),
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::default().apply_text(text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return fail("learning rates must be positive");
        }
        if !(0.0 < self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return fail("need 0 < beta1 < beta2 < 1");
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive");
        }
        if !(self.lambda_cyc >= 0.0 && self.lambda_cyc.is_finite()) {
            return fail("lambda_cyc must be a non-negative number");
        }
        if self.batch_size == 0 || self.total_steps == 0 || self.dz == 0 || self.metrics_every == 0 {
            return fail("batch_size, total_steps, dz and metrics_every must be positive");
        }
        if self.fid_samples < 2 {
            return fail("fid_samples must be at least 2");
        }
        if self.decay_start.is_some_and(|d| d >= self.total_steps) {
            return fail("decay_start must be before total_steps");
        }
        Ok(())
    }

    /// Learning rate for update `step`: constant, then linear to zero at `total_steps`.
    pub fn lr_at(&self, base: f64, step: usize) -> f64 {
        match self.decay_start {
            Some(d) if step >= d => base * (self.total_steps.saturating_sub(step)) as f64 / (self.total_steps - d) as f64,
            _ => base,
        }
    }
}

impl fmt::Display for TrainConfig {
    /// Every field as `key = value`, in a form [`TrainConfig::parse`] reads back.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "lr_g = {}", self.lr_g)?;
        writeln!(f, "lr_d = {}", self.lr_d)?;
        writeln!(f, "beta1 = {}", self.beta1)?;
        writeln!(f, "beta2 = {}", self.beta2)?;
        writeln!(f, "adam_eps = {}", self.adam_eps)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "total_steps = {}", self.total_steps)?;
        writeln!(f, "spap_update_start = {}", self.spap_update_start)?;
        writeln!(f, "lambda_cyc = {}", self.lambda_cyc)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "dz = {}", self.dz)?;
        writeln!(f, "metrics_every = {}", self.metrics_every)?;
        writeln!(f, "checkpoint_every = {}", self.checkpoint_every)?;
        writeln!(f, "fid_samples = {}", self.fid_samples)?;
        match self.decay_start {
            Some(d) => writeln!(f, "decay_start = {d}")?,
            None => writeln!(f, "decay_start = none")?,
        }
        writeln!(f, "minimax = {}", self.minimax)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = TrainConfig::parse("# desk\nbatch_size = 16\nlr_g=0.001 # faster\ndecay_start = 50\ntotal_steps = 100\n").unwrap();
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.lr_g, 0.001);
        assert_eq!(c.lr_d, 2e-4);
        assert_eq!(c.lambda_cyc, 10.0);
        assert_eq!(c.dz, 128);
        assert_eq!(TrainConfig::parse(&c.to_string()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::parse("lr = 1").is_err());
        assert!(TrainConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(TrainConfig::parse("beta1 = 0.999\nbeta2 = 0.5").is_err());
        assert!(TrainConfig::parse("lr_d = -1").is_err());
        assert!(TrainConfig::parse("batch_size").is_err());
        assert!(TrainConfig::parse("minimax = maybe").is_err());
    }

    #[test]
    fn linear_decay_reaches_zero() {
        let c = TrainConfig { total_steps: 1000, decay_start: Some(500), lr_g: 2e-4, ..TrainConfig::default() };
        assert_eq!(c.lr_at(2e-4, 499), 2e-4);
        assert_eq!(c.lr_at(2e-4, 500), 2e-4);
        assert!((c.lr_at(2e-4, 750) - 1e-4).abs() < 1e-18);
        assert!(c.lr_at(2e-4, 999) < 1e-6);
        assert_eq!(c.lr_at(2e-4, 1000), 0.0);
    }
}
