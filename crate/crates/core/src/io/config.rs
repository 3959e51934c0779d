//! Flat `key = value` run configuration.
//!
//! `#` starts a comment. Unknown and repeated keys are rejected, and every
//! downstream constraint is checked when the file is parsed.

use std::path::Path;

use crate::alignment::{AlignConfig, Direction};
use crate::convert::ForecastConfig;
use crate::error::{Error, Result};
use crate::tokenize::SegmentMode;
use crate::training::{BundleConfig, Optimizer, WarmupConfig};

pub const KEYS: [&str; 17] = [
    "seed",
    "N",
    "D",
    "M",
    "K",
    "f",
    "l",
    "depth",
    "E",
    "learning_rate",
    "steps",
    "batch_size",
    "context_length",
    "horizon",
    "w_obs",
    "w_out",
    "mode",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Tokens per sample, a perfect square.
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub codes: usize,
    pub patch: usize,
    pub segment: usize,
    pub depth: usize,
    pub align_width: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub context_length: usize,
    pub horizon: usize,
    pub w_obs: usize,
    pub w_out: usize,
    pub mode: SegmentMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            tokens: 16,
            dim: 16,
            heads: 4,
            codes: 16,
            patch: 4,
            segment: 4,
            depth: 2,
            align_width: 16,
            learning_rate: 1e-2,
            steps: 2000,
            batch_size: 16,
            context_length: 64,
            horizon: 128,
            w_obs: 16,
            w_out: 48,
            mode: SegmentMode::Strict,
        }
    }
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: {key} = {value:?} is not valid")))
}

fn isqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected key = value")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("line {line}: unknown key {key:?}")));
            }
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {line}: duplicate key {key:?}")));
            }
            seen.push(key);
            match key {
                "seed" => cfg.seed = parse_value(line, key, value)?,
                "N" => cfg.tokens = parse_value(line, key, value)?,
                "D" => cfg.dim = parse_value(line, key, value)?,
                "M" => cfg.heads = parse_value(line, key, value)?,
                "K" => cfg.codes = parse_value(line, key, value)?,
                "f" => cfg.patch = parse_value(line, key, value)?,
                "l" => cfg.segment = parse_value(line, key, value)?,
                "depth" => cfg.depth = parse_value(line, key, value)?,
                "E" => cfg.align_width = parse_value(line, key, value)?,
                "learning_rate" => cfg.learning_rate = parse_value(line, key, value)?,
                "steps" => cfg.steps = parse_value(line, key, value)?,
                "batch_size" => cfg.batch_size = parse_value(line, key, value)?,
                "context_length" => cfg.context_length = parse_value(line, key, value)?,
                "horizon" => cfg.horizon = parse_value(line, key, value)?,
                "w_obs" => cfg.w_obs = parse_value(line, key, value)?,
                "w_out" => cfg.w_out = parse_value(line, key, value)?,
                "mode" => {
                    cfg.mode = match value {
                        "strict" => SegmentMode::Strict,
                        "lenient" => SegmentMode::Lenient,
                        _ => return Err(Error::Config(format!("line {line}: mode must be strict or lenient"))),
                    }
                }
                _ => unreachable!("key list checked above"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mode = match self.mode {
            SegmentMode::Strict => "strict",
            SegmentMode::Lenient => "lenient",
        };
        format!(
            "seed = {}\nN = {}\nD = {}\nM = {}\nK = {}\nf = {}\nl = {}\ndepth = {}\nE = {}\n\
             learning_rate = {:?}\nsteps = {}\nbatch_size = {}\ncontext_length = {}\nhorizon = {}\n\
             w_obs = {}\nw_out = {}\nmode = {mode}\n",
            self.seed,
            self.tokens,
            self.dim,
            self.heads,
            self.codes,
            self.patch,
            self.segment,
            self.depth,
            self.align_width,
            self.learning_rate,
            self.steps,
            self.batch_size,
            self.context_length,
            self.horizon,
            self.w_obs,
            self.w_out,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let side = isqrt(self.tokens)
            .filter(|&r| r > 0)
            .ok_or_else(|| Error::Config(format!("N = {} must be a positive perfect square", self.tokens)))?;
        self.bundle_config_unchecked(side).validate()?;
        self.warmup_config().validate()?;
        if self.align_width == 0 {
            return Err(Error::Config("E must be at least 1".into()));
        }
        self.forecast_config().validate_against(&self.bundle_config_unchecked(side))
    }

    fn bundle_config_unchecked(&self, side: usize) -> BundleConfig {
        BundleConfig {
            image_height: self.patch * side,
            image_width: self.patch * side,
            channels: 1,
            patch: self.patch,
            series_len: self.tokens * self.segment,
            segment: self.segment,
            mode: self.mode,
            dim: self.dim,
            heads: self.heads,
            codes: self.codes,
            depth: self.depth,
        }
    }

    /// Square grayscale images of side `f * sqrt(N)` and series of length `N * l`.
    pub fn bundle_config(&self) -> BundleConfig {
        self.bundle_config_unchecked(isqrt(self.tokens).unwrap_or(0))
    }

    pub fn warmup_config(&self) -> WarmupConfig {
        WarmupConfig {
            learning_rate: self.learning_rate,
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
            optimizer: Optimizer::Momentum(0.9),
        }
    }

    /// Alignment keeps its own learning rate; `learning_rate` drives warmup.
    pub fn align_config(&self, direction: Direction) -> AlignConfig {
        AlignConfig {
            direction,
            width: self.align_width,
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
            ..AlignConfig::default()
        }
    }

    pub fn forecast_config(&self) -> ForecastConfig {
        ForecastConfig {
            context_length: self.context_length,
            horizon: self.horizon,
            w_obs: self.w_obs,
            w_out: self.w_out,
        }
    }
}
