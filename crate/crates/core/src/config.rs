//! Run presets and flat `key=value` overrides.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{KetError, Result};
use crate::models::{ModelConfig, VariantId};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    PaperLm,
    PaperBlock,
}

impl FromStr for Preset {
    type Err = KetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper-lm" => Ok(Self::PaperLm),
            "paper-block" => Ok(Self::PaperBlock),
            _ => Err(KetError::InvalidConfig(format!("unknown preset `{s}` (desk, paper-lm, paper-block)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Desk => "desk",
            Self::PaperLm => "paper-lm",
            Self::PaperBlock => "paper-block",
        })
    }
}

pub const DEFAULT_SEEDS: [u64; 5] = [7, 11, 17, 19, 1337];

/// Every knob a run needs besides the variant and the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunProfile {
    pub preset: Preset,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub block_weight_decay: f64,
    pub clip: f64,
    pub report_every: usize,
    pub eval_every: usize,
    pub block_eval_every: usize,
    pub eval_cap: Option<usize>,
    pub block_eval_cap: Option<usize>,
    pub block_size: usize,
    pub topo_k: usize,
    pub topo_dim: usize,
    pub topo_tau: f64,
    pub carrier_temperature: f64,
    pub max_vocab: usize,
    pub seed: u64,
}

impl RunProfile {
    pub fn preset(preset: Preset) -> Self {
        let desk = Self {
            preset,
            d_model: 64,
            layers: 2,
            heads: 4,
            seq_len: 64,
            batch_size: 16,
            steps: 500,
            lr: 3e-3,
            weight_decay: 1e-5,
            block_weight_decay: 1e-2,
            clip: 1.0,
            report_every: 100,
            eval_every: 1000,
            block_eval_every: 250,
            eval_cap: None,
            block_eval_cap: Some(100),
            block_size: 4,
            topo_k: 16,
            topo_dim: 16,
            topo_tau: 1.0,
            carrier_temperature: 1.0,
            max_vocab: 10_000,
            seed: 7,
        };
        match preset {
            Preset::Desk => desk,
            Preset::PaperLm => Self { d_model: 256, seq_len: 128, batch_size: 32, steps: 5000, lr: 3e-4, ..desk },
            Preset::PaperBlock => {
                Self { layers: 8, seq_len: 128, batch_size: 32, steps: 2000, lr: 3e-4, ..desk }
            }
        }
    }

    /// Sets one field from its textual value. Unknown keys are rejected.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.trim().parse().map_err(|_| KetError::InvalidConfig(format!("bad value `{value}` for `{key}`")))
        }
        let v = value.trim();
        match key.trim() {
            "d_model" => self.d_model = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "seq_len" => self.seq_len = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "block_weight_decay" => self.block_weight_decay = parse(key, v)?,
            "clip" => self.clip = parse(key, v)?,
            "report_every" => self.report_every = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "block_eval_every" => self.block_eval_every = parse(key, v)?,
            "eval_cap" => self.eval_cap = parse_cap(key, v)?,
            "block_eval_cap" => self.block_eval_cap = parse_cap(key, v)?,
            "block_size" => self.block_size = parse(key, v)?,
            "topo_k" => self.topo_k = parse(key, v)?,
            "topo_dim" => self.topo_dim = parse(key, v)?,
            "topo_tau" => self.topo_tau = parse(key, v)?,
            "carrier_temperature" => self.carrier_temperature = parse(key, v)?,
            "max_vocab" => self.max_vocab = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "preset" => return Err(KetError::InvalidConfig("choose the preset with --preset".into())),
            other => return Err(KetError::InvalidConfig(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| KetError::InvalidConfig(format!("line {}: expected key=value", n + 1)))?;
            self.apply(k, v)?;
        }
        Ok(())
    }

    pub fn model_config(&self, variant: VariantId, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            seq_len: self.seq_len,
            topo_k: self.topo_k,
            topo_dim: self.topo_dim,
            topo_tau: self.topo_tau,
            carrier_temperature: self.carrier_temperature,
            block_size: self.block_size,
            seed: self.seed,
            ..ModelConfig::new(variant, vocab_size)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            steps: self.steps,
            batch_size: self.batch_size,
            clip: self.clip,
            eval_every: self.eval_every,
            report_every: self.report_every,
            eval_cap: self.eval_cap,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    /// Training settings for block-completion runs.
    pub fn block_train_config(&self) -> TrainConfig {
        TrainConfig {
            weight_decay: self.block_weight_decay,
            eval_every: self.block_eval_every,
            eval_cap: self.block_eval_cap,
            ..self.train_config()
        }
    }
}

fn parse_cap(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "none" {
        return Ok(None);
    }
    value
        .parse()
        .map(Some)
        .map_err(|_| KetError::InvalidConfig(format!("bad value `{value}` for `{key}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_their_profiles() {
        let lm = RunProfile::preset(Preset::PaperLm);
        assert_eq!((lm.d_model, lm.layers, lm.heads, lm.seq_len, lm.batch_size, lm.steps), (256, 2, 4, 128, 32, 5000));
        assert_eq!((lm.lr, lm.weight_decay, lm.clip), (3e-4, 1e-5, 1.0));
        let block = RunProfile::preset(Preset::PaperBlock);
        assert_eq!((block.d_model, block.layers, block.steps, block.block_size), (64, 8, 2000, 4));
        assert_eq!((block.block_weight_decay, block.block_eval_every, block.block_eval_cap), (1e-2, 250, Some(100)));
        let desk = RunProfile::preset(Preset::Desk);
        assert_eq!((desk.d_model, desk.layers, desk.seq_len, desk.batch_size, desk.steps), (64, 2, 64, 16, 500));
    }

    #[test]
    fn text_overrides_and_rejections() {
        let mut p = RunProfile::preset(Preset::Desk);
        p.apply_text("# comment\nsteps = 20\n\nlr=0.01 # trailing\neval_cap=none\n").unwrap();
        assert_eq!((p.steps, p.lr, p.eval_cap), (20, 0.01, None));
        assert!(p.apply("bogus", "1").is_err());
        assert!(p.apply("steps", "many").is_err());
        assert!(p.apply_text("steps 3").is_err());
        assert!("desk".parse::<Preset>().is_ok() && "huge".parse::<Preset>().is_err());
    }
}
