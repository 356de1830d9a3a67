//! Pre-norm transformer encoder with a binary token-level head and a
//! weight-tied LM head, plus a hand-written backward pass.

mod backward;
mod forward;
mod ops;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backward::{loss_from_logits, predict_binary, LossOutput};
pub use forward::{Encoded, ForwardOutput, LayerCache};
pub use params::{LayerParams, TransformerParams};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadType {
    Binary,
    Lm,
}

impl fmt::Display for HeadType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadType::Binary => "binary",
            HeadType::Lm => "lm",
        })
    }
}

impl FromStr for HeadType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary" => Ok(HeadType::Binary),
            "lm" => Ok(HeadType::Lm),
            _ => Err(Error::config(format!("unknown head type `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub head_type: HeadType,
}

impl ModelConfig {
    /// 12 layers, hidden 768, 12 heads, intermediate 3072, length 512.
    pub fn base(vocab_size: usize, head_type: HeadType) -> Self {
        Self {
            layers: 12,
            hidden: 768,
            heads: 12,
            intermediate: 3072,
            max_len: 512,
            vocab_size,
            head_type,
        }
    }

    /// Token-detection generator: 12 layers, hidden 256, 4 heads.
    pub fn generator(vocab_size: usize) -> Self {
        Self {
            layers: 12,
            hidden: 256,
            heads: 4,
            intermediate: 1024,
            max_len: 512,
            vocab_size,
            head_type: HeadType::Lm,
        }
    }

    pub fn desk(vocab_size: usize, max_len: usize, head_type: HeadType) -> Self {
        Self {
            layers: 2,
            hidden: 64,
            heads: 4,
            intermediate: 256,
            max_len,
            vocab_size,
            head_type,
        }
    }

    /// Desk generator at half the desk discriminator's width.
    pub fn desk_generator(vocab_size: usize, max_len: usize) -> Self {
        Self {
            hidden: 32,
            heads: 2,
            intermediate: 128,
            ..Self::desk(vocab_size, max_len, HeadType::Lm)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.intermediate == 0 || self.max_len == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size <= crate::corpus::NUM_SPECIALS {
            return Err(Error::config("vocab_size must exceed the special tokens"));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let (h, i) = (self.hidden, self.intermediate);
        let layer = 4 * (h * h + h) + h * i + i + i * h + h + 4 * h;
        self.vocab_size * h + self.max_len * h + self.layers * layer + 2 * h + h + 1 + self.vocab_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transformer {
    pub config: ModelConfig,
    pub params: TransformerParams,
}

impl Transformer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = TransformerParams::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: TransformerParams) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }
}
