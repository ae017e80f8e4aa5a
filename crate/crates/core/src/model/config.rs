use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosEncoding {
    /// Rotary embedding applied to queries and keys inside attention.
    Rope,
    /// Fixed sinusoid added to the token embedding.
    Sinusoidal,
    None,
}

impl fmt::Display for PosEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PosEncoding::Rope => "rope",
            PosEncoding::Sinusoidal => "sinusoidal",
            PosEncoding::None => "none",
        })
    }
}

impl FromStr for PosEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rope" => Ok(PosEncoding::Rope),
            "sinusoidal" => Ok(PosEncoding::Sinusoidal),
            "none" => Ok(PosEncoding::None),
            other => Err(Error::InvalidConfig(format!("unknown pos_encoding '{other}'"))),
        }
    }
}

pub const DEFAULT_LN_EPSILON: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10_000.0;

fn default_ln_epsilon() -> f64 {
    DEFAULT_LN_EPSILON
}

fn default_true() -> bool {
    true
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_vocab: usize,
    pub max_seq: usize,
    pub pos_encoding: PosEncoding,
    #[serde(default = "default_ln_epsilon")]
    pub ln_epsilon: f64,
    #[serde(default = "default_true")]
    pub final_ln: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("d_vocab", self.d_vocab),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.pos_encoding == PosEncoding::Rope && !self.head_dim().is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "rope needs an even head dimension, got {}",
                self.head_dim()
            )));
        }
        if !(self.ln_epsilon > 0.0 && self.ln_epsilon.is_finite()) {
            return Err(Error::InvalidConfig(
                "ln_epsilon must be a positive finite number".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `max(1, round(d_model / 10))`.
    pub fn default_k(&self) -> usize {
        ((self.d_model as f64 / 10.0).round() as usize).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            d_vocab: 10,
            max_seq: 16,
            pos_encoding: PosEncoding::Rope,
            ln_epsilon: 1e-5,
            final_ln: true,
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(cfg().validate().is_ok());
        let mut c = cfg();
        c.n_layers = 0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.ln_epsilon = 0.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.d_model = 6;
        c.n_heads = 2;
        assert!(c.validate().is_err(), "odd rope head dim");
    }

    #[test]
    fn defaults_fill_in() {
        let json = r#"{"n_layers":1,"d_model":4,"n_heads":1,"d_ff":4,"d_vocab":3,"max_seq":5,"pos_encoding":"none"}"#;
        let c: ModelConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.ln_epsilon, DEFAULT_LN_EPSILON);
        assert!(c.final_ln);
        assert_eq!(cfg().default_k(), 1);
    }
}
