use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training modes. The first four form an ablation ladder, each adding one
/// ingredient to the previous one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SourceOnly,
    DaFaster,
    DaFasterIcr,
    DaFasterIcrCcr,
    SwStructure,
}

impl Mode {
    pub const LADDER: [Mode; 4] = [
        Mode::SourceOnly,
        Mode::DaFaster,
        Mode::DaFasterIcr,
        Mode::DaFasterIcrCcr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::SourceOnly => "source_only",
            Mode::DaFaster => "da_faster",
            Mode::DaFasterIcr => "da_faster_icr",
            Mode::DaFasterIcrCcr => "da_faster_icr_ccr",
            Mode::SwStructure => "sw_structure",
        }
    }

    pub fn is_adaptive(self) -> bool {
        self != Mode::SourceOnly
    }

    pub fn uses_icr(self) -> bool {
        matches!(self, Mode::DaFasterIcr | Mode::DaFasterIcrCcr | Mode::SwStructure)
    }

    pub fn uses_ccr(self) -> bool {
        matches!(self, Mode::DaFasterIcrCcr | Mode::SwStructure)
    }

    /// Image-level and consistency terms of the DA-Faster family.
    pub fn uses_image_alignment(self) -> bool {
        matches!(self, Mode::DaFaster | Mode::DaFasterIcr | Mode::DaFasterIcrCcr)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Mode::SourceOnly,
            Mode::DaFaster,
            Mode::DaFasterIcr,
            Mode::DaFasterIcrCcr,
            Mode::SwStructure,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| Error::config("mode", format!("unknown mode `{s}`")))
    }
}

mod defaults {
    pub fn lambda() -> f64 {
        0.1
    }
    pub fn lambda_prime() -> f64 {
        1.0
    }
    pub fn iters_phase1() -> usize {
        1500
    }
    pub fn iters_phase2() -> usize {
        500
    }
    pub fn lr_phase1() -> f64 {
        1e-3
    }
    pub fn lr_phase2() -> f64 {
        1e-4
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn weight_decay() -> f64 {
        5e-4
    }
    pub fn yes() -> bool {
        true
    }
    pub fn max_grad_norm() -> f64 {
        0.0
    }
}

/// Flat run configuration, read from a TOML file of `key = value` lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::lambda_prime")]
    pub lambda_prime: f64,
    #[serde(default = "defaults::iters_phase1")]
    pub iters_phase1: usize,
    #[serde(default = "defaults::iters_phase2")]
    pub iters_phase2: usize,
    #[serde(default = "defaults::lr_phase1")]
    pub lr_phase1: f64,
    #[serde(default = "defaults::lr_phase2")]
    pub lr_phase2: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 writes only the
    /// final one.
    #[serde(default)]
    pub checkpoint_interval: usize,
    /// Include the image/instance consistency term in DA-Faster modes.
    #[serde(default = "defaults::yes")]
    pub consistency: bool,
    /// Global gradient-norm ceiling applied before each update; 0 disables.
    #[serde(default = "defaults::max_grad_norm")]
    pub max_grad_norm: f64,
}

impl RunConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            lambda: defaults::lambda(),
            lambda_prime: defaults::lambda_prime(),
            iters_phase1: defaults::iters_phase1(),
            iters_phase2: defaults::iters_phase2(),
            lr_phase1: defaults::lr_phase1(),
            lr_phase2: defaults::lr_phase2(),
            momentum: defaults::momentum(),
            weight_decay: defaults::weight_decay(),
            seed: 0,
            checkpoint_interval: 0,
            consistency: true,
            max_grad_norm: defaults::max_grad_norm(),
        }
    }

    pub fn total_iters(&self) -> usize {
        self.iters_phase1 + self.iters_phase2
    }

    pub fn learning_rate(&self, iter: usize) -> f64 {
        if iter < self.iters_phase1 {
            self.lr_phase1
        } else {
            self.lr_phase2
        }
    }

    /// `lambda = 0` is accepted for adaptive modes so the adaptation terms
    /// can be switched off without changing the draw order; it is only
    /// rejected when negative.
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda", self.lambda),
            ("lambda_prime", self.lambda_prime),
            ("weight_decay", self.weight_decay),
            ("max_grad_norm", self.max_grad_norm),
        ];
        for (field, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(field, "must be a finite value >= 0"));
            }
        }
        for (field, v) in [("lr_phase1", self.lr_phase1), ("lr_phase2", self.lr_phase2)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::config(field, "must be a finite value > 0"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if self.total_iters() == 0 {
            return Err(Error::config("iters_phase1", "at least one iteration is required"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::toml(text, &e, "run config"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }
}
