use serde::{Deserialize, Serialize};

use super::config::{Mode, RunConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Term {
    Det,
    Icr,
    Img,
    Ins,
    Cst,
    Global,
    Local,
}

impl Term {
    pub const ALL: [Term; 7] = [
        Term::Det,
        Term::Icr,
        Term::Img,
        Term::Ins,
        Term::Cst,
        Term::Global,
        Term::Local,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Det => "l_det",
            Term::Icr => "l_icr",
            Term::Img => "l_img",
            Term::Ins => "l_ins",
            Term::Cst => "l_cst",
            Term::Global => "l_global",
            Term::Local => "l_local",
        }
    }
}

/// Loss parts of one step; `None` marks a term the mode does not compute.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_det: Option<f64>,
    pub l_icr: Option<f64>,
    pub l_img: Option<f64>,
    pub l_ins: Option<f64>,
    pub l_cst: Option<f64>,
    pub l_global: Option<f64>,
    pub l_local: Option<f64>,
}

impl LossBundle {
    pub fn get(&self, t: Term) -> Option<f64> {
        *self.slot(t)
    }

    pub fn set(&mut self, t: Term, v: f64) {
        *self.slot_mut(t) = Some(v);
    }

    /// Value with absent terms read as 0.
    pub fn value(&self, t: Term) -> f64 {
        self.get(t).unwrap_or(0.0)
    }

    fn slot(&self, t: Term) -> &Option<f64> {
        match t {
            Term::Det => &self.l_det,
            Term::Icr => &self.l_icr,
            Term::Img => &self.l_img,
            Term::Ins => &self.l_ins,
            Term::Cst => &self.l_cst,
            Term::Global => &self.l_global,
            Term::Local => &self.l_local,
        }
    }

    fn slot_mut(&mut self, t: Term) -> &mut Option<f64> {
        match t {
            Term::Det => &mut self.l_det,
            Term::Icr => &mut self.l_icr,
            Term::Img => &mut self.l_img,
            Term::Ins => &mut self.l_ins,
            Term::Cst => &mut self.l_cst,
            Term::Global => &mut self.l_global,
            Term::Local => &mut self.l_local,
        }
    }

    pub fn present(&self) -> Vec<&'static str> {
        Term::ALL
            .iter()
            .filter(|&&t| self.get(t).is_some())
            .map(|t| t.name())
            .collect()
    }
}

/// Objective shape: `sum(unit) + coefficient * sum(scaled)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub unit: Vec<Term>,
    pub coefficient: f64,
    pub scaled: Vec<Term>,
}

impl Objective {
    pub fn for_config(config: &RunConfig) -> Self {
        let mode = config.mode;
        let mut unit = vec![Term::Det];
        if mode.uses_icr() {
            unit.push(Term::Icr);
        }
        let (coefficient, scaled) = match mode {
            Mode::SourceOnly => (0.0, vec![]),
            Mode::SwStructure => (config.lambda_prime, vec![Term::Ins, Term::Global, Term::Local]),
            _ => {
                let mut s = vec![Term::Img, Term::Ins];
                if config.consistency {
                    s.push(Term::Cst);
                }
                (config.lambda, s)
            }
        };
        Self {
            unit,
            coefficient,
            scaled,
        }
    }

    pub fn terms(&self) -> impl Iterator<Item = Term> + '_ {
        self.unit.iter().chain(&self.scaled).copied()
    }
}

/// Total objective of a mode from its parts. A part the mode needs but the
/// bundle lacks is a contract error naming that term.
pub fn compose_objective(parts: &LossBundle, config: &RunConfig) -> Result<f64> {
    let obj = Objective::for_config(config);
    let fetch = |t: Term| {
        parts
            .get(t)
            .ok_or_else(|| Error::contract(format!("mode {} requires loss term {}", config.mode, t.name())))
    };
    let mut base = 0.0;
    for &t in &obj.unit {
        base += fetch(t)?;
    }
    if obj.scaled.is_empty() {
        return Ok(base);
    }
    let mut adapt = 0.0;
    for &t in &obj.scaled {
        adapt += fetch(t)?;
    }
    Ok(base + obj.coefficient * adapt)
}
