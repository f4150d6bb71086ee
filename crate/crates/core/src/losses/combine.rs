use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which task objectives enter a training sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSelection {
    pub cls: bool,
    pub bbox: bool,
    pub mask: bool,
    pub gen: bool,
}

impl LossSelection {
    pub const DETECTION: Self = Self {
        cls: true,
        bbox: true,
        mask: true,
        gen: false,
    };

    pub fn is_empty(&self) -> bool {
        !(self.cls || self.bbox || self.mask || self.gen)
    }

    pub fn require_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Config("loss selection is empty".into()));
        }
        Ok(())
    }

    /// The seven non-empty subsets of {cls, bbox, mask}, singletons first.
    pub fn detection_combinations() -> Vec<Self> {
        let mk = |cls, bbox, mask| Self {
            cls,
            bbox,
            mask,
            gen: false,
        };
        vec![
            mk(true, false, false),
            mk(false, true, false),
            mk(false, false, true),
            mk(true, true, false),
            mk(true, false, true),
            mk(false, true, true),
            mk(true, true, true),
        ]
    }
}

impl fmt::Display for LossSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        for (on, name) in [(self.cls, "cls"), (self.bbox, "bbox"), (self.mask, "mask"), (self.gen, "gen")] {
            if on {
                parts.push(name);
            }
        }
        write!(f, "{}", parts.join("+"))
    }
}

impl FromStr for LossSelection {
    type Err = Error;

    /// Parses `cls,bbox` or `cls+bbox`.
    fn from_str(s: &str) -> Result<Self> {
        let mut sel = Self::default();
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "cls" => sel.cls = true,
                "bbox" | "box" => sel.bbox = true,
                "mask" => sel.mask = true,
                "gen" => sel.gen = true,
                other => return Err(Error::Config(format!("unknown loss `{other}`"))),
            }
        }
        sel.require_nonempty()?;
        Ok(sel)
    }
}

/// Per-objective values of one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub bbox: f64,
    pub mask: f64,
    pub gen: f64,
}

impl std::ops::AddAssign for LossComponents {
    fn add_assign(&mut self, o: Self) {
        self.cls += o.cls;
        self.bbox += o.bbox;
        self.mask += o.mask;
        self.gen += o.gen;
    }
}

impl LossComponents {
    pub fn scaled(self, s: f64) -> Self {
        Self {
            cls: self.cls * s,
            bbox: self.bbox * s,
            mask: self.mask * s,
            gen: self.gen * s,
        }
    }
}

/// Unweighted sum of the selected components.
pub fn combine_losses(selection: &LossSelection, c: &LossComponents) -> f64 {
    let mut total = 0.0;
    for (on, v) in [(selection.cls, c.cls), (selection.bbox, c.bbox), (selection.mask, c.mask), (selection.gen, c.gen)] {
        if on {
            total += v;
        }
    }
    total
}
