//! Scheduled weight for the weak-image classification loss.
//!
//! Every schedule starts at `FLOOR` (except the constant one) and rises to 1.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FLOOR: f64 = 0.01;
pub const CEILING_SCALE: f64 = 0.99;
pub const DECAY_BASE: f64 = 0.9;
pub const DECAY_PERIOD: f64 = 2000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlphaSchedule {
    Constant,
    InverseExponential,
    Linear,
    Polynomial { exponent: u32 },
}

impl AlphaSchedule {
    /// The six published schedules, from least to most conservative.
    pub const PUBLISHED: [AlphaSchedule; 6] = [
        AlphaSchedule::Constant,
        AlphaSchedule::InverseExponential,
        AlphaSchedule::Linear,
        AlphaSchedule::Polynomial { exponent: 5 },
        AlphaSchedule::Polynomial { exponent: 16 },
        AlphaSchedule::Polynomial { exponent: 32 },
    ];

    pub fn polynomial(exponent: u32) -> Result<Self> {
        if exponent == 0 {
            return Err(Error::invalid("polynomial exponent must be >= 1"));
        }
        Ok(AlphaSchedule::Polynomial { exponent })
    }

    /// Weight applied to the weak loss at `step` out of `total_steps`.
    pub fn alpha_at(&self, step: u64, total_steps: u64) -> Result<f64> {
        if total_steps == 0 {
            return Err(Error::invalid("total_steps must be positive"));
        }
        if step > total_steps {
            return Err(Error::invalid(format!(
                "step {step} exceeds total_steps {total_steps}"
            )));
        }
        let progress = step as f64 / total_steps as f64;
        Ok(match *self {
            AlphaSchedule::Constant => 1.0,
            AlphaSchedule::InverseExponential => {
                // 1 - 0.99 * d, written so that step 0 yields FLOOR exactly
                FLOOR + CEILING_SCALE * (1.0 - DECAY_BASE.powf(step as f64 / DECAY_PERIOD))
            }
            AlphaSchedule::Linear => FLOOR + CEILING_SCALE * progress,
            AlphaSchedule::Polynomial { exponent } => {
                if exponent == 0 {
                    return Err(Error::invalid("polynomial exponent must be >= 1"));
                }
                FLOOR + CEILING_SCALE * powi_u32(progress, exponent)
            }
        })
    }

    /// Human-readable formula, echoed into reports.
    pub fn formula(&self) -> String {
        match *self {
            AlphaSchedule::Constant => "alpha = 1".to_string(),
            AlphaSchedule::InverseExponential => {
                "alpha = 1 - 0.99 * 0.9^(step/2000)".to_string()
            }
            AlphaSchedule::Linear => "alpha = 0.01 + 0.99 * (step/total_steps)".to_string(),
            AlphaSchedule::Polynomial { exponent } => {
                format!("alpha = 0.01 + 0.99 * (step/total_steps)^{exponent}")
            }
        }
    }

    /// Sort key following the published order; unknown exponents sort after by value.
    pub fn order_key(&self) -> (u32, u32) {
        match *self {
            AlphaSchedule::Constant => (0, 0),
            AlphaSchedule::InverseExponential => (1, 0),
            AlphaSchedule::Linear => (2, 0),
            AlphaSchedule::Polynomial { exponent } => (3, exponent),
        }
    }

    pub fn name(&self) -> String {
        self.to_string()
    }
}

// Repeated squaring; each product is rounded monotonically so the result is monotone in `x`.
fn powi_u32(x: f64, mut exponent: u32) -> f64 {
    let mut base = x;
    let mut acc = 1.0;
    while exponent > 0 {
        if exponent & 1 == 1 {
            acc *= base;
        }
        base *= base;
        exponent >>= 1;
    }
    acc
}

impl fmt::Display for AlphaSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlphaSchedule::Constant => f.write_str("constant"),
            AlphaSchedule::InverseExponential => f.write_str("inverse_exponential"),
            AlphaSchedule::Linear => f.write_str("linear"),
            AlphaSchedule::Polynomial { exponent } => write!(f, "polynomial-{exponent}"),
        }
    }
}

impl FromStr for AlphaSchedule {
    type Err = Error;

    /// Accepts `constant`, `inverse_exponential`, `linear`, `polynomial-<p>` / `polynomial:<p>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(AlphaSchedule::Constant),
            "inverse_exponential" | "inverse-exponential" => Ok(AlphaSchedule::InverseExponential),
            "linear" => Ok(AlphaSchedule::Linear),
            other => {
                let exp = other
                    .strip_prefix("polynomial-")
                    .or_else(|| other.strip_prefix("polynomial:"))
                    .ok_or_else(|| Error::invalid(format!("unknown schedule {other:?}")))?;
                let exponent = exp
                    .parse::<u32>()
                    .map_err(|_| Error::invalid(format!("bad polynomial exponent {exp:?}")))?;
                AlphaSchedule::polynomial(exponent)
            }
        }
    }
}
