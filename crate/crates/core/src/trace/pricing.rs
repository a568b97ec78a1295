use serde::{Deserialize, Serialize};

use super::RoundRecord;
use crate::error::{Error, Result};

/// Per-token prices in cents. The base model defaults to free (local inference).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceTable {
    #[serde(default)]
    pub base_input: f64,
    #[serde(default)]
    pub base_output: f64,
    pub guide_input: f64,
    pub guide_output: f64,
}

impl Default for PriceTable {
    /// GPT-4o list prices ($2.50 / $10.00 per million tokens) for the guide.
    fn default() -> Self {
        Self {
            base_input: 0.0,
            base_output: 0.0,
            guide_input: 0.00025,
            guide_output: 0.001,
        }
    }
}

impl PriceTable {
    pub fn zero() -> Self {
        Self {
            base_input: 0.0,
            base_output: 0.0,
            guide_input: 0.0,
            guide_output: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("prices.base_input", self.base_input),
            ("prices.base_output", self.base_output),
            ("prices.guide_input", self.guide_input),
            ("prices.guide_output", self.guide_output),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(name, format!("{v} is not a non-negative price")));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            base_input: self.base_input * factor,
            base_output: self.base_output * factor,
            guide_input: self.guide_input * factor,
            guide_output: self.guide_output * factor,
        }
    }
}

/// Which model calls were issued during a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CallsMade {
    pub base: bool,
    pub guide: bool,
}

impl CallsMade {
    /// Every orchestration round runs the base model and then the guide model.
    pub const ROUND: CallsMade = CallsMade {
        base: true,
        guide: true,
    };
}

/// API spend, in cents, of the calls made during one step.
pub fn step_cost(record: &RoundRecord, calls: CallsMade, prices: &PriceTable) -> f64 {
    let mut cost = 0.0;
    if calls.base {
        cost += record.base_tokens_in as f64 * prices.base_input
            + record.base_tokens_out as f64 * prices.base_output;
    }
    if calls.guide {
        cost += record.guide_tokens_in as f64 * prices.guide_input
            + record.guide_tokens_out as f64 * prices.guide_output;
    }
    cost
}
