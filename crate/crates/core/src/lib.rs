//! Design and analysis of observational studies with propensity scores.
//!
//! The design stages (`propensity`, `distance`, `matchers`, `weighting`,
//! `diagnostics`) never read the outcome; only `estimation` does. The
//! `pipeline` module strings the stages together from a JSON config, and
//! `simbench` generates synthetic studies with known truth.

pub mod dataset;
pub mod diagnostics;
pub mod distance;
pub mod estimation;
pub mod linalg;
pub mod matchers;
pub mod pipeline;
pub mod propensity;
pub mod simbench;
pub mod weighting;

use serde::{Deserialize, Serialize};

/// Target population of the causal effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimand {
    /// Average effect on the treated.
    #[serde(rename = "ATT")]
    Att,
    /// Average effect over the whole population.
    #[serde(rename = "ATE")]
    Ate,
}

impl std::fmt::Display for Estimand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Estimand::Att => "ATT",
            Estimand::Ate => "ATE",
        })
    }
}

impl std::str::FromStr for Estimand {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "ATT" => Ok(Estimand::Att),
            "ATE" => Ok(Estimand::Ate),
            _ => Err(format!("unknown estimand `{s}` (expected ATT or ATE)")),
        }
    }
}
