use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::dataset::ColumnRoles;
use crate::distance::{DistanceKind, SigmaSource};
use crate::estimation::SubclassMode;
use crate::propensity::FitOptions;
use crate::Estimand;

fn one() -> usize {
    1
}
fn five() -> usize {
    5
}
fn yes() -> bool {
    true
}
fn quarter() -> f64 {
    0.25
}

/// Order in which greedy matching visits treated units.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderSpec {
    #[default]
    DescendingPropensity,
    Index,
    /// Shuffled with the run seed.
    Random,
}

/// Which matcher or weighting scheme forms the design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum MatcherSpec {
    Greedy {
        #[serde(default = "one")]
        k: usize,
        #[serde(default)]
        with_replacement: bool,
        /// For propensity distances: standard deviations of the score used
        /// by the distance. Otherwise: an absolute distance.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        caliper: Option<f64>,
        #[serde(default)]
        order: OrderSpec,
    },
    Optimal {
        #[serde(default = "one")]
        k: usize,
    },
    Full {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min_ratio: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_ratio: Option<f64>,
    },
    Subclass {
        #[serde(default = "five")]
        n_subclasses: usize,
    },
    /// Strata of identical (or identically binned) key-column values.
    Exact,
    Iptw {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        trim: Option<f64>,
        #[serde(default)]
        clamp: bool,
    },
    Odds {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        trim: Option<f64>,
        #[serde(default)]
        clamp: bool,
    },
}

impl MatcherSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MatcherSpec::Greedy { .. } => "greedy",
            MatcherSpec::Optimal { .. } => "optimal",
            MatcherSpec::Full { .. } => "full",
            MatcherSpec::Subclass { .. } => "subclass",
            MatcherSpec::Exact => "exact",
            MatcherSpec::Iptw { .. } => "iptw",
            MatcherSpec::Odds { .. } => "odds",
        }
    }

    /// Default parameters for a method name.
    pub fn from_name(name: &str) -> Result<Self, PipelineError> {
        Ok(match name {
            "greedy" => MatcherSpec::Greedy {
                k: 1,
                with_replacement: false,
                caliper: None,
                order: OrderSpec::default(),
            },
            "optimal" => MatcherSpec::Optimal { k: 1 },
            "full" => MatcherSpec::Full {
                min_ratio: None,
                max_ratio: None,
            },
            "subclass" => MatcherSpec::Subclass { n_subclasses: 5 },
            "exact" => MatcherSpec::Exact,
            "iptw" => MatcherSpec::Iptw { trim: None, clamp: false },
            "odds" => MatcherSpec::Odds { trim: None, clamp: false },
            other => return Err(PipelineError::Config(format!("unknown method `{other}`"))),
        })
    }

    /// Estimands this method can target.
    pub fn supports(&self, estimand: Estimand) -> bool {
        match self {
            MatcherSpec::Greedy { .. } | MatcherSpec::Optimal { .. } | MatcherSpec::Odds { .. } => {
                estimand == Estimand::Att
            }
            MatcherSpec::Iptw { .. } => estimand == Estimand::Ate,
            MatcherSpec::Full { .. } | MatcherSpec::Subclass { .. } | MatcherSpec::Exact => true,
        }
    }

    fn default_distance(&self) -> DistanceKind {
        match self {
            MatcherSpec::Exact => DistanceKind::Exact,
            _ => DistanceKind::LinearPropensity,
        }
    }
}

impl Default for MatcherSpec {
    fn default() -> Self {
        MatcherSpec::from_name("greedy").expect("known method")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropensityConfig {
    /// Empty means every covariate.
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub squares: Vec<String>,
    #[serde(default)]
    pub interactions: Vec<(String, String)>,
    /// Rounds of balance-driven respecification after the first design.
    #[serde(default)]
    pub respecify_rounds: usize,
    #[serde(default = "quarter")]
    pub respecify_threshold: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_max_iter() -> usize {
    FitOptions::default().max_iter
}
fn default_tol() -> f64 {
    FitOptions::default().tol
}

impl Default for PropensityConfig {
    fn default() -> Self {
        PropensityConfig {
            covariates: Vec::new(),
            squares: Vec::new(),
            interactions: Vec::new(),
            respecify_rounds: 0,
            respecify_threshold: 0.25,
            max_iter: default_max_iter(),
            tol: default_tol(),
        }
    }
}

impl PropensityConfig {
    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistanceConfig {
    /// Defaults to `exact` for the exact method and `linear_propensity` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<DistanceKind>,
    /// Defaults to the control group for ATT and all units for ATE.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_source: Option<SigmaSource>,
    #[serde(default = "quarter")]
    pub caliper_sd: f64,
    /// Columns for exact and Mahalanobis distances; the matching covariates
    /// when empty.
    #[serde(default)]
    pub key_columns: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coarsen_bins: Option<BTreeMap<String, Vec<f64>>>,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        DistanceConfig {
            kind: None,
            sigma_source: None,
            caliper_sd: 0.25,
            key_columns: Vec::new(),
            coarsen_bins: None,
        }
    }
}

/// Everything that shapes the design stage. The outcome plays no part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignConfig {
    #[serde(default = "default_estimand")]
    pub estimand: Estimand,
    #[serde(default)]
    pub matcher: MatcherSpec,
    #[serde(default)]
    pub propensity: PropensityConfig,
    #[serde(default)]
    pub distance: DistanceConfig,
    /// Drop units outside the other arm's propensity-score range first.
    #[serde(default)]
    pub common_support: bool,
    /// Mean-impute missing covariates and add missingness indicators.
    #[serde(default)]
    pub impute_missing: bool,
}

fn default_estimand() -> Estimand {
    Estimand::Att
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig {
            estimand: Estimand::Att,
            matcher: MatcherSpec::default(),
            propensity: PropensityConfig::default(),
            distance: DistanceConfig::default(),
            common_support: false,
            impute_missing: false,
        }
    }
}

impl DesignConfig {
    pub fn distance_kind(&self) -> DistanceKind {
        self.distance.kind.unwrap_or_else(|| self.matcher.default_distance())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let m = &self.matcher;
        if !m.supports(self.estimand) {
            return Err(PipelineError::Config(format!(
                "method `{}` does not target the {}",
                m.name(),
                self.estimand
            )));
        }
        let positive = |v: Option<f64>, what: &str| match v {
            Some(x) if !(x > 0.0 && x.is_finite()) => {
                Err(PipelineError::Config(format!("{what} must be positive, got {x}")))
            }
            _ => Ok(()),
        };
        match m {
            MatcherSpec::Greedy { k, caliper, .. } => {
                if *k == 0 {
                    return Err(PipelineError::Config("k must be at least 1".into()));
                }
                positive(*caliper, "caliper")?;
            }
            MatcherSpec::Optimal { k } if *k == 0 => {
                return Err(PipelineError::Config("k must be at least 1".into()));
            }
            MatcherSpec::Full { min_ratio, max_ratio } => {
                positive(*min_ratio, "min_ratio")?;
                positive(*max_ratio, "max_ratio")?;
                if let (Some(lo), Some(hi)) = (min_ratio, max_ratio) {
                    if lo > hi {
                        return Err(PipelineError::Config(format!("min_ratio {lo} exceeds max_ratio {hi}")));
                    }
                }
            }
            MatcherSpec::Subclass { n_subclasses } if *n_subclasses < 2 => {
                return Err(PipelineError::Config(format!(
                    "need at least 2 subclasses, got {n_subclasses}"
                )));
            }
            MatcherSpec::Iptw { trim, .. } | MatcherSpec::Odds { trim, .. } => positive(*trim, "trim")?,
            _ => {}
        }
        if !(self.distance.caliper_sd > 0.0) {
            return Err(PipelineError::Config("caliper_sd must be positive".into()));
        }
        if self.distance.kind == Some(DistanceKind::CoarsenedExact) && self.distance.coarsen_bins.is_none() {
            return Err(PipelineError::Config("coarsened_exact distance needs coarsen_bins".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    DiffInMeans,
    #[default]
    Adjusted,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    #[serde(default)]
    pub kind: EstimatorKind,
    /// Regression covariates; the matching covariates when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<String>>,
    #[serde(default)]
    pub subclass_mode: SubclassMode,
}

fn default_roles() -> ColumnRoles {
    ColumnRoles {
        treatment: "treat".into(),
        outcome: Some("y".into()),
        covariates: Vec::new(),
        ignore: Vec::new(),
    }
}

/// Full run description, read from JSON. Command-line flags override keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default = "default_roles")]
    pub columns: ColumnRoles,
    #[serde(flatten)]
    pub design: DesignConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    /// Bootstrap replicates; 0 keeps the design-naive standard error.
    #[serde(default)]
    pub bootstrap: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub design_only: bool,
    #[serde(default)]
    pub strict: bool,
    #[serde(default = "yes")]
    pub plots: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data: None,
            columns: default_roles(),
            design: DesignConfig::default(),
            estimator: EstimatorConfig::default(),
            bootstrap: 0,
            seed: 0,
            design_only: false,
            strict: false,
            plots: true,
            out: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(value: serde_json::Value) -> Result<Self, PipelineError> {
        serde_json::from_value(value).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn from_json_str(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.design.validate()?;
        if !self.design_only && self.columns.outcome.is_none() {
            return Err(PipelineError::Config(
                "no outcome column configured; set one or run design-only".into(),
            ));
        }
        if self.bootstrap == 1 {
            return Err(PipelineError::Config("bootstrap needs at least 2 replicates".into()));
        }
        Ok(())
    }
}
