//! Synthetic observational studies with a known propensity model and a known
//! constant treatment effect, and a driver that measures percent bias
//! reduction of a design.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::StudyFrame;
use crate::linalg::{expit, weighted_mean};
use crate::pipeline::{self, DesignConfig, PipelineError};
use crate::propensity::PropensityModel;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("no initial mean difference on `{0}`")]
    ZeroInitialBias(String),
    #[error(transparent)]
    Pipeline(#[from] Box<PipelineError>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn one() -> f64 {
    1.0
}

/// One normally distributed covariate with arm-specific mean and SD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub treated_mean: f64,
    pub control_mean: f64,
    #[serde(default = "one")]
    pub treated_sd: f64,
    #[serde(default = "one")]
    pub control_sd: f64,
    /// Round draws to this grid, which makes exact matching possible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round_to: Option<f64>,
}

impl CovariateSpec {
    pub fn shifted(name: &str, shift: f64) -> Self {
        CovariateSpec {
            name: name.into(),
            treated_mean: shift,
            control_mean: 0.0,
            treated_sd: 1.0,
            control_sd: 1.0,
            round_to: None,
        }
    }
}

/// `Y = intercept + Σ coefficients[j]·x_j + true_tau·T + noise_sd·ε`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    #[serde(default)]
    pub intercept: f64,
    /// One per covariate, in order; missing entries are zero.
    #[serde(default)]
    pub coefficients: Vec<f64>,
    #[serde(default)]
    pub noise_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub n_treated: usize,
    pub n_control: usize,
    pub covariates: Vec<CovariateSpec>,
    /// Intercept first. When absent the true score is the exact posterior
    /// probability of treatment implied by the two normal arms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_propensity: Option<Vec<f64>>,
    #[serde(default)]
    pub true_tau: f64,
    #[serde(default)]
    pub outcome: OutcomeModel,
    #[serde(default)]
    pub seed: u64,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::InvalidScenario(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_treated == 0 || self.n_control == 0 {
            return Err(SimError::InvalidScenario("both arms need at least one unit".into()));
        }
        for c in &self.covariates {
            if !(c.treated_sd > 0.0 && c.control_sd > 0.0) {
                return Err(SimError::InvalidScenario(format!("`{}` needs positive SDs", c.name)));
            }
            if c.round_to.is_some_and(|r| !(r > 0.0)) {
                return Err(SimError::InvalidScenario(format!("`{}` has a non-positive rounding grid", c.name)));
            }
        }
        if let Some(b) = &self.true_propensity {
            if b.len() != self.covariates.len() + 1 {
                return Err(SimError::InvalidScenario(format!(
                    "{} propensity coefficients for {} covariates (intercept first)",
                    b.len(),
                    self.covariates.len()
                )));
            }
        }
        if self.outcome.coefficients.len() > self.covariates.len() {
            return Err(SimError::InvalidScenario("more outcome coefficients than covariates".into()));
        }
        if !(self.outcome.noise_sd >= 0.0) {
            return Err(SimError::InvalidScenario("noise_sd must be non-negative".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Scenario { seed, ..self.clone() }
    }
}

/// A generated study with the true propensity scores of its units.
#[derive(Debug, Clone)]
pub struct Generated {
    pub frame: StudyFrame,
    pub true_scores: Vec<f64>,
}

impl Generated {
    /// The true scores in the form the design stage accepts.
    pub fn true_model(&self) -> PropensityModel {
        PropensityModel::from_scores(self.true_scores.clone())
    }
}

fn log_normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln()
}

/// Draws the study. Treated units come first, then controls; per unit the
/// covariates are drawn in order, then the outcome noise.
pub fn generate(s: &Scenario) -> Result<Generated, SimError> {
    s.validate()?;
    let n = s.n_treated + s.n_control;
    let k = s.covariates.len();
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut cols = vec![Vec::with_capacity(n); k];
    let mut treatment = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for u in 0..n {
        let t = u < s.n_treated;
        treatment.push(u8::from(t));
        let mut lin = s.outcome.intercept + if t { s.true_tau } else { 0.0 };
        for (j, c) in s.covariates.iter().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            let mut x = if t {
                c.treated_mean + c.treated_sd * z
            } else {
                c.control_mean + c.control_sd * z
            };
            if let Some(g) = c.round_to {
                x = (x / g).round() * g;
            }
            cols[j].push(x);
            lin += s.outcome.coefficients.get(j).copied().unwrap_or(0.0) * x;
        }
        let e: f64 = rng.sample(StandardNormal);
        y.push(lin + s.outcome.noise_sd * e);
    }
    let prior = (s.n_treated as f64 / s.n_control as f64).ln();
    let true_scores = (0..n)
        .map(|u| {
            let eta = match &s.true_propensity {
                Some(b) => b[0] + (0..k).map(|j| b[j + 1] * cols[j][u]).sum::<f64>(),
                None => {
                    prior
                        + s.covariates
                            .iter()
                            .enumerate()
                            .map(|(j, c)| {
                                let x = cols[j][u];
                                log_normal_pdf(x, c.treated_mean, c.treated_sd)
                                    - log_normal_pdf(x, c.control_mean, c.control_sd)
                            })
                            .sum::<f64>()
                }
            };
            expit(eta)
        })
        .collect();
    let named = s.covariates.iter().map(|c| c.name.clone()).zip(cols).collect();
    let frame = StudyFrame::new(treatment, named, Some(y)).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
    Ok(Generated { frame, true_scores })
}

/// How a replicate is designed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BenchDesign {
    /// Every unit with weight 1.
    Identity,
    /// The design stage with a fitted propensity model.
    Fitted { design: DesignConfig },
    /// The design stage with the true propensity scores.
    TrueScores { design: DesignConfig },
}

impl BenchDesign {
    pub fn label(&self) -> String {
        match self {
            BenchDesign::Identity => "identity".into(),
            BenchDesign::Fitted { design } => design.matcher.name().into(),
            BenchDesign::TrueScores { design } => format!("{}(true scores)", design.matcher.name()),
        }
    }

    /// Analysis weights of `g` under this design.
    pub fn weights(&self, g: &Generated, seed: u64) -> Result<Vec<f64>, SimError> {
        let run = |d: &DesignConfig, truth: Option<&[f64]>| {
            pipeline::run_design(&g.frame, d, truth, seed)
                .map(|o| o.result.unit_weight)
                .map_err(|e| SimError::Pipeline(Box::new(e)))
        };
        match self {
            BenchDesign::Identity => Ok(vec![1.0; g.frame.n_units()]),
            BenchDesign::Fitted { design } => run(design, None),
            BenchDesign::TrueScores { design } => run(design, Some(&g.true_scores)),
        }
    }
}

/// Weighted treated mean minus weighted control mean of `x`.
pub fn mean_difference(frame: &StudyFrame, x: &[f64], w: &[f64]) -> f64 {
    let mut xt = Vec::new();
    let mut wt = Vec::new();
    let mut xc = Vec::new();
    let mut wc = Vec::new();
    for u in 0..frame.n_units() {
        if w[u] > 0.0 {
            if frame.is_treated(u) {
                xt.push(x[u]);
                wt.push(w[u]);
            } else {
                xc.push(x[u]);
                wc.push(w[u]);
            }
        }
    }
    weighted_mean(&xt, &wt) - weighted_mean(&xc, &wc)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepResult {
    pub rep: usize,
    pub seed: u64,
    pub initial_diff: f64,
    pub post_diff: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasReduction {
    pub design: String,
    pub covariate: String,
    pub mean_percent: f64,
    pub reps: Vec<RepResult>,
}

impl BiasReduction {
    pub fn write_csv(&self, out: impl Write) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["design", "covariate", "rep", "seed", "initial_diff", "post_diff", "percent"])?;
        for r in &self.reps {
            w.write_record([
                self.design.clone(),
                self.covariate.clone(),
                r.rep.to_string(),
                r.seed.to_string(),
                r.initial_diff.to_string(),
                r.post_diff.to_string(),
                r.percent.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Percent reduction in the absolute mean difference of `covariate`,
/// `100·(1 − |post| / |initial|)`, averaged over `reps` replicates seeded
/// `s.seed, s.seed + 1, …`.
pub fn bias_reduction(s: &Scenario, design: &BenchDesign, covariate: &str, reps: usize) -> Result<BiasReduction, SimError> {
    if reps == 0 {
        return Err(SimError::InvalidScenario("reps must be positive".into()));
    }
    if !s.covariates.iter().any(|c| c.name == covariate) {
        return Err(SimError::InvalidScenario(format!("unknown covariate `{covariate}`")));
    }
    let results: Vec<Result<RepResult, SimError>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let seed = s.seed.wrapping_add(rep as u64);
            let g = generate(&s.with_seed(seed))?;
            let x = g.frame.observed(covariate).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
            let initial_diff = mean_difference(&g.frame, x, &vec![1.0; g.frame.n_units()]);
            if initial_diff.abs() < 1e-12 {
                return Err(SimError::ZeroInitialBias(covariate.into()));
            }
            let w = design.weights(&g, seed)?;
            let post_diff = mean_difference(&g.frame, x, &w);
            Ok(RepResult {
                rep,
                seed,
                initial_diff,
                post_diff,
                percent: 100.0 * (1.0 - post_diff.abs() / initial_diff.abs()),
            })
        })
        .collect();
    let reps_out: Vec<RepResult> = results.into_iter().collect::<Result<_, _>>()?;
    let mean_percent = reps_out.iter().map(|r| r.percent).sum::<f64>() / reps_out.len() as f64;
    Ok(BiasReduction {
        design: design.label(),
        covariate: covariate.into(),
        mean_percent,
        reps: reps_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::diff_in_means;
    use crate::pipeline::MatcherSpec;
    use crate::Estimand;

    fn scenario(nt: usize, nc: usize, covs: Vec<CovariateSpec>) -> Scenario {
        Scenario {
            n_treated: nt,
            n_control: nc,
            covariates: covs,
            true_propensity: None,
            true_tau: 0.0,
            outcome: OutcomeModel::default(),
            seed: 11,
        }
    }

    #[test]
    fn shape_and_determinism() {
        let s = scenario(100, 400, vec![CovariateSpec::shifted("x", 0.5)]);
        let a = generate(&s).unwrap();
        assert_eq!(a.frame.n_units(), 500);
        assert_eq!(a.frame.n_treated(), 100);
        let b = generate(&s).unwrap();
        assert_eq!(a.frame, b.frame);
        assert_eq!(a.true_scores, b.true_scores);
        assert_ne!(generate(&s.with_seed(12)).unwrap().frame, a.frame);
    }

    #[test]
    fn null_effect_without_noise() {
        let mut s = scenario(3, 3, vec![CovariateSpec::shifted("x", 0.0)]);
        s.outcome.noise_sd = 0.0;
        let g = generate(&s).unwrap();
        // Y = 0 for every unit.
        let est = diff_in_means(&g.frame, &[1.0; 6], Estimand::Ate).unwrap();
        assert_eq!(est.tau_hat, 0.0);
    }

    #[test]
    fn supplied_coefficients_give_expit_scores() {
        let mut s = scenario(20, 30, vec![CovariateSpec::shifted("a", 0.3), CovariateSpec::shifted("b", -0.2)]);
        let beta = vec![-0.4, 1.3, -0.7];
        s.true_propensity = Some(beta.clone());
        let g = generate(&s).unwrap();
        let a = g.frame.observed("a").unwrap();
        let b = g.frame.observed("b").unwrap();
        for u in 0..50 {
            let e = 1.0 / (1.0 + (-(beta[0] + beta[1] * a[u] + beta[2] * b[u])).exp());
            assert!((g.true_scores[u] - e).abs() < 1e-15);
        }
    }

    #[test]
    fn implied_scores_match_bayes_rule() {
        let s = scenario(10, 40, vec![CovariateSpec {
            name: "x".into(),
            treated_mean: 1.0,
            control_mean: 0.0,
            treated_sd: 2.0,
            control_sd: 1.0,
            round_to: None,
        }]);
        let g = generate(&s).unwrap();
        let x = g.frame.observed("x").unwrap();
        let pdf = |v: f64, m: f64, sd: f64| (-(v - m).powi(2) / (2.0 * sd * sd)).exp() / sd;
        for u in 0..50 {
            let num = 10.0 * pdf(x[u], 1.0, 2.0);
            let e = num / (num + 40.0 * pdf(x[u], 0.0, 1.0));
            assert!((g.true_scores[u] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_and_exact_designs() {
        let mut x = CovariateSpec::shifted("x", 0.5);
        x.round_to = Some(0.5);
        let s = scenario(150, 300, vec![x]);
        let id = bias_reduction(&s, &BenchDesign::Identity, "x", 3).unwrap();
        assert!(id.mean_percent.abs() < 1e-9);
        let exact = BenchDesign::Fitted {
            design: DesignConfig {
                matcher: MatcherSpec::Exact,
                ..DesignConfig::default()
            },
        };
        let r = bias_reduction(&s, &exact, "x", 3).unwrap();
        assert!((r.mean_percent - 100.0).abs() < 1e-9, "{}", r.mean_percent);
    }

    #[test]
    fn zero_initial_bias_is_reported() {
        // Every unit draws x = 0 after rounding to a coarse grid.
        let mut x = CovariateSpec::shifted("x", 0.0);
        x.round_to = Some(1000.0);
        let s = scenario(5, 5, vec![x]);
        assert!(matches!(
            bias_reduction(&s, &BenchDesign::Identity, "x", 2),
            Err(SimError::ZeroInitialBias(_))
        ));
    }

    #[test]
    fn csv_has_one_row_per_rep() {
        let s = scenario(30, 60, vec![CovariateSpec::shifted("x", 0.5)]);
        let r = bias_reduction(&s, &BenchDesign::Identity, "x", 4).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }

    #[test]
    fn invalid_scenarios() {
        let mut s = scenario(0, 5, vec![]);
        assert!(matches!(generate(&s), Err(SimError::InvalidScenario(_))));
        s.n_treated = 3;
        s.true_propensity = Some(vec![0.0, 1.0]);
        assert!(matches!(generate(&s), Err(SimError::InvalidScenario(_))));
    }
}
