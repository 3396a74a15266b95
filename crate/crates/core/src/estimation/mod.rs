//! Outcome analysis on a designed sample.
//!
//! This is the only module that reads the outcome column. Standard errors
//! from the closed-form estimators treat the design as fixed and are labelled
//! `design-naive`; [`bootstrap_se`] reruns the whole design per replicate.

mod bootstrap;

pub use bootstrap::{bootstrap_se, replicate_rng};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, StudyFrame};
use crate::linalg::{self, weighted_mean, weighted_variance};
use crate::matchers::{MatchError, Subclassification};
use crate::Estimand;

pub const Z_95: f64 = 1.96;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("frame has no outcome column")]
    NoOutcome,
    #[error("{0} arm has no positive weight")]
    EmptyArm(&'static str),
    #[error("outcome regression design is singular")]
    SingularDesign,
    #[error("subclass {subclass} has no {arm} units")]
    EmptySubclassArm { subclass: usize, arm: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{failed} of {total} bootstrap replicates failed")]
    TooManyFailures { failed: usize, total: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

impl From<MatchError> for EstimationError {
    fn from(e: MatchError) -> Self {
        match e {
            MatchError::EmptySubclassArm { subclass, arm } => EstimationError::EmptySubclassArm { subclass, arm },
            other => EstimationError::InvalidArgument(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeKind {
    DesignNaive,
    Bootstrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SubclassMode {
    /// Separate regressions per subclass, aggregated.
    #[default]
    PerSubclass,
    /// One model with subclass and subclass×treatment indicators and shared
    /// covariate slopes.
    FixedEffects,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateProvenance {
    pub matcher: String,
    pub estimator: String,
    pub se_kind: SeKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subclass_mode: Option<SubclassMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap_reps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap_failures: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub failure_messages: Vec<String>,
}

impl EstimateProvenance {
    fn naive(estimator: &str) -> Self {
        EstimateProvenance {
            matcher: String::new(),
            estimator: estimator.into(),
            se_kind: SeKind::DesignNaive,
            subclass_mode: None,
            bootstrap_reps: None,
            bootstrap_failures: None,
            failure_messages: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub tau_hat: f64,
    pub se: f64,
    pub ci95: (f64, f64),
    pub estimand: Estimand,
    pub method: EstimateProvenance,
    /// Kish effective sample size of the analysis weights.
    pub n_effective: f64,
}

impl EffectEstimate {
    fn new(tau_hat: f64, se: f64, estimand: Estimand, method: EstimateProvenance, n_effective: f64) -> Self {
        EffectEstimate {
            tau_hat,
            se,
            ci95: (tau_hat - Z_95 * se, tau_hat + Z_95 * se),
            estimand,
            method,
            n_effective,
        }
    }

    pub fn with_matcher(mut self, matcher: &str) -> Self {
        self.method.matcher = matcher.into();
        self
    }
}

/// (Σw)² / Σw² over positive weights.
pub fn kish_n(w: &[f64]) -> f64 {
    let (s, s2) = w
        .iter()
        .filter(|&&x| x > 0.0)
        .fold((0.0, 0.0), |(s, s2), &x| (s + x, s2 + x * x));
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

fn outcome(frame: &StudyFrame) -> Result<&[f64], EstimationError> {
    frame.outcome.as_deref().ok_or(EstimationError::NoOutcome)
}

fn arms(frame: &StudyFrame, y: &[f64], w: &[f64]) -> Result<[(Vec<f64>, Vec<f64>); 2], EstimationError> {
    let mut t = (Vec::new(), Vec::new());
    let mut c = (Vec::new(), Vec::new());
    for u in 0..frame.n_units() {
        if w[u] > 0.0 {
            let arm = if frame.is_treated(u) { &mut t } else { &mut c };
            arm.0.push(y[u]);
            arm.1.push(w[u]);
        }
    }
    if t.0.is_empty() {
        return Err(EstimationError::EmptyArm("treated"));
    }
    if c.0.is_empty() {
        return Err(EstimationError::EmptyArm("control"));
    }
    Ok([t, c])
}

/// Weighted treated mean minus weighted control mean.
pub fn diff_in_means(frame: &StudyFrame, weights: &[f64], estimand: Estimand) -> Result<EffectEstimate, EstimationError> {
    let y = outcome(frame)?;
    let [(yt, wt), (yc, wc)] = arms(frame, y, weights)?;
    let tau = weighted_mean(&yt, &wt) - weighted_mean(&yc, &wc);
    let var_part = |x: &[f64], w: &[f64]| {
        if x.len() < 2 {
            0.0
        } else {
            weighted_variance(x, w) / kish_n(w)
        }
    };
    let se = (var_part(&yt, &wt) + var_part(&yc, &wc)).sqrt();
    Ok(EffectEstimate::new(
        tau,
        se,
        estimand,
        EstimateProvenance::naive("diff_in_means"),
        kish_n(weights),
    ))
}

fn design(frame: &StudyFrame, rows: &[usize], covariates: &[String], treatment: bool) -> Result<DMatrix<f64>, EstimationError> {
    let lead = 1 + usize::from(treatment);
    let mut x = DMatrix::<f64>::zeros(rows.len(), lead + covariates.len());
    let cols: Vec<&[f64]> = covariates.iter().map(|c| frame.observed(c)).collect::<Result<_, _>>()?;
    for (r, &u) in rows.iter().enumerate() {
        x[(r, 0)] = 1.0;
        if treatment {
            x[(r, 1)] = f64::from(frame.treatment[u]);
        }
        for (j, col) in cols.iter().enumerate() {
            x[(r, lead + j)] = col[u];
        }
    }
    Ok(x)
}

/// Weighted least squares of Y on (1, T, covariates); τ̂ is the T coefficient.
pub fn adjusted_effect(
    frame: &StudyFrame,
    weights: &[f64],
    covariates: &[String],
    estimand: Estimand,
) -> Result<EffectEstimate, EstimationError> {
    let y = outcome(frame)?;
    arms(frame, y, weights)?;
    let rows: Vec<usize> = (0..frame.n_units()).collect();
    let x = design(frame, &rows, covariates, true)?;
    let fit = linalg::weighted_least_squares(&x, y, weights).map_err(|_| EstimationError::SingularDesign)?;
    let tau = fit.coefficients[1];
    let se = (fit.sigma2 * fit.xtwx_inv[(1, 1)]).max(0.0).sqrt();
    Ok(EffectEstimate::new(
        tau,
        if se.is_nan() { 0.0 } else { se },
        estimand,
        EstimateProvenance::naive("adjusted_regression"),
        kish_n(weights),
    ))
}

/// Aggregation weights per subclass: N_j/N for ATE, N_tj/N_t for ATT.
pub fn aggregation_weights(sub: &Subclassification, frame: &StudyFrame) -> Vec<f64> {
    let sizes: Vec<(usize, usize)> = (0..sub.n_subclasses)
        .map(|j| {
            let (t, c) = sub.members(frame, j);
            (t.len(), c.len())
        })
        .collect();
    let (nt, n) = sizes.iter().fold((0, 0), |(a, b), &(t, c)| (a + t, b + t + c));
    sizes
        .iter()
        .map(|&(t, c)| match sub.estimand {
            Estimand::Att => t as f64 / nt as f64,
            Estimand::Ate => (t + c) as f64 / n as f64,
        })
        .collect()
}

/// Subclass-specific effects combined with [`aggregation_weights`].
pub fn subclass_effect(
    frame: &StudyFrame,
    sub: &Subclassification,
    covariates: &[String],
    mode: SubclassMode,
) -> Result<EffectEstimate, EstimationError> {
    let y = outcome(frame)?;
    sub.validate(frame)?;
    let agg = aggregation_weights(sub, frame);
    let (tau, var) = match mode {
        SubclassMode::PerSubclass => {
            let mut tau = 0.0;
            let mut var = 0.0;
            for (j, a) in agg.iter().enumerate() {
                let (t, c) = sub.members(frame, j);
                let rows: Vec<usize> = t.into_iter().chain(c).collect();
                let x = design(frame, &rows, covariates, true)?;
                let yj: Vec<f64> = rows.iter().map(|&u| y[u]).collect();
                let fit = linalg::weighted_least_squares(&x, &yj, &vec![1.0; rows.len()])
                    .map_err(|_| EstimationError::SingularDesign)?;
                tau += a * fit.coefficients[1];
                let v = fit.sigma2 * fit.xtwx_inv[(1, 1)];
                var += a * a * if v.is_nan() { 0.0 } else { v };
            }
            (tau, var)
        }
        SubclassMode::FixedEffects => {
            let rows: Vec<usize> = (0..frame.n_units()).filter(|&u| sub.subclass_of[u].is_some()).collect();
            let k = sub.n_subclasses;
            let cols: Vec<&[f64]> = covariates.iter().map(|c| frame.observed(c)).collect::<Result<_, _>>()?;
            let mut x = DMatrix::<f64>::zeros(rows.len(), 2 * k + cols.len());
            for (r, &u) in rows.iter().enumerate() {
                let j = sub.subclass_of[u].unwrap_or_default();
                x[(r, j)] = 1.0;
                x[(r, k + j)] = f64::from(frame.treatment[u]);
                for (c, col) in cols.iter().enumerate() {
                    x[(r, 2 * k + c)] = col[u];
                }
            }
            let yr: Vec<f64> = rows.iter().map(|&u| y[u]).collect();
            let fit = linalg::weighted_least_squares(&x, &yr, &vec![1.0; rows.len()])
                .map_err(|_| EstimationError::SingularDesign)?;
            let a = DVector::from_iterator(k, agg.iter().copied());
            let beta = fit.coefficients.rows(k, k);
            let cov = fit.xtwx_inv.view((k, k), (k, k)) * fit.sigma2;
            let var = (a.transpose() * cov * &a)[(0, 0)];
            (a.dot(&beta), if var.is_nan() { 0.0 } else { var })
        }
    };
    let mut method = EstimateProvenance::naive("subclass_regression");
    method.subclass_mode = Some(mode);
    let n_eff = sub.subclass_of.iter().filter(|s| s.is_some()).count() as f64;
    Ok(EffectEstimate::new(tau, var.max(0.0).sqrt(), sub.estimand, method, n_eff))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(t: Vec<u8>, y: Vec<f64>) -> StudyFrame {
        let n = t.len();
        StudyFrame::new(t, vec![("x".into(), (0..n).map(|i| i as f64).collect())], Some(y)).unwrap()
    }

    #[test]
    fn diff_in_means_examples() {
        let f = frame(vec![1, 1, 0, 0], vec![3.0, 5.0, 1.0, 2.0]);
        assert_eq!(diff_in_means(&f, &[1.0; 4], Estimand::Att).unwrap().tau_hat, 2.5);
        let g = frame(vec![1, 0, 0, 0], vec![4.0, 0.0, 3.0, 6.0]);
        let w = [1.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
        assert!((diff_in_means(&g, &w, Estimand::Att).unwrap().tau_hat - 1.0).abs() < 1e-12);
        let h = frame(vec![1, 1, 0, 0], vec![1.0, 2.0, 1.0, 2.0]);
        assert_eq!(diff_in_means(&h, &[1.0; 4], Estimand::Ate).unwrap().tau_hat, 0.0);
    }

    #[test]
    fn diff_in_means_errors() {
        let f = StudyFrame::new(vec![1, 0], vec![], None).unwrap();
        assert!(matches!(diff_in_means(&f, &[1.0, 1.0], Estimand::Att), Err(EstimationError::NoOutcome)));
        let g = frame(vec![1, 0], vec![1.0, 0.0]);
        assert!(matches!(diff_in_means(&g, &[1.0, 0.0], Estimand::Att), Err(EstimationError::EmptyArm("control"))));
    }

    #[test]
    fn ci_is_symmetric() {
        let f = frame(vec![1, 1, 1, 0, 0, 0], vec![3.0, 5.0, 4.5, 1.0, 2.0, 0.2]);
        let e = diff_in_means(&f, &[1.0; 6], Estimand::Att).unwrap();
        assert!((e.ci95.0 - (e.tau_hat - 1.96 * e.se)).abs() < 1e-12);
        assert!((e.ci95.1 - (e.tau_hat + 1.96 * e.se)).abs() < 1e-12);
    }

    #[test]
    fn no_covariates_matches_diff_in_means() {
        let f = frame(vec![1, 0, 1, 0, 0], vec![2.0, 1.0, 7.0, 0.5, 3.0]);
        let w = [1.0, 0.5, 2.0, 1.0, 1.5];
        let a = adjusted_effect(&f, &w, &[], Estimand::Att).unwrap();
        let d = diff_in_means(&f, &w, Estimand::Att).unwrap();
        assert!((a.tau_hat - d.tau_hat).abs() < 1e-12);
    }

    #[test]
    fn balanced_covariate_leaves_estimate_unchanged() {
        let t = vec![1, 1, 1, 0, 0, 0];
        let z = vec![1.0, -1.0, 0.0, 0.0, 1.0, -1.0];
        let y = vec![5.0, 2.0, 4.0, 1.0, 0.5, 3.0];
        let f = StudyFrame::new(t, vec![("z".into(), z)], Some(y)).unwrap();
        let with = adjusted_effect(&f, &[1.0; 6], &["z".into()], Estimand::Att).unwrap();
        let without = adjusted_effect(&f, &[1.0; 6], &[], Estimand::Att).unwrap();
        assert!((with.tau_hat - without.tau_hat).abs() < 1e-8);
    }

    fn two_subclasses(estimand: Estimand, n0: usize, n1: usize, b: (f64, f64)) -> (StudyFrame, Subclassification) {
        let n = n0 + n1;
        let t: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let beta = if i < n0 { b.0 } else { b.1 };
                beta * f64::from(t[i]) + (i % 3) as f64
            })
            .collect();
        let f = StudyFrame::new(t, vec![], Some(y)).unwrap();
        let sub = Subclassification {
            n_subclasses: 2,
            boundaries: vec![0.5],
            subclass_of: (0..n).map(|i| Some(usize::from(i >= n0))).collect(),
            estimand,
        };
        (f, sub)
    }

    #[test]
    fn subclass_aggregation_sixty_forty() {
        let (f, sub) = two_subclasses(Estimand::Ate, 60, 40, (1.0, 2.0));
        let w = aggregation_weights(&sub, &f);
        assert_eq!(w, vec![0.6, 0.4]);
        let noiseless = {
            let n = 100;
            let t: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
            let y: Vec<f64> = (0..n).map(|i| if i < 60 { 1.0 } else { 2.0 } * f64::from(t[i])).collect();
            StudyFrame::new(t, vec![], Some(y)).unwrap()
        };
        for mode in [SubclassMode::PerSubclass, SubclassMode::FixedEffects] {
            let e = subclass_effect(&noiseless, &sub, &[], mode).unwrap();
            assert!((e.tau_hat - 1.4).abs() < 1e-12, "{mode:?}: {}", e.tau_hat);
        }
    }

    #[test]
    fn constant_effect_aggregates_to_itself() {
        for est in [Estimand::Att, Estimand::Ate] {
            let (f, sub) = two_subclasses(est, 30, 50, (0.7, 0.7));
            let n = f.n_units();
            let y: Vec<f64> = (0..n).map(|i| 0.7 * f64::from(f.treatment[i])).collect();
            let g = StudyFrame { outcome: Some(y), ..f };
            let e = subclass_effect(&g, &sub, &[], SubclassMode::PerSubclass).unwrap();
            assert!((e.tau_hat - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn att_weights_put_all_mass_on_treated_subclass() {
        let t = vec![1, 1, 0, 0, 0, 0, 0, 0];
        let sub = Subclassification {
            n_subclasses: 2,
            boundaries: vec![0.5],
            subclass_of: vec![Some(0), Some(0), Some(0), Some(0), Some(1), Some(1), Some(1), Some(1)],
            estimand: Estimand::Att,
        };
        let f = StudyFrame::new(t, vec![], Some(vec![0.0; 8])).unwrap();
        assert_eq!(aggregation_weights(&sub, &f), vec![1.0, 0.0]);
    }
}
