//! Balance diagnostics: standardized differences, variance ratios, the
//! propensity-based summary measures, empirical QQ statistics, and plots.
//!
//! Standardized differences always divide by the standard deviation of the
//! full, pre-design treated group, so pre and post values are comparable.
//! No hypothesis tests are computed.

mod plots;

pub use plots::{plot_jitter, plot_love, render_jitter, render_love};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, StudyFrame};
use crate::linalg::{self, weighted_mean, weighted_variance};
use crate::propensity::PropensityModel;

pub const STD_DIFF_MAX: f64 = 0.25;
pub const VAR_RATIO_RANGE: [f64; 2] = [0.5, 2.0];

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("zero variance in {0}")]
    ZeroVariance(String),
    #[error("group `{0}` has no units with positive weight")]
    EmptyGroup(&'static str),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceFlag {
    StdDiff,
    VarianceRatio,
    ResidualVarRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRecord {
    pub name: String,
    pub std_diff_pre: f64,
    pub std_diff_post: f64,
    pub variance_ratio_pre: f64,
    pub variance_ratio_post: f64,
    pub eqq_mean: f64,
    pub eqq_max: f64,
    pub residual_var_ratio: f64,
    pub flags: Vec<BalanceFlag>,
}

impl BalanceRecord {
    /// Record with only the standardized differences filled in.
    pub fn new(name: &str, std_diff_pre: f64, std_diff_post: f64) -> Self {
        BalanceRecord {
            name: name.to_string(),
            std_diff_pre,
            std_diff_post,
            variance_ratio_pre: 1.0,
            variance_ratio_post: 1.0,
            eqq_mean: 0.0,
            eqq_max: 0.0,
            residual_var_ratio: 1.0,
            flags: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensitySummary {
    #[serde(rename = "std_diff_B")]
    pub std_diff_b: f64,
    #[serde(rename = "variance_ratio_R")]
    pub variance_ratio_r: f64,
    pub flags: Vec<BalanceFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub std_diff_max: f64,
    pub var_ratio_range: [f64; 2],
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            std_diff_max: STD_DIFF_MAX,
            var_ratio_range: VAR_RATIO_RANGE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub records: Vec<BalanceRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub propensity: Option<PropensitySummary>,
    pub thresholds: Thresholds,
}

impl BalanceReport {
    pub fn empty() -> Self {
        BalanceReport {
            records: Vec::new(),
            propensity: None,
            thresholds: Thresholds::default(),
        }
    }

    pub fn max_abs_std_diff_post(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.std_diff_post.abs())
            .fold(0.0, f64::max)
    }
}

/// Values and weights of one arm, restricted to positive weights.
fn arm(values: &[f64], frame: &StudyFrame, weights: Option<&[f64]>, treated: bool) -> (Vec<f64>, Vec<f64>) {
    let mut x = Vec::new();
    let mut w = Vec::new();
    for u in 0..frame.n_units() {
        if frame.is_treated(u) != treated {
            continue;
        }
        let wu = weights.map_or(1.0, |w| w[u]);
        if wu > 0.0 {
            x.push(values[u]);
            w.push(wu);
        }
    }
    (x, w)
}

/// Standard deviation of `values` over the full treated group.
pub fn treated_sd(values: &[f64], frame: &StudyFrame) -> f64 {
    let (x, _) = arm(values, frame, None, true);
    linalg::sample_sd(&x)
}

fn std_diff_values(
    values: &[f64],
    frame: &StudyFrame,
    weights: Option<&[f64]>,
    sigma_t_pre: f64,
    what: &str,
) -> Result<f64, DiagnosticsError> {
    if !(sigma_t_pre > 0.0) {
        return Err(DiagnosticsError::ZeroVariance(format!("treated group of {what}")));
    }
    let (xt, wt) = arm(values, frame, weights, true);
    let (xc, wc) = arm(values, frame, weights, false);
    if xt.is_empty() {
        return Err(DiagnosticsError::EmptyGroup("treated"));
    }
    if xc.is_empty() {
        return Err(DiagnosticsError::EmptyGroup("control"));
    }
    Ok((weighted_mean(&xt, &wt) - weighted_mean(&xc, &wc)) / sigma_t_pre)
}

/// (weighted treated mean − weighted control mean) / `sigma_t_pre`.
pub fn std_diff(
    frame: &StudyFrame,
    covariate: &str,
    weights: Option<&[f64]>,
    sigma_t_pre: f64,
) -> Result<f64, DiagnosticsError> {
    let x = frame.observed(covariate)?;
    std_diff_values(x, frame, weights, sigma_t_pre, covariate)
}

fn variance_ratio_values(
    values: &[f64],
    frame: &StudyFrame,
    weights: Option<&[f64]>,
    what: &str,
) -> Result<f64, DiagnosticsError> {
    let (xt, wt) = arm(values, frame, weights, true);
    let (xc, wc) = arm(values, frame, weights, false);
    if xt.is_empty() {
        return Err(DiagnosticsError::EmptyGroup("treated"));
    }
    if xc.is_empty() {
        return Err(DiagnosticsError::EmptyGroup("control"));
    }
    let vc = weighted_variance(&xc, &wc);
    if !(vc > 0.0) {
        return Err(DiagnosticsError::ZeroVariance(format!("control group of {what}")));
    }
    Ok(weighted_variance(&xt, &wt) / vc)
}

/// Weighted treated variance over weighted control variance.
pub fn variance_ratio(
    frame: &StudyFrame,
    covariate: &str,
    weights: Option<&[f64]>,
) -> Result<f64, DiagnosticsError> {
    let x = frame.observed(covariate)?;
    variance_ratio_values(x, frame, weights, covariate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubinMetrics {
    /// Standardized difference of the linear propensity score.
    pub b: f64,
    /// Treated/control variance ratio of the linear propensity score.
    pub r: f64,
    /// Per covariate: treated/control variance ratio of the residuals from a
    /// weighted regression on the linear propensity score.
    pub residual_ratios: Vec<(String, f64)>,
}

fn residual_ratio(
    x: &[f64],
    score: &[f64],
    frame: &StudyFrame,
    weights: Option<&[f64]>,
    what: &str,
) -> Result<f64, DiagnosticsError> {
    let n = frame.n_units();
    let w: Vec<f64> = (0..n).map(|u| weights.map_or(1.0, |w| w[u])).collect();
    let mut design = nalgebra::DMatrix::<f64>::zeros(n, 2);
    for u in 0..n {
        design[(u, 0)] = 1.0;
        design[(u, 1)] = score[u];
    }
    let fit = linalg::weighted_least_squares(&design, x, &w)
        .map_err(|_| DiagnosticsError::ZeroVariance("linear propensity score".into()))?;
    let resid: Vec<f64> = fit.residuals.iter().copied().collect();
    variance_ratio_values(&resid, frame, weights, what)
}

/// The three propensity-based balance measures, computed with `weights`
/// exactly as the outcome analysis will use them.
pub fn rubin_metrics(
    model: &PropensityModel,
    frame: &StudyFrame,
    weights: Option<&[f64]>,
    covariates: &[String],
) -> Result<RubinMetrics, DiagnosticsError> {
    let score = &model.linear_scores;
    let sigma = treated_sd(score, frame);
    let b = std_diff_values(score, frame, weights, sigma, "linear propensity score")?;
    let r = variance_ratio_values(score, frame, weights, "linear propensity score")?;
    let mut residual_ratios = Vec::with_capacity(covariates.len());
    for c in covariates {
        let x = frame.observed(c)?;
        residual_ratios.push((c.clone(), residual_ratio(x, score, frame, weights, c)?));
    }
    Ok(RubinMetrics { b, r, residual_ratios })
}

/// Weighted nearest-rank quantile: smallest x whose weighted ECDF reaches `p`.
fn nearest_rank(sorted: &[(f64, f64)], total: f64, p: f64) -> f64 {
    let target = p * total;
    let mut acc = 0.0;
    for &(x, w) in sorted {
        acc += w;
        if acc >= target * (1.0 - 1e-12) {
            return x;
        }
    }
    sorted.last().map_or(f64::NAN, |s| s.0)
}

/// Mean and maximum absolute difference between the two arms' empirical
/// quantiles, evaluated at `i/m` for `i = 1..m`, where `m` is the number of
/// positively weighted units in the smaller arm.
pub fn eqq_stats(
    frame: &StudyFrame,
    covariate: &str,
    weights: Option<&[f64]>,
) -> Result<(f64, f64), DiagnosticsError> {
    let x = frame.observed(covariate)?;
    eqq_values(x, frame, weights)
}

fn eqq_values(x: &[f64], frame: &StudyFrame, weights: Option<&[f64]>) -> Result<(f64, f64), DiagnosticsError> {
    let prep = |treated: bool| -> Result<(Vec<(f64, f64)>, f64), DiagnosticsError> {
        let (v, w) = arm(x, frame, weights, treated);
        if v.is_empty() {
            return Err(DiagnosticsError::EmptyGroup(if treated { "treated" } else { "control" }));
        }
        let mut pairs: Vec<(f64, f64)> = v.into_iter().zip(w).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total = pairs.iter().map(|p| p.1).sum();
        Ok((pairs, total))
    };
    let (t, tw) = prep(true)?;
    let (c, cw) = prep(false)?;
    let m = t.len().min(c.len());
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for i in 1..=m {
        let p = i as f64 / m as f64;
        let diff = (nearest_rank(&t, tw, p) - nearest_rank(&c, cw, p)).abs();
        sum += diff;
        max = max.max(diff);
    }
    Ok((sum / m as f64, max))
}

fn or_nan(r: Result<f64, DiagnosticsError>) -> Result<f64, DiagnosticsError> {
    match r {
        Err(DiagnosticsError::ZeroVariance(_)) => Ok(f64::NAN),
        other => other,
    }
}

fn outside(v: f64, range: [f64; 2]) -> bool {
    v.is_finite() && (v < range[0] || v > range[1])
}

/// Pre (unweighted, every unit) and post (`weights`) balance for each covariate.
pub fn balance_report(
    frame: &StudyFrame,
    model: Option<&PropensityModel>,
    covariates: &[String],
    weights: &[f64],
) -> Result<BalanceReport, DiagnosticsError> {
    let thresholds = Thresholds::default();
    let post = Some(weights);
    let mut records = Vec::with_capacity(covariates.len());
    for name in covariates {
        let x = frame.observed(name)?;
        let sigma = treated_sd(x, frame);
        let std_diff_pre = or_nan(std_diff_values(x, frame, None, sigma, name))?;
        let std_diff_post = or_nan(std_diff_values(x, frame, post, sigma, name))?;
        let variance_ratio_pre = or_nan(variance_ratio_values(x, frame, None, name))?;
        let variance_ratio_post = or_nan(variance_ratio_values(x, frame, post, name))?;
        let (eqq_mean, eqq_max) = eqq_values(x, frame, post)?;
        let residual_var_ratio = match model {
            Some(m) => or_nan(residual_ratio(x, &m.linear_scores, frame, post, name))?,
            None => f64::NAN,
        };
        let mut flags = Vec::new();
        if std_diff_post.abs() >= thresholds.std_diff_max {
            flags.push(BalanceFlag::StdDiff);
        }
        if outside(variance_ratio_post, thresholds.var_ratio_range) {
            flags.push(BalanceFlag::VarianceRatio);
        }
        if outside(residual_var_ratio, thresholds.var_ratio_range) {
            flags.push(BalanceFlag::ResidualVarRatio);
        }
        records.push(BalanceRecord {
            name: name.clone(),
            std_diff_pre,
            std_diff_post,
            variance_ratio_pre,
            variance_ratio_post,
            eqq_mean,
            eqq_max,
            residual_var_ratio,
            flags,
        });
    }
    let propensity = match model {
        Some(m) => {
            let s = &m.linear_scores;
            let sigma = treated_sd(s, frame);
            let b = or_nan(std_diff_values(s, frame, post, sigma, "linear propensity score"))?;
            let r = or_nan(variance_ratio_values(s, frame, post, "linear propensity score"))?;
            let mut flags = Vec::new();
            if b.abs() >= thresholds.std_diff_max {
                flags.push(BalanceFlag::StdDiff);
            }
            if outside(r, thresholds.var_ratio_range) {
                flags.push(BalanceFlag::VarianceRatio);
            }
            Some(PropensitySummary {
                std_diff_b: b,
                variance_ratio_r: r,
                flags,
            })
        }
        None => None,
    };
    Ok(BalanceReport {
        records,
        propensity,
        thresholds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(t: Vec<u8>, x: Vec<f64>) -> StudyFrame {
        StudyFrame::new(t, vec![("x".into(), x)], None).unwrap()
    }

    #[test]
    fn std_diff_formula() {
        // treated mean 0.6, control mean 0.2
        let f = frame(vec![1, 1, 0, 0], vec![0.2, 1.0, 0.0, 0.4]);
        let d = std_diff(&f, "x", None, 0.8).unwrap();
        assert!((d - 0.5).abs() < 1e-12);
        let same = frame(vec![1, 1, 0, 0], vec![1.0, 2.0, 2.0, 1.0]);
        assert_eq!(std_diff(&same, "x", None, 1.0).unwrap(), 0.0);
        assert!(matches!(std_diff(&f, "x", None, 0.0), Err(DiagnosticsError::ZeroVariance(_))));
    }

    #[test]
    fn std_diff_scale_invariant() {
        let x = vec![0.3, 1.9, 2.2, -0.4, 0.8, 1.1];
        let t = vec![1, 1, 1, 0, 0, 0];
        let f = frame(t.clone(), x.clone());
        let g = frame(t, x.iter().map(|v| v * 7.5).collect());
        let w = [1.0, 2.0, 0.5, 1.0, 0.0, 3.0];
        let a = std_diff(&f, "x", Some(&w), treated_sd(f.observed("x").unwrap(), &f)).unwrap();
        let b = std_diff(&g, "x", Some(&w), treated_sd(g.observed("x").unwrap(), &g)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn identical_groups_rubin() {
        let f = StudyFrame::new(
            vec![1, 1, 1, 0, 0, 0],
            vec![("x".into(), vec![1.0, 2.0, 4.0, 1.0, 2.0, 4.0])],
            None,
        )
        .unwrap();
        let m = PropensityModel::from_scores(vec![0.2, 0.4, 0.7, 0.2, 0.4, 0.7]);
        let r = rubin_metrics(&m, &f, None, &["x".into()]).unwrap();
        assert!(r.b.abs() < 1e-12);
        assert!((r.r - 1.0).abs() < 1e-12);
        assert!((r.residual_ratios[0].1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn flags_follow_thresholds() {
        let f = StudyFrame::new(
            vec![1, 1, 1, 0, 0, 0],
            vec![("x".into(), vec![0.0, 5.0, 10.0, 4.0, 5.0, 6.0])],
            None,
        )
        .unwrap();
        let m = PropensityModel::from_scores(vec![0.1, 0.5, 0.9, 0.45, 0.5, 0.55]);
        let rep = balance_report(&f, Some(&m), &["x".into()], &[1.0; 6]).unwrap();
        let p = rep.propensity.as_ref().unwrap();
        assert!(p.variance_ratio_r > 2.0);
        assert!(p.flags.contains(&BalanceFlag::VarianceRatio));
        assert!(rep.records[0].flags.contains(&BalanceFlag::VarianceRatio));

        let shifted = StudyFrame::new(
            vec![1, 1, 0, 0],
            vec![("x".into(), vec![1.0, 2.0, 0.0, 1.0])],
            None,
        )
        .unwrap();
        let m2 = PropensityModel::from_scores(vec![0.6, 0.7, 0.4, 0.5]);
        let rep2 = balance_report(&shifted, Some(&m2), &["x".into()], &[1.0; 4]).unwrap();
        assert!(rep2.records[0].flags.contains(&BalanceFlag::StdDiff));
        assert!(rep2.propensity.unwrap().flags.contains(&BalanceFlag::StdDiff));
    }

    #[test]
    fn eqq_cases() {
        let f = frame(vec![1, 1, 0, 0], vec![1.0, 3.0, 2.0, 2.0]);
        assert_eq!(eqq_stats(&f, "x", None).unwrap(), (1.0, 1.0));
        let g = frame(vec![1, 1, 1, 0, 0, 0], vec![1.0, 4.0, 2.0, 2.0, 1.0, 4.0]);
        assert_eq!(eqq_stats(&g, "x", None).unwrap(), (0.0, 0.0));
        let delta = 0.75;
        let h = frame(vec![1, 1, 1, 0, 0, 0], vec![1.0, 4.0, 2.0, 2.0 + delta, 1.0 + delta, 4.0 + delta]);
        let (m, x) = eqq_stats(&h, "x", None).unwrap();
        assert!((m - delta).abs() < 1e-12 && (x - delta).abs() < 1e-12);
    }

    #[test]
    fn report_has_no_test_statistics() {
        let f = frame(vec![1, 1, 0, 0], vec![1.0, 3.0, 2.0, 2.5]);
        let rep = balance_report(&f, None, &["x".into()], &[1.0; 4]).unwrap();
        let json = serde_json::to_string(&rep).unwrap().to_lowercase();
        for banned in ["p_value", "pvalue", "t_stat", "statistic"] {
            assert!(!json.contains(banned));
        }
    }
}
