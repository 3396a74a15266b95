//! Propensity scores by maximum-likelihood logistic regression (IRLS).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, ColumnKind, DatasetError, StudyFrame, TermKind};
use crate::diagnostics::BalanceReport;
use crate::linalg::{self, expit};

/// Linear scores beyond this magnitude while the deviance keeps falling are
/// treated as evidence of separation.
pub const SEPARATION_ETA: f64 = 30.0;

#[derive(Debug, Error)]
pub enum PropensityError {
    #[error("perfect or quasi-complete separation after {iterations} iterations")]
    Separation { iterations: usize },
    #[error("weighted normal equations are rank deficient")]
    SingularDesign,
    #[error("IRLS did not converge in {0} iterations")]
    NotConverged(usize),
    #[error("{units} units cannot identify {params} parameters")]
    TooFewUnits { units: usize, params: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 50,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub column_names: Vec<String>,
    /// Intercept first, then one entry per column. Aliased columns carry 0.
    pub coefficients: Vec<f64>,
    /// Columns dropped because they are linear combinations of earlier ones.
    pub aliased: Vec<String>,
    /// Terms introduced by [`respecify`], in the order they were added.
    pub added_terms: Vec<String>,
    pub converged: bool,
    pub iterations: usize,
    pub deviance: f64,
    #[serde(skip)]
    pub scores: Vec<f64>,
    #[serde(skip)]
    pub linear_scores: Vec<f64>,
}

impl PropensityModel {
    /// Wraps externally known scores. Only the simulation bench hands these out.
    pub(crate) fn from_scores(scores: Vec<f64>) -> Self {
        let linear_scores = scores.iter().map(|&e| linalg::logit(e)).collect();
        PropensityModel {
            column_names: Vec::new(),
            coefficients: Vec::new(),
            aliased: Vec::new(),
            added_terms: Vec::new(),
            converged: true,
            iterations: 0,
            deviance: f64::NAN,
            scores,
            linear_scores,
        }
    }
}

fn design_matrix(frame: &StudyFrame, columns: &[String]) -> Result<DMatrix<f64>, DatasetError> {
    let n = frame.n_units();
    let mut x = DMatrix::<f64>::zeros(n, columns.len() + 1);
    x.column_mut(0).fill(1.0);
    for (j, name) in columns.iter().enumerate() {
        let v = frame.observed(name)?;
        for i in 0..n {
            x[(i, j + 1)] = v[i];
        }
    }
    Ok(x)
}

/// Indices of design columns that are not linear combinations of earlier ones.
fn independent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for j in 0..x.ncols() {
        let norm = x.column(j).norm();
        if norm == 0.0 {
            continue;
        }
        let mut cols = kept.clone();
        cols.push(j);
        let sub = x.select_columns(&cols);
        let r = sub.qr().r();
        let k = cols.len() - 1;
        if r[(k, k)].abs() > 1e-9 * norm {
            kept.push(j);
        }
    }
    kept
}

fn deviance(y: &[f64], mu: &[f64]) -> f64 {
    y.iter()
        .zip(mu)
        .map(|(&t, &m)| {
            let p = if t == 1.0 { m } else { 1.0 - m };
            -2.0 * p.max(f64::MIN_POSITIVE).ln()
        })
        .sum()
}

/// Fits P(T = 1 | X) on the named columns with an intercept.
///
/// Columns that are exact linear combinations of earlier columns are aliased
/// (coefficient fixed at zero), the way R's `glm` reports `NA`.
pub fn fit_logistic(
    frame: &StudyFrame,
    columns: &[String],
    opts: &FitOptions,
) -> Result<PropensityModel, PropensityError> {
    let full = design_matrix(frame, columns)?;
    let n = frame.n_units();
    let kept = independent_columns(&full);
    if n <= kept.len() {
        return Err(PropensityError::TooFewUnits {
            units: n,
            params: kept.len(),
        });
    }
    let x = full.select_columns(&kept);
    let p = kept.len();
    let y: Vec<f64> = frame.treatment.iter().map(|&t| t as f64).collect();

    let mut beta = nalgebra::DVector::<f64>::zeros(p);
    let mut eta = &x * &beta;
    let mut mu: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
    let mut dev = deviance(&y, &mu);
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=opts.max_iter {
        iterations = iter;
        let w: Vec<f64> = mu.iter().map(|m| m * (1.0 - m)).collect();
        let working: Vec<f64> = (0..n)
            .map(|i| if w[i] > 0.0 { (y[i] - mu[i]) / w[i] } else { 0.0 })
            .collect();
        let step = linalg::weighted_least_squares(&x, &working, &w)
            .map_err(|_| PropensityError::SingularDesign)?
            .coefficients;

        // Step halving keeps the deviance monotone.
        let mut scale = 1.0;
        let (new_beta, new_eta, new_mu, new_dev) = loop {
            let b = &beta + &step * scale;
            let e = &x * &b;
            let m: Vec<f64> = e.iter().map(|&v| expit(v)).collect();
            let d = deviance(&y, &m);
            if d <= dev + 1e-12 * (1.0 + dev.abs()) || scale < 1e-6 {
                break (b, e, m, d);
            }
            scale *= 0.5;
        };
        let change = (&new_beta - &beta).amax();
        let max_eta = new_eta.amax();
        let decreasing = new_dev < dev;

        if max_eta > SEPARATION_ETA && decreasing {
            return Err(PropensityError::Separation { iterations: iter });
        }
        if new_dev < 1e-10 {
            return Err(PropensityError::Separation { iterations: iter });
        }
        beta = new_beta;
        eta = new_eta;
        mu = new_mu;
        dev = new_dev;
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(PropensityError::NotConverged(opts.max_iter));
    }

    let mut coefficients = vec![0.0; columns.len() + 1];
    for (k, &j) in kept.iter().enumerate() {
        coefficients[j] = beta[k];
    }
    let aliased = (1..=columns.len())
        .filter(|j| !kept.contains(j))
        .map(|j| columns[j - 1].clone())
        .collect();
    Ok(PropensityModel {
        column_names: columns.to_vec(),
        coefficients,
        aliased,
        added_terms: Vec::new(),
        converged,
        iterations,
        deviance: dev,
        scores: mu,
        linear_scores: eta.iter().copied().collect(),
    })
}

/// One round of balance-driven respecification.
///
/// Every base covariate of `model` whose post-design |standardized
/// difference| exceeds `threshold` gets its square (continuous columns only)
/// and its interactions with the other imbalanced covariates added; the model
/// is then refit. Returns the expanded frame together with the new model.
pub fn respecify(
    frame: &StudyFrame,
    model: &PropensityModel,
    balance: &BalanceReport,
    threshold: f64,
    opts: &FitOptions,
) -> Result<(StudyFrame, PropensityModel), PropensityError> {
    let derived: Vec<&str> = frame
        .covariates
        .derived_terms
        .iter()
        .filter(|t| t.kind != TermKind::MissingIndicator)
        .map(|t| t.name.as_str())
        .collect();
    let imbalanced: Vec<&String> = model
        .column_names
        .iter()
        .filter(|c| !derived.contains(&c.as_str()))
        .filter(|c| {
            balance
                .records
                .iter()
                .find(|r| &r.name == *c)
                .is_some_and(|r| r.std_diff_post.abs() > threshold)
        })
        .collect();

    let mut squares = Vec::new();
    for c in &imbalanced {
        if frame.column(c)?.kind == ColumnKind::Continuous {
            squares.push((*c).clone());
        }
    }
    let mut interactions = Vec::new();
    for (i, a) in imbalanced.iter().enumerate() {
        for b in &imbalanced[i + 1..] {
            interactions.push(((*a).clone(), (*b).clone()));
        }
    }
    let expanded = dataset::expand_terms(frame, &squares, &interactions)?;
    let mut columns = model.column_names.clone();
    let mut added = model.added_terms.clone();
    let candidates = squares
        .iter()
        .map(|s| dataset::square_name(s))
        .chain(interactions.iter().map(|(a, b)| dataset::interaction_name(a, b)));
    for name in candidates {
        if !columns.contains(&name) {
            columns.push(name.clone());
            added.push(name);
        }
    }
    let mut refit = fit_logistic(&expanded, &columns, opts)?;
    refit.added_terms = added;
    Ok((expanded, refit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::{BalanceRecord, BalanceReport};

    fn frame(t: Vec<u8>, cols: Vec<(&str, Vec<f64>)>) -> StudyFrame {
        StudyFrame::new(
            t,
            cols.into_iter().map(|(n, v)| (n.to_string(), v)).collect(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn intercept_only_matches_sample_share() {
        let f = frame(vec![1, 1, 1, 0, 0, 0, 0, 0, 0, 0], vec![]);
        let m = fit_logistic(&f, &[], &FitOptions::default()).unwrap();
        assert!((m.coefficients[0] - linalg::logit(0.3)).abs() < 1e-10);
        assert!(m.scores.iter().all(|s| (s - 0.3).abs() < 1e-12));
    }

    #[test]
    fn constant_column_is_aliased() {
        let f = frame(vec![1, 0], vec![("x", vec![0.0, 0.0])]);
        let m = fit_logistic(&f, &["x".into()], &FitOptions::default()).unwrap();
        assert!(m.scores.iter().all(|s| (s - 0.5).abs() < 1e-12));
        assert_eq!(m.aliased, vec!["x".to_string()]);
    }

    #[test]
    fn separable_data_is_rejected() {
        let f = frame(vec![0, 0, 1, 1], vec![("x", vec![1.0, 2.0, 3.0, 4.0])]);
        let err = fit_logistic(&f, &["x".into()], &FitOptions::default()).unwrap_err();
        assert!(matches!(err, PropensityError::Separation { .. }), "{err:?}");
    }

    #[test]
    fn score_equations_hold() {
        let x = vec![0.3, -1.2, 2.2, 0.1, -0.5, 1.7, 0.9, -2.0, 0.0, 1.1];
        let z = vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let t = vec![1, 0, 1, 0, 1, 0, 1, 0, 0, 1];
        let f = frame(t.clone(), vec![("x", x.clone()), ("z", z.clone())]);
        let m = fit_logistic(&f, &["x".into(), "z".into()], &FitOptions::default()).unwrap();
        let r: Vec<f64> = t.iter().zip(&m.scores).map(|(&t, e)| t as f64 - e).collect();
        let tol = 1e-6 * 10.0;
        assert!(r.iter().sum::<f64>().abs() < tol);
        assert!(r.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>().abs() < tol);
        assert!(r.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>().abs() < tol);
        for (e, l) in m.scores.iter().zip(&m.linear_scores) {
            assert!((linalg::logit(*e) - l).abs() < 1e-10);
        }
    }

    fn report(entries: &[(&str, f64)]) -> BalanceReport {
        let mut r = BalanceReport::empty();
        for (name, d) in entries {
            r.records.push(BalanceRecord::new(name, 0.0, *d));
        }
        r
    }

    fn study() -> StudyFrame {
        let n = 40;
        let x: Vec<f64> = (0..n).map(|i| 1.5 * (1.3 * i as f64).sin()).collect();
        let z: Vec<f64> = (0..n).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
        let w: Vec<f64> = (0..n).map(|i| 1.0 + (0.7 * i as f64).cos()).collect();
        let t: Vec<u8> = (0..n).map(|i| u8::from((i * 5 + 3) % 7 < 3)).collect();
        frame(t, vec![("x", x), ("z", z), ("w", w)])
    }

    #[test]
    fn respecify_noop_when_balanced() {
        let f = study();
        let cols: Vec<String> = vec!["x".into(), "z".into()];
        let m = fit_logistic(&f, &cols, &FitOptions::default()).unwrap();
        let (g, m2) = respecify(&f, &m, &report(&[("x", 0.1), ("z", 0.05)]), 0.25, &FitOptions::default()).unwrap();
        assert!(m2.added_terms.is_empty());
        assert_eq!(g.covariates.n_columns(), f.covariates.n_columns());
        for (a, b) in m.coefficients.iter().zip(&m2.coefficients) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn respecify_adds_square_of_imbalanced() {
        let f = study();
        let cols: Vec<String> = vec!["x".into(), "z".into()];
        let m = fit_logistic(&f, &cols, &FitOptions::default()).unwrap();
        let (g, m2) = respecify(&f, &m, &report(&[("x", 0.30), ("z", 0.1)]), 0.25, &FitOptions::default()).unwrap();
        assert_eq!(m2.added_terms, vec!["x^2".to_string()]);
        assert!(g.column("x^2").is_ok());
        assert_eq!(m2.column_names.len(), 3);
    }

    #[test]
    fn respecify_threshold_zero_adds_every_square() {
        let f = study();
        let cols: Vec<String> = vec!["x".into(), "w".into()];
        let m = fit_logistic(&f, &cols, &FitOptions::default()).unwrap();
        let (_, m2) = respecify(&f, &m, &report(&[("x", 0.02), ("w", -0.01)]), 0.0, &FitOptions::default()).unwrap();
        assert_eq!(m2.added_terms, vec!["x^2".to_string(), "w^2".to_string(), "x:w".to_string()]);
    }
}
