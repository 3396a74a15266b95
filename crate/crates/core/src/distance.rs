//! Pairwise treated-by-control distances.
//!
//! Mahalanobis distances are the quadratic form `(x_i − x_j)' Σ⁻¹ (x_i − x_j)`
//! without a square root.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, StudyFrame};
use crate::linalg::{self, cholesky_lower};
use crate::propensity::PropensityModel;
use crate::Estimand;

/// Default caliper, in standard deviations of the linear propensity score.
pub const DEFAULT_CALIPER_SD: f64 = 0.25;

#[derive(Debug, Error)]
pub enum DistanceError {
    #[error("vectors have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("covariance matrix is singular or not positive definite")]
    SingularSigma,
    #[error("propensity score {0} is outside (0, 1)")]
    ScoreOutOfRange(f64),
    #[error("column `{0}` is constant in the covariance source group")]
    DegenerateVariance(String),
    #[error("distance kind {0:?} needs a fitted propensity model")]
    MissingModel(DistanceKind),
    #[error("distance kind {0:?} needs a caliper")]
    MissingCaliper(DistanceKind),
    #[error("coarsened exact distance needs bin edges for `{0}`")]
    MissingBins(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    Exact,
    CoarsenedExact,
    Mahalanobis,
    Propensity,
    LinearPropensity,
    MahalanobisWithinCaliper,
}

impl DistanceKind {
    pub fn needs_model(self) -> bool {
        matches!(
            self,
            DistanceKind::Propensity
                | DistanceKind::LinearPropensity
                | DistanceKind::MahalanobisWithinCaliper
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSource {
    ControlGroup,
    Pooled,
}

impl From<Estimand> for SigmaSource {
    fn from(e: Estimand) -> Self {
        match e {
            Estimand::Att => SigmaSource::ControlGroup,
            Estimand::Ate => SigmaSource::Pooled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSpec {
    pub kind: DistanceKind,
    #[serde(default = "default_sigma")]
    pub sigma_source: SigmaSource,
    /// In standard deviations of the linear propensity score.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caliper_sd: Option<f64>,
    /// Columns compared by exact / Mahalanobis kinds; all covariates when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_columns: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coarsen_bins: Option<BTreeMap<String, Vec<f64>>>,
}

fn default_sigma() -> SigmaSource {
    SigmaSource::ControlGroup
}

impl DistanceSpec {
    pub fn new(kind: DistanceKind, estimand: Estimand) -> Self {
        DistanceSpec {
            kind,
            sigma_source: estimand.into(),
            caliper_sd: match kind {
                DistanceKind::MahalanobisWithinCaliper => Some(DEFAULT_CALIPER_SD),
                _ => None,
            },
            key_columns: None,
            coarsen_bins: None,
        }
    }

    pub fn with_keys(mut self, keys: &[&str]) -> Self {
        self.key_columns = Some(keys.iter().map(|s| s.to_string()).collect());
        self
    }
}

/// Dense `N_t × N_c` matrix; entry `(r, c)` compares treated unit `rows[r]`
/// with control unit `cols[c]` (indices into the frame). `+∞` means "never match".
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub d: Vec<f64>,
    /// Number of units in the frame the indices refer to.
    pub n_units: usize,
}

impl DistanceMatrix {
    pub fn from_rows(rows: Vec<usize>, cols: Vec<usize>, d: Vec<Vec<f64>>) -> Self {
        assert_eq!(d.len(), rows.len());
        let flat: Vec<f64> = d
            .into_iter()
            .inspect(|r| assert_eq!(r.len(), cols.len()))
            .flatten()
            .collect();
        let n_units = rows.iter().chain(&cols).max().map_or(0, |m| m + 1);
        DistanceMatrix {
            rows,
            cols,
            d: flat,
            n_units,
        }
    }

    /// Matrix over treated units `0..n_t` and controls `n_t..n_t+n_c`.
    pub fn from_dense(d: Vec<Vec<f64>>) -> Self {
        let n_t = d.len();
        let n_c = d.first().map_or(0, Vec::len);
        DistanceMatrix::from_rows((0..n_t).collect(), (n_t..n_t + n_c).collect(), d)
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.d[r * self.cols.len() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let n = self.cols.len();
        &self.d[r * n..(r + 1) * n]
    }

    pub fn transpose(&self) -> DistanceMatrix {
        let (nr, nc) = (self.n_rows(), self.n_cols());
        let mut d = vec![0.0; nr * nc];
        for r in 0..nr {
            for c in 0..nc {
                d[c * nr + r] = self.get(r, c);
            }
        }
        DistanceMatrix {
            rows: self.cols.clone(),
            cols: self.rows.clone(),
            d,
            n_units: self.n_units,
        }
    }

    /// Drops rows and columns of units flagged in `exclude`.
    pub fn restrict(&self, exclude: &[bool]) -> DistanceMatrix {
        let keep_r: Vec<usize> = (0..self.n_rows()).filter(|&r| !exclude[self.rows[r]]).collect();
        let keep_c: Vec<usize> = (0..self.n_cols()).filter(|&c| !exclude[self.cols[c]]).collect();
        let mut d = Vec::with_capacity(keep_r.len() * keep_c.len());
        for &r in &keep_r {
            d.extend(keep_c.iter().map(|&c| self.get(r, c)));
        }
        DistanceMatrix {
            rows: keep_r.iter().map(|&r| self.rows[r]).collect(),
            cols: keep_c.iter().map(|&c| self.cols[c]).collect(),
            d,
            n_units: self.n_units,
        }
    }
}

pub fn exact_distance(xi: &[f64], xj: &[f64]) -> Result<f64, DistanceError> {
    if xi.len() != xj.len() {
        return Err(DistanceError::LengthMismatch(xi.len(), xj.len()));
    }
    Ok(if xi.iter().zip(xj).all(|(a, b)| a == b) {
        0.0
    } else {
        f64::INFINITY
    })
}

/// Bin of `x` given ascending edges: the number of edges `<= x`.
pub fn bin_index(x: f64, edges: &[f64]) -> usize {
    edges.partition_point(|&e| e <= x)
}

/// Exact distance after mapping each coordinate to its bin.
pub fn coarsened_exact_distance(
    xi: &[f64],
    xj: &[f64],
    edges: &[Vec<f64>],
) -> Result<f64, DistanceError> {
    if xi.len() != xj.len() {
        return Err(DistanceError::LengthMismatch(xi.len(), xj.len()));
    }
    if edges.len() != xi.len() {
        return Err(DistanceError::LengthMismatch(edges.len(), xi.len()));
    }
    let same = xi
        .iter()
        .zip(xj)
        .zip(edges)
        .all(|((a, b), e)| bin_index(*a, e) == bin_index(*b, e));
    Ok(if same { 0.0 } else { f64::INFINITY })
}

pub fn mahalanobis_distance(
    xi: &[f64],
    xj: &[f64],
    sigma: &DMatrix<f64>,
) -> Result<f64, DistanceError> {
    if xi.len() != xj.len() {
        return Err(DistanceError::LengthMismatch(xi.len(), xj.len()));
    }
    if sigma.nrows() != xi.len() || sigma.ncols() != xi.len() {
        return Err(DistanceError::LengthMismatch(sigma.nrows(), xi.len()));
    }
    let l = cholesky_lower(sigma).map_err(|_| DistanceError::SingularSigma)?;
    let diff = DVector::from_iterator(xi.len(), xi.iter().zip(xj).map(|(a, b)| a - b));
    let u = l
        .solve_lower_triangular(&diff)
        .ok_or(DistanceError::SingularSigma)?;
    Ok(u.norm_squared())
}

pub fn propensity_distance(ei: f64, ej: f64, linear: bool) -> Result<f64, DistanceError> {
    for e in [ei, ej] {
        if !(e > 0.0 && e < 1.0) {
            return Err(DistanceError::ScoreOutOfRange(e));
        }
    }
    Ok(if linear {
        (linalg::logit(ei) - linalg::logit(ej)).abs()
    } else {
        (ei - ej).abs()
    })
}

/// Mahalanobis distance on the key covariates when the linear scores are
/// within `caliper` (absolute logit units, boundary inclusive), else `+∞`.
pub fn mahalanobis_within_caliper(
    zi: &[f64],
    zj: &[f64],
    sigma_z: &DMatrix<f64>,
    logit_i: f64,
    logit_j: f64,
    caliper: f64,
) -> Result<f64, DistanceError> {
    let m = mahalanobis_distance(zi, zj, sigma_z)?;
    Ok(if (logit_i - logit_j).abs() <= caliper {
        m
    } else {
        f64::INFINITY
    })
}

/// Caliper width in logit units: `caliper_sd` times the SD of all linear scores.
pub fn caliper_width(model: &PropensityModel, caliper_sd: f64) -> f64 {
    caliper_sd * linalg::sample_sd(&model.linear_scores)
}

fn key_columns(frame: &StudyFrame, spec: &DistanceSpec) -> Vec<String> {
    spec.key_columns
        .clone()
        .unwrap_or_else(|| frame.covariates.names())
}

/// Row vectors of the selected columns for every unit.
fn unit_vectors(frame: &StudyFrame, cols: &[String]) -> Result<Vec<Vec<f64>>, DistanceError> {
    let data: Vec<&[f64]> = cols
        .iter()
        .map(|c| frame.observed(c))
        .collect::<Result<_, _>>()?;
    Ok((0..frame.n_units())
        .map(|i| data.iter().map(|col| col[i]).collect())
        .collect())
}

/// `L⁻¹ x` for every unit, with `L L' = Σ` estimated on the source group.
/// Squared Euclidean distances between whitened vectors are Mahalanobis distances.
fn whitened(
    frame: &StudyFrame,
    cols: &[String],
    source: SigmaSource,
) -> Result<Vec<DVector<f64>>, DistanceError> {
    let vecs = unit_vectors(frame, cols)?;
    let group: Vec<Vec<f64>> = match source {
        SigmaSource::ControlGroup => frame
            .control_indices()
            .into_iter()
            .map(|i| vecs[i].clone())
            .collect(),
        SigmaSource::Pooled => vecs.clone(),
    };
    let sigma = linalg::covariance(&group);
    for (k, name) in cols.iter().enumerate() {
        if !(sigma[(k, k)] > 0.0) {
            return Err(DistanceError::DegenerateVariance(name.clone()));
        }
    }
    let l = cholesky_lower(&sigma).map_err(|_| DistanceError::SingularSigma)?;
    vecs.into_iter()
        .map(|v| {
            l.solve_lower_triangular(&DVector::from_vec(v))
                .ok_or(DistanceError::SingularSigma)
        })
        .collect()
}

/// Materializes the treated-by-control matrix for `spec`.
pub fn build_matrix(
    frame: &StudyFrame,
    spec: &DistanceSpec,
    model: Option<&PropensityModel>,
) -> Result<DistanceMatrix, DistanceError> {
    let rows = frame.treated_indices();
    let cols = frame.control_indices();
    let model = if spec.kind.needs_model() {
        Some(model.ok_or(DistanceError::MissingModel(spec.kind))?)
    } else {
        model
    };

    let pair: Box<dyn Fn(usize, usize) -> f64 + Sync> = match spec.kind {
        DistanceKind::Exact => {
            let v = unit_vectors(frame, &key_columns(frame, spec))?;
            Box::new(move |i, j| if v[i] == v[j] { 0.0 } else { f64::INFINITY })
        }
        DistanceKind::CoarsenedExact => {
            let names = key_columns(frame, spec);
            let bins = spec.coarsen_bins.clone().unwrap_or_default();
            let edges: Vec<Vec<f64>> = names
                .iter()
                .map(|n| {
                    bins.get(n)
                        .cloned()
                        .ok_or_else(|| DistanceError::MissingBins(n.clone()))
                })
                .collect::<Result<_, _>>()?;
            let v: Vec<Vec<usize>> = unit_vectors(frame, &names)?
                .into_iter()
                .map(|x| x.iter().zip(&edges).map(|(a, e)| bin_index(*a, e)).collect())
                .collect();
            Box::new(move |i, j| if v[i] == v[j] { 0.0 } else { f64::INFINITY })
        }
        DistanceKind::Mahalanobis => {
            let u = whitened(frame, &key_columns(frame, spec), spec.sigma_source)?;
            Box::new(move |i, j| (&u[i] - &u[j]).norm_squared())
        }
        DistanceKind::Propensity | DistanceKind::LinearPropensity => {
            let m = model.expect("checked above");
            if let Some(&bad) = m.scores.iter().find(|&&e| !(e > 0.0 && e < 1.0)) {
                return Err(DistanceError::ScoreOutOfRange(bad));
            }
            let s = if spec.kind == DistanceKind::Propensity {
                m.scores.clone()
            } else {
                m.linear_scores.clone()
            };
            Box::new(move |i, j| (s[i] - s[j]).abs())
        }
        DistanceKind::MahalanobisWithinCaliper => {
            let m = model.expect("checked above");
            let c_sd = spec
                .caliper_sd
                .ok_or(DistanceError::MissingCaliper(spec.kind))?;
            let c = caliper_width(m, c_sd);
            let u = whitened(frame, &key_columns(frame, spec), spec.sigma_source)?;
            let l = m.linear_scores.clone();
            Box::new(move |i, j| {
                if (l[i] - l[j]).abs() <= c {
                    (&u[i] - &u[j]).norm_squared()
                } else {
                    f64::INFINITY
                }
            })
        }
    };

    let d: Vec<f64> = rows
        .par_iter()
        .flat_map_iter(|&i| cols.iter().map(|&j| pair(i, j)).collect::<Vec<_>>())
        .collect();
    Ok(DistanceMatrix {
        rows,
        cols,
        d,
        n_units: frame.n_units(),
    })
}
