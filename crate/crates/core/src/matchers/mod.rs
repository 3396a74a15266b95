//! Matching and stratification: turn distances or scores into matched sets
//! and per-unit analysis weights.

mod assignment;
mod full;
mod greedy;
mod subclass;
mod support;

pub use assignment::{min_cost_assignment, optimal_pair};
pub use full::{full_match, FullMatchOptions};
pub use greedy::{greedy_nn, GreedyOptions, MatchOrder};
pub use subclass::{exact_subclasses, subclassify, Subclassification};
pub use support::trim_common_support;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distance::DistanceMatrix;
use crate::Estimand;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("no control units to match from")]
    NoControls,
    #[error("invalid ratio k = {0}")]
    InvalidK(usize),
    #[error("no finite-cost matching exists: {0}")]
    Infeasible(String),
    #[error("subclass {subclass} has no {arm} units")]
    EmptySubclassArm { subclass: usize, arm: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("common-support trimming discarded every unit of an arm")]
    EverythingDiscarded,
    #[error("descending-propensity order needs propensity scores")]
    MissingScores,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    NoMatchInCaliper,
    CommonSupport,
    UnmatchedControl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MatchKind {
    Pair { k: usize, with_replacement: bool },
    Full,
    Subclass,
    Weighting,
}

/// Unit indices (into the frame) of one matched set or subclass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedSet {
    pub treated: Vec<usize>,
    pub controls: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchProvenance {
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub with_replacement: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub caliper: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_distance: Option<f64>,
    /// Treated units that found at least one but fewer than k controls.
    pub partially_matched: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub estimand: Estimand,
    pub kind: MatchKind,
    pub unit_weight: Vec<f64>,
    pub sets: Vec<MatchedSet>,
    pub discarded: Vec<Option<DiscardReason>>,
    /// Times each unit was selected (controls with replacement may exceed 1).
    pub multiplicity: Vec<usize>,
    pub method: MatchProvenance,
}

impl MatchResult {
    pub fn n_units(&self) -> usize {
        self.unit_weight.len()
    }

    pub fn is_discarded(&self, unit: usize) -> bool {
        self.discarded[unit].is_some()
    }

    pub fn retained(&self) -> Vec<bool> {
        self.discarded.iter().map(Option::is_none).collect()
    }

    /// Sum of treated–control distances over all pairs inside each set.
    pub fn total_distance(&self, d: &DistanceMatrix) -> f64 {
        let row_of = index_map(&d.rows, d.n_units);
        let col_of = index_map(&d.cols, d.n_units);
        self.sets
            .iter()
            .map(|s| {
                s.treated
                    .iter()
                    .flat_map(|&t| {
                        s.controls
                            .iter()
                            .map(move |&c| (t, c))
                    })
                    .map(|(t, c)| d.get(row_of[t].unwrap(), col_of[c].unwrap()))
                    .sum::<f64>()
            })
            .sum()
    }

    /// Marks units as excluded upstream by common-support trimming.
    pub fn mark_common_support(&mut self, trimmed: &[bool]) {
        for (u, &t) in trimmed.iter().enumerate() {
            if t {
                self.discarded[u] = Some(DiscardReason::CommonSupport);
                self.unit_weight[u] = 0.0;
            }
        }
    }

    /// Control units paired with each treated unit, in set order (pair kinds).
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.sets
            .iter()
            .flat_map(|s| {
                s.treated
                    .iter()
                    .flat_map(move |&t| s.controls.iter().map(move |&c| (t, c)))
            })
            .collect()
    }
}

pub(crate) fn index_map(ids: &[usize], n: usize) -> Vec<Option<usize>> {
    let mut m = vec![None; n];
    for (k, &u) in ids.iter().enumerate() {
        m[u] = Some(k);
    }
    m
}

/// Units that are neither rows nor columns of the matrix were removed
/// upstream by common-support trimming.
pub(crate) fn initial_discards(d: &DistanceMatrix) -> Vec<Option<DiscardReason>> {
    let mut out = vec![Some(DiscardReason::CommonSupport); d.n_units];
    for &u in d.rows.iter().chain(&d.cols) {
        out[u] = None;
    }
    out
}
