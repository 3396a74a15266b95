//! Analysis weights: inverse probability of treatment, weighting by the odds,
//! trimming, and the weights implied by a matched sample.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::StudyFrame;
use crate::matchers::{DiscardReason, MatchError, MatchKind, MatchProvenance, MatchResult, MatchedSet, Subclassification};
use crate::propensity::PropensityModel;
use crate::Estimand;

/// Scores closer than this to 0 or 1 are degenerate.
pub const SCORE_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum WeightError {
    #[error("propensity score {score} of unit {unit} is too close to 0 or 1")]
    DegenerateScore { unit: usize, score: f64 },
    #[error("match-implied weights need a pair or ratio match, got {0:?}")]
    WrongResultKind(MatchKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    Iptw,
    Odds,
    Frequency,
    VariableRatio,
    Subclass,
    FullMatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub scheme: WeightScheme,
    pub estimand: Estimand,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trim_cap: Option<f64>,
    pub n_capped: usize,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub note: String,
}

fn score_weights(
    model: &PropensityModel,
    frame: &StudyFrame,
    discard: Option<&[bool]>,
    clamp: bool,
    scheme: WeightScheme,
) -> Result<WeightVector, WeightError> {
    let mut weights = vec![0.0; frame.n_units()];
    for (u, w) in weights.iter_mut().enumerate() {
        if discard.is_some_and(|d| d[u]) {
            continue;
        }
        let mut e = model.scores[u];
        if !(e > SCORE_EPS && e < 1.0 - SCORE_EPS) {
            if !clamp {
                return Err(WeightError::DegenerateScore { unit: u, score: e });
            }
            e = e.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
        }
        *w = match (scheme, frame.is_treated(u)) {
            (WeightScheme::Iptw, true) => 1.0 / e,
            (WeightScheme::Iptw, false) => 1.0 / (1.0 - e),
            (_, true) => 1.0,
            (_, false) => e / (1.0 - e),
        };
    }
    Ok(WeightVector {
        weights,
        scheme,
        estimand: if scheme == WeightScheme::Iptw {
            Estimand::Ate
        } else {
            Estimand::Att
        },
        trim_cap: None,
        n_capped: 0,
        note: if clamp {
            format!("scores clamped to [{SCORE_EPS}, {}]", 1.0 - SCORE_EPS)
        } else {
            String::new()
        },
    })
}

/// `1/ê` for treated units and `1/(1 − ê)` for controls; targets the ATE.
/// With `clamp`, degenerate scores are clamped instead of rejected.
pub fn iptw(
    model: &PropensityModel,
    frame: &StudyFrame,
    discard: Option<&[bool]>,
    clamp: bool,
) -> Result<WeightVector, WeightError> {
    score_weights(model, frame, discard, clamp, WeightScheme::Iptw)
}

/// 1 for treated units and `ê/(1 − ê)` for controls; targets the ATT.
pub fn odds_weights(
    model: &PropensityModel,
    frame: &StudyFrame,
    discard: Option<&[bool]>,
    clamp: bool,
) -> Result<WeightVector, WeightError> {
    score_weights(model, frame, discard, clamp, WeightScheme::Odds)
}

/// Caps every weight at `cap`.
///
/// # Panics
/// If `cap` is not positive.
pub fn trim(w: &WeightVector, cap: f64) -> WeightVector {
    assert!(cap > 0.0, "trim cap must be positive");
    let mut out = w.clone();
    let mut capped = 0;
    for v in out.weights.iter_mut() {
        if *v > cap {
            *v = cap;
            capped += 1;
        }
    }
    out.trim_cap = Some(w.trim_cap.map_or(cap, |c| c.min(cap)));
    out.n_capped = w.n_capped.max(capped);
    out
}

/// Weights implied by a pair or ratio match: treated 1; each control gets
/// `1/k` for every set of `k` controls it sits in. With replacement this is
/// the number of times the control was selected (for 1:1 matching).
pub fn weights_from_match(result: &MatchResult) -> Result<WeightVector, WeightError> {
    let MatchKind::Pair { with_replacement, .. } = result.kind else {
        return Err(WeightError::WrongResultKind(result.kind));
    };
    let mut weights = vec![0.0; result.n_units()];
    for s in &result.sets {
        let share = 1.0 / s.controls.len() as f64;
        for &t in &s.treated {
            weights[t] = 1.0;
        }
        for &c in &s.controls {
            weights[c] += share;
        }
    }
    Ok(WeightVector {
        weights,
        scheme: if with_replacement {
            WeightScheme::Frequency
        } else {
            WeightScheme::VariableRatio
        },
        estimand: result.estimand,
        trim_cap: None,
        n_capped: 0,
        note: String::new(),
    })
}

/// Weights that reproduce the subclass aggregation of the outcome analysis.
///
/// ATT: treated 1, controls `N_tj / N_cj`, so each subclass counts in
/// proportion to its treated units. ATE: treated `N_j / N_tj`, controls
/// `N_j / N_cj`, so both arms are weighted up to the subclass size `N_j`.
pub fn subclass_weights(
    sub: &Subclassification,
    frame: &StudyFrame,
    estimand: Estimand,
) -> Result<WeightVector, MatchError> {
    sub.validate(frame)?;
    let mut weights = vec![0.0; frame.n_units()];
    for j in 0..sub.n_subclasses {
        let (t, c) = sub.members(frame, j);
        let (nt, nc) = (t.len() as f64, c.len() as f64);
        let (wt, wc) = match estimand {
            Estimand::Att => (1.0, nt / nc),
            Estimand::Ate => ((nt + nc) / nt, (nt + nc) / nc),
        };
        for u in t {
            weights[u] = wt;
        }
        for u in c {
            weights[u] = wc;
        }
    }
    let note = match estimand {
        Estimand::Att => "subclass weights: treated 1, control N_tj/N_cj",
        Estimand::Ate => "subclass weights: treated N_j/N_tj, control N_j/N_cj",
    };
    Ok(WeightVector {
        weights,
        scheme: WeightScheme::Subclass,
        estimand,
        trim_cap: None,
        n_capped: 0,
        note: note.into(),
    })
}

/// Wraps a weighting scheme as a single implicit matched set.
pub fn weighting_result(w: &WeightVector, frame: &StudyFrame, discard: Option<&[bool]>) -> MatchResult {
    let n = frame.n_units();
    let dropped = |u: usize| discard.is_some_and(|d| d[u]);
    let set = MatchedSet {
        treated: (0..n).filter(|&u| frame.is_treated(u) && !dropped(u)).collect(),
        controls: (0..n).filter(|&u| !frame.is_treated(u) && !dropped(u)).collect(),
    };
    let mut notes = Vec::new();
    if !w.note.is_empty() {
        notes.push(w.note.clone());
    }
    if let Some(cap) = w.trim_cap {
        notes.push(format!("{} weights capped at {cap}", w.n_capped));
    }
    MatchResult {
        estimand: w.estimand,
        kind: MatchKind::Weighting,
        unit_weight: w.weights.clone(),
        sets: vec![set],
        discarded: (0..n)
            .map(|u| dropped(u).then_some(DiscardReason::CommonSupport))
            .collect(),
        multiplicity: (0..n).map(|u| usize::from(!dropped(u))).collect(),
        method: MatchProvenance {
            method: match w.scheme {
                WeightScheme::Iptw => "iptw".into(),
                _ => "odds".into(),
            },
            notes,
            ..Default::default()
        },
    }
}
