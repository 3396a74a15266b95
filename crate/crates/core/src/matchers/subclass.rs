use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DiscardReason, MatchError, MatchKind, MatchProvenance, MatchResult, MatchedSet};
use crate::dataset::StudyFrame;
use crate::distance::bin_index;
use crate::propensity::PropensityModel;
use crate::weighting;
use crate::Estimand;

/// Propensity-score strata. `subclass_of` is 0-based; `None` marks units
/// excluded before stratification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subclassification {
    pub n_subclasses: usize,
    pub boundaries: Vec<f64>,
    pub subclass_of: Vec<Option<usize>>,
    pub estimand: Estimand,
}

impl Subclassification {
    /// `(treated, control)` unit indices of subclass `j`.
    pub fn members(&self, frame: &StudyFrame, j: usize) -> (Vec<usize>, Vec<usize>) {
        let mut t = Vec::new();
        let mut c = Vec::new();
        for (u, s) in self.subclass_of.iter().enumerate() {
            if *s == Some(j) {
                if frame.is_treated(u) {
                    t.push(u);
                } else {
                    c.push(u);
                }
            }
        }
        (t, c)
    }

    pub fn validate(&self, frame: &StudyFrame) -> Result<(), MatchError> {
        for j in 0..self.n_subclasses {
            let (t, c) = self.members(frame, j);
            if t.is_empty() {
                return Err(MatchError::EmptySubclassArm { subclass: j + 1, arm: "treated" });
            }
            if c.is_empty() {
                return Err(MatchError::EmptySubclassArm { subclass: j + 1, arm: "control" });
            }
        }
        Ok(())
    }

    /// Strata as a [`MatchResult`] carrying subclass weights.
    pub fn to_match_result(&self, frame: &StudyFrame) -> Result<MatchResult, MatchError> {
        let w = weighting::subclass_weights(self, frame, self.estimand)?;
        let sets = (0..self.n_subclasses)
            .map(|j| {
                let (treated, controls) = self.members(frame, j);
                MatchedSet { treated, controls }
            })
            .collect();
        let discarded = self
            .subclass_of
            .iter()
            .map(|s| s.is_none().then_some(DiscardReason::CommonSupport))
            .collect();
        let multiplicity = self.subclass_of.iter().map(|s| usize::from(s.is_some())).collect();
        Ok(MatchResult {
            estimand: self.estimand,
            kind: MatchKind::Subclass,
            unit_weight: w.weights,
            sets,
            discarded,
            multiplicity,
            method: MatchProvenance {
                method: "subclassification".into(),
                notes: vec![w.note],
                ..Default::default()
            },
        })
    }
}

/// Splits units at empirical quantiles `j / n_subclasses` of the propensity
/// scores (treated scores for ATT, all scores for ATE). Intervals are
/// lower-inclusive: a unit whose score equals a cutpoint joins the upper stratum.
///
/// The cutpoint for quantile `p` over `m` sorted scores is the order statistic
/// at 0-based position `floor(p·m)`.
pub fn subclassify(
    model: &PropensityModel,
    frame: &StudyFrame,
    n_subclasses: usize,
    estimand: Estimand,
    retained: Option<&[bool]>,
) -> Result<Subclassification, MatchError> {
    if n_subclasses < 2 {
        return Err(MatchError::InvalidArgument(format!(
            "need at least 2 subclasses, got {n_subclasses}"
        )));
    }
    let keep = |u: usize| retained.is_none_or(|r| r[u]);
    let mut basis: Vec<f64> = (0..frame.n_units())
        .filter(|&u| keep(u) && (estimand == Estimand::Ate || frame.is_treated(u)))
        .map(|u| model.scores[u])
        .collect();
    if basis.is_empty() {
        return Err(MatchError::EverythingDiscarded);
    }
    basis.sort_by(f64::total_cmp);
    let m = basis.len();
    let boundaries: Vec<f64> = (1..n_subclasses)
        .map(|j| basis[((j * m) / n_subclasses).min(m - 1)])
        .collect();
    let subclass_of: Vec<Option<usize>> = (0..frame.n_units())
        .map(|u| {
            keep(u).then(|| boundaries.partition_point(|&b| b <= model.scores[u]))
        })
        .collect();
    let sub = Subclassification {
        n_subclasses,
        boundaries,
        subclass_of,
        estimand,
    };
    // Tied cutpoints leave an empty stratum, which validation reports.
    sub.validate(frame)?;
    Ok(sub)
}

/// Exact matching as stratification: one stratum per distinct value of
/// `keys` (bin index when `bins` has edges for the column). Cells without
/// both arms are dropped. Strata are numbered by first appearance.
pub fn exact_subclasses(
    frame: &StudyFrame,
    keys: &[String],
    bins: Option<&BTreeMap<String, Vec<f64>>>,
    estimand: Estimand,
) -> Result<Subclassification, MatchError> {
    let cols: Vec<&[f64]> = keys
        .iter()
        .map(|k| frame.observed(k).map_err(|e| MatchError::InvalidArgument(e.to_string())))
        .collect::<Result<_, _>>()?;
    let edges: Vec<Option<&Vec<f64>>> = keys.iter().map(|k| bins.and_then(|b| b.get(k))).collect();
    let key_of = |u: usize| -> Vec<u64> {
        cols.iter()
            .zip(&edges)
            .map(|(c, e)| match e {
                Some(e) => bin_index(c[u], e) as u64,
                None => (c[u] + 0.0).to_bits(),
            })
            .collect()
    };
    let mut cells: BTreeMap<Vec<u64>, (usize, usize, usize)> = BTreeMap::new();
    let unit_keys: Vec<Vec<u64>> = (0..frame.n_units()).map(key_of).collect();
    for (u, k) in unit_keys.iter().enumerate() {
        let entry = cells.entry(k.clone()).or_insert((u, 0, 0));
        if frame.is_treated(u) {
            entry.1 += 1;
        } else {
            entry.2 += 1;
        }
    }
    let mut kept: Vec<(usize, &Vec<u64>)> = cells
        .iter()
        .filter(|(_, &(_, t, c))| t > 0 && c > 0)
        .map(|(k, &(first, _, _))| (first, k))
        .collect();
    if kept.is_empty() {
        return Err(MatchError::EverythingDiscarded);
    }
    kept.sort_unstable();
    let id: BTreeMap<&Vec<u64>, usize> = kept.iter().enumerate().map(|(j, (_, k))| (*k, j)).collect();
    let subclass_of = unit_keys.iter().map(|k| id.get(k).copied()).collect();
    Ok(Subclassification {
        n_subclasses: kept.len(),
        boundaries: Vec::new(),
        subclass_of,
        estimand,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(scores: Vec<f64>, t: Vec<u8>) -> (PropensityModel, StudyFrame) {
        let f = StudyFrame::new(t, vec![], None).unwrap();
        (PropensityModel::from_scores(scores), f)
    }

    #[test]
    fn quintiles_two_per_stratum() {
        let scores = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95];
        let (m, f) = setup(scores, vec![1, 0, 0, 1, 1, 0, 0, 1, 1, 0]);
        let s = subclassify(&m, &f, 5, Estimand::Ate, None).unwrap();
        let ids: Vec<usize> = s.subclass_of.iter().map(|x| x.unwrap() + 1).collect();
        assert_eq!(ids, vec![1, 1, 2, 2, 3, 3, 4, 4, 5, 5]);
        assert_eq!(s.boundaries, vec![0.3, 0.5, 0.7, 0.9]);
    }

    #[test]
    fn one_subclass_is_invalid() {
        let (m, f) = setup(vec![0.2, 0.4], vec![1, 0]);
        assert!(matches!(
            subclassify(&m, &f, 1, Estimand::Att, None),
            Err(MatchError::InvalidArgument(_))
        ));
    }

    #[test]
    fn no_overlap_leaves_empty_arm() {
        let scores = vec![0.6, 0.65, 0.7, 0.75, 0.8, 0.1, 0.2, 0.3, 0.4, 0.5];
        let (m, f) = setup(scores, vec![1, 1, 1, 1, 1, 0, 0, 0, 0, 0]);
        let err = subclassify(&m, &f, 5, Estimand::Att, None).unwrap_err();
        assert!(matches!(err, MatchError::EmptySubclassArm { arm: "control", .. }));
    }

    #[test]
    fn att_boundaries_use_treated_only() {
        let scores = vec![0.2, 0.4, 0.6, 0.8, 0.1, 0.3, 0.5, 0.7, 0.9, 0.05];
        let (m, f) = setup(scores.clone(), vec![1, 1, 1, 1, 0, 0, 0, 0, 0, 0]);
        let s = subclassify(&m, &f, 2, Estimand::Att, None).unwrap();
        assert_eq!(s.boundaries, vec![0.6]);
        let mut moved = scores;
        moved[9] = 0.01;
        let (m2, _) = setup(moved, vec![1, 1, 1, 1, 0, 0, 0, 0, 0, 0]);
        assert_eq!(subclassify(&m2, &f, 2, Estimand::Att, None).unwrap().boundaries, vec![0.6]);
    }

    #[test]
    fn exact_cells_drop_single_arm_values() {
        let f = StudyFrame::new(
            vec![1, 0, 1, 0, 1, 0],
            vec![("g".into(), vec![2.0, 2.0, 5.0, 7.0, 2.0, 5.0])],
            None,
        )
        .unwrap();
        let s = exact_subclasses(&f, &["g".into()], None, Estimand::Att).unwrap();
        assert_eq!(s.n_subclasses, 2);
        assert_eq!(s.subclass_of, vec![Some(0), Some(0), Some(1), None, Some(0), Some(1)]);
        let r = s.to_match_result(&f).unwrap();
        assert_eq!(r.unit_weight, vec![1.0, 2.0, 1.0, 0.0, 1.0, 1.0]);
    }
}
