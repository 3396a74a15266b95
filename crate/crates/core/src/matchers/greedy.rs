use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{initial_discards, DiscardReason, MatchError, MatchKind, MatchProvenance, MatchResult, MatchedSet};
use crate::distance::DistanceMatrix;
use crate::Estimand;

/// Order in which treated units pick their controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "order", rename_all = "snake_case")]
pub enum MatchOrder {
    /// Highest propensity score first.
    DescendingPropensity,
    Index,
    Random { seed: u64 },
}

impl MatchOrder {
    fn label(&self) -> String {
        match self {
            MatchOrder::DescendingPropensity => "descending_propensity".into(),
            MatchOrder::Index => "index".into(),
            MatchOrder::Random { seed } => format!("random(seed={seed})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyOptions {
    pub k: usize,
    pub with_replacement: bool,
    /// Maximum admissible distance, in the units of the matrix.
    pub caliper: Option<f64>,
    pub order: MatchOrder,
}

impl Default for GreedyOptions {
    fn default() -> Self {
        GreedyOptions {
            k: 1,
            with_replacement: false,
            caliper: None,
            order: MatchOrder::DescendingPropensity,
        }
    }
}

/// Greedy k:1 nearest-neighbour matching.
///
/// `scores` (indexed by unit) drive the descending-propensity order. Ties in
/// distance go to the control that comes first in the matrix columns.
pub fn greedy_nn(
    d: &DistanceMatrix,
    opts: &GreedyOptions,
    scores: Option<&[f64]>,
) -> Result<MatchResult, MatchError> {
    if opts.k == 0 {
        return Err(MatchError::InvalidK(opts.k));
    }
    if d.n_cols() == 0 {
        return Err(MatchError::NoControls);
    }
    let mut order: Vec<usize> = (0..d.n_rows()).collect();
    match opts.order {
        MatchOrder::Index => {}
        MatchOrder::DescendingPropensity => {
            let s = scores.ok_or(MatchError::MissingScores)?;
            order.sort_by(|&a, &b| s[d.rows[b]].total_cmp(&s[d.rows[a]]));
        }
        MatchOrder::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
        }
    }

    let caliper = opts.caliper.unwrap_or(f64::INFINITY);
    let admissible = |v: f64| v.is_finite() && v <= caliper;
    let mut used = vec![false; d.n_cols()];
    let mut discarded = initial_discards(d);
    let mut multiplicity = vec![0usize; d.n_units];
    let mut weight = vec![0.0; d.n_units];
    let mut sets = Vec::new();
    let mut partial = 0;
    let mut total = 0.0;

    for r in order {
        let row = d.row(r);
        let mut chosen: Vec<usize> = Vec::with_capacity(opts.k);
        if opts.k == 1 {
            let mut best: Option<usize> = None;
            for (c, &v) in row.iter().enumerate() {
                if (opts.with_replacement || !used[c])
                    && admissible(v)
                    && best.is_none_or(|b| v < row[b])
                {
                    best = Some(c);
                }
            }
            chosen.extend(best);
        } else {
            let mut cand: Vec<usize> = (0..d.n_cols())
                .filter(|&c| (opts.with_replacement || !used[c]) && admissible(row[c]))
                .collect();
            cand.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            cand.truncate(opts.k);
            chosen = cand;
        }

        let t = d.rows[r];
        if chosen.is_empty() {
            discarded[t] = Some(DiscardReason::NoMatchInCaliper);
            continue;
        }
        if chosen.len() < opts.k {
            partial += 1;
        }
        let share = 1.0 / chosen.len() as f64;
        weight[t] = 1.0;
        multiplicity[t] = 1;
        for &c in &chosen {
            used[c] = true;
            total += row[c];
            let unit = d.cols[c];
            multiplicity[unit] += 1;
            weight[unit] += share;
        }
        let mut controls: Vec<usize> = chosen.iter().map(|&c| d.cols[c]).collect();
        controls.sort_unstable();
        sets.push(MatchedSet {
            treated: vec![t],
            controls,
        });
    }
    for (c, &u) in d.cols.iter().enumerate() {
        if !used[c] && discarded[u].is_none() {
            discarded[u] = Some(DiscardReason::UnmatchedControl);
        }
    }
    sets.sort_by_key(|s| s.treated[0]);

    let mut notes = Vec::new();
    if partial > 0 {
        notes.push(format!(
            "{partial} treated units kept with fewer than {} controls; their controls share weight 1",
            opts.k
        ));
    }
    Ok(MatchResult {
        estimand: Estimand::Att,
        kind: MatchKind::Pair {
            k: opts.k,
            with_replacement: opts.with_replacement,
        },
        unit_weight: weight,
        sets,
        discarded,
        multiplicity,
        method: MatchProvenance {
            method: "greedy_nearest_neighbor".into(),
            k: Some(opts.k),
            with_replacement: Some(opts.with_replacement),
            caliper: opts.caliper,
            order: Some(opts.order.label()),
            total_distance: Some(total),
            partially_matched: partial,
            notes,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Treated A=1, B=2; controls c1=2, c2=0; absolute difference.
    fn counterexample() -> DistanceMatrix {
        DistanceMatrix::from_dense(vec![vec![1.0, 1.0], vec![0.0, 2.0]])
    }

    fn opts(with_replacement: bool, caliper: Option<f64>) -> GreedyOptions {
        GreedyOptions {
            k: 1,
            with_replacement,
            caliper,
            order: MatchOrder::Index,
        }
    }

    #[test]
    fn greedy_trace_without_replacement() {
        let m = greedy_nn(&counterexample(), &opts(false, None), None).unwrap();
        assert_eq!(m.pairs(), vec![(0, 2), (1, 3)]);
        assert_eq!(m.method.total_distance, Some(3.0));
    }

    #[test]
    fn greedy_with_replacement_reuses_nearest() {
        let m = greedy_nn(&counterexample(), &opts(true, None), None).unwrap();
        assert_eq!(m.pairs(), vec![(0, 2), (1, 2)]);
        assert_eq!(m.multiplicity[2], 2);
        assert_eq!(m.unit_weight[2], 2.0);
        assert_eq!(m.discarded[3], Some(DiscardReason::UnmatchedControl));
    }

    #[test]
    fn caliper_discards_treated() {
        let m = greedy_nn(&counterexample(), &opts(false, Some(0.5)), None).unwrap();
        assert_eq!(m.discarded[0], Some(DiscardReason::NoMatchInCaliper));
        assert_eq!(m.pairs(), vec![(1, 2)]);
        assert_eq!(m.unit_weight[0], 0.0);
    }

    #[test]
    fn ratio_matching_keeps_partial_sets() {
        let d = DistanceMatrix::from_dense(vec![vec![1.0, 2.0, 3.0], vec![1.5, 0.5, 4.0]]);
        let o = GreedyOptions {
            k: 2,
            ..opts(false, None)
        };
        let m = greedy_nn(&d, &o, None).unwrap();
        assert_eq!(m.sets[0].controls, vec![2, 3]);
        assert_eq!(m.sets[1].controls, vec![4]);
        assert_eq!(m.method.partially_matched, 1);
        assert_eq!(m.unit_weight[2], 0.5);
        assert_eq!(m.unit_weight[4], 1.0);
    }

    #[test]
    fn descending_order_and_errors() {
        let d = counterexample();
        let scores = [0.2, 0.9, 0.5, 0.5];
        let o = GreedyOptions {
            order: MatchOrder::DescendingPropensity,
            ..opts(false, None)
        };
        let m = greedy_nn(&d, &o, Some(&scores)).unwrap();
        // B goes first and takes c1.
        assert_eq!(m.pairs(), vec![(0, 3), (1, 2)]);
        assert_eq!(greedy_nn(&d, &o, None), Err(MatchError::MissingScores));
        let bad = GreedyOptions { k: 0, ..opts(false, None) };
        assert_eq!(greedy_nn(&d, &bad, None), Err(MatchError::InvalidK(0)));
    }

    #[test]
    fn random_order_is_reproducible() {
        let d = DistanceMatrix::from_dense(vec![vec![1.0, 2.0, 3.0]; 3]);
        let o = GreedyOptions {
            order: MatchOrder::Random { seed: 7 },
            ..opts(false, None)
        };
        assert_eq!(greedy_nn(&d, &o, None).unwrap(), greedy_nn(&d, &o, None).unwrap());
    }
}
