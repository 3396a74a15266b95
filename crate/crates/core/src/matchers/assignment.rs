//! Optimal pair and ratio matching via min-cost bipartite assignment.

use super::{initial_discards, DiscardReason, MatchError, MatchKind, MatchProvenance, MatchResult, MatchedSet};
use crate::distance::DistanceMatrix;
use crate::Estimand;

/// Shortest-augmenting-path assignment (Hungarian method with potentials)
/// for an `n × m` cost matrix with `n <= m`. `+∞` marks forbidden pairs.
///
/// Returns the column assigned to each row, or `None` when no finite-cost
/// assignment of every row exists.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Option<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Some(Vec::new());
    }
    let m = cost[0].len();
    if n > m {
        return None;
    }
    // 1-based; index 0 is the virtual column used to start each search.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            if !delta.is_finite() {
                return None;
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    Some(out)
}

/// Optimal k:1 matching: every treated row is replicated `k` times and the
/// replicated rows are assigned to distinct controls at minimum total distance.
pub fn optimal_pair(d: &DistanceMatrix, k: usize) -> Result<MatchResult, MatchError> {
    if k == 0 {
        return Err(MatchError::InvalidK(k));
    }
    if d.n_cols() == 0 {
        return Err(MatchError::NoControls);
    }
    if d.n_cols() < k * d.n_rows() {
        return Err(MatchError::Infeasible(format!(
            "{} controls cannot supply {k} matches to each of {} treated units",
            d.n_cols(),
            d.n_rows()
        )));
    }
    let cost: Vec<Vec<f64>> = (0..d.n_rows())
        .flat_map(|r| std::iter::repeat_n(d.row(r).to_vec(), k))
        .collect();
    let assign = min_cost_assignment(&cost)
        .ok_or_else(|| MatchError::Infeasible("no finite-cost assignment".into()))?;

    let mut discarded = initial_discards(d);
    let mut weight = vec![0.0; d.n_units];
    let mut multiplicity = vec![0usize; d.n_units];
    let mut used = vec![false; d.n_cols()];
    let mut sets = Vec::with_capacity(d.n_rows());
    let mut total = 0.0;
    for r in 0..d.n_rows() {
        let t = d.rows[r];
        let mut controls = Vec::with_capacity(k);
        for slot in 0..k {
            let c = assign[r * k + slot];
            used[c] = true;
            total += d.get(r, c);
            controls.push(d.cols[c]);
        }
        controls.sort_unstable();
        weight[t] = 1.0;
        multiplicity[t] = 1;
        for &c in &controls {
            weight[c] = 1.0 / k as f64;
            multiplicity[c] = 1;
        }
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
    Ok(MatchResult {
        estimand: Estimand::Att,
        kind: MatchKind::Pair {
            k,
            with_replacement: false,
        },
        unit_weight: weight,
        sets,
        discarded,
        multiplicity,
        method: MatchProvenance {
            method: "optimal".into(),
            k: Some(k),
            with_replacement: Some(false),
            total_distance: Some(total),
            ..Default::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beats_greedy_on_counterexample() {
        let d = DistanceMatrix::from_dense(vec![vec![1.0, 1.0], vec![0.0, 2.0]]);
        let m = optimal_pair(&d, 1).unwrap();
        assert_eq!(m.pairs(), vec![(0, 3), (1, 2)]);
        assert_eq!(m.method.total_distance, Some(1.0));
    }

    #[test]
    fn equal_costs_pair_in_order() {
        let d = DistanceMatrix::from_dense(vec![vec![1.0; 3]; 3]);
        let m = optimal_pair(&d, 1).unwrap();
        assert_eq!(m.pairs(), vec![(0, 3), (1, 4), (2, 5)]);
    }

    #[test]
    fn single_treated_takes_minimum() {
        let d = DistanceMatrix::from_dense(vec![vec![5.0, 1.0, 7.0]]);
        let m = optimal_pair(&d, 1).unwrap();
        assert_eq!(m.pairs(), vec![(0, 2)]);
        assert_eq!(m.method.total_distance, Some(1.0));
        assert_eq!(m.discarded[1], Some(DiscardReason::UnmatchedControl));
    }

    #[test]
    fn infeasible_when_forbidden() {
        let inf = f64::INFINITY;
        let d = DistanceMatrix::from_dense(vec![vec![1.0, inf], vec![2.0, inf]]);
        assert!(matches!(optimal_pair(&d, 1), Err(MatchError::Infeasible(_))));
        let d = DistanceMatrix::from_dense(vec![vec![1.0, 2.0, 3.0]; 2]);
        assert!(matches!(optimal_pair(&d, 2), Err(MatchError::Infeasible(_))));
    }

    #[test]
    fn ratio_two_to_one() {
        let d = DistanceMatrix::from_dense(vec![vec![0.0, 1.0, 5.0, 5.0], vec![5.0, 0.0, 1.0, 1.0]]);
        let m = optimal_pair(&d, 2).unwrap();
        assert_eq!(m.sets[0].controls, vec![2, 3]);
        assert_eq!(m.sets[1].controls, vec![4, 5]);
        assert_eq!(m.method.total_distance, Some(3.0));
        assert_eq!(m.unit_weight[3], 0.5);
    }

    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        fn go(r: usize, cost: &[Vec<f64>], used: &mut Vec<bool>) -> f64 {
            if r == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for c in 0..cost[0].len() {
                if !used[c] {
                    used[c] = true;
                    best = best.min(cost[r][c] + go(r + 1, cost, used));
                    used[c] = false;
                }
            }
            best
        }
        go(0, cost, &mut vec![false; cost[0].len()])
    }

    #[test]
    fn matches_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.random_range(1..=4);
            let m = rng.random_range(n..=6);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    (0..m)
                        .map(|_| {
                            if rng.random_bool(0.15) {
                                f64::INFINITY
                            } else {
                                rng.random_range(0..20) as f64
                            }
                        })
                        .collect()
                })
                .collect();
            let oracle = brute_force(&cost);
            match min_cost_assignment(&cost) {
                Some(a) => {
                    let total: f64 = a.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
                    assert_eq!(total, oracle);
                    let mut cols = a.clone();
                    cols.sort_unstable();
                    cols.dedup();
                    assert_eq!(cols.len(), n);
                }
                None => assert!(oracle.is_infinite()),
            }
        }
    }
}
