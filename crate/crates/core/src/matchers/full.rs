//! Optimal full matching as a min-cost flow.
//!
//! Every retained unit ends up in a set with at least one treated and one
//! control unit. Some optimal partition always consists of stars (one treated
//! with several controls, or one control with several treated), so the solver
//! searches over edge sets where each treated node has degree in
//! `[L_t, U_t]` and each control node in `[L_c, U_c]`, derived from the
//! controls-per-treated ratio bounds. Degree lower bounds are enforced with
//! a large negative cost on mandatory source/sink arcs.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::{initial_discards, DiscardReason, MatchError, MatchKind, MatchProvenance, MatchResult, MatchedSet};
use crate::distance::DistanceMatrix;
use crate::Estimand;

/// Bounds on `controls / treated` inside every matched set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FullMatchOptions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_ratio: Option<f64>,
}

#[derive(Clone, Copy)]
struct Arc {
    to: usize,
    cap: i64,
    cost: f64,
    rev: usize,
}

struct Network {
    adj: Vec<Vec<Arc>>,
}

impl Network {
    fn new(n: usize) -> Self {
        Network {
            adj: vec![Vec::new(); n],
        }
    }

    fn add(&mut self, from: usize, to: usize, cap: i64, cost: f64) -> (usize, usize) {
        let fwd = self.adj[from].len();
        let back = self.adj[to].len() + usize::from(from == to);
        self.adj[from].push(Arc {
            to,
            cap,
            cost,
            rev: back,
        });
        self.adj[to].push(Arc {
            to: from,
            cap: 0,
            cost: -cost,
            rev: fwd,
        });
        (from, fwd)
    }
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

/// Successive shortest paths from `s` to `t`, stopping once the cheapest
/// augmenting path no longer has negative cost. `potential` must make every
/// residual arc's reduced cost nonnegative on entry.
fn min_cost_flow(net: &mut Network, s: usize, t: usize, mut potential: Vec<f64>) {
    let n = net.adj.len();
    loop {
        let mut dist = vec![f64::INFINITY; n];
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; n];
        dist[s] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(Entry(0.0, s));
        while let Some(Entry(du, u)) = heap.pop() {
            if du > dist[u] {
                continue;
            }
            for (k, a) in net.adj[u].iter().enumerate() {
                if a.cap <= 0 || !potential[a.to].is_finite() {
                    continue;
                }
                let reduced = (a.cost + potential[u] - potential[a.to]).max(0.0);
                let nd = du + reduced;
                if nd < dist[a.to] {
                    dist[a.to] = nd;
                    prev[a.to] = Some((u, k));
                    heap.push(Entry(nd, a.to));
                }
            }
        }
        if !dist[t].is_finite() {
            return;
        }
        for v in 0..n {
            if dist[v].is_finite() {
                potential[v] += dist[v];
            }
        }
        // Potential difference equals the true path cost.
        if potential[t] - potential[s] >= 0.0 {
            return;
        }
        let mut v = t;
        let mut push = i64::MAX;
        while let Some((u, k)) = prev[v] {
            push = push.min(net.adj[u][k].cap);
            v = u;
        }
        let mut v = t;
        while let Some((u, k)) = prev[v] {
            net.adj[u][k].cap -= push;
            let rev = net.adj[u][k].rev;
            net.adj[v][rev].cap += push;
            v = u;
        }
    }
}

struct DegreeBounds {
    lo_t: i64,
    hi_t: i64,
    lo_c: i64,
    hi_c: i64,
}

fn degree_bounds(opts: &FullMatchOptions, n_t: usize, n_c: usize) -> Result<DegreeBounds, MatchError> {
    let lo = opts.min_ratio.unwrap_or(0.0);
    let hi = opts.max_ratio.unwrap_or(f64::INFINITY);
    if lo < 0.0 || hi <= 0.0 || lo > hi || lo.is_nan() || hi.is_nan() {
        return Err(MatchError::InvalidArgument(format!(
            "ratio bounds [{lo}, {hi}] are not a valid interval"
        )));
    }
    let cap = |x: f64, limit: usize| -> i64 {
        if x.is_finite() {
            (x as i64).clamp(1, limit.max(1) as i64)
        } else {
            limit.max(1) as i64
        }
    };
    Ok(DegreeBounds {
        lo_t: (lo.ceil() as i64).max(1),
        hi_t: cap(hi.floor(), n_c),
        lo_c: if hi.is_finite() { ((1.0 / hi).ceil() as i64).max(1) } else { 1 },
        hi_c: if lo > 0.0 { cap((1.0 / lo).floor(), n_t) } else { n_t.max(1) as i64 },
    })
}

/// Optimal full matching on `d` with optional ratio bounds.
///
/// Units without any finite distance are discarded (`no_match_in_caliper`).
/// Weights: ATT gives treated 1 and controls `n_t/n_c` of their set; ATE gives
/// every unit `n_set / n_arm_in_set`.
pub fn full_match(
    d: &DistanceMatrix,
    opts: &FullMatchOptions,
    estimand: Estimand,
) -> Result<MatchResult, MatchError> {
    let mut discarded = initial_discards(d);
    let rows: Vec<usize> = (0..d.n_rows())
        .filter(|&r| d.row(r).iter().any(|v| v.is_finite()))
        .collect();
    let cols: Vec<usize> = (0..d.n_cols())
        .filter(|&c| rows.iter().any(|&r| d.get(r, c).is_finite()))
        .collect();
    for r in 0..d.n_rows() {
        if !rows.contains(&r) {
            discarded[d.rows[r]] = Some(DiscardReason::NoMatchInCaliper);
        }
    }
    for c in 0..d.n_cols() {
        if !cols.contains(&c) {
            discarded[d.cols[c]] = Some(DiscardReason::NoMatchInCaliper);
        }
    }
    if rows.is_empty() || cols.is_empty() {
        return Err(MatchError::Infeasible("no finite treated-control distance".into()));
    }
    let (nt, nc) = (rows.len(), cols.len());
    let b = degree_bounds(opts, nt, nc)?;

    let finite_sum: f64 = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .map(|(r, c)| d.get(r, c))
        .filter(|v| v.is_finite())
        .sum();
    let big = 1.0 + 2.0 * finite_sum;

    // Nodes: source 0, treated 1..=nt, controls nt+1..=nt+nc, sink nt+nc+1.
    let source = 0;
    let sink = nt + nc + 1;
    let mut net = Network::new(nt + nc + 2);
    let mut mandatory = Vec::new();
    for i in 0..nt {
        mandatory.push(net.add(source, 1 + i, b.lo_t, -big));
        if b.hi_t > b.lo_t {
            net.add(source, 1 + i, b.hi_t - b.lo_t, 0.0);
        }
    }
    let mut pair_arcs = Vec::new();
    for (i, &r) in rows.iter().enumerate() {
        for (j, &c) in cols.iter().enumerate() {
            let v = d.get(r, c);
            if v.is_finite() {
                let arc = net.add(1 + i, 1 + nt + j, 1, v);
                pair_arcs.push((i, j, arc));
            }
        }
    }
    for j in 0..nc {
        mandatory.push(net.add(1 + nt + j, sink, b.lo_c, -big));
        if b.hi_c > b.lo_c {
            net.add(1 + nt + j, sink, b.hi_c - b.lo_c, 0.0);
        }
    }

    // Shortest-path potentials on the initial DAG.
    let mut pot = vec![f64::INFINITY; nt + nc + 2];
    pot[source] = 0.0;
    for i in 0..nt {
        pot[1 + i] = -big;
    }
    for &(i, j, _) in &pair_arcs {
        let node = 1 + nt + j;
        pot[node] = pot[node].min(pot[1 + i] + d.get(rows[i], cols[j]));
    }
    pot[sink] = (0..nc)
        .map(|j| pot[1 + nt + j] - big)
        .fold(f64::INFINITY, f64::min);
    min_cost_flow(&mut net, source, sink, pot);

    if mandatory.iter().any(|&(u, k)| net.adj[u][k].cap > 0) {
        return Err(MatchError::Infeasible(
            "ratio bounds or forbidden pairs leave some unit unmatched".into(),
        ));
    }

    let mut edges: Vec<(usize, usize)> = pair_arcs
        .iter()
        .filter(|&&(_, _, (u, k))| net.adj[u][k].cap == 0)
        .map(|&(i, j, _)| (i, j))
        .collect();
    let mut deg_t = vec![0i64; nt];
    let mut deg_c = vec![0i64; nc];
    for &(i, j) in &edges {
        deg_t[i] += 1;
        deg_c[j] += 1;
    }
    // Drop redundant edges (both ends above their lower bound), costliest first.
    edges.sort_by(|&(a, b2), &(c, e)| {
        d.get(rows[c], cols[e])
            .total_cmp(&d.get(rows[a], cols[b2]))
            .then((a, b2).cmp(&(c, e)))
    });
    edges.retain(|&(i, j)| {
        if deg_t[i] > b.lo_t && deg_c[j] > b.lo_c {
            deg_t[i] -= 1;
            deg_c[j] -= 1;
            false
        } else {
            true
        }
    });

    // Components of the remaining star forest.
    let mut parent: Vec<usize> = (0..nt + nc).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut y = x;
        while p[y] != r {
            let next = p[y];
            p[y] = r;
            y = next;
        }
        r
    }
    for &(i, j) in &edges {
        let (a, b2) = (find(&mut parent, i), find(&mut parent, nt + j));
        if a != b2 {
            parent[a.max(b2)] = a.min(b2);
        }
    }
    let mut groups: std::collections::BTreeMap<usize, MatchedSet> = Default::default();
    for i in 0..nt {
        let root = find(&mut parent, i);
        groups
            .entry(root)
            .or_insert_with(|| MatchedSet { treated: vec![], controls: vec![] })
            .treated
            .push(d.rows[rows[i]]);
    }
    for j in 0..nc {
        let root = find(&mut parent, nt + j);
        groups
            .entry(root)
            .or_insert_with(|| MatchedSet { treated: vec![], controls: vec![] })
            .controls
            .push(d.cols[cols[j]]);
    }
    let mut sets: Vec<MatchedSet> = groups.into_values().collect();
    for s in sets.iter_mut() {
        s.treated.sort_unstable();
        s.controls.sort_unstable();
    }
    sets.sort_by_key(|s| s.treated.iter().chain(&s.controls).min().copied());

    let mut weight = vec![0.0; d.n_units];
    let mut multiplicity = vec![0usize; d.n_units];
    for s in &sets {
        let (st, sc) = (s.treated.len() as f64, s.controls.len() as f64);
        let (wt, wc) = match estimand {
            Estimand::Att => (1.0, st / sc),
            Estimand::Ate => ((st + sc) / st, (st + sc) / sc),
        };
        for &u in &s.treated {
            weight[u] = wt;
            multiplicity[u] = 1;
        }
        for &u in &s.controls {
            weight[u] = wc;
            multiplicity[u] = 1;
        }
    }
    let mut result = MatchResult {
        estimand,
        kind: MatchKind::Full,
        unit_weight: weight,
        sets,
        discarded,
        multiplicity,
        method: MatchProvenance {
            method: "full".into(),
            ..Default::default()
        },
    };
    let total = result.total_distance(d);
    result.method.total_distance = Some(total);
    if opts.min_ratio.is_some() || opts.max_ratio.is_some() {
        result.method.notes.push(format!(
            "controls per treated bounded to [{}, {}]",
            opts.min_ratio.unwrap_or(0.0),
            opts.max_ratio.unwrap_or(f64::INFINITY)
        ));
    }
    Ok(result)
}
