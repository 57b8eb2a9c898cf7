//! Self-grouping of filters: k-means over importance vectors.
//!
//! Seeding is k-means++ from a seeded ChaCha8 stream, followed by Lloyd
//! iterations (squared Euclidean assignment, lowest group index on ties) until
//! the assignment is a fixed point or 300 iterations elapse. Eight restarts are
//! run. Empty clusters are repaired by moving the point farthest from its
//! centroid into them.
//!
//! The grouping is meant to minimise the within-group sum of *unsquared*
//! Euclidean distances to the group means, which Lloyd's squared assignment
//! only approximates. Each restart is therefore polished by single-filter
//! relocations that strictly lower that sum, and the restart with the lowest
//! unsquared objective wins (ties: lower sum of squares, then earlier restart).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::importance::ImportanceMatrix;

pub const MAX_LLOYD_ITERATIONS: usize = 300;
pub const RESTARTS: usize = 8;

/// Filter-to-group assignment with every group non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterGroups {
    num_groups: usize,
    assignment: Vec<usize>,
}

impl FilterGroups {
    pub fn new(num_groups: usize, assignment: Vec<usize>) -> Result<Self> {
        if num_groups == 0 {
            return Err(Error::InvalidArgument("number of groups must be >= 1".into()));
        }
        let mut used = vec![false; num_groups];
        for (f, &g) in assignment.iter().enumerate() {
            if g >= num_groups {
                return Err(Error::index(
                    "FilterGroups",
                    format!("filter {f} assigned to group {g}, only {num_groups} groups"),
                ));
            }
            used[g] = true;
        }
        if let Some(g) = used.iter().position(|u| !u) {
            return Err(Error::InvalidArgument(format!("group {g} has no filters")));
        }
        Ok(Self {
            num_groups,
            assignment,
        })
    }

    /// Every filter in one group.
    pub fn single(c_out: usize) -> Self {
        Self {
            num_groups: 1,
            assignment: vec![0; c_out],
        }
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn num_filters(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn group_of(&self, filter: usize) -> usize {
        self.assignment[filter]
    }

    /// Filters of group `g` in ascending order.
    pub fn members(&self, g: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&f| self.assignment[f] == g)
            .collect()
    }

    /// Filter count of every group.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_groups];
        for &g in &self.assignment {
            sizes[g] += 1;
        }
        sizes
    }
}

/// Result of clustering one layer's importance vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    groups: FilterGroups,
    c_in: usize,
    centroids: Vec<f64>,
    /// Within-group sum of Euclidean distances to the centroid.
    pub objective: f64,
    /// Within-group sum of squared distances (the Lloyd objective).
    pub sq_objective: f64,
    /// Lloyd objective after every update step of the winning restart,
    /// before relocation refinement.
    pub sq_history: Vec<f64>,
    pub iterations: usize,
}

impl Grouping {
    /// Grouping with centroids set to the mean of each group's vectors.
    pub fn from_groups(v: &ImportanceMatrix, groups: FilterGroups) -> Result<Self> {
        if groups.num_filters() != v.rows() {
            return Err(Error::shape(
                "Grouping",
                format!(
                    "{} filters assigned, importance has {} rows",
                    groups.num_filters(),
                    v.rows()
                ),
            ));
        }
        let centroids = means(v, groups.assignment(), groups.num_groups());
        let mut out = Self {
            groups,
            c_in: v.cols(),
            centroids,
            objective: 0.0,
            sq_objective: 0.0,
            sq_history: Vec::new(),
            iterations: 0,
        };
        out.sq_objective = sq_objective(v, out.groups.assignment(), &out.centroids);
        out.objective = grouping_objective(v, &out);
        Ok(out)
    }

    pub fn groups(&self) -> &FilterGroups {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.num_groups()
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn assignment(&self) -> &[usize] {
        self.groups.assignment()
    }

    pub fn centroid(&self, g: usize) -> &[f64] {
        &self.centroids[g * self.c_in..(g + 1) * self.c_in]
    }

    pub fn into_groups(self) -> FilterGroups {
        self.groups
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn means(v: &ImportanceMatrix, assignment: &[usize], g: usize) -> Vec<f64> {
    let d = v.cols();
    let mut sums = vec![0.0; g * d];
    let mut counts = vec![0usize; g];
    for (i, &a) in assignment.iter().enumerate() {
        counts[a] += 1;
        for (s, x) in sums[a * d..(a + 1) * d].iter_mut().zip(v.row(i)) {
            *s += x;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            for s in &mut sums[c * d..(c + 1) * d] {
                *s /= n as f64;
            }
        }
    }
    sums
}

fn sq_objective(v: &ImportanceMatrix, assignment: &[usize], centroids: &[f64]) -> f64 {
    let d = v.cols();
    assignment
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(v.row(i), &centroids[a * d..(a + 1) * d]))
        .sum()
}

/// Within-group sum of (unsquared) Euclidean distances to the grouping's centroids.
pub fn grouping_objective(v: &ImportanceMatrix, grouping: &Grouping) -> f64 {
    grouping
        .assignment()
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(v.row(i), grouping.centroid(a)).sqrt())
        .sum()
}

/// Cluster the rows of `v` into `g` groups (clamped to the number of rows).
pub fn kmeans_cluster(v: &ImportanceMatrix, g: usize, seed: u64) -> Result<Grouping> {
    if g < 1 {
        return Err(Error::InvalidArgument("number of groups must be >= 1".into()));
    }
    let n = v.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot cluster zero filters".into()));
    }
    let g = g.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Run> = None;
    for _ in 0..RESTARTS {
        let mut run = lloyd(v, g, &mut rng);
        refine(v, g, &mut run);
        let better = best.as_ref().is_none_or(|b| {
            run.objective < b.objective || (run.objective == b.objective && run.sq_objective < b.sq_objective)
        });
        if better {
            best = Some(run);
        }
    }
    let run = best.expect("at least one restart");
    Ok(Grouping {
        groups: FilterGroups::new(g, run.assignment)?,
        c_in: v.cols(),
        centroids: run.centroids,
        objective: run.objective,
        sq_objective: run.sq_objective,
        sq_history: run.history,
        iterations: run.iterations,
    })
}

struct Run {
    assignment: Vec<usize>,
    centroids: Vec<f64>,
    objective: f64,
    sq_objective: f64,
    history: Vec<f64>,
    iterations: usize,
}

fn plus_plus_seeds(v: &ImportanceMatrix, g: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = v.rows();
    let d = v.cols();
    let mut centroids = Vec::with_capacity(g * d);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(v.row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(v.row(i), v.row(first))).collect();
    for _ in 1..g {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &dsq) in nearest.iter().enumerate() {
                acc += dsq;
                if acc > target && dsq > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.extend_from_slice(v.row(pick));
        for (i, slot) in nearest.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(v.row(i), v.row(pick)));
        }
    }
    centroids
}

fn assign(v: &ImportanceMatrix, centroids: &[f64], g: usize, out: &mut [usize]) {
    let d = v.cols();
    for (i, slot) in out.iter_mut().enumerate() {
        let row = v.row(i);
        let mut best = 0;
        let mut best_d = sq_dist(row, &centroids[..d]);
        for c in 1..g {
            let dc = sq_dist(row, &centroids[c * d..(c + 1) * d]);
            if dc < best_d {
                best_d = dc;
                best = c;
            }
        }
        *slot = best;
    }
}

/// Move the farthest point of a multi-member cluster into each empty cluster.
fn repair_empty(v: &ImportanceMatrix, assignment: &mut [usize], centroids: &mut Vec<f64>, g: usize) {
    let d = v.cols();
    loop {
        let mut counts = vec![0usize; g];
        for &a in assignment.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut donor: Option<(usize, f64)> = None;
        for (i, &a) in assignment.iter().enumerate() {
            if counts[a] < 2 {
                continue;
            }
            let dist = sq_dist(v.row(i), &centroids[a * d..(a + 1) * d]);
            if donor.is_none_or(|(_, best)| dist > best) {
                donor = Some((i, dist));
            }
        }
        let (point, _) = donor.expect("g <= n guarantees a multi-member cluster");
        assignment[point] = empty;
        *centroids = means(v, assignment, g);
    }
}

fn lloyd(v: &ImportanceMatrix, g: usize, rng: &mut ChaCha8Rng) -> Run {
    let n = v.rows();
    let mut centroids = plus_plus_seeds(v, g, rng);
    let mut assignment = vec![0usize; n];
    let mut previous: Option<Vec<usize>> = None;
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < MAX_LLOYD_ITERATIONS {
        assign(v, &centroids, g, &mut assignment);
        if previous.as_deref() == Some(&assignment[..]) {
            break;
        }
        iterations += 1;
        centroids = means(v, &assignment, g);
        repair_empty(v, &mut assignment, &mut centroids, g);
        let obj = sq_objective(v, &assignment, &centroids);
        debug_assert!(
            history.last().is_none_or(|&last: &f64| obj <= last + 1e-9 * last.max(1.0)),
            "Lloyd objective increased: {history:?} -> {obj}"
        );
        history.push(obj);
        // degenerate data can bounce between the tie-broken assignment and
        // its repair; the repaired state is then the fixed point
        if previous.as_deref() == Some(&assignment[..]) {
            break;
        }
        previous = Some(assignment.clone());
    }
    let sq_objective = sq_objective(v, &assignment, &centroids);
    Run {
        assignment,
        centroids,
        objective: 0.0,
        sq_objective,
        history,
        iterations,
    }
}

/// Sum of Euclidean distances from `members` to their mean.
fn group_cost(v: &ImportanceMatrix, members: &[usize]) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    let d = v.cols();
    let mut mean = vec![0.0; d];
    for &i in members {
        for (m, x) in mean.iter_mut().zip(v.row(i)) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= members.len() as f64;
    }
    members.iter().map(|&i| sq_dist(v.row(i), &mean).sqrt()).sum()
}

/// First-improvement relocation of single filters between groups while the
/// unsquared objective strictly drops. Groups never become empty.
fn refine(v: &ImportanceMatrix, g: usize, run: &mut Run) {
    let n = v.rows();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); g];
    for (i, &a) in run.assignment.iter().enumerate() {
        members[a].push(i);
    }
    let mut cost: Vec<f64> = members.iter().map(|m| group_cost(v, m)).collect();
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut moved = false;
        for i in 0..n {
            let from = run.assignment[i];
            if members[from].len() < 2 {
                continue;
            }
            let without: Vec<usize> = members[from].iter().copied().filter(|&x| x != i).collect();
            let from_cost = group_cost(v, &without);
            for to in 0..g {
                if to == from {
                    continue;
                }
                let mut with = members[to].clone();
                let at = with.partition_point(|&x| x < i);
                with.insert(at, i);
                let to_cost = group_cost(v, &with);
                let before = cost[from] + cost[to];
                let after = from_cost + to_cost;
                if after < before - 1e-12 * before.max(1.0) {
                    members[from] = without;
                    members[to] = with;
                    cost[from] = from_cost;
                    cost[to] = to_cost;
                    run.assignment[i] = to;
                    moved = true;
                    break;
                }
            }
        }
        if !moved {
            break;
        }
    }
    run.centroids = means(v, &run.assignment, g);
    run.sq_objective = sq_objective(v, &run.assignment, &run.centroids);
    run.objective = run
        .assignment
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(v.row(i), &run.centroids[a * v.cols()..(a + 1) * v.cols()]).sqrt())
        .sum();
}
