//! Centroid-based connection pruning and compression-ratio accounting.
//!
//! Each centroid element `c[i][j]` stands for the connections between input
//! channel `j` and every filter of group `i`. Elements are sorted ascending
//! and the smallest prefix is pruned until the layer's connection ratio
//! reaches the requested target. Elements already dead under the current
//! grouping stay in the sorted set with value 0, so targets are cumulative.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::grouping::{FilterGroups, Grouping};
use crate::model::Layer;

/// Slack used when comparing an achieved ratio against a floating-point target.
pub const RATIO_EPS: f64 = 1e-9;

/// `true` when `ratio` reaches `target` up to [`RATIO_EPS`].
pub fn meets_target(ratio: f64, target: f64) -> bool {
    ratio + RATIO_EPS >= target
}

/// Per-layer `(filter, input channel)` liveness. A dead conv connection has its
/// whole `k x k` kernel zeroed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    rows: usize,
    cols: usize,
    kept: Vec<bool>,
}

impl PruneMask {
    pub fn all_kept(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            kept: vec![true; rows * cols],
        }
    }

    pub fn from_kept(rows: usize, cols: usize, kept: Vec<bool>) -> Result<Self> {
        if kept.len() != rows * cols {
            return Err(Error::shape(
                "PruneMask",
                format!("{rows}x{cols} mask needs {} bits, got {}", rows * cols, kept.len()),
            ));
        }
        Ok(Self { rows, cols, kept })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_kept(&self, filter: usize, channel: usize) -> bool {
        self.kept[filter * self.cols + channel]
    }

    pub fn kill(&mut self, filter: usize, channel: usize) {
        self.kept[filter * self.cols + channel] = false;
    }

    /// Flip a connection back to alive. Only for constructing fixtures.
    #[doc(hidden)]
    pub fn revive(&mut self, filter: usize, channel: usize) {
        self.kept[filter * self.cols + channel] = true;
    }

    pub fn kept(&self) -> &[bool] {
        &self.kept
    }

    pub fn total(&self) -> usize {
        self.kept.len()
    }

    pub fn dead_count(&self) -> usize {
        self.kept.iter().filter(|k| !**k).count()
    }

    pub fn live_count(&self) -> usize {
        self.total() - self.dead_count()
    }

    pub fn is_all_kept(&self) -> bool {
        self.kept.iter().all(|k| *k)
    }

    /// Fraction of dead connections, counted directly on the bits.
    pub fn dead_ratio(&self) -> f64 {
        if self.kept.is_empty() {
            0.0
        } else {
            self.dead_count() as f64 / self.total() as f64
        }
    }

    /// Kept channels of one filter, ascending.
    pub fn kept_channels(&self, filter: usize) -> Vec<usize> {
        (0..self.cols).filter(|&j| self.is_kept(filter, j)).collect()
    }

    /// `true` if every connection dead in `earlier` is also dead here.
    pub fn is_monotone_after(&self, earlier: &PruneMask) -> bool {
        self.kept.len() == earlier.kept.len()
            && self.kept.iter().zip(&earlier.kept).all(|(now, before)| !now || *before)
    }
}

/// Zero every kernel whose connection is dead. `weights` is `(C_out, C_in, area)`.
pub fn apply_mask(weights: &mut [f32], area: usize, mask: &PruneMask) {
    for (idx, &kept) in mask.kept.iter().enumerate() {
        if !kept {
            weights[idx * area..(idx + 1) * area].fill(0.0);
        }
    }
}

/// Number of channels fully dead in each group (the `n_i` of the ratio formula).
pub fn pruned_counts(groups: &FilterGroups, mask: &PruneMask) -> Vec<usize> {
    (0..groups.num_groups())
        .map(|g| {
            let members = groups.members(g);
            (0..mask.cols())
                .filter(|&j| members.iter().all(|&f| !mask.is_kept(f, j)))
                .count()
        })
        .collect()
}

/// Fails unless every filter of a group keeps exactly the same channels.
pub fn check_granularity(groups: &FilterGroups, mask: &PruneMask, layer: &str) -> Result<()> {
    if groups.num_filters() != mask.rows() {
        return Err(Error::shape(
            layer.to_string(),
            format!("grouping covers {} filters, mask has {}", groups.num_filters(), mask.rows()),
        ));
    }
    for g in 0..groups.num_groups() {
        let members = groups.members(g);
        let lead = members[0];
        for &f in &members[1..] {
            for j in 0..mask.cols() {
                if mask.is_kept(f, j) != mask.is_kept(lead, j) {
                    return Err(Error::Granularity {
                        layer: layer.to_string(),
                        detail: format!(
                            "group {g}: filters {lead} and {f} disagree on channel {j}"
                        ),
                    });
                }
            }
        }
    }
    Ok(())
}

/// Kill `(f, j)` for every filter of a group as soon as one member is dead at `j`.
///
/// After re-clustering, a group can mix filters with different dead channels;
/// this restores group-channel granularity. Returns the connections killed.
pub fn align_mask_to_groups(groups: &FilterGroups, mask: &mut PruneMask) -> Vec<(usize, usize)> {
    let mut killed = Vec::new();
    for g in 0..groups.num_groups() {
        let members = groups.members(g);
        for j in 0..mask.cols() {
            if members.iter().any(|&f| !mask.is_kept(f, j)) {
                for &f in &members {
                    if mask.is_kept(f, j) {
                        mask.kill(f, j);
                        killed.push((f, j));
                    }
                }
            }
        }
    }
    killed
}

/// Group sizes, input width and per-group pruned element counts of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPruneCounts {
    pub group_sizes: Vec<usize>,
    pub c_in: usize,
    pub pruned_per_group: Vec<usize>,
}

impl GroupPruneCounts {
    pub fn from_mask(groups: &FilterGroups, mask: &PruneMask) -> Self {
        Self {
            group_sizes: groups.sizes(),
            c_in: mask.cols(),
            pruned_per_group: pruned_counts(groups, mask),
        }
    }

    fn numerator(&self) -> usize {
        self.group_sizes
            .iter()
            .zip(&self.pruned_per_group)
            .map(|(size, n)| size * n)
            .sum()
    }

    fn denominator(&self) -> usize {
        self.group_sizes.iter().map(|size| size * self.c_in).sum()
    }

    pub fn ratio(&self) -> f64 {
        compression_ratio_layer(&self.group_sizes, self.c_in, &self.pruned_per_group)
    }
}

/// Layer compression ratio `sum_i n_i |g_i| / sum_i C_in |g_i|`.
pub fn compression_ratio_layer(group_sizes: &[usize], c_in: usize, pruned_per_group: &[usize]) -> f64 {
    let num: usize = group_sizes.iter().zip(pruned_per_group).map(|(s, n)| s * n).sum();
    let den: usize = group_sizes.iter().map(|s| s * c_in).sum();
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Ratio pooled over layers: both sums run over every compressible layer.
pub fn compression_ratio_network(layers: &[GroupPruneCounts]) -> f64 {
    let num: usize = layers.iter().map(GroupPruneCounts::numerator).sum();
    let den: usize = layers.iter().map(GroupPruneCounts::denominator).sum();
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One element of the sorted centroid set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentroidEntry {
    pub value: f64,
    pub layer: usize,
    pub group: usize,
    pub channel: usize,
    /// Every filter of `group` is already dead at `channel`.
    pub already_pruned: bool,
}

/// Centroid elements of one layer, ascending by `(value, group, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedCentroids {
    pub entries: Vec<CentroidEntry>,
}

pub fn build_sorted_centroids(grouping: &Grouping, mask: &PruneMask, layer: usize) -> Result<SortedCentroids> {
    let groups = grouping.groups();
    if groups.num_filters() != mask.rows() || grouping.c_in() != mask.cols() {
        return Err(Error::shape(
            "build_sorted_centroids",
            format!(
                "grouping is {}x{}, mask is {}x{}",
                groups.num_filters(),
                grouping.c_in(),
                mask.rows(),
                mask.cols()
            ),
        ));
    }
    let mut entries = Vec::with_capacity(groups.num_groups() * mask.cols());
    for g in 0..groups.num_groups() {
        let members = groups.members(g);
        let centroid = grouping.centroid(g);
        for j in 0..mask.cols() {
            let already_pruned = members.iter().all(|&f| !mask.is_kept(f, j));
            entries.push(CentroidEntry {
                value: if already_pruned { 0.0 } else { centroid[j] },
                layer,
                group: g,
                channel: j,
                already_pruned,
            });
        }
    }
    entries.sort_by(|a, b| {
        a.value
            .total_cmp(&b.value)
            .then(a.group.cmp(&b.group))
            .then(a.channel.cmp(&b.channel))
    });
    debug_assert!(entries.windows(2).all(|w| w[0].value.total_cmp(&w[1].value) != Ordering::Greater));
    Ok(SortedCentroids { entries })
}

/// What one pruning call selected.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    /// Length of the truncated prefix of the sorted set.
    pub n: usize,
    /// `(group, channel)` elements newly killed by this call.
    pub newly_pruned: Vec<(usize, usize)>,
    /// Per-group count of pruned elements after the call.
    pub pruned_per_group: Vec<usize>,
    pub ratio: f64,
}

/// Prune the smallest centroid elements of one layer until its ratio reaches `target`.
///
/// `weights` is the layer's `(C_out, C_in, area)` buffer; killed kernels are
/// zeroed. The mask must already respect group-channel granularity.
pub fn prune_to_target(
    weights: &mut [f32],
    area: usize,
    mask: &mut PruneMask,
    grouping: &Grouping,
    target: f64,
    layer: usize,
) -> Result<PruneOutcome> {
    if !(0.0..=1.0 + RATIO_EPS).contains(&target) {
        return Err(Error::InvalidArgument(format!(
            "pruning target {target} is outside [0, 1]"
        )));
    }
    let groups = grouping.groups();
    check_granularity(groups, mask, &format!("layer {layer}"))?;
    if weights.len() != mask.total() * area {
        return Err(Error::shape(
            "prune_to_target",
            format!("{} weights for {} connections of area {area}", weights.len(), mask.total()),
        ));
    }
    let sorted = build_sorted_centroids(grouping, mask, layer)?;
    let sizes = groups.sizes();
    let denominator: usize = sizes.iter().sum::<usize>() * mask.cols();
    let mut numerator: usize = sorted
        .entries
        .iter()
        .filter(|e| e.already_pruned)
        .map(|e| sizes[e.group])
        .sum();

    let mut n = 0;
    while !meets_target(numerator as f64 / denominator as f64, target) {
        let e = &sorted.entries[n];
        if !e.already_pruned {
            numerator += sizes[e.group];
        }
        n += 1;
    }

    let mut newly_pruned = Vec::new();
    for e in &sorted.entries[..n] {
        if e.already_pruned {
            continue;
        }
        for f in groups.members(e.group) {
            mask.kill(f, e.channel);
        }
        newly_pruned.push((e.group, e.channel));
    }
    apply_mask(weights, area, mask);

    let counts = GroupPruneCounts::from_mask(groups, mask);
    Ok(PruneOutcome {
        n,
        newly_pruned,
        ratio: counts.ratio(),
        pruned_per_group: counts.pruned_per_group,
    })
}

/// Iteration-`t` pruning of a compressible layer to the cumulative target `t * s`.
pub fn select_and_prune(layer: &mut Layer, grouping: &Grouping, t: usize, s: f64) -> Result<PruneOutcome> {
    if t < 1 {
        return Err(Error::InvalidArgument("iteration counter t must be >= 1".into()));
    }
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::InvalidArgument(format!("pruning step {s} must lie in (0, 1)")));
    }
    let target = t as f64 * s;
    if target > 1.0 + RATIO_EPS {
        return Err(Error::InvalidArgument(format!(
            "cumulative target t*s = {target} exceeds 1"
        )));
    }
    let index = 0;
    let (weights, area, mask) = layer
        .dense_parts_mut()
        .ok_or_else(|| Error::Unsupported("pruning needs a conv2d or fc layer".into()))?;
    prune_to_target(weights, area, mask, grouping, target.min(1.0), index)
}
