//! Iterative self-grouping and pruning driver with optional fine-tuning.
//!
//! Every iteration `t` re-clusters each compressible layer on its current
//! masked weights, prunes it to `min(t * s, r_d)` and, in local mode,
//! fine-tunes the whole model. The loop ends once the cumulative schedule
//! `t * s` has reached the target of every active layer kind; a single
//! global fine-tune follows.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::deploy::{convert_model, count_flops, count_params};
use crate::error::{Error, Result};
use crate::grouping::{kmeans_cluster, FilterGroups};
use crate::io::Dataset;
use crate::model::{LayerKind, Model};
use crate::pruning::{
    align_mask_to_groups, apply_mask, compression_ratio_network, meets_target, prune_to_target, GroupPruneCounts,
};
use crate::report::{CompressionReport, IterationRecord, LayerIteration, Timings, REPORT_SCHEMA_VERSION};
use crate::train::{check_label_space, evaluate, sgd_finetune, Accuracy, LrSchedule, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneMode {
    None,
    /// One fine-tune after all pruning iterations.
    Global,
    /// A short fine-tune after every iteration plus the final global one.
    LocalGlobal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    /// Groups per compressible layer (clamped to the layer's filter count).
    pub groups: usize,
    /// Cumulative target increment per iteration.
    pub step: f64,
    pub target_conv: f64,
    pub target_fc: f64,
    pub finetune: FinetuneMode,
    pub local: TrainConfig,
    pub global: TrainConfig,
    pub seed: u64,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        Self {
            groups: 8,
            step: 0.05,
            target_conv: 0.6,
            target_fc: 0.6,
            finetune: FinetuneMode::Global,
            local: TrainConfig {
                epochs: 4,
                lr: LrSchedule::constant(1e-3),
                ..TrainConfig::default()
            },
            global: TrainConfig {
                epochs: 6,
                lr: LrSchedule::step(0.01, vec![3, 5], 0.1),
                ..TrainConfig::default()
            },
            seed: 0,
        }
    }
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.groups < 1 {
            return Err(Error::InvalidArgument("number of groups must be >= 1".into()));
        }
        if !(self.step > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "pruning step {} never reaches the target",
                self.step
            )));
        }
        if self.step >= 1.0 {
            return Err(Error::InvalidArgument(format!("pruning step {} must be < 1", self.step)));
        }
        for (kind, t) in [("conv", self.target_conv), ("fc", self.target_fc)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidArgument(format!("{kind} target {t} outside [0, 1]")));
            }
        }
        self.local.validate()?;
        self.global.validate()
    }

    fn target_for(&self, kind: LayerKind) -> f64 {
        match kind {
            LayerKind::Conv2d => self.target_conv,
            LayerKind::Fc => self.target_fc,
            _ => 0.0,
        }
    }
}

fn mix_seed(seed: u64, layer: usize, t: usize) -> u64 {
    let mut z = seed ^ ((layer as u64) << 32) ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn layer_counts(model: &Model, kind: Option<LayerKind>) -> Vec<GroupPruneCounts> {
    model
        .layers
        .iter()
        .filter(|l| l.is_compressible() && kind.is_none_or(|k| l.kind() == k))
        .filter_map(|l| {
            let mask = l.mask()?;
            let groups = l.groups.clone().unwrap_or_else(|| FilterGroups::single(mask.rows()));
            Some(GroupPruneCounts::from_mask(&groups, mask))
        })
        .collect()
}

/// `(conv, fc, network)` pooled ratios over the compressible layers.
pub fn network_ratios(model: &Model) -> (f64, f64, f64) {
    (
        compression_ratio_network(&layer_counts(model, Some(LayerKind::Conv2d))),
        compression_ratio_network(&layer_counts(model, Some(LayerKind::Fc))),
        compression_ratio_network(&layer_counts(model, None)),
    )
}

fn maybe_eval(model: &Model, data: Option<&Dataset>) -> Result<Option<Accuracy>> {
    data.map(|d| evaluate(model, d)).transpose()
}

/// Prune `model` following `schedule`; `train` feeds fine-tuning and `test`
/// the accuracy trace.
pub fn run_algorithm1(
    model: &Model,
    train: Option<&Dataset>,
    test: Option<&Dataset>,
    schedule: &PruneSchedule,
) -> Result<(Model, CompressionReport)> {
    let started = Instant::now();
    schedule.validate()?;
    let train = match (schedule.finetune, train) {
        (FinetuneMode::None, t) => t,
        (_, Some(t)) if !t.is_empty() => Some(t),
        _ => return Err(Error::InvalidArgument("fine-tuning needs a non-empty training set".into())),
    };
    for d in train.iter().chain(test.iter()) {
        check_label_space(model, d)?;
    }

    let mut model = model.clone();
    model.validate()?;
    let accuracy_before = maybe_eval(&model, test)?;
    let params_before = count_params(&model);
    let flops_before = model.input_shape.as_ref().map(|s| count_flops(&model, s)).transpose()?;

    let active: Vec<usize> = model
        .compressible_indices()
        .into_iter()
        .filter(|&i| schedule.target_for(model.layers[i].kind()) > 0.0)
        .collect();
    let mut active_kinds: Vec<LayerKind> = active.iter().map(|&i| model.layers[i].kind()).collect();
    active_kinds.dedup();

    let mut iterations = Vec::new();
    let mut pruning_secs = 0.0;
    let mut local_secs = 0.0;
    let mut t = 1usize;
    while !active.is_empty() {
        let phase = Instant::now();
        let cumulative = t as f64 * schedule.step;
        let mut layers = Vec::with_capacity(active.len());
        for &i in &active {
            let layer = &mut model.layers[i];
            let kind = layer.kind();
            let target = cumulative.min(schedule.target_for(kind));
            let v = layer.importance().expect("compressible layers are dense")?;
            let grouping = kmeans_cluster(&v, schedule.groups, mix_seed(schedule.seed, i, t))?;
            let (weights, area, mask) = layer.dense_parts_mut().expect("compressible layers are dense");
            let realigned = align_mask_to_groups(grouping.groups(), mask).len();
            apply_mask(weights, area, mask);
            let outcome = prune_to_target(weights, area, mask, &grouping, target, i)?;
            layers.push(LayerIteration {
                layer: layer.name.clone(),
                kind,
                groups: grouping.num_groups(),
                group_sizes: grouping.groups().sizes(),
                target,
                n: outcome.n,
                n_per_group: outcome.pruned_per_group,
                realigned,
                ratio: outcome.ratio,
                objective: grouping.objective,
                sq_objective: grouping.sq_objective,
            });
            layer.groups = Some(grouping.into_groups());
        }
        pruning_secs += phase.elapsed().as_secs_f64();

        if schedule.finetune == FinetuneMode::LocalGlobal {
            let phase = Instant::now();
            let cfg = TrainConfig {
                seed: mix_seed(schedule.local.seed, usize::MAX, t),
                ..schedule.local.clone()
            };
            sgd_finetune(&mut model, train.expect("checked above"), &cfg)?;
            local_secs += phase.elapsed().as_secs_f64();
        }

        let (conv_ratio, fc_ratio, network_ratio) = network_ratios(&model);
        iterations.push(IterationRecord {
            t,
            layers,
            conv_ratio,
            fc_ratio,
            network_ratio,
            accuracy: maybe_eval(&model, test)?,
        });

        let done = active_kinds
            .iter()
            .all(|&k| meets_target(cumulative, schedule.target_for(k)));
        if done {
            break;
        }
        t += 1;
    }

    let mut global_secs = 0.0;
    if schedule.finetune != FinetuneMode::None {
        let phase = Instant::now();
        sgd_finetune(&mut model, train.expect("checked above"), &schedule.global)?;
        global_secs = phase.elapsed().as_secs_f64();
    }

    let deployed = convert_model(&model)?;
    let params_after = count_params(&deployed);
    let flops_after = model.input_shape.as_ref().map(|s| count_flops(&deployed, s)).transpose()?;
    let (final_conv_ratio, final_fc_ratio, final_network_ratio) = network_ratios(&model);
    let report = CompressionReport {
        schema_version: REPORT_SCHEMA_VERSION,
        schedule: schedule.clone(),
        iterations,
        params_before,
        params_after,
        flops_before,
        flops_after,
        accuracy_before,
        accuracy_after: maybe_eval(&model, test)?,
        final_conv_ratio,
        final_fc_ratio,
        final_network_ratio,
        timings: Timings {
            pruning_secs,
            local_finetune_secs: local_secs,
            global_finetune_secs: global_secs,
            total_secs: started.elapsed().as_secs_f64(),
        },
    };
    Ok((model, report))
}
