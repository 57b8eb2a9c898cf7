//! JSON compression report emitted by the pruning pipeline.

use serde::{Deserialize, Serialize};

use crate::model::LayerKind;
use crate::pipeline::PruneSchedule;
use crate::train::Accuracy;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Per-layer record of one pruning iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerIteration {
    pub layer: String,
    pub kind: LayerKind,
    pub groups: usize,
    pub group_sizes: Vec<usize>,
    /// Cumulative target this iteration.
    pub target: f64,
    /// Length of the truncated sorted-centroid prefix.
    pub n: usize,
    /// Pruned centroid elements per group after the iteration.
    pub n_per_group: Vec<usize>,
    /// Connections killed only to restore group granularity after re-clustering.
    pub realigned: usize,
    pub ratio: f64,
    /// Within-group sum of Euclidean distances.
    pub objective: f64,
    /// Within-group sum of squared distances.
    pub sq_objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub layers: Vec<LayerIteration>,
    /// Pooled ratio over compressible conv layers.
    pub conv_ratio: f64,
    /// Pooled ratio over compressible fc layers.
    pub fc_ratio: f64,
    /// Pooled ratio over every compressible layer.
    pub network_ratio: f64,
    pub accuracy: Option<Accuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub pruning_secs: f64,
    pub local_finetune_secs: f64,
    pub global_finetune_secs: f64,
    pub total_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub schema_version: u32,
    pub schedule: PruneSchedule,
    pub iterations: Vec<IterationRecord>,
    pub params_before: usize,
    pub params_after: usize,
    /// FLOPs with 1 MAC = 2 FLOPs; `None` when the input shape is unknown.
    pub flops_before: Option<u64>,
    /// FLOPs of the deployed group-conv form of the pruned model.
    pub flops_after: Option<u64>,
    pub accuracy_before: Option<Accuracy>,
    pub accuracy_after: Option<Accuracy>,
    pub final_conv_ratio: f64,
    pub final_fc_ratio: f64,
    pub final_network_ratio: f64,
    pub timings: Timings,
}

impl CompressionReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is always serializable");
        s.push('\n');
        s
    }
}
