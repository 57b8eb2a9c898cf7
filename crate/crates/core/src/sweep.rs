//! Ablation grid over group count, pruning step and layer scope.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::model::Model;
use crate::pipeline::{run_algorithm1, PruneSchedule};

pub const SWEEP_SCHEMA_VERSION: u32 = 1;

/// Environment variable capping sweep worker threads.
pub const THREADS_ENV: &str = "SG_THREADS";

/// Which layer kinds a sweep cell prunes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    Conv,
    Fc,
    Both,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Conv => "conv",
            Scope::Fc => "fc",
            Scope::Both => "both",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" | "conv-only" => Ok(Scope::Conv),
            "fc" | "fc-only" => Ok(Scope::Fc),
            "both" => Ok(Scope::Both),
            other => Err(Error::InvalidArgument(format!("unknown scope `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub groups: Vec<usize>,
    pub steps: Vec<f64>,
    pub scopes: Vec<Scope>,
    pub seeds: Vec<u64>,
    /// Target ratio applied to every kind in scope.
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub groups: usize,
    pub step: f64,
    pub scope: Scope,
    pub seed: u64,
}

impl SweepGrid {
    pub fn cells(&self) -> Result<Vec<SweepCell>> {
        if self.groups.is_empty() || self.steps.is_empty() || self.scopes.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidArgument("every sweep axis needs at least one value".into()));
        }
        let mut cells = Vec::new();
        for &groups in &self.groups {
            for &step in &self.steps {
                for &scope in &self.scopes {
                    for &seed in &self.seeds {
                        cells.push(SweepCell { groups, step, scope, seed });
                    }
                }
            }
        }
        Ok(cells)
    }

    /// The schedule of one cell, derived from `base`.
    pub fn schedule(&self, cell: &SweepCell, base: &PruneSchedule) -> PruneSchedule {
        let (conv, fc) = match cell.scope {
            Scope::Conv => (self.target, 0.0),
            Scope::Fc => (0.0, self.target),
            Scope::Both => (self.target, self.target),
        };
        let mut s = base.clone();
        s.groups = cell.groups;
        s.step = cell.step;
        s.target_conv = conv;
        s.target_fc = fc;
        s.seed = cell.seed;
        s.local.seed = cell.seed;
        s.global.seed = cell.seed;
        s
    }
}

/// One CSV row. Failed cells carry the error text and empty metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub schema_version: u32,
    pub groups: usize,
    pub step: f64,
    pub scope: Scope,
    pub seed: u64,
    pub iterations: Option<usize>,
    pub conv_ratio: Option<f64>,
    pub fc_ratio: Option<f64>,
    pub network_ratio: Option<f64>,
    pub top1: Option<f64>,
    pub params_after: Option<usize>,
    pub error: Option<String>,
}

fn run_cell(
    model: &Model,
    train: Option<&Dataset>,
    test: Option<&Dataset>,
    grid: &SweepGrid,
    base: &PruneSchedule,
    cell: SweepCell,
) -> SweepRow {
    let mut row = SweepRow {
        schema_version: SWEEP_SCHEMA_VERSION,
        groups: cell.groups,
        step: cell.step,
        scope: cell.scope,
        seed: cell.seed,
        iterations: None,
        conv_ratio: None,
        fc_ratio: None,
        network_ratio: None,
        top1: None,
        params_after: None,
        error: None,
    };
    match run_algorithm1(model, train, test, &grid.schedule(&cell, base)) {
        Ok((_, r)) => {
            row.iterations = Some(r.iterations.len());
            row.conv_ratio = Some(r.final_conv_ratio);
            row.fc_ratio = Some(r.final_fc_ratio);
            row.network_ratio = Some(r.final_network_ratio);
            row.top1 = r.accuracy_after.map(|a| a.top1);
            row.params_after = Some(r.params_after);
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Worker count from `SG_THREADS`, defaulting to rayon's choice.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Run every cell, concurrently across cells. Rows follow grid order; a
/// failing cell yields a row with `error` set instead of aborting.
pub fn run_sweep(
    model: &Model,
    train: Option<&Dataset>,
    test: Option<&Dataset>,
    grid: &SweepGrid,
    base: &PruneSchedule,
) -> Result<Vec<SweepRow>> {
    let cells = grid.cells()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        cells
            .into_par_iter()
            .map(|c| run_cell(model, train, test, grid, base, c))
            .collect()
    }))
}

pub fn rows_to_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::format("sweep csv", e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("sweep csv", e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::format("sweep csv", e.to_string()))
}
