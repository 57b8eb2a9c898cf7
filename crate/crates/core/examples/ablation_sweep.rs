//! Small ablation grid over group count and pruning step, as CSV.

use sgconv::pipeline::{FinetuneMode, PruneSchedule};
use sgconv::sweep::{rows_to_csv, run_sweep, Scope, SweepGrid};
use sgconv::toy::{train_baseline, ToyTask};

fn main() -> sgconv::Result<()> {
    let task = ToyTask::generate(1)?;
    let (model, _) = train_baseline(&task, 1)?;
    let grid = SweepGrid {
        groups: vec![2, 8],
        steps: vec![0.05, 0.3],
        scopes: vec![Scope::Conv, Scope::Both],
        seeds: vec![1],
        target: 0.6,
    };
    let base = PruneSchedule {
        finetune: FinetuneMode::Global,
        ..PruneSchedule::default()
    };
    let rows = run_sweep(&model, Some(&task.train), Some(&task.test), &grid, &base)?;
    print!("{}", rows_to_csv(&rows)?);
    Ok(())
}
