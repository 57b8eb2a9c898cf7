//! Train the toy CNN on image blobs, then prune and fine-tune it.

use sgconv::pipeline::{run_algorithm1, FinetuneMode, PruneSchedule};
use sgconv::toy::{train_baseline, ToyTask};

fn main() -> sgconv::Result<()> {
    let task = ToyTask::generate(0)?;
    let (model, baseline) = train_baseline(&task, 0)?;
    println!("baseline test top-1 {:.4}", baseline.top1);

    let schedule = PruneSchedule {
        groups: 8,
        step: 0.05,
        target_conv: 0.6,
        target_fc: 0.6,
        finetune: FinetuneMode::Global,
        ..PruneSchedule::default()
    };
    let (_, report) = run_algorithm1(&model, Some(&task.train), Some(&task.test), &schedule)?;
    for it in &report.iterations {
        let acc = it.accuracy.map_or(f64::NAN, |a| a.top1);
        println!("t={:2} conv {:.3} fc {:.3} top-1 {acc:.4}", it.t, it.conv_ratio, it.fc_ratio);
    }
    println!(
        "after global fine-tune: top-1 {:.4}, params {} -> {}",
        report.accuracy_after.map_or(f64::NAN, |a| a.top1),
        report.params_before,
        report.params_after
    );
    Ok(())
}
