//! Rewrite a pruned model as diverse group convolutions and check it.

use sgconv::deploy::{convert_model, verify_equivalence};
use sgconv::model::LayerOp;
use sgconv::pipeline::{run_algorithm1, FinetuneMode, PruneSchedule};
use sgconv::toy::{toy_cnn, TOY_INPUT};

fn main() -> sgconv::Result<()> {
    let schedule = PruneSchedule {
        groups: 3,
        step: 0.25,
        target_conv: 0.5,
        target_fc: 0.5,
        finetune: FinetuneMode::None,
        ..PruneSchedule::default()
    };
    let (pruned, _) = run_algorithm1(&toy_cnn(10, 1)?, None, None, &schedule)?;
    let deployed = convert_model(&pruned)?;
    for layer in &deployed.layers {
        if let LayerOp::GroupConv(g) = &layer.op {
            println!("{}: {} input channels gathered", layer.name, g.plan.gathered_channels());
            for (i, group) in g.plan.groups.iter().enumerate() {
                if group.channels.len() <= 12 {
                    println!("  group {i}: filters {:?} <- channels {:?}", group.filters, group.channels);
                } else {
                    println!("  group {i}: filters {:?} <- {} channels", group.filters, group.channels.len());
                }
            }
            if layer.name == "conv2" {
                println!("  selection matrix rows = {}", g.plan.selection_matrix().len());
            }
        }
    }
    for check in verify_equivalence(&pruned, &deployed, &TOY_INPUT, 100, 0)? {
        println!("{:>8}: max |deviation| {:e}", check.layer, check.max_deviation);
    }
    Ok(())
}
