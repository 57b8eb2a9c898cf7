//! Parameter and FLOP counts before and after deployment.

use sgconv::deploy::{conv_macs, convert_model, count_flops, count_params};
use sgconv::pipeline::{network_ratios, run_algorithm1, FinetuneMode, PruneSchedule};
use sgconv::toy::{toy_cnn, TOY_INPUT};

fn main() -> sgconv::Result<()> {
    println!("conv 3->8 k3 at 4x4: {} MACs", conv_macs(8, 3, 3, 4, 4));
    let dense = toy_cnn(10, 0)?;
    println!("dense: params {}, FLOPs {}", count_params(&dense), count_flops(&dense, &TOY_INPUT)?);
    for target in [0.3, 0.6, 0.9] {
        let schedule = PruneSchedule {
            groups: 4,
            step: 0.1,
            target_conv: target,
            target_fc: target,
            finetune: FinetuneMode::None,
            ..PruneSchedule::default()
        };
        let (pruned, _) = run_algorithm1(&dense, None, None, &schedule)?;
        let deployed = convert_model(&pruned)?;
        let (_, _, net) = network_ratios(&pruned);
        println!(
            "target {target:.1}: ratio {net:.3}, params {}, FLOPs {}",
            count_params(&deployed),
            count_flops(&deployed, &TOY_INPUT)?
        );
    }
    Ok(())
}
