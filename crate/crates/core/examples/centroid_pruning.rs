//! Centroid-based pruning of one layer along a cumulative schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgconv::grouping::kmeans_cluster;
use sgconv::model::{Activation, Layer};
use sgconv::pruning::{build_sorted_centroids, select_and_prune};

fn main() -> sgconv::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut layer = Layer::fc_random("fc", 6, 5, Activation::Identity, &mut rng)?;
    let grouping = kmeans_cluster(&layer.importance().expect("fc layer")?, 3, 0)?;
    println!("groups {:?}", grouping.assignment());

    let sorted = build_sorted_centroids(&grouping, layer.mask().expect("fc layer"), 0)?;
    for e in sorted.entries.iter().take(5) {
        println!("  centroid ({}, {}) = {:.3}", e.group, e.channel, e.value);
    }

    let step = 0.2;
    for t in 1..=3 {
        let outcome = select_and_prune(&mut layer, &grouping, t, step)?;
        println!(
            "t={t}: target {:.2}, n={}, pruned per group {:?}, ratio {:.3}",
            t as f64 * step,
            outcome.n,
            outcome.pruned_per_group,
            outcome.ratio
        );
    }
    Ok(())
}
