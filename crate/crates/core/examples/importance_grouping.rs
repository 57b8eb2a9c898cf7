//! Importance vectors of a conv layer and their k-means grouping.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgconv::grouping::kmeans_cluster;
use sgconv::model::{Activation, Layer};

fn main() -> sgconv::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let layer = Layer::conv_random("conv", 8, 6, 3, 1, 1, Activation::Relu, &mut rng)?;
    let v = layer.importance().expect("conv layer")?;
    for f in 0..v.rows() {
        let row: Vec<String> = v.row(f).iter().map(|x| format!("{x:.2}")).collect();
        println!("filter {f}: [{}]", row.join(", "));
    }
    let grouping = kmeans_cluster(&v, 3, 42)?;
    println!("assignment {:?}", grouping.assignment());
    println!("group sizes {:?}", grouping.groups().sizes());
    println!(
        "objective {:.4} (sum of squares {:.4}, {} Lloyd iterations)",
        grouping.objective, grouping.sq_objective, grouping.iterations
    );
    Ok(())
}
