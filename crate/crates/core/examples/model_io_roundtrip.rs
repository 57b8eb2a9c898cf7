//! Save a pruned model, reload it and compare the files and outputs.

use sgconv::io::{load_model, paths_for_stem, save_model};
use sgconv::pipeline::{run_algorithm1, FinetuneMode, PruneSchedule};
use sgconv::tensor::Tensor;
use sgconv::toy::toy_cnn;

fn main() -> sgconv::Result<()> {
    let schedule = PruneSchedule {
        step: 0.2,
        target_conv: 0.4,
        target_fc: 0.4,
        finetune: FinetuneMode::None,
        ..PruneSchedule::default()
    };
    let (model, _) = run_algorithm1(&toy_cnn(10, 2)?, None, None, &schedule)?;
    let dir = std::env::temp_dir().join("sgconv-roundtrip");
    std::fs::create_dir_all(&dir).map_err(|e| sgconv::Error::Io { path: dir.clone(), source: e })?;
    let (json, bin) = paths_for_stem(&dir.join("pruned"));
    save_model(&model, &json, &bin)?;
    let back = load_model(&json, &bin)?;
    println!("{} ({} bytes of weights)", json.display(), std::fs::metadata(&bin).map_or(0, |m| m.len()));
    println!("reloaded equal: {}", back == model);
    let x = Tensor::from_fn(vec![4, 3, 8, 8], |i| (i as f32 * 0.37).sin());
    println!("outputs bit-identical: {}", model.forward(&x)?.data() == back.forward(&x)?.data());
    Ok(())
}
