mod common;

use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgconv::deploy::{convert_model, count_flops, count_params, verify_equivalence};
use sgconv::io::{load_model, paths_for_stem, save_model};
use sgconv::pipeline::{run_algorithm1, FinetuneMode, PruneSchedule};
use sgconv::toy::{toy_cnn, TOY_INPUT};

use common::random_tensor;

fn pruned_toy(target: f64, groups: usize) -> sgconv::model::Model {
    let schedule = PruneSchedule {
        groups,
        step: 0.1,
        target_conv: target,
        target_fc: target,
        finetune: FinetuneMode::None,
        ..PruneSchedule::default()
    };
    run_algorithm1(&toy_cnn(10, 5).unwrap(), None, None, &schedule).unwrap().0
}

#[test]
fn toy_fixture_has_2098_parameters() {
    let m = toy_cnn(10, 0).unwrap();
    assert_eq!(m.param_count(), 3 * 8 * 9 + 8 * 8 * 9 + 128 * 10 + 8 + 8 + 10);
    assert_eq!(count_params(&m), 2098);
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let m = pruned_toy(0.5, 4);
    let (j1, b1) = paths_for_stem(&dir.path().join("a"));
    let (j2, b2) = paths_for_stem(&dir.path().join("b"));
    save_model(&m, &j1, &b1).unwrap();
    let back = load_model(&j1, &b1).unwrap();
    save_model(&back, &j2, &b2).unwrap();
    assert_eq!(fs::read(&j1).unwrap(), fs::read(&j2).unwrap());
    assert_eq!(fs::read(&b1).unwrap(), fs::read(&b2).unwrap());
    assert_eq!(back, m);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_tensor(&mut rng, vec![8, 3, 8, 8]);
    assert_eq!(m.forward(&x).unwrap().data(), back.forward(&x).unwrap().data());
}

#[test]
fn unpruned_single_group_conversion_is_bit_exact() {
    let m = toy_cnn(10, 1).unwrap();
    let d = convert_model(&m).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, vec![100, 3, 8, 8]);
    assert_eq!(m.forward(&x).unwrap().data(), d.forward(&x).unwrap().data());
    assert_eq!(count_params(&d), count_params(&m));
    assert_eq!(count_flops(&d, &TOY_INPUT).unwrap(), count_flops(&m, &TOY_INPUT).unwrap());
}

#[test]
fn half_pruned_toy_matches_masked_dense_forward() {
    let m = pruned_toy(0.5, 4);
    let d = convert_model(&m).unwrap();
    let checks = verify_equivalence(&m, &d, &TOY_INPUT, 100, 7).unwrap();
    assert!(checks.iter().all(|c| c.max_deviation <= 1e-5));
    assert!(count_flops(&d, &TOY_INPUT).unwrap() < count_flops(&m, &TOY_INPUT).unwrap());
    assert!(count_params(&d) < 2098);
}

#[test]
fn deployed_params_track_connection_ratio() {
    let m = pruned_toy(0.6, 8);
    let d = convert_model(&m).unwrap();
    // conv2 and fc: live weights equal (1 - r) of the dense connections exactly
    for (dense, grouped) in m.layers.iter().zip(&d.layers).skip(1) {
        let mask = dense.mask().unwrap();
        let (_, _, k) = dense.connection_dims().unwrap();
        let bias = dense.bias().map_or(0, |b| b.len());
        let r = mask.dead_ratio();
        let expected = ((1.0 - r) * mask.total() as f64).round() as usize * k * k;
        assert_eq!(grouped.param_count() - bias, expected);
    }
}

#[test]
fn deployed_model_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let d = convert_model(&pruned_toy(0.4, 3)).unwrap();
    let (j, b) = paths_for_stem(&dir.path().join("dep"));
    save_model(&d, &j, &b).unwrap();
    let back = load_model(&j, &b).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, vec![10, 3, 8, 8]);
    assert_eq!(d.forward(&x).unwrap().data(), back.forward(&x).unwrap().data());
}
