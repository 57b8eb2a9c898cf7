use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sgcnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgcnn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn sgcnn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn toy(dir: &Path) {
    let o = sgcnn(dir, &["toy", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn missing_model_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = sgcnn(dir.path(), &["report", "--model", "nope.sgm.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.sgm.json"), "{}", stderr(&o));
}

#[test]
fn bad_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sgcnn(dir.path(), &["prune", "--groups", "x"]).status.code(), Some(2));
}

#[test]
fn prune_eval_report_deploy() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy(d);
    let o = sgcnn(d, &["report", "--model", "toy.sgm.json"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("params 2098"), "{}", stdout(&o));

    let o = sgcnn(
        d,
        &[
            "prune", "--model", "toy.sgm.json", "--data", "blobs.sgd", "--test-data", "blobs-test.sgd", "--groups",
            "8", "--step", "0.05", "--target-conv", "0.8", "--target-fc", "0.6", "--finetune", "global", "--seed",
            "42", "--out", "pruned",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(d.join("pruned.report.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert!(report["final_conv_ratio"].as_f64().unwrap() + 1e-9 >= 0.8);
    assert!(report["final_fc_ratio"].as_f64().unwrap() + 1e-9 >= 0.6);
    assert_eq!(report["iterations"].as_array().unwrap().len(), 16);

    let o = sgcnn(d, &["eval", "--model", "pruned.sgm.json", "--data", "blobs-test.sgd"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("top-1"));

    let o = sgcnn(d, &["deploy", "--model", "pruned.sgm.json", "--out", "deployed"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(d.join("deployed.sgm.json").exists());
    let o = sgcnn(d, &["eval", "--model", "deployed.sgm.json", "--data", "blobs-test.sgd"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn zero_targets_leave_model_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy(d);
    let o = sgcnn(
        d,
        &["prune", "--model", "toy.sgm.json", "--target-conv", "0", "--target-fc", "0", "--finetune", "none", "--out", "same"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read(d.join("toy.sgm.bin")).unwrap(), fs::read(d.join("same.sgm.bin")).unwrap());
    assert_eq!(fs::read(d.join("toy.sgm.json")).unwrap(), fs::read(d.join("same.sgm.json")).unwrap());
}

#[test]
fn deploy_unpruned_keeps_param_count() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy(d);
    let o = sgcnn(d, &["deploy", "--model", "toy.sgm.json", "--out", "dep"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("params 2098"), "{}", stdout(&o));
}

#[test]
fn deploy_refuses_granularity_violation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy(d);
    let o = sgcnn(
        d,
        &["prune", "--model", "toy.sgm.json", "--groups", "2", "--step", "0.5", "--target-conv", "0.5", "--target-fc", "0", "--finetune", "none", "--out", "p"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let path = d.join("p.sgm.json");
    let mut manifest: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    // revive one dead connection of one filter: its group-mates stay dead
    let bits = manifest["masks"]["conv2"]["bits"].as_str().unwrap().to_string();
    let mut bytes = hex_decode(&bits);
    let groups = manifest["groupings"]["conv2"]["assignment"].as_array().unwrap().clone();
    let cols = manifest["masks"]["conv2"]["cols"].as_u64().unwrap() as usize;
    let idx = (0..bytes.len() * 8)
        .find(|&b| {
            let f = b / cols;
            f < groups.len()
                && bytes[b / 8] >> (b % 8) & 1 == 0
                && groups.iter().filter(|g| **g == groups[f]).count() > 1
        })
        .expect("a dead connection in a multi-filter group");
    bytes[idx / 8] |= 1 << (idx % 8);
    manifest["masks"]["conv2"]["bits"] = Value::String(hex_encode(&bytes));
    fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();

    let o = sgcnn(d, &["deploy", "--model", "p.sgm.json", "--out", "bad"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(!d.join("bad.sgm.json").exists());
}

#[test]
fn sweep_emits_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy(d);
    let o = Command::new(env!("CARGO_BIN_EXE_sgcnn"))
        .current_dir(d)
        .env("SG_THREADS", "2")
        .args([
            "sweep", "--model", "toy.sgm.json", "--groups", "2,8", "--steps", "0.05,0.3", "--scopes", "fc",
            "--finetune", "none", "--out", "sweep.csv",
        ])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(d.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("schema_version,groups,step,scope"));
    let conv_col = lines[0].split(',').position(|c| c == "conv_ratio").unwrap();
    for row in &lines[1..] {
        assert_eq!(row.split(',').nth(conv_col), Some("0.0"));
    }
}

fn hex_decode(s: &str) -> Vec<u8> {
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap()).collect()
}

fn hex_encode(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}
