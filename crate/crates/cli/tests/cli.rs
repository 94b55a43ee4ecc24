use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use msr_core::checkpoint;
use msr_core::data::{split_file, Split};
use msr_core::numerics::Tensor;

const TINY: &str = r#"
[corpus]
n_train = 40
n_valid = 8
n_test = 8

[encoder]
n_blocks = 1
n_heads = 2
d_model = 8
d_ff = 16
conv_width = 3
subsample_factor = 2

[decoder]
n_blocks = 1
n_heads = 2
d_model = 8
d_ff = 16

[stage1]
batch_size = 4
max_steps = 3
eval_every = 3
eval_utts = 4

[stage2]
batch_size = 4
max_steps = 3
"#;

fn msr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msr")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = msr(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates data and trains both stages under `root`.
fn pipeline(root: &Path) {
    let cfg = root.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let (data, s1, s2) = (root.join("data"), root.join("s1"), root.join("s2"));
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["train", "--config", s(&cfg), "--stage", "1", "--data", s(&data), "--out", s(&s1)]);
    let init = s1.join("checkpoint.bin");
    ok(&["train", "--config", s(&cfg), "--stage", "2", "--data", s(&data), "--init", s(&init), "--out", s(&s2)]);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(msr(&[]).status.code(), Some(1));
    assert_eq!(msr(&["decode"]).status.code(), Some(1));
    assert_eq!(msr(&["train", "--stage", "3", "--out", "x"]).status.code(), Some(1));
    assert_eq!(msr(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_two_with_one_line_context() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = msr(&["train", "--stage", "1", "--data", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: reading corpus") && err.contains("nope"), "{err}");

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[stage1]\nlambda_ctc = 2.0\n").unwrap();
    let out = msr(&["gen-data", "--config", s(&bad), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_two_without_init_is_a_recipe_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    let out = msr(&["train", "--config", s(&cfg), "--stage", "2", "--data", s(&data), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("recipe"));
}

#[test]
fn end_to_end_outputs_are_reproducible_and_audio_mode_is_the_ablation() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    for rel in ["data/vocab.json", "s1/checkpoint.bin", "s1/train_log.jsonl", "s1/history.jsonl", "s2/checkpoint.bin"] {
        assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
    }

    let root = a.path();
    let (data, ckpt) = (root.join("data"), root.join("s2/checkpoint.bin"));
    let test = data.join(split_file(Split::Test));
    let vocab = data.join("vocab.json");

    let report = root.join("self.json");
    let out = ok(&["eval", "--ref", s(&test), "--hyp", s(&test), "--vocab", s(&vocab), "--out", s(&report)]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("WER=0.0000"));

    let audio = root.join("audio.hyp");
    ok(&["decode", "--ckpt", s(&ckpt), "--corpus", s(&data), "--modality", "audio", "--out", s(&audio)]);

    let mut t = checkpoint::load(&ckpt).unwrap();
    let names: Vec<String> = t
        .model
        .params
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| n.contains(".cross_visual.w_v") || n.contains(".cross_visual.w_o"))
        .collect();
    assert!(!names.is_empty());
    for n in &names {
        let p = t.model.params.get_mut(n).unwrap();
        *p = Tensor::zeros(p.shape());
    }
    let zeroed = root.join("zeroed.bin");
    checkpoint::save(&zeroed, &t).unwrap();
    let ablated = root.join("ablated.hyp");
    ok(&["decode", "--ckpt", s(&zeroed), "--corpus", s(&data), "--modality", "audio+visual", "--out", s(&ablated)]);
    assert_eq!(fs::read(&audio).unwrap(), fs::read(&ablated).unwrap());

    let fused = root.join("fused.hyp");
    ok(&["decode", "--ckpt", s(&ckpt), "--corpus", s(&data), "--out", s(&fused)]);
    let again = b.path().join("fused.hyp");
    let ckpt_b = b.path().join("s2/checkpoint.bin");
    ok(&["decode", "--ckpt", s(&ckpt_b), "--corpus", s(&b.path().join("data")), "--out", s(&again)]);
    assert_eq!(fs::read(&fused).unwrap(), fs::read(&again).unwrap());

    let scored = root.join("fused.json");
    ok(&["eval", "--ref", s(&test), "--hyp", s(&fused), "--vocab", s(&vocab), "--out", s(&scored)]);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&scored).unwrap()).unwrap();
    assert_eq!(json["utterances"].as_array().unwrap().len(), 8);
}
