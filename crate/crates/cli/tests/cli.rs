use std::path::Path;
use std::process::{Command, Output};

use midtrain_core::checkpoint::{read_checkpoint, tensor_names_by_pattern, write_checkpoint, Checkpoint, Tensor, DECODER_LAYER_PREFIX};
use serde_json::Value;

fn midtrain(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_midtrain")).current_dir(dir).args(args).output().unwrap()
}

fn layered(layers: usize, width: usize) -> Checkpoint {
    let mut c = Checkpoint::new();
    for l in 0..layers {
        for s in ["attn.weight", "mlp.weight", "norm.weight"] {
            let v: Vec<f32> = (0..width).map(|i| (l * 1000 + i) as f32).collect();
            c.insert(format!("decoder.layers.{l}.{s}"), Tensor::from_f32(vec![width], &v).unwrap()).unwrap();
        }
    }
    c.insert("embed.weight", Tensor::from_f32(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    c
}

fn stderr_lines(o: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&o.stderr)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|_| panic!("stderr line is not JSON: {l}")))
        .collect()
}

#[test]
fn upscale_forty_to_forty_eight() {
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(&layered(40, 4), dir.path().join("base.ckpt")).unwrap();
    let o = midtrain(dir.path(), &["upscale", "--in", "base.ckpt", "--target-layers", "48", "--out", "up.ckpt"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let up = read_checkpoint(dir.path().join("up.ckpt")).unwrap();
    let layers: std::collections::BTreeSet<usize> =
        tensor_names_by_pattern(&up, DECODER_LAYER_PREFIX).unwrap().into_iter().map(|(i, _)| i).collect();
    assert_eq!(layers.len(), 48);
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("up.ckpt.run.json")).unwrap()).unwrap();
    assert_eq!(manifest["summary"]["target_layers"], 48);
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert!(stderr_lines(&o).iter().any(|l| l["event"] == "done"));
}

#[test]
fn average_with_mismatched_shapes_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(&layered(2, 4), dir.path().join("a.ckpt")).unwrap();
    write_checkpoint(&layered(2, 5), dir.path().join("b.ckpt")).unwrap();
    let o = midtrain(dir.path(), &["average", "--weights", "0.5,0.5", "a.ckpt", "b.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
    let lines = stderr_lines(&o);
    let err = lines.iter().find(|l| l["level"] == "error").expect("error line");
    assert!(err["error"].as_str().unwrap().contains("shape"), "{err}");
}

#[test]
fn unknown_subcommand_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(midtrain(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn merge_equals_half_half_average() {
    let dir = tempfile::tempdir().unwrap();
    let mut b = layered(2, 4);
    b.insert("embed.weight", Tensor::from_f32(vec![2, 2], &[0.3, 0.1, 7.0, -4.0]).unwrap()).unwrap();
    write_checkpoint(&layered(2, 4), dir.path().join("a.ckpt")).unwrap();
    write_checkpoint(&b, dir.path().join("b.ckpt")).unwrap();
    assert!(midtrain(dir.path(), &["merge", "a.ckpt", "b.ckpt", "--out", "m.ckpt"]).status.success());
    assert!(midtrain(dir.path(), &["average", "--weights", "0.5,0.5", "a.ckpt", "b.ckpt", "--out", "v.ckpt"])
        .status
        .success());
    let m = read_checkpoint(dir.path().join("m.ckpt")).unwrap();
    let v = read_checkpoint(dir.path().join("v.ckpt")).unwrap();
    assert!(m.names().eq(v.names()));
    for (name, t) in m.tensors() {
        assert_eq!(t.data(), v.get(name).unwrap().data(), "{name}");
    }
}

#[test]
fn select_prints_equispaced_items() {
    let dir = tempfile::tempdir().unwrap();
    let items: Vec<String> = (1..=10).map(|i| format!("step{i}")).collect();
    let mut args = vec!["select", "--k", "3"];
    args.extend(items.iter().map(String::as_str));
    let o = midtrain(dir.path(), &args);
    assert!(o.status.success());
    let got: Vec<String> = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(got, ["step1", "step6", "step10"]);
}

#[test]
fn select_rejects_overlapping_bounds() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("m.jsonl"), "{\"id\":\"a\",\"token_count\":5}\n").unwrap();
    let o = midtrain(dir.path(), &["select", "--manifest", "m.jsonl", "--bounds", "0..10,5..20", "--quotas", "1,0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn plan_emit_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    assert!(midtrain(dir.path(), &["plan", "emit", "--all", "--out", "plans"]).status.success());
    let mut files: Vec<String> = std::fs::read_dir(dir.path().join("plans"))
        .unwrap()
        .map(|e| format!("plans/{}", e.unwrap().file_name().to_string_lossy()))
        .collect();
    files.sort();
    assert_eq!(files.len(), 7);
    let mut args = vec!["plan", "validate"];
    args.extend(files.iter().map(String::as_str));
    let o = midtrain(dir.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let bad = std::fs::read_to_string(dir.path().join("plans/cpt2.json")).unwrap().replace("\"vision\"", "\"vision\", \"projector\", \"decoder\"");
    std::fs::write(dir.path().join("bad.json"), bad).unwrap();
    let o = midtrain(dir.path(), &["plan", "validate", "bad.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nothing trainable"));
}

#[test]
fn curate_blocklist_inserts_content_stage() {
    let dir = tempfile::tempdir().unwrap();
    let rows = [
        r#"{"id":"a","text":"what is the capital of france","response":"paris is the capital"}"#,
        r#"{"id":"b","text":"tell me a forbidden secret please","response":"no thanks at all"}"#,
    ];
    std::fs::write(dir.path().join("in.jsonl"), rows.join("\n") + "\n").unwrap();
    std::fs::write(dir.path().join("block.txt"), "forbidden\n").unwrap();
    let o = midtrain(dir.path(), &["curate", "--in", "in.jsonl", "--out", "out.jsonl", "--blocklist", "block.txt"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = std::fs::read_to_string(dir.path().join("out.jsonl")).unwrap();
    assert_eq!(out.lines().count(), 1);
    assert!(out.contains("\"a\""));
    let log = std::fs::read_to_string(dir.path().join("out.jsonl.log.jsonl")).unwrap();
    assert!(log.contains("blocklist:forbidden"));
}
