use std::path::Path;
use std::process::{Command, Output};

fn graspbox(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graspbox"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = graspbox(args);
    assert!(
        out.status.success(),
        "graspbox {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path, data: &Path, boxed: bool) -> std::path::PathBuf {
    let path = dir.join(format!("train_{boxed}.toml"));
    let text = format!(
        r#"
seed = 1
batch_size = 4
steps = 6
warmup_steps = 1
box_conditioning_enabled = {boxed}
dataset = "{}"
output_dir = "{}"

[policy.encoder]
view_count = 2
image_width = 48
image_height = 48
stage_channels = [4, 4]
coord_channels = true
categories = 11
token_dim = 8
history = 2
attn_depth = 1
attn_heads = 2
positional_encoding = true
freeze_temporal = false
box_conditioning_enabled = true

[policy.denoiser]
token_dim = 8
depth = 1
heads = 2
horizon = 16
action_dim = 4
t_train = 100
ddim_steps = 4
eta = 0.0
clip_sample = true
"#,
        data.display(),
        dir.join(format!("run_{boxed}")).display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn pipeline_from_demos_to_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let s = |p: &Path| p.to_str().unwrap().to_string();

    let gen = ok(&["demo-gen", "--family", "pickbig", "--counts", "1", "--seed", "3", "--image-size", "48", "--out", &s(&data)]);
    assert!(gen.contains("8 episodes written"), "{gen}");

    for boxed in [false, true] {
        let cfg = tiny_config(root, &data, boxed);
        let out = ok(&["train", "--config", &s(&cfg)]);
        assert!(out.contains("trained 6 steps"), "{out}");
        let log = std::fs::read_to_string(root.join(format!("run_{boxed}/train_log.jsonl"))).unwrap();
        assert!(log.lines().count() >= 2);
    }
    let dp = s(&root.join("run_false/policy.bin"));
    let bx = s(&root.join("run_true/policy.bin"));

    let eval_dir = root.join("eval");
    let table = ok(&[
        "eval", "--policy", &bx, "--name", "BoxConditioned", "--family", "pickbig", "--placements", "0,3",
        "--episodes", "2", "--max-steps", "12", "--seed", "5", "--out", &s(&eval_dir),
    ]);
    assert!(table.contains("BoxConditioned"), "{table}");
    for f in ["report.txt", "report.csv", "plot.tsv", "seeds.json"] {
        assert!(eval_dir.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(eval_dir.join("seeds.json")).unwrap()).unwrap();
    assert_eq!(manifest["grid"].as_array().unwrap().len(), 4);
    let replay = ok(&["replay", "--manifest", &s(&eval_dir.join("seeds.json"))]);
    assert!(replay.contains("matches") && !replay.contains("DIFFERS"), "{replay}");

    let ab_dir = root.join("ablate");
    let ab = ok(&[
        "ablate", "--first", &dp, "--second", &dp, "--family", "pickbig", "--placements", "1", "--episodes", "2",
        "--max-steps", "12", "--format", "csv", "--out", &s(&ab_dir),
    ]);
    assert!(ab.contains("TSR delta (BoxConditioned - DP): +0.00 pts"), "{ab}");
    assert!(ab.lines().any(|l| l.starts_with("task,")), "{ab}");
}

#[test]
fn bad_inputs_fail_with_messages() {
    let tmp = tempfile::tempdir().unwrap();
    let out = graspbox(&["demo-gen", "--family", "pickall", "--out", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown family"));

    let data = tmp.path().join("d");
    ok(&["demo-gen", "--family", "pickcup", "--counts", "1", "--image-size", "48", "--out", data.to_str().unwrap()]);
    let out = graspbox(&[
        "fewshot-split", "--data", data.to_str().unwrap(), "--heldout", "7", "--k", "5", "--out",
        tmp.path().join("s").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("exceeds"));

    let split = ok(&[
        "fewshot-split", "--data", data.to_str().unwrap(), "--heldout", "7", "--k", "1", "--out",
        tmp.path().join("s").to_str().unwrap(),
    ]);
    assert!(split.contains("(1 of item 7)"), "{split}");
}
