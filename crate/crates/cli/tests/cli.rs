use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tabseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tabseq"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tabseq(args);
    assert!(
        out.status.success(),
        "tabseq {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_json(path: &Path, v: serde_json::Value) -> String {
    fs::write(path, v.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn lint_reports_injected_fault_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let report = dir.path().join("lint.json");
    ok(&[
        "synth",
        "--seed",
        "11",
        "--out",
        s(&corpus),
        "--count",
        "1000",
        "--out-of-bounds",
        "531",
    ]);
    let out = ok(&["lint", "--corpus", s(&corpus), "--report", s(&report)]);
    assert_eq!(out.trim(), "0.5310");
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(r["affected"], 531);
}

/// Every stage on one memorized sample: structure must come back exactly.
#[test]
fn end_to_end_on_memorized_sample() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");
    ok(&["synth", "--seed", "5", "--out", s(&corpus), "--count", "1"]);

    let vq_cfg = write_json(
        &d.join("vq.json"),
        serde_json::json!({"hidden": [8, 8, 8], "codebook_size": 16, "code_dim": 8, "optim": {"steps": 3, "batch_size": 1}}),
    );
    let vq = d.join("vq.ckpt");
    ok(&[
        "train-vqvae",
        "--config",
        &vq_cfg,
        "--corpus",
        s(&corpus),
        "--out",
        s(&vq),
    ]);
    let image = corpus.join("images/000000.ppm");
    let grid = ok(&["tokens", "--vqvae", s(&vq), "--image", s(&image)]);
    assert!(!grid.trim().is_empty());

    let enc = serde_json::json!({"layers": 1, "width": 32, "heads": 2});
    let ssp_cfg = write_json(
        &d.join("ssp.json"),
        serde_json::json!({"encoder": enc, "optim": {"steps": 2, "batch_size": 1}}),
    );
    let encoder = d.join("enc.ckpt");
    ok(&[
        "pretrain",
        "--config",
        &ssp_cfg,
        "--corpus",
        s(&corpus),
        "--vqvae",
        s(&vq),
        "--out",
        s(&encoder),
    ]);

    let structure_cfg = write_json(
        &d.join("structure.json"),
        serde_json::json!({"encoder": enc, "decoder_layers": 1,
            "optim": {"steps": 150, "batch_size": 1, "lr": 3e-3, "warmup_steps": 10}}),
    );
    let short = serde_json::json!({"steps": 2, "batch_size": 1});
    let bbox_cfg = write_json(
        &d.join("bbox.json"),
        serde_json::json!({"encoder": enc, "decoder_layers": 1, "optim": short}),
    );
    let content_cfg = write_json(
        &d.join("content.json"),
        serde_json::json!({"encoder": {"layers": 1, "width": 32, "heads": 2, "image_height": 32, "image_width": 128},
            "decoder_layers": 1, "optim": short}),
    );
    let (st, bb, ct) = (
        d.join("structure.ckpt"),
        d.join("bbox.ckpt"),
        d.join("content.ckpt"),
    );
    ok(&[
        "finetune",
        "--task",
        "structure",
        "--init",
        "ssp",
        "--encoder",
        s(&encoder),
        "--config",
        &structure_cfg,
        "--corpus",
        s(&corpus),
        "--out",
        s(&st),
    ]);
    ok(&[
        "finetune",
        "--task",
        "bbox",
        "--config",
        &bbox_cfg,
        "--corpus",
        s(&corpus),
        "--out",
        s(&bb),
    ]);
    ok(&[
        "finetune",
        "--task",
        "content",
        "--config",
        &content_cfg,
        "--corpus",
        s(&corpus),
        "--out",
        s(&ct),
    ]);

    let models = ["--structure", s(&st), "--bbox", s(&bb), "--content", s(&ct)];
    let result = d.join("result.json");
    let mut args = vec!["infer", "--image", s(&image), "--out", s(&result)];
    args.extend(models);
    ok(&args);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&result).unwrap()).unwrap();
    assert!(r["structure_tokens"].is_array());
    assert!(fs::read_to_string(d.join("result.html"))
        .unwrap()
        .starts_with("<table>"));

    let mut args = vec!["eval", "--metric", "steds", "--corpus", s(&corpus)];
    args.extend(models);
    let out = ok(&args);
    assert_eq!(out.lines().next().unwrap(), "1.0000");
    assert!(out.contains("S-TEDS"));
}

#[test]
fn unknown_flag_is_rejected() {
    let out = tabseq(&["lint", "--corpus", "x", "--bogus"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(
        &dir.path().join("c.json"),
        serde_json::json!({"thetta": 0.2}),
    );
    let out = tabseq(&["lint", "--config", &cfg, "--corpus", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("thetta"));
}

#[test]
fn ssp_init_requires_encoder() {
    let out = tabseq(&[
        "finetune",
        "--task",
        "structure",
        "--init",
        "ssp",
        "--corpus",
        "x",
        "--out",
        "y",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--encoder"));
}
