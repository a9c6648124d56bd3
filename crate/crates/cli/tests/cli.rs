//! End-to-end tests driving the compiled binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn unveil() -> Command {
    Command::new(env!("CARGO_BIN_EXE_unveil"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn synth_small(out: &Path, seed: u64, count: usize) {
    run_ok(unveil().args([
        "synth",
        "--out",
        out.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
        "--count",
        &count.to_string(),
        "--task",
        "reflection",
        "--procedural",
        "--crop-width",
        "48",
        "--crop-height",
        "32",
        "--num-frames",
        "3",
    ]));
}

#[test]
fn synth_same_seed_produces_identical_trees() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    synth_small(&a, 7, 2);
    synth_small(&b, 7, 2);
    let ta = tree_bytes(&a);
    let tb = tree_bytes(&b);
    assert!(!ta.is_empty());
    assert_eq!(ta.len(), tb.len());
    for ((pa, ba), (pb, bb)) in ta.iter().zip(&tb) {
        assert_eq!(pa, pb);
        // The manifest embeds no paths or timestamps, so everything is
        // byte-identical.
        assert_eq!(ba, bb, "{pa:?} differs between identically seeded runs");
    }
}

#[test]
fn remove_emits_the_contracted_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    // A 5-frame input directory.
    let frames = dir.path().join("frames");
    std::fs::create_dir_all(&frames).unwrap();
    let data = dir.path().join("data");
    run_ok(unveil().args([
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "3",
        "--count",
        "1",
        "--task",
        "reflection",
        "--procedural",
        "--crop-width",
        "48",
        "--crop-height",
        "32",
        "--num-frames",
        "5",
    ]));
    for i in 0..5 {
        std::fs::copy(
            data.join("sample_0000").join(format!("frame_{i:03}.png")),
            frames.join(format!("frame_{i:03}.png")),
        )
        .unwrap();
    }

    let out = dir.path().join("removed");
    run_ok(unveil().args([
        "remove",
        "--frames",
        frames.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--keyframe",
        "2",
        "--levels",
        "2",
        "--compact",
        "--oracle-range",
        "4",
    ]));

    assert!(out.join("background_002.png").is_file());
    assert!(out.join("obstruction_002.png").is_file());
    assert!(out.join("preview_002.png").is_file());
    assert!(out.join("manifest.json").is_file());
    let flo_count = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "flo")
        })
        .count();
    // 4 non-keyframe pairs x 2 layers.
    assert_eq!(flo_count, 8);
}

#[test]
fn eval_scores_identical_inputs_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_small(&data, 11, 1);
    let gt = data.join("sample_0000").join("gt_b_000.png");
    let pred_dir = dir.path().join("pred");
    let gt_dir = dir.path().join("gt");
    std::fs::create_dir_all(&pred_dir).unwrap();
    std::fs::create_dir_all(&gt_dir).unwrap();
    std::fs::copy(&gt, pred_dir.join("p.png")).unwrap();
    std::fs::copy(&gt, gt_dir.join("g.png")).unwrap();

    let out = dir.path().join("eval");
    run_ok(unveil().args([
        "eval",
        "--pred-background",
        pred_dir.to_str().unwrap(),
        "--gt-background",
        gt_dir.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    let find = |metric: &str| {
        rows.iter()
            .find(|r| r["metric"] == metric)
            .and_then(|r| r["value"].as_f64())
            .unwrap()
    };
    assert!((find("ssim") - 1.0).abs() < 1e-9);
    assert_eq!(find("lmse"), 0.0);
    assert!((find("ncc") - 1.0).abs() < 1e-9);
    assert!(out.join("summary.md").is_file());
}

#[test]
fn pretrain_then_online_remove_uses_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_small(&data, 19, 1);

    let pre = dir.path().join("pre");
    run_ok(unveil().args([
        "pretrain",
        "--data",
        data.to_str().unwrap(),
        "--out",
        pre.to_str().unwrap(),
        "--stage1-iters",
        "2",
        "--stage2-iters",
        "1",
        "--levels",
        "2",
        "--batch",
        "1",
        "--compact",
        "--oracle-range",
        "4",
    ]));
    assert!(pre.join("stage1.ckpt").is_file());
    assert!(pre.join("stage2.ckpt").is_file());
    assert!(pre.join("stage1_loss.csv").is_file());

    let ckpt = pre.join("stage2.ckpt");
    let ckpt_before = std::fs::read(&ckpt).unwrap();
    let out = dir.path().join("removed");
    run_ok(unveil().args([
        "remove",
        "--frames",
        data.join("sample_0000").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--online",
        "--online-iters",
        "2",
        "--levels",
        "2",
        "--lr-final",
        "1e-3",
        "--oracle-range",
        "4",
    ]));
    assert!(out.join("adapted.ckpt").is_file());
    assert!(out.join("online_loss.csv").is_file());
    // The input checkpoint on disk is never mutated.
    assert_eq!(ckpt_before, std::fs::read(&ckpt).unwrap());
}

#[test]
fn metatrain_runs_on_synthetic_and_real_streams() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_small(&data, 23, 1);
    let real = dir.path().join("real");
    std::fs::create_dir_all(real.join("seq0")).unwrap();
    for i in 0..3 {
        std::fs::copy(
            data.join("sample_0000").join(format!("frame_{i:03}.png")),
            real.join("seq0").join(format!("frame_{i:03}.png")),
        )
        .unwrap();
    }

    let pre = dir.path().join("pre");
    run_ok(unveil().args([
        "pretrain",
        "--data",
        data.to_str().unwrap(),
        "--out",
        pre.to_str().unwrap(),
        "--stage1-iters",
        "1",
        "--stage2-iters",
        "1",
        "--levels",
        "2",
        "--batch",
        "1",
        "--compact",
        "--oracle-range",
        "4",
    ]));

    let meta = dir.path().join("meta");
    run_ok(unveil().args([
        "metatrain",
        "--synth-data",
        data.to_str().unwrap(),
        "--real-data",
        real.to_str().unwrap(),
        "--ckpt",
        pre.join("stage2.ckpt").to_str().unwrap(),
        "--out",
        meta.to_str().unwrap(),
        "--outer-iters",
        "2",
        "--inner-steps",
        "1",
        "--levels",
        "2",
        "--batch",
        "1",
        "--oracle-range",
        "4",
    ]));
    assert!(meta.join("meta.ckpt").is_file());
    assert!(meta.join("meta_loss.csv").is_file());
}

#[test]
fn baselines_emit_comparable_loss_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_small(&data, 29, 1);
    let sample = data.join("sample_0000");

    let out = dir.path().join("base");
    run_ok(unveil().args([
        "baselines",
        "--frames",
        sample.to_str().unwrap(),
        "--gt",
        sample.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--methods",
        "mean,median,zero,dense,uniform",
        "--levels",
        "2",
        "--compact",
        "--oracle-range",
        "4",
    ]));
    let csv = std::fs::read_to_string(out.join("baselines.csv")).unwrap();
    for method in ["mean", "median", "zero", "dense", "uniform"] {
        assert!(csv.contains(&format!("{method},")), "missing {method} rows:\n{csv}");
    }
    assert!(out.join("fused_mean.png").is_file());
    assert!(out.join("network_uniform.png").is_file());
}

#[test]
fn failures_exit_nonzero_and_clean_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fresh_out");
    let status = unveil()
        .args([
            "remove",
            "--frames",
            dir.path().join("missing").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!status.status.success());
    assert!(!out.exists(), "partial output directory should be removed");

    // A corrupt checkpoint is reported as a format problem.
    let data = dir.path().join("data");
    synth_small(&data, 31, 1);
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let out2 = dir.path().join("out2");
    let result = unveil()
        .args([
            "remove",
            "--frames",
            data.join("sample_0000").to_str().unwrap(),
            "--out",
            out2.to_str().unwrap(),
            "--ckpt",
            bad.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!result.status.success());
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("bad file format"), "stderr: {stderr}");
    assert!(!out2.exists());
}

#[test]
fn config_file_values_apply_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_small(&data, 37, 1);

    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "[train]\nlevels = 2\nseed = 123\n\n[model]\nchannels = 3\nfeat_width = 8\nflow_width = 12\nrecon_width = 8\n",
    )
    .unwrap();

    let out = dir.path().join("removed");
    run_ok(unveil().args([
        "--config",
        config.to_str().unwrap(),
        "remove",
        "--frames",
        data.join("sample_0000").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "9",
        "--oracle-range",
        "4",
    ]));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap())
            .unwrap();
    // File value survives; the flag wins over the file where both exist.
    assert_eq!(manifest["train"]["levels"], 2);
    assert_eq!(manifest["train"]["seed"], 9);
    assert_eq!(manifest["model"]["feat_width"], 8);
}
