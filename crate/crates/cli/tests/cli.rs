use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hiresnet::VariantMask;
use hiresnet_cli::parse_variants;

const MICRO: &str = r#"
baseline = "resnet"
stem_channels = 4
input_shape = [3, 8, 8]
mask = "full"
seed = 1

[[stages]]
channels = 4
num_blocks = 1

[[stages]]
channels = 8
num_blocks = 1
downsample = 2
"#;

const QUICK: &str = "epochs = 2\nbatch_size = 10\n";

fn hiresnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hiresnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn write_configs(dir: &Path) -> (String, String) {
    let model = dir.join("micro.toml");
    let train = dir.join("quick.toml");
    fs::write(&model, MICRO).unwrap();
    fs::write(&train, QUICK).unwrap();
    (model.display().to_string(), train.display().to_string())
}

#[test]
fn params_prints_totals_and_groups() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("resnet_full.toml");
    let preset =
        hiresnet::ModelConfig::preset(hiresnet::Baseline::Resnet).with_mask(VariantMask::Full);
    fs::write(&cfg, preset.to_toml_string()).unwrap();
    let out = hiresnet(&["params", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("total 273722"), "{stdout}");
    assert!(stdout.contains("proj") && stdout.contains("fc"));

    let out = hiresnet(&[
        "params",
        "--config",
        cfg.to_str().unwrap(),
        "--mask",
        "none",
    ]);
    assert!(text(&out.stdout).contains("total 267802"));
}

#[test]
fn usage_errors_exit_one() {
    let out = hiresnet(&["params", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("Usage"));
    assert_eq!(hiresnet(&[]).status.code(), Some(1));
    assert_eq!(
        hiresnet(&["params", "--mask", "sideways"]).status.code(),
        Some(2)
    );
    let out = hiresnet(&[
        "train",
        "--out",
        tempfile::tempdir().unwrap().path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("--synthetic"));
}

#[test]
fn missing_data_prints_the_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out = hiresnet(&[
        "train",
        "--data",
        dir.path().join("absent").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = text(&out.stderr);
    assert!(
        stderr.contains("data_batch_1.bin") && stderr.contains("test_batch.bin"),
        "{stderr}"
    );
}

#[test]
fn gradcheck_passes() {
    let out = hiresnet(&["gradcheck"]);
    let stdout = text(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}{}", text(&out.stderr));
    for op in [
        "conv2d",
        "batchnorm2d",
        "avgpool2d",
        "softmax_cross_entropy",
        "micro_network",
    ] {
        assert!(stdout.contains(op), "{op} missing from\n{stdout}");
    }
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn train_eval_analyze_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let (model, train) = write_configs(dir.path());
    let run = dir.path().join("run");
    let args = |out: &Path| {
        vec![
            "train".to_string(),
            "--config".into(),
            model.clone(),
            "--train-config".into(),
            train.clone(),
            "--synthetic".into(),
            "60".into(),
            "--seed".into(),
            "4".into(),
            "--out".into(),
            out.display().to_string(),
        ]
    };
    let a: Vec<String> = args(&run);
    let out = hiresnet(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("epoch   1"));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let ckpt = run.join("checkpoints").join("final.ckpt");
    assert!(ckpt.is_file());
    let manifest = fs::read_to_string(run.join("manifest.toml")).unwrap();
    assert!(manifest.contains("command = \"train\"") && manifest.contains("seed = 4"));

    let replay = dir.path().join("replay");
    let manifest_path = run.join("manifest.toml");
    let out = hiresnet(&[
        "train",
        "--manifest",
        manifest_path.to_str().unwrap(),
        "--out",
        replay.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    for f in ["metrics.csv", "manifest.toml", "checkpoints/final.ckpt"] {
        assert_eq!(
            fs::read(run.join(f)).unwrap(),
            fs::read(replay.join(f)).unwrap(),
            "{f}"
        );
    }

    let out = hiresnet(&["eval", "--manifest", manifest_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));

    let eval_dir = dir.path().join("eval");
    let out = hiresnet(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--synthetic",
        "30",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let report = fs::read_to_string(eval_dir.join("report.csv")).unwrap();
    assert!(report.starts_with("images,loss,top1,top5\n30,"));

    let analyze_dir = dir.path().join("analyze");
    let out = hiresnet(&[
        "analyze",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--synthetic",
        "30",
        "--out",
        analyze_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("ratio"));
    let report = fs::read_to_string(analyze_dir.join("report.csv")).unwrap();
    // Two residual rows and three projections (0→1, 0→2, 1→2).
    assert_eq!(report.lines().count(), 1 + 2 + 3);

    let out = hiresnet(&[
        "eval",
        "--synthetic",
        "30",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let (model, _) = write_configs(dir.path());
    let train = dir.path().join("one.toml");
    fs::write(&train, "epochs = 1\nbatch_size = 10\n").unwrap();
    let out_dir = dir.path().join("ablate");
    let out = hiresnet(&[
        "ablate",
        "--config",
        &model,
        "--train-config",
        train.to_str().unwrap(),
        "--synthetic",
        "40",
        "--variants",
        "none,full,custom:0-2",
        "--seeds",
        "1,2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let report = fs::read_to_string(out_dir.join("report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "variant,params,top1_mean,top1_std");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("none,") && lines[2].starts_with("full,"));
    assert!(lines[3].starts_with("\"custom:0-2\",") || lines[3].starts_with("custom:0-2,"));
}

#[test]
fn variant_lists_keep_custom_pairs_together() {
    let v = parse_variants("none, p2,custom:0-2,1-3,full").unwrap();
    assert_eq!(v.len(), 4);
    assert_eq!(v[1], VariantMask::Span(2));
    assert_eq!(v[2].to_string(), "custom:0-2,1-3");
    assert_eq!(v[3], VariantMask::Full);
    assert!(parse_variants("none,0-2").is_err());
}
