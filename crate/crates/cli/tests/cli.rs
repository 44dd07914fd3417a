use std::path::{Path, PathBuf};
use std::process::Command;

use clap::Parser;
use inkvit_cli::*;
use inkvit_core::config::RunConfig;
use inkvit_core::dataio::{load_manifest, Dataset};
use inkvit_core::image::read_image;
use inkvit_core::training::TrainState;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_inkvit"))
}

fn parse(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("inkvit").chain(args.iter().copied())).unwrap()
}

/// Synthetic corpus plus a tiny trained checkpoint.
fn trained(dir: &Path, steps: u64) -> (PathBuf, PathBuf) {
    let corpus = dir.join("corpus");
    run(parse(&["data", "prepare", "--out-dir", corpus.to_str().unwrap()])).unwrap();
    let mut cfg = RunConfig::load(corpus.join("config.json")).unwrap();
    cfg.generator.block.d_model = 16;
    cfg.generator.block.d_ff = 16;
    cfg.writerid.block = cfg.generator.block;
    cfg.recognizer.block = cfg.generator.block;
    cfg.generator.n_scales = 1;
    cfg.generator.min_channels = 4;
    cfg.disc_channels = 4;
    cfg.batch_size = 1;
    cfg.steps = steps;
    cfg.log_interval = 1;
    cfg.checkpoint_interval = 2;
    let cfg_path = dir.join("tiny.json");
    std::fs::write(&cfg_path, cfg.to_json()).unwrap();
    let run_dir = dir.join("run");
    run(parse(&["train", "--config", cfg_path.to_str().unwrap(), "--out-dir", run_dir.to_str().unwrap()])).unwrap();
    (run_dir.join("last.ckpt"), corpus)
}

#[test]
fn missing_font_field_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&RunConfig::smoke().to_json()).unwrap();
    v.as_object_mut().unwrap().remove("font");
    let p = dir.path().join("c.json");
    std::fs::write(&p, v.to_string()).unwrap();
    let out = bin()
        .args(["train", "--config", p.to_str().unwrap(), "--out-dir"])
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("font"));
}

#[test]
fn config_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    std::fs::write(&p, RunConfig::smoke().to_json()).unwrap();
    let out = bin().env(CONFIG_ENV, &p).args(["report-size", "--json"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = bin().env_remove(CONFIG_ENV).args(["report-size"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_size_rows() {
    let out = bin().args(["report-size", "--preset", "large", "--json"]).output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = v["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["component"].as_str().unwrap()).collect();
    assert_eq!(names, ["Gen", "Enc", "Total"]);
    let p = |i: usize| rows[i]["params"].as_u64().unwrap();
    assert_eq!(p(0) + p(1), p(2));
    let table = bin().args(["report-size", "--preset", "desk"]).output().unwrap();
    assert!(String::from_utf8_lossy(&table.stdout).lines().any(|l| l.starts_with("Total")));
}

#[test]
fn font_inspect_and_bad_flags() {
    let out = bin().args(["font", "inspect", "--text", "ab"]).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("tokens    2"));
    let out = bin().args(["augment", "--checkpoint", "x", "--vocab-file", "y", "--n", "0", "--out-dir", "z"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn checkpoint_workflows() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, corpus) = trained(dir.path(), 2);
    let d = |s: &str| dir.path().join(s);
    let s = |p: &Path| p.to_str().unwrap().to_string();

    // resume continues numbering without restarting
    run(parse(&["train", "--resume", &s(&ckpt), "--steps", "4", "--out-dir", &s(&d("run"))])).unwrap();
    assert_eq!(TrainState::load(&ckpt).unwrap().step, 4);
    let steps: Vec<u64> = std::fs::read_to_string(d("run").join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, [1, 2, 3, 4]);

    // generate: width 16·L and manifest
    run(parse(&[
        "generate", "--checkpoint", &s(&ckpt), "--style-dir", &s(&corpus), "--text", "abc", "--text", "pen", "--out-dir",
        &s(&d("gen")),
    ]))
    .unwrap();
    let (samples, _) = load_manifest(d("gen").join("manifest.jsonl")).unwrap();
    assert_eq!(samples.len(), 2);
    let img = read_image(&samples[0].image_path).unwrap();
    assert_eq!((img.width, img.height), (48, 32));
    let bad = run(parse(&[
        "generate", "--checkpoint", &s(&ckpt), "--style-dir", &s(&corpus), "--text", "a", "--scales", "3", "--out-dir",
        &s(&d("gen2")),
    ]));
    assert_eq!(exit_code(&bad.unwrap_err()), 2);

    // grid is deterministic
    let grid = |out: &str| {
        run(parse(&[
            "grid", "--checkpoint", &s(&ckpt), "--style", &s(&corpus.join("w0_000_0.pgm")), "--style", &s(&corpus),
            "--text", "ink", "--text", "lamp", "--out", &s(&d(out)),
        ]))
        .unwrap();
        std::fs::read(d(out)).unwrap()
    };
    assert_eq!(grid("g1.pgm"), grid("g2.pgm"));
    assert!(d("g1.pgm.json").exists());

    // augment n=100 round-trips through the manifest reader
    let vocab = d("vocab.txt");
    std::fs::write(&vocab, "zebra\nquilt\nox\n").unwrap();
    run(parse(&["augment", "--checkpoint", &s(&ckpt), "--vocab-file", &s(&vocab), "--n", "100", "--out-dir", &s(&d("aug"))]))
        .unwrap();
    let data = Dataset::load(d("aug").join("manifest.jsonl")).unwrap();
    assert_eq!(data.len(), 100);
    assert!(data.items.iter().all(|i| ["zebra", "quilt", "ox"].contains(&i.sample.transcript.as_str())));
    assert_eq!(data.registry.len(), 2);

    // recognizer-only training and evaluation
    run(parse(&[
        "train", "--recognizer-only", "--resume", &s(&ckpt), "--steps", "6", "--out-dir", &s(&d("rec")),
    ]))
    .unwrap();
    let rec = TrainState::load(d("rec").join("last.ckpt")).unwrap();
    let before = TrainState::load(&ckpt).unwrap();
    assert_eq!(rec.step, 6);
    assert_eq!(rec.gen, before.gen);
    assert_ne!(rec.recog, before.recog);

    run(parse(&[
        "evaluate", "--checkpoint", &s(&ckpt), "--manifest", &s(&corpus.join("manifest.jsonl")), "--split",
        &s(&corpus.join("split.txt")), "--n-per-pool", "4", "--kid-subset", "5", "--kid-subsets", "3", "--out",
        &s(&d("eval.json")), "--diff-dump", &s(&d("diff.tsv")),
    ]))
    .unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d("eval.json")).unwrap()).unwrap();
    assert!(v["fid"].as_f64().unwrap().is_finite());
    assert!(v["real_recognition"]["cer"].is_number());
    assert_eq!(v["checkpoint_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(std::fs::read_to_string(d("diff.tsv")).unwrap().lines().count(), 21);
}
