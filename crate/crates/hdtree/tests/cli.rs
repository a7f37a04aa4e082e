use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hdtree::checkpoint;
use hdtree::evaluate::{evaluate_model, EvalOptions};
use hdtree::export::metrics_csv;
use hdtree::io::{self, Column, CsvOptions};

fn hdtree(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdtree")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = hdtree(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(args: &[&str]) -> i32 {
    hdtree(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "epochs": 3, "warmup_epochs": 1, "batch_size": 32, "depth": 2, "diffusion_steps": 20,
  "latent_dim": 4, "encoder_hidden": [16], "decoder_hidden": [16], "time_dim": 4
}"#;

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let synth = root.join("synth");
    ok(&["synth", "--depth", "2", "--n-per-leaf", "20", "--dim", "4", "--seed", "1", "--all-levels", "--out", s(&synth)]);
    let cfg = root.join("cfg.json");
    fs::write(&cfg, TINY).unwrap();
    let data = synth.join("data.csv");
    let ckpt = root.join("model.hdt");
    ok(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--label-column", "label", "--time-column", "time", "--out",
        s(&ckpt),
    ]);
    Fixture { _dir: dir, root, data, ckpt }
}

fn data_flags(f: &Fixture) -> Vec<String> {
    ["--data", s(&f.data), "--label-column", "label", "--time-column", "time"].iter().map(|v| v.to_string()).collect()
}

fn with<'a>(base: &'a [&'a str], extra: &'a [String]) -> Vec<&'a str> {
    base.iter().copied().chain(extra.iter().map(String::as_str)).collect()
}

#[test]
fn synth_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--n-per-leaf", "10", "--dim", "5", "--seed", "4", "--out", s(&a)]);
    ok(&["synth", "--n-per-leaf", "10", "--dim", "5", "--seed", "4", "--out", s(&b)]);
    for f in ["data.csv", "truth.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let truth: serde_json::Value = serde_json::from_slice(&fs::read(a.join("truth.json")).unwrap()).unwrap();
    let leaves = truth["leaf"].as_array().unwrap();
    assert_eq!(leaves.len(), 80);
    assert!(leaves.iter().all(|l| l.as_u64().unwrap() < 8));
    let opts = CsvOptions {
        header: true,
        label: Some(Column::Name("label".into())),
        timestamp: Some(Column::Name("time".into())),
    };
    let ds = io::load_csv(&a.join("data.csv"), &opts).unwrap();
    assert_eq!(ds.features.shape(), (80, 5));
    assert_eq!(ds.timestamps.unwrap().len(), 80);
}

#[test]
fn preprocess_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.csv");
    let mut text = String::from("a,b,c,d\n");
    for i in 0..6 {
        let i = i as f64;
        text += &format!("{},{},{},{}\n", i, 3.0, 10.0 * i * i, (i * 0.7).sin() + 1.0);
    }
    fs::write(&input, text).unwrap();

    let copy = dir.path().join("copy.csv");
    ok(&["preprocess", "--data", s(&input), "--out", s(&copy)]);
    let a = io::load_csv(&input, &CsvOptions { header: true, ..Default::default() }).unwrap();
    let b = io::load_csv(&copy, &CsvOptions { header: true, ..Default::default() }).unwrap();
    assert_eq!(a.features, b.features);

    let out = dir.path().join("out.csv");
    ok(&["preprocess", "--data", s(&input), "--log1p", "--hvg", "2", "--zscore", "--out", s(&out)]);
    let ds = io::load_csv(&out, &CsvOptions { header: true, ..Default::default() }).unwrap();
    assert_eq!(ds.dim(), 2);
    assert_eq!(ds.feature_names.unwrap(), vec!["a", "c"]);
    for m in ds.features.col_means() {
        assert!(m.abs() < 1e-9);
    }
    assert_eq!(code(&["preprocess", "--data", s(&input), "--hvg", "9", "--out", s(&out)]), 2);
    assert_eq!(code(&["preprocess", "--data", s(&dir.path().join("missing.csv")), "--out", s(&out)]), 3);
}

#[test]
fn train_outputs_and_determinism() {
    let f = fixture();
    let log = fs::read_to_string(f.ckpt.with_extension("epochs.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);

    let again = f.root.join("again.hdt");
    let cfg = f.root.join("cfg.json");
    ok(&with(&["train", "--config", s(&cfg), "--out", s(&again)], &data_flags(&f)));
    assert_eq!(checkpoint::sha256_hex(&fs::read(&f.ckpt).unwrap()), checkpoint::sha256_hex(&fs::read(&again).unwrap()));

    let other = f.root.join("other.hdt");
    ok(&with(&["train", "--config", s(&cfg), "--seed", "5", "--out", s(&other)], &data_flags(&f)));
    assert_ne!(fs::read(&f.ckpt).unwrap(), fs::read(&other).unwrap());
    assert_eq!(checkpoint::load(&other).unwrap().config.seed, 5);

    let zero = f.root.join("zero.hdt");
    ok(&with(&["train", "--config", s(&cfg), "--epochs", "0", "--out", s(&zero)], &data_flags(&f)));
    let ck = checkpoint::load(&zero).unwrap();
    assert_eq!(ck.state.epoch, 0);
    assert_eq!(fs::read_to_string(zero.with_extension("epochs.csv")).unwrap().lines().count(), 1);
}

#[test]
fn train_usage_errors() {
    let f = fixture();
    let out = f.root.join("x.hdt");
    assert_eq!(code(&with(&["train", "--bogus-flag", "--out", s(&out)], &data_flags(&f))), 2);
    assert_eq!(code(&with(&["train", "--set", "epochz=3", "--out", s(&out)], &data_flags(&f))), 2);
    assert_eq!(code(&with(&["train", "--batch-size", "0", "--out", s(&out)], &data_flags(&f))), 2);
    let bad = f.root.join("bad.csv");
    fs::write(&bad, "a,b\n1,2\n3\n").unwrap();
    assert_eq!(code(&["train", "--data", s(&bad), "--out", s(&out)]), 3);
}

#[test]
fn model_commands() {
    let f = fixture();
    let ck = checkpoint::load(&f.ckpt).unwrap();
    let flags = data_flags(&f);

    let embed = f.root.join("embed.csv");
    ok(&with(&["embed", "--checkpoint", s(&f.ckpt), "--out", s(&embed)], &flags));
    let text = fs::read_to_string(&embed).unwrap();
    assert!(text.lines().next().unwrap().starts_with("sample,z0,z1,z2,z3,c0,"));
    assert!(text.lines().next().unwrap().ends_with(",l1,l2"));
    assert_eq!(text.lines().count(), 1 + 140);

    let tree = f.root.join("tree.json");
    ok(&with(&["tree", "--checkpoint", s(&f.ckpt), "--out", s(&tree)], &flags));
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(&tree).unwrap()).unwrap();
    assert_eq!(doc["nodes"].as_array().unwrap().len(), 7);
    assert_eq!(doc["nodes"][0]["occupancy"], 140);

    let (g1, g2) = (f.root.join("g1.csv"), f.root.join("g2.csv"));
    for g in [&g1, &g2] {
        ok(&["generate", "--checkpoint", s(&f.ckpt), "--leaf", "2", "--count", "5", "--seed", "3", "--out", s(g)]);
    }
    assert_eq!(fs::read(&g1).unwrap(), fs::read(&g2).unwrap());
    assert_eq!(fs::read_to_string(&g1).unwrap().lines().count(), 6);
    ok(&["generate", "--checkpoint", s(&f.ckpt), "--path", "1,2", "--out", s(&g2)]);
    assert_eq!(code(&["generate", "--checkpoint", s(&f.ckpt), "--leaf", "4", "--out", s(&g2)]), 2);
    assert_eq!(code(&["generate", "--checkpoint", s(&f.ckpt), "--path", "0,3", "--out", s(&g2)]), 2);

    let lin = f.root.join("lin");
    ok(&with(&["lineage", "--checkpoint", s(&f.ckpt), "--from", "7", "--to", "7", "--out", s(&lin)], &flags));
    let traj: serde_json::Value = serde_json::from_slice(&fs::read(f.root.join("lin.json")).unwrap()).unwrap();
    assert_eq!(traj["nodes"].as_array().unwrap().len(), 1);
    assert_eq!(traj["total_weight"], 0.0);
    ok(&["lineage", "--checkpoint", s(&f.ckpt), "--from", "2:0", "--to", "2:3", "--k", "0", "--out", s(&lin)]);
    let traj: serde_json::Value = serde_json::from_slice(&fs::read(f.root.join("lin.json")).unwrap()).unwrap();
    let levels: Vec<u64> = traj["nodes"].as_array().unwrap().iter().map(|n| n["level"].as_u64().unwrap()).collect();
    assert_eq!(levels, vec![2, 1, 0, 1, 2]);
    let csv_rows = fs::read_to_string(f.root.join("lin.csv")).unwrap().lines().count();
    assert_eq!(csv_rows, 1 + 5);
    assert_eq!(code(&["lineage", "--checkpoint", s(&f.ckpt), "--from", "3:0", "--to", "2:0", "--out", s(&lin)]), 2);
    assert_eq!(code(&["lineage", "--checkpoint", s(&f.ckpt), "--from", "0", "--to", "1", "--out", s(&lin)]), 2);

    let eval = f.root.join("eval.csv");
    ok(&with(&["evaluate", "--checkpoint", s(&f.ckpt), "--dataset", "synth", "--seed", "2", "--out", s(&eval)], &flags));
    let opts = CsvOptions { header: true, label: Some(Column::Name("label".into())), timestamp: Some(Column::Name("time".into())) };
    let ds = io::load_csv(&f.data, &opts).unwrap();
    let direct = evaluate_model(&ck.model, &ds, "synth", 2, &EvalOptions { seed: 2, ..Default::default() }).unwrap();
    assert_eq!(fs::read_to_string(&eval).unwrap(), metrics_csv(&[direct]));

    let base = f.root.join("base.csv");
    ok(&with(&["baseline", "--method", "ward-raw", "--out", s(&base)], &flags));
    let text = fs::read_to_string(&base).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("data,ward-raw,0,"));
    ok(&with(&["baseline", "--method", "ward-embedding", "--checkpoint", s(&f.ckpt), "--out", s(&base)], &flags));
    assert_eq!(code(&with(&["baseline", "--method", "ward-embedding", "--out", s(&base)], &flags)), 2);
}

#[test]
fn missing_checkpoint_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.hdt");
    let out = dir.path().join("t.json");
    assert_eq!(code(&["tree", "--checkpoint", s(&missing), "--out", s(&out)]), 2);
    let junk = dir.path().join("junk.hdt");
    fs::write(&junk, b"HDT1 not really").unwrap();
    assert_eq!(code(&["tree", "--checkpoint", s(&junk), "--out", s(&out)]), 3);
    let out = Command::new(env!("CARGO_BIN_EXE_hdtree"))
        .args(["tree", "--checkpoint", s(&missing), "--out", s(&out)])
        .env("HDTREE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(code(&["no-such-command"]), 2);
}
