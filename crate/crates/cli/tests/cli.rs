use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mat_core::model::AttentionDump;

fn mat(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mat"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn mat")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = mat(args, cwd);
    assert!(
        out.status.success(),
        "mat {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const CONFIG: &str = "[model]\nd_model = 16\nn_layers = 1\nn_heads = 2\ntask = \"binary\"\n\n[train]\nepochs = 2\nbatch_size = 16\n";

/// A temp dir holding a 100-molecule toy set in `toy/` and `cfg.toml`.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.toml"), CONFIG).unwrap();
    ok(&["toygen", "--n", "100", "--seed", "4", "--out", "toy"], dir.path());
    dir
}

fn read_csv(path: PathBuf) -> Vec<(String, f64)> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].to_string(), rec[rec.len() - 1].parse().unwrap())
        })
        .collect()
}

#[test]
fn toygen_is_deterministic_and_balanced() {
    let dir = workspace();
    ok(&["toygen", "--n", "100", "--seed", "4", "--out", "again"], dir.path());
    for f in ["toy.csv", "toy.sdf", "toy_info.txt"] {
        assert_eq!(
            fs::read(dir.path().join("toy").join(f)).unwrap(),
            fs::read(dir.path().join("again").join(f)).unwrap(),
            "{f}"
        );
    }
    let info = fs::read_to_string(dir.path().join("toy/toy_info.txt")).unwrap();
    let frac: f64 = info
        .lines()
        .find_map(|l| l.strip_prefix("positive_fraction\t"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.45..=0.55).contains(&frac), "{frac}");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("toy/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "toygen");
    assert_eq!(manifest["seed"], 4);
    assert!(manifest["build_id"].as_str().unwrap().starts_with("0.1.0"));
}

#[test]
fn train_predict_eval_and_manifest_replay() {
    let dir = workspace();
    let p = dir.path();
    ok(&["train", "--config", "cfg.toml", "--data", "toy/toy.csv", "--out", "a"], p);
    for f in ["model.ckpt", "history.jsonl", "curve.tsv", "predictions.csv", "metrics.json", "manifest.json"] {
        assert!(p.join("a").join(f).exists(), "{f}");
    }
    let curve = fs::read_to_string(p.join("a/curve.tsv")).unwrap();
    assert_eq!(curve.lines().count(), 3);

    // Same inputs through the saved checkpoint: the in-training test-fold
    // predictions, up to f32 storage of the weights.
    ok(&["predict", "--checkpoint", "a/model.ckpt", "--data", "toy/toy.csv", "--out", "p"], p);
    let trained = read_csv(p.join("a/predictions.csv"));
    let predicted: std::collections::HashMap<String, f64> = read_csv(p.join("p/predictions.csv")).into_iter().collect();
    assert!(!trained.is_empty());
    for (input, y) in &trained {
        let z = predicted[input];
        assert!((y - z).abs() <= 1e-5, "{input}: {y} vs {z}");
    }

    ok(&["eval", "--checkpoint", "a/model.ckpt", "--data", "toy/toy.csv", "--out", "e"], p);
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("e/metrics.json")).unwrap()).unwrap();
    let auc = metrics["metric"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));

    // Replaying from the manifest reproduces every output byte for byte.
    ok(&["train", "--config", "a/manifest.json", "--data", "toy/toy.csv", "--out", "b"], p);
    for f in ["model.ckpt", "history.jsonl", "curve.tsv", "predictions.csv", "metrics.json"] {
        assert_eq!(fs::read(p.join("a").join(f)).unwrap(), fs::read(p.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn exit_codes() {
    let dir = workspace();
    let p = dir.path();
    let code = |args: &[&str]| mat(args, p).status.code().unwrap();

    assert_eq!(code(&["train", "--data", "missing.csv", "--out", "x"]), 4);
    fs::write(p.join("bad.toml"), "[model]\nbogus = 1\n").unwrap();
    assert_eq!(code(&["train", "--config", "bad.toml", "--data", "toy/toy.csv", "--out", "x"]), 2);
    assert_eq!(code(&["train", "--no-such-flag"]), 2);
    assert_eq!(code(&["train", "--config", "cfg.toml", "--data", "toy/toy.csv", "--lambda-a", "-1", "--out", "x"]), 2);
    let huge = ["train", "--config", "cfg.toml", "--data", "toy/toy.csv", "--lambda-a", "1e308", "--lambda-d", "1e308", "--out", "x"];
    assert_eq!(code(&huge), 3);
    // A zero tolerance cannot be met.
    assert_eq!(code(&["gradcheck", "--tol", "0", "--out", "g"]), 3);
    assert_eq!(code(&["gradcheck", "--out", "g"]), 0);
    assert!(fs::read_to_string(p.join("g/gradcheck.tsv")).unwrap().lines().count() > 200);
}

#[test]
fn attention_dump_recombines() {
    let dir = workspace();
    let p = dir.path();
    fs::write(p.join("benzene.csv"), "input\nc1ccccc1\n").unwrap();
    let cfg = "[model]\nd_model = 16\nn_layers = 1\nn_heads = 2\ntask = \"binary\"\nkernel = \"softmax_rows\"\nlambda_a = 0.5\nlambda_d = 0.3\nlambda_g = 0.2\n\n[train]\nepochs = 1\n";
    fs::write(p.join("soft.toml"), cfg).unwrap();
    ok(&["train", "--config", "soft.toml", "--data", "toy/toy.csv", "--out", "m"], p);
    ok(
        &[
            "attn-dump", "--checkpoint", "m/model.ckpt", "--data", "benzene.csv", "--distance-fallback", "topo", "--out", "d",
        ],
        p,
    );
    let read = |term: &str| AttentionDump::read(&p.join(format!("d/mol0.{term}.attn"))).unwrap();
    let (comp, soft, dist, adj) = (read("composite"), read("softmax"), read("distance"), read("adjacency"));
    assert_eq!(comp.n, 7);
    let [la, ld, lg] = comp.lambdas;
    let mut worst = 0.0f64;
    for h in 0..comp.heads {
        for i in 0..comp.n {
            for j in 0..comp.n {
                let sum = la * f64::from(soft.at(0, h, i, j))
                    + ld * f64::from(dist.at(0, h, i, j))
                    + lg * f64::from(adj.at(0, h, i, j));
                worst = worst.max((sum - f64::from(comp.at(0, h, i, j))).abs());
            }
            // Every addend is row-stochastic on the six ring atoms.
            if i < 6 {
                let row: f64 = (0..comp.n).map(|j| f64::from(comp.at(0, h, i, j))).sum();
                assert!((row - 1.0).abs() < 1e-5, "row {i}: {row}");
            }
        }
    }
    assert!(worst < 1e-6, "{worst}");
    let summary = fs::read_to_string(p.join("d/summary.txt")).unwrap();
    assert!(summary.contains("layer 0 head 1:"));
}

#[test]
fn stats_sweep_ablate_and_pretrain() {
    let dir = workspace();
    let p = dir.path();
    ok(&["train", "--config", "cfg.toml", "--data", "toy/toy.csv", "--out", "m"], p);
    ok(&["attn-stats", "--checkpoint", "m/model.ckpt", "--data", "toy/toy.csv", "--out", "s"], p);
    let stats = fs::read_to_string(p.join("s/stats.tsv")).unwrap();
    // Header plus 6 patterns × 2 heads.
    assert_eq!(stats.lines().count(), 13);
    let one = mat(&["attn-stats", "--checkpoint", "m/model.ckpt", "--data", "toy/toy.csv", "--pattern", "zz", "--out", "s"], p);
    assert_eq!(one.status.code(), Some(2));

    ok(&["sweep", "--config", "cfg.toml", "--data", "toy/toy.csv", "--budget", "2", "--out", "w"], p);
    let lines = fs::read_to_string(p.join("w/sweep.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
    assert!(p.join("w/best.json").exists());

    ok(&["ablate", "--config", "cfg.toml", "--data", "toy/toy.csv", "--lambda-d-grid", "0,1", "--out", "ab"], p);
    let tsv = fs::read_to_string(p.join("ab/ablation.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 3);
    assert!(tsv.lines().nth(2).unwrap().starts_with("0\t1\t0\t"));

    ok(&["pretrain", "--config", "cfg.toml", "--data", "toy/toy.sdf", "--steps", "3", "--out", "pt"], p);
    ok(
        &["train", "--config", "cfg.toml", "--data", "toy/toy.csv", "--pretrained", "pt/pretrained.ckpt", "--out", "ft"],
        p,
    );
    ok(
        &["sweep", "--config", "cfg.toml", "--data", "toy/toy.csv", "--pretrained", "pt/pretrained.ckpt", "--out", "fs"],
        p,
    );
    let lines = fs::read_to_string(p.join("fs/sweep.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 7);
}
