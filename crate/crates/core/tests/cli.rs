use std::path::Path;
use std::process::{Command, Output};

fn mcmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcmt"))
        .args(args)
        .env_remove("MCMT_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    o
}

const TINY: &str = "profile = \"synthetic\"\nd_h = 16\nlayers = 1\nheads = 2\nbatch_size = 8\nepochs = 1\n";

/// Synthetic corpus, tiny config and one trained epoch.
struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        let ws = Self { dir };
        ok(mcmt(&["synth", "--out", &ws.path("data"), "--n-train", "16", "--n-test", "4"]));
        let o = ok(mcmt(&[
            "--config",
            &ws.path("tiny.toml"),
            "train",
            "--data-dir",
            &ws.path("data"),
            "--out",
            &ws.path("run"),
        ]));
        assert!(stdout(&o).contains("wrote 2 checkpoints"), "{}", stdout(&o));
        ws
    }

    fn path(&self, rel: &str) -> String {
        self.dir.path().join(rel).display().to_string()
    }

    fn checkpoint(&self) -> String {
        self.path("run/epoch_001.ckpt")
    }
}

#[test]
fn help_for_every_subcommand() {
    ok(mcmt(&["--help"]));
    for sub in ["train", "eval", "infer", "synth", "inspect-masks"] {
        let o = ok(mcmt(&[sub, "--help"]));
        assert!(stdout(&o).contains("Usage"), "{sub}");
    }
}

#[test]
fn missing_config_names_the_path() {
    let o = mcmt(&["--config", "/nonexistent/cfg.toml", "train", "--data-dir", "/tmp", "--out", "/tmp/x"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/nonexistent/cfg.toml"), "{}", stderr(&o));
}

#[test]
fn activitynet_profile_dump() {
    let o = ok(mcmt(&["--profile", "activitynet", "train", "--data-dir", ".", "--dry-run"]));
    let cfg: toml::Table = stdout(&o).parse().unwrap();
    assert_eq!(cfg["learning_rate"].as_float(), Some(4e-4));
    assert_eq!(cfg["d_v"].as_integer(), Some(512));
    assert_eq!(cfg["vocab_size"].as_integer(), Some(8000));
    assert_eq!(cfg["alpha"].as_float(), Some(5.0));
    assert_eq!(cfg["batch_size"].as_integer(), Some(64));
}

#[test]
fn invalid_profile_is_rejected() {
    let o = mcmt(&["--profile", "kinetics", "train", "--data-dir", ".", "--dry-run"]);
    assert!(!o.status.success());
}

#[test]
fn synth_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let read = |sub: &str, seed: &str| {
        let out = dir.path().join(sub);
        ok(mcmt(&["--seed", seed, "synth", "--out", out.to_str().unwrap(), "--n-train", "3", "--n-test", "2"]));
        std::fs::read(out.join("manifest.jsonl")).unwrap()
    };
    assert_eq!(read("a", "5"), read("b", "5"));
    assert_ne!(read("a", "5"), read("c", "6"));
}

#[test]
fn end_to_end() {
    let ws = Workspace::new();
    assert!(Path::new(&ws.path("run/epoch_000.ckpt")).exists());
    let metrics = std::fs::read_to_string(ws.path("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    // Both strategies run on one checkpoint and print the threshold table.
    for strategy in ["vote", "attn"] {
        let pred = ws.path(&format!("pred_{strategy}.jsonl"));
        let o = ok(mcmt(&[
            "--strategy",
            strategy,
            "eval",
            "--checkpoint",
            &ws.checkpoint(),
            "--data-dir",
            &ws.path("data"),
            "--predictions",
            &pred,
        ]));
        let table = stdout(&o);
        let header = table.lines().next().unwrap();
        for col in ["R@1,IoU=0.3", "R@1,IoU=0.5", "R@1,IoU=0.7", "mIoU"] {
            assert!(header.contains(col), "{header}");
        }
        assert!(table.lines().nth(1).unwrap().starts_with(strategy));
        assert_eq!(std::fs::read_to_string(&pred).unwrap().lines().count(), 4);
    }

    // Inference is repeatable.
    let infer = |video: &str| {
        mcmt(&[
            "infer",
            "--checkpoint",
            &ws.checkpoint(),
            "--data-dir",
            &ws.path("data"),
            "--video-id",
            video,
            "--query",
            "a person act01 the attr02 obj03",
        ])
    };
    let first = stdout(&ok(infer("syn_test_00000")));
    assert_eq!(first, stdout(&ok(infer("syn_test_00000"))));
    let nums: Vec<f64> = first.split_whitespace().map(|t| t.parse().unwrap()).collect();
    assert_eq!(nums.len(), 2);
    assert!(0.0 <= nums[0] && nums[0] <= nums[1]);
    let bad = infer("no_such_video");
    assert!(!bad.status.success());
    assert!(stderr(&bad).contains("no_such_video"));

    // Mask curves: k masks, positive, easy over n_v clips, then the beta row.
    let curves = ws.path("curves.tsv");
    ok(mcmt(&[
        "inspect-masks",
        "--checkpoint",
        &ws.checkpoint(),
        "--data-dir",
        &ws.path("data"),
        "--video-id",
        "syn_train_00001",
        "--query",
        "a person act00 the attr00 obj00",
        "--out",
        &curves,
    ]));
    let text = std::fs::read_to_string(&curves).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split('\t').collect()).collect();
    let k = 3;
    assert_eq!(rows[0].len(), 1 + k + 2);
    assert_eq!(rows.len(), 1 + 32 + 1);
    for row in &rows[1..33] {
        let v: Vec<f64> = row[1..].iter().map(|t| t.parse().unwrap()).collect();
        assert!((v[k + 1] - (1.0 - v[k])).abs() < 2e-6);
    }
    let beta = &rows[33];
    assert_eq!(beta[0], "beta");
    assert_eq!(beta.len(), 1 + k);
    let sum: f64 = beta[1..].iter().map(|t| t.parse::<f64>().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-5);

    // A manifest without ground truth cannot be evaluated.
    let manifest = std::fs::read_to_string(ws.path("data/manifest.jsonl")).unwrap();
    let stripped: String = manifest
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            let o = v.as_object_mut().unwrap();
            o.remove("start");
            o.remove("end");
            format!("{v}\n")
        })
        .collect();
    std::fs::write(ws.path("no_gt.jsonl"), stripped).unwrap();
    let o = mcmt(&[
        "eval",
        "--checkpoint",
        &ws.checkpoint(),
        "--data-dir",
        &ws.path("data"),
        "--manifest",
        &ws.path("no_gt.jsonl"),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("error"), "{}", stderr(&o));

    // An incompatible architecture on the command line is refused.
    let o = mcmt(&[
        "--profile",
        "charades",
        "infer",
        "--checkpoint",
        &ws.checkpoint(),
        "--data-dir",
        &ws.path("data"),
        "--video-id",
        "syn_test_00000",
        "--query",
        "a person",
    ]);
    assert!(!o.status.success());
}

#[test]
fn data_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(mcmt(&["synth", "--out", data.to_str().unwrap(), "--n-train", "2", "--n-test", "1"]));
    let o = Command::new(env!("CARGO_BIN_EXE_mcmt"))
        .args(["infer", "--checkpoint", "/nonexistent.ckpt", "--video-id", "x", "--query", "y"])
        .env("MCMT_DATA_DIR", &data)
        .output()
        .unwrap();
    // Gets past argument parsing and fails on the checkpoint.
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nonexistent.ckpt"), "{}", stderr(&o));
}
