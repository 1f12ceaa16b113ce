use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tailgeo::pointcloud::{read_cloud, write_cloud, CloudFormat, LabeledPointCloud};

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// A run configuration small enough to train in a few seconds.
    fn new(overrides: &str) -> Workspace {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out").display().to_string();
        let mut keys: BTreeMap<&str, &str> = [
            ("run.id", "t"),
            ("run.out", out.as_str()),
            ("run.seeds", "1"),
            ("run.format", "csv"),
            ("scene.points", "4000"),
            ("scene.val_points", "2000"),
            ("train.epochs", "2"),
            ("train.hidden", "8"),
            ("features.k_context", "24"),
            ("features.coarse_stride", "2"),
            ("loss.k", "8"),
        ]
        .into_iter()
        .collect();
        for line in overrides.lines() {
            let (k, v) = line.split_once('=').unwrap();
            keys.insert(k.trim(), v.trim());
        }
        let text: String = keys.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        fs::write(dir.path().join("run.txt"), text).unwrap();
        Workspace { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("run.txt")
    }

    fn run_dir(&self) -> PathBuf {
        self.dir.path().join("out").join("t")
    }

    fn tailgeo(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_tailgeo"));
        cmd.args(args);
        if args.first().is_some_and(|a| !a.starts_with('-')) && !args.contains(&"--config") {
            cmd.arg("--config").arg(self.config());
        }
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.tailgeo(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn hash_tree(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let digest = Sha256::digest(fs::read(&path).unwrap());
                let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
                out.insert(path.strip_prefix(root).unwrap().display().to_string(), hex);
            }
        }
    }
    out
}

fn manifest_fractions(ws: &Workspace, seed: u64) -> BTreeMap<String, Vec<(f64, u64)>> {
    let text = fs::read_to_string(ws.run_dir().join(format!("seed-{seed}/manifest.csv"))).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "split,seed,attempt_seed,class,name,target_fraction,realized_fraction,count,instances"
    );
    let mut by_split: BTreeMap<String, Vec<(f64, u64)>> = BTreeMap::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        by_split
            .entry(f[0].to_string())
            .or_default()
            .push((f[6].parse().unwrap(), f[7].parse().unwrap()));
    }
    by_split
}

#[test]
fn generate_writes_consistent_manifests_and_is_reproducible() {
    let ws = Workspace::new("");
    ws.ok(&["generate", "--seeds", "1,2"]);
    for seed in [1, 2] {
        let splits = manifest_fractions(&ws, seed);
        assert_eq!(splits.len(), 2);
        for rows in splits.values() {
            assert_eq!(rows.len(), 12);
            let sum: f64 = rows.iter().map(|r| r.0).sum();
            assert!((sum - 1.0).abs() < 1e-4, "fractions sum to {sum}");
        }
    }
    let first = hash_tree(&ws.run_dir());
    assert!(first.contains_key("config.txt"));
    ws.ok(&["generate", "--seeds", "1,2"]);
    assert_eq!(first, hash_tree(&ws.run_dir()));
}

#[test]
fn imbalance_ratio_is_honoured() {
    let ws = Workspace::new("scene.imbalance_ratio = 100\nscene.points = 30000");
    ws.ok(&["generate"]);
    let counts: Vec<u64> = manifest_fractions(&ws, 1)["train"]
        .iter()
        .map(|r| r.1)
        .collect();
    let ratio = *counts.iter().max().unwrap() as f64 / *counts.iter().min().unwrap() as f64;
    assert!((85.0..=115.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn stats_and_zero_epoch_training() {
    let ws = Workspace::new("train.epochs = 0");
    ws.ok(&["generate"]);
    ws.ok(&["stats"]);
    let stats = fs::read_to_string(ws.run_dir().join("seed-1/stats.csv")).unwrap();
    assert_eq!(stats.lines().count(), 13);
    ws.ok(&["train"]);
    let history = fs::read_to_string(ws.run_dir().join("seed-1/ce/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1);
}

#[test]
fn each_loss_family_gets_its_own_report() {
    let ws = Workspace::new("");
    ws.ok(&["generate"]);
    for family in ["ce", "boundary_cb"] {
        let cfg = fs::read_to_string(ws.config()).unwrap() + &format!("loss.family = {family}\n");
        let path = ws.dir.path().join(format!("{family}.txt"));
        fs::write(&path, cfg).unwrap();
        let out = ws.tailgeo(&["train", "--config", path.to_str().unwrap()]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for family in ["ce", "boundary_cb"] {
        let metrics =
            fs::read_to_string(ws.run_dir().join(format!("seed-1/{family}/metrics.csv"))).unwrap();
        assert_eq!(metrics.lines().count(), 1 + 12 + 6);
        assert_eq!(
            fs::read_to_string(ws.run_dir().join(format!("seed-1/{family}/history.csv")))
                .unwrap()
                .lines()
                .count(),
            3
        );
    }
}

#[test]
fn evaluate_scores_oracle_predictions_perfectly() {
    let ws = Workspace::new("");
    ws.ok(&["generate"]);
    let scene = ws.run_dir().join("seed-1/val.csv");
    let cloud = read_cloud(&scene, CloudFormat::Csv).unwrap();
    let oracle: String = cloud.labels().iter().map(|l| format!("{l}\n")).collect();
    let preds = ws.dir.path().join("oracle.txt");
    fs::write(&preds, oracle).unwrap();

    let out = ws.ok(&[
        "evaluate",
        "--predictions",
        preds.to_str().unwrap(),
        "--scene",
        scene.to_str().unwrap(),
    ]);
    let report = String::from_utf8(out.stdout).unwrap();
    assert_eq!(report.lines().count(), 1 + 12 + 6);
    for line in report.lines().filter(|l| l.starts_with("class,")) {
        assert!(line.contains(",1.000000,"), "{line}");
    }
    assert!(report.contains("summary,miou,1.000000,"));
    assert!(report.contains("summary,h_iou,1.000000,"));
    let written = ws.run_dir().join("eval-val/metrics.csv");
    assert_eq!(fs::read_to_string(written).unwrap(), report);
}

#[test]
fn evaluate_with_a_trained_model_and_class_mismatch() {
    let ws = Workspace::new("");
    ws.ok(&["generate"]);
    ws.ok(&["train"]);
    let model = ws.run_dir().join("seed-1/ce/model.tlgm");
    let scene = ws.run_dir().join("seed-1/val.csv");
    let out = ws.ok(&[
        "evaluate",
        "--model",
        model.to_str().unwrap(),
        "--scene",
        scene.to_str().unwrap(),
    ]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 19);

    let three = ws.dir.path().join("three.csv");
    let cloud = LabeledPointCloud::new(
        vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        vec![0, 1, 2],
        3,
    )
    .unwrap();
    write_cloud(&cloud, &three, CloudFormat::Csv).unwrap();
    let out = ws.tailgeo(&[
        "evaluate",
        "--model",
        model.to_str().unwrap(),
        "--scene",
        three.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn ablation_summaries_have_one_row_per_cell_plus_medians() {
    let ws = Workspace::new("train.epochs = 1");
    ws.ok(&["generate", "--seeds", "1,2,3"]);
    ws.ok(&["ablate", "--seeds", "1,2,3", "--sweep", "alpha=0.5"]);
    let summary = fs::read_to_string(ws.run_dir().join("ablate-alpha/summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 3 + 1);
    assert!(rows[3].starts_with("alpha,0.5,median,"));

    ws.ok(&["ablate", "--sweep", "k=4,8,16,32,64"]);
    let summary = fs::read_to_string(ws.run_dir().join("ablate-k/summary.csv")).unwrap();
    let medians: Vec<&str> = summary.lines().filter(|l| l.contains(",median,")).collect();
    assert_eq!(medians.len(), 5);
    for k in [4, 8, 16, 32, 64] {
        assert!(ws
            .run_dir()
            .join(format!("ablate-k/k={k}/seed-1/metrics.csv"))
            .exists());
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let ws = Workspace::new("");
    for sweep in ["k=", "gamma=1,2", "k=1,x", "nonsense"] {
        let out = ws.tailgeo(&["ablate", "--sweep", sweep]);
        assert_eq!(code(&out), 2, "sweep {sweep}");
    }
    assert_eq!(
        code(&ws.tailgeo(&["train"])),
        2,
        "training before generating"
    );
    assert_eq!(code(&ws.tailgeo(&["--bogus"])), 2);
    assert_eq!(code(&ws.tailgeo(&["evaluate", "--scene", "x.csv"])), 2);

    let bad = ws.dir.path().join("bad.txt");
    fs::write(&bad, "loss.k = many\n").unwrap();
    let out = ws.tailgeo(&["generate", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let missing = ws.tailgeo(&["generate", "--config", "/nonexistent/run.txt"]);
    assert_ne!(code(&missing), 0);
}
