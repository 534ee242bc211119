use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fewshot_nas::evaloracle::{OracleTable, SyntheticOracle};
use fewshot_nas::partition::Partition;
use fewshot_nas::seed;
use fewshot_nas::supernet::SupernetStore;
use fewshot_nas::SearchSpace;

/// Small synthetic data: 64 training samples after the half split, one step per epoch.
const SMALL: &str = "[data]\ntrain_per_class = 32\ntest_per_class = 8\n[train]\nbatch_size = 64\n";

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.toml"), SMALL).unwrap();
        Run { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn fsnas(&self, args: &[&str]) -> Output {
        let config = self.path("run.toml");
        let out = self.path("out");
        Command::new(env!("CARGO_BIN_EXE_fsnas"))
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.fsnas(args);
        assert!(o.status.success(), "fsnas {args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }

    fn out(&self, name: &str) -> PathBuf {
        self.path("out").join(name)
    }

    fn read(&self, name: &str) -> String {
        std::fs::read_to_string(self.out(name)).unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// Data rows of a CSV artifact: comment lines and the header dropped.
fn rows(text: &str) -> Vec<Vec<String>> {
    text.lines().filter(|l| !l.starts_with('#')).skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

fn write_oracle(path: &Path) {
    let space = SearchSpace::desk27();
    let t = SyntheticOracle { seed: 5, ..Default::default() }.build(&space, "synthetic", 100).unwrap();
    t.write_csv(path, "test oracle").unwrap();
}

#[test]
fn exit_codes() {
    let r = Run::new();
    let bare = Command::new(env!("CARGO_BIN_EXE_fsnas")).output().unwrap();
    assert_eq!(code(&bare), 2);
    assert_eq!(code(&r.fsnas(&["frobnicate"])), 2);
    assert_eq!(code(&r.fsnas(&["--k", "0", "split"])), 2);
    assert_eq!(code(&r.fsnas(&["--g", "3", "split"])), 2);
    assert_eq!(code(&r.fsnas(&["--space", "nope", "split"])), 2);
    assert_eq!(code(&r.fsnas(&["train"])), 2, "train before split");
    r.ok(&["split"]);
    assert_eq!(code(&r.fsnas(&["eval-rank"])), 2, "no oracle");
    assert_eq!(code(&r.fsnas(&["search", "--constraint", "latency:3"])), 2);
    std::fs::write(r.out("checkpoint.bin"), b"garbage").unwrap();
    assert_eq!(code(&r.fsnas(&["train", "--resume"])), 1, "corrupt checkpoint is a runtime failure");

    let bad = tempfile::tempdir().unwrap();
    let cfg = bad.path().join("bad.toml");
    std::fs::write(&cfg, "sed = 1\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_fsnas")).arg("--config").arg(&cfg).arg("split").output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn split_with_one_supernet() {
    let r = Run::new();
    r.ok(&["--k", "1", "split"]);
    let p = Partition::load(&r.out("partition.json")).unwrap();
    assert_eq!((p.k, p.subspace_sizes.clone()), (1, vec![27]));
    assert!(p.bin_edges.is_empty());
}

#[test]
fn split_nas201_covers_space() {
    let r = Run::new();
    let stdout = r.ok(&["--space", "nas201", "--k", "3", "split"]);
    let p = Partition::load(&r.out("partition.json")).unwrap();
    assert_eq!(p.subspace_sizes.iter().sum::<u64>(), 15_625);
    assert!(p.exact);
    assert!(stdout.contains("sum 15625"));
    assert_eq!(rows(&r.read("partition_summary.csv")).len(), 3);
    let manifest: serde_json::Value = serde_json::from_str(&r.read("manifest.json")).unwrap();
    assert!(manifest["artifacts"]["partition.json"]["sha256"].is_string());
    assert_eq!(manifest["seeds"]["partition"], seed::derive(0, "partition"));
}

#[test]
fn zero_epochs_leaves_initial_weights() {
    let r = Run::new();
    r.ok(&["--seed", "4", "split"]);
    r.ok(&["--seed", "4", "train", "--epochs", "0"]);
    let space = SearchSpace::desk27();
    let trained = SupernetStore::<f32>::load(&r.out("checkpoint.bin"), &space).unwrap();
    let p = Partition::load(&r.out("partition.json")).unwrap();
    let init = SupernetStore::<f32>::init(&space, &p, 2, seed::derive(4, "init")).unwrap();
    for k in 0..3 {
        assert_eq!(trained.net(k).checksum(), init.net(k).checksum());
    }
    assert_eq!(trained.update_counts(), vec![0; 3]);
}

#[test]
fn hundred_steps_update_every_supernet() {
    let r = Run::new();
    r.ok(&["split"]);
    r.ok(&["train", "--epochs", "100"]);
    let store = SupernetStore::<f32>::load(&r.out("checkpoint.bin"), &SearchSpace::desk27()).unwrap();
    assert_eq!(store.step, 100);
    assert_eq!(store.update_counts(), vec![100; 3]);
    let steps = rows(&r.read("train_steps.csv"));
    assert_eq!(steps.len(), 300);
    assert!(steps.iter().all(|row| row[4].parse::<f64>().unwrap().is_finite()));
}

#[test]
fn resume_matches_uninterrupted_training() {
    let a = Run::new();
    a.ok(&["split"]);
    a.ok(&["train", "--epochs", "4", "--stop-after", "2"]);
    let out = a.ok(&["train", "--epochs", "4", "--resume"]);
    assert!(out.contains("steps 2..4"), "{out}");

    let b = Run::new();
    b.ok(&["split"]);
    b.ok(&["train", "--epochs", "4"]);
    assert_eq!(std::fs::read(a.out("checkpoint.bin")).unwrap(), std::fs::read(b.out("checkpoint.bin")).unwrap());
}

#[test]
fn uniform_mode_needs_one_supernet() {
    let r = Run::new();
    r.ok(&["split"]);
    assert_eq!(code(&r.fsnas(&["train", "--mode", "uniform", "--epochs", "1"])), 2);
    r.ok(&["--k", "1", "split"]);
    r.ok(&["--k", "1", "train", "--mode", "uniform", "--epochs", "1"]);
}

#[test]
fn search_is_deterministic_and_idempotent() {
    let r = Run::new();
    r.ok(&["split"]);
    r.ok(&["train", "--epochs", "2"]);
    r.ok(&["search", "--generations", "3"]);
    let first = (r.read("search_result.json"), r.read("search_history.csv"), r.read("manifest.json"));
    r.ok(&["search", "--generations", "3"]);
    assert_eq!(first, (r.read("search_result.json"), r.read("search_history.csv"), r.read("manifest.json")));
    let result: serde_json::Value = serde_json::from_str(&first.0).unwrap();
    assert_eq!(result["seed"], seed::derive(0, "search"));
    assert_eq!(result["partition_hash"], Partition::load(&r.out("partition.json")).unwrap().hash());
}

#[test]
fn oracle_search_finds_exhaustive_best() {
    let r = Run::new();
    let oracle = r.path("oracle.csv");
    write_oracle(&oracle);
    let o = oracle.to_str().unwrap();
    r.ok(&["split"]);
    r.ok(&["--oracle", o, "search", "--fitness", "oracle", "--exhaustive"]);
    let exact: serde_json::Value = serde_json::from_str(&r.read("search_result.json")).unwrap();
    r.ok(&["--oracle", o, "search", "--fitness", "oracle"]);
    let evolved: serde_json::Value = serde_json::from_str(&r.read("search_result.json")).unwrap();
    assert_eq!(exact["encoding"], evolved["encoding"]);
    let table = OracleTable::load(&oracle).unwrap();
    assert_eq!(exact["encoding"], table.best("synthetic").unwrap().0);

    r.ok(&["--oracle", o, "search", "--fitness", "oracle", "--constraint", "flops:inf"]);
    let unbounded: serde_json::Value = serde_json::from_str(&r.read("search_result.json")).unwrap();
    assert_eq!(unbounded["encoding"], evolved["encoding"]);
}

#[test]
fn eval_rank_against_own_estimates_is_perfect() {
    let r = Run::new();
    let oracle = r.path("oracle.csv");
    write_oracle(&oracle);
    r.ok(&["split"]);
    r.ok(&["train", "--epochs", "3"]);
    r.ok(&["--oracle", oracle.to_str().unwrap(), "eval-rank", "--top-m", "1000"]);
    let summary = rows(&r.read("rank_summary.csv"));
    assert_eq!(summary[0][..2], ["27".to_string(), "27".to_string()], "top-M clamps to the subnet count");

    // Rebuild the oracle from the estimates themselves.
    let mut mirror = OracleTable::new("mirror");
    for row in rows(&r.read("rank_scatter.csv")) {
        let code: u64 = row[0].parse().unwrap();
        let est: f64 = row[2].parse().unwrap();
        let space = SearchSpace::desk27();
        let s = space.decode(code).unwrap();
        mirror
            .insert("synthetic", code, fewshot_nas::evaloracle::OracleRow {
                accuracy: est,
                flops: space.flops(&s, 1).unwrap(),
                params: space.param_count(&s, 1).unwrap(),
            })
            .unwrap();
    }
    let mirror_path = r.path("mirror.csv");
    mirror.write_csv(&mirror_path, "mirror").unwrap();
    let out = r.ok(&["--oracle", mirror_path.to_str().unwrap(), "eval-rank"]);
    let tau: f64 = rows(&r.read("rank_summary.csv"))[0][2].parse().unwrap();
    assert_eq!(tau, 1.0, "{out}");
}

#[test]
fn split_is_idempotent() {
    let r = Run::new();
    r.ok(&["split"]);
    let names = ["partition.json", "partition_hist.csv", "partition_summary.csv", "manifest.json"];
    let first: Vec<String> = names.iter().map(|n| r.read(n)).collect();
    r.ok(&["split"]);
    let second: Vec<String> = names.iter().map(|n| r.read(n)).collect();
    assert_eq!(first, second);
}

#[test]
fn enumerate_lists_every_subnet() {
    let r = Run::new();
    let text = r.ok(&["enumerate"]);
    let data = rows(&text);
    assert_eq!(data.len(), 27);
    assert_eq!(data[26][0], "26");
    assert_eq!(data[26][2], "3");
}
