use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dyadformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dyadformer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small synthetic dataset: 10 sessions of 8 chunks.
fn dataset(dir: &Path, seed: u64) -> PathBuf {
    let out = dir.join(format!("data{seed}"));
    let o = dyadformer(&["synth", "--out", p(&out), "--seed", &seed.to_string(), "--sessions", "10", "--chunks", "8"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.join("manifest.jsonl")
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

/// `(metric, value)` of the overall Avg rows of an evaluation CSV.
fn overall_avg(csv: &str) -> BTreeMap<String, f64> {
    csv.lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0] == "Overall" && f[1] == "Avg").then(|| (f[2].to_string(), f[3].parse().unwrap()))
        })
        .collect()
}

#[test]
fn no_arguments_is_a_usage_error() {
    let o = dyadformer(&[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn unknown_subcommand_or_flag_is_a_usage_error() {
    assert_eq!(code(&dyadformer(&["fly"])), 2);
    assert_eq!(code(&dyadformer(&["params", "--bogus"])), 2);
    assert_eq!(code(&dyadformer(&["synth", "--plant", "elsewhere"])), 2);
    assert_eq!(code(&dyadformer(&["--help"])), 0);
}

#[test]
fn runtime_failure_exits_one() {
    let o = dyadformer(&["train", "--manifest", "/nonexistent/manifest.jsonl"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
    assert_eq!(code(&dyadformer(&["train"])), 1);
}

#[test]
fn params_reproduces_reference_counts() {
    let o = dyadformer(&["params"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    for r in ["10.0M", "19.4M", "36.0M", "17.1M", "7.1M", "56.8M"] {
        assert!(out.contains(r), "{r} missing from\n{out}");
    }
    assert!(!out.contains("FAIL"));
}

#[test]
fn params_with_overridden_dimensions_only_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "profile = \"paper\"\n[model]\nd_w = 384\nheads = 6\n").unwrap();
    // Overridden dimensions are counted but not compared.
    let o = dyadformer(&["params", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!stdout(&o).contains('%'));
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for d in [&a, &b] {
        assert_eq!(code(&dyadformer(&["synth", "--seed", "7", "--out", p(d)])), 0);
    }
    assert_eq!(code(&dyadformer(&["synth", "--seed", "8", "--out", p(&c)])), 0);
    let (ta, tb, tc) = (tree(&a), tree(&b), tree(&c));
    assert!(ta.len() > 2);
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
}

#[test]
fn train_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 1);
    let runs: Vec<BTreeMap<PathBuf, Vec<u8>>> = ["r1", "r2"]
        .iter()
        .map(|r| {
            let out = dir.path().join(r);
            let o = dyadformer(&[
                "train", "--manifest", p(&manifest), "--window", "3", "--epochs", "2", "--seed", "3", "--out", p(&out),
            ]);
            assert_eq!(code(&o), 0, "{}", stderr(&o));
            tree(&out)
        })
        .collect();
    assert_eq!(runs[0].len(), 2);
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn single_cell_ablation_equals_direct_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 2);
    let grid = dir.path().join("grid");
    let o = dyadformer(&[
        "ablate", "--manifest", p(&manifest), "--variants", "DF_XM", "--layers", "1", "--windows", "3", "--seeds",
        "5", "--epochs", "2", "--out", p(&grid),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let run = dir.path().join("run");
    let o = dyadformer(&[
        "train", "--manifest", p(&manifest), "--variant", "DF_XM", "--window", "3", "--seed", "5", "--epochs", "2",
        "--out", p(&run),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = dir.path().join("eval.csv");
    let o = dyadformer(&[
        "evaluate", "--manifest", p(&manifest), "--checkpoint", p(&run.join("checkpoint.dyck")), "--window", "3",
        "--split", "test", "--csv", p(&csv),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let cell = grid.join("cells").join("DF_XM_L1_T3_seed5");
    assert_eq!(
        fs::read(cell.join("checkpoint.dyck")).unwrap(),
        fs::read(run.join("checkpoint.dyck")).unwrap()
    );
    let direct = overall_avg(&fs::read_to_string(&csv).unwrap());
    let summary = fs::read_to_string(grid.join("summary.csv")).unwrap();
    let rows: Vec<Vec<&str>> = summary.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(&r[..3], &["DF_XM", "1", "3"]);
        let v: f64 = r[4].parse().unwrap();
        assert_eq!(v, direct[r[3]], "{}", r[3]);
    }
}

#[test]
fn seed_average_is_the_mean_of_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 3);
    let grid = dir.path().join("grid");
    let o = dyadformer(&[
        "ablate", "--manifest", p(&manifest), "--variants", "TF_V", "--windows", "2", "--seeds", "0,1,2", "--epochs",
        "1", "--jobs", "3", "--out", p(&grid),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cells = fs::read_to_string(grid.join("cells.csv")).unwrap();
    let per_seed: Vec<(f64, f64)> = cells
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[4].parse().unwrap(), f[5].parse().unwrap())
        })
        .collect();
    assert_eq!(per_seed.len(), 3);
    let mean = |k: usize| per_seed.iter().map(|s| if k == 0 { s.0 } else { s.1 }).sum::<f64>() / 3.0;
    let summary = fs::read_to_string(grid.join("summary.csv")).unwrap();
    assert!(summary.contains(&format!("TF_V,1,2,mse_seq,{},3\n", mean(0))), "{summary}");
    assert!(summary.contains(&format!("TF_V,1,2,mse_part,{},3\n", mean(1))), "{summary}");
    assert!(fs::read_to_string(grid.join("summary.txt")).unwrap().contains("**"));
}

#[test]
fn failed_cell_is_recorded_and_grid_continues() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 4);
    let grid = dir.path().join("grid");
    // 8-chunk sessions hold no 20-chunk window.
    let o = dyadformer(&[
        "ablate", "--manifest", p(&manifest), "--variants", "TF_V", "--windows", "20,2", "--seeds", "0", "--epochs",
        "1", "--out", p(&grid),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("warning: window T = 20"));
    let text = fs::read_to_string(grid.join("summary.txt")).unwrap();
    assert!(text.contains("fail"));
    assert!(grid.join("cells").join("TF_V_L1_T2_seed0").join("checkpoint.dyck").exists());
}
