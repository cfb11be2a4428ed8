use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set", "task.train=120",
    "--set", "task.dev=16",
    "--set", "task.test=16",
    "--set", "model.d_model=32",
    "--set", "model.d_ff=64",
    "--set", "model.rank=16",
    "--set", "train.eval_interval=5",
    "--set", "probe.train=120",
    "--set", "probe.dev=20",
    "--set", "probe.test=40",
    "--set", "probe.steps=20",
];

fn nicomp(args: &[&str], extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nicomp"))
        .args(args)
        .args(extra)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn text(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// CSV rows with the timing columns removed.
fn stable_rows(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            cols[..cols.len() - 2].join(",")
        })
        .collect()
}

#[test]
fn gen_is_deterministic_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = nicomp(&["gen", "--out", out.to_str().unwrap()], SMALL);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(text(&a.join("manifest.txt")), text(&b.join("manifest.txt")));
    for (file, n) in [("train.txt", 120), ("dev.txt", 16), ("test.txt", 16), ("probe-bigram-shift-test.txt", 40)] {
        assert_eq!(text(&a.join(file)).lines().count(), n, "{file}");
    }
    let other = dir.path().join("c");
    nicomp(&["gen", "--out", other.to_str().unwrap(), "--seed", "2"], SMALL);
    assert_ne!(text(&a.join("train.txt")), text(&other.join("train.txt")));
}

#[test]
fn unknown_config_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate_typo = 0.1\n").unwrap();
    let o = nicomp(&["train", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rate_typo"), "{}", stderr(&o));
}

#[test]
fn zero_step_train_then_eval_by_length() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = nicomp(&["train", "--out", out.to_str().unwrap(), "--steps", "0"], SMALL);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["checkpoint.nic", "model.toml", "config.toml", "report.jsonl", "summary.csv", "manifest.txt"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let report = text(&out.join("report.jsonl"));
    let first: serde_json::Value = serde_json::from_str(report.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 0);

    // an untrained checkpoint equals a fresh model with the same seed
    let again = dir.path().join("again");
    nicomp(&["train", "--out", again.to_str().unwrap(), "--steps", "0"], SMALL);
    assert_eq!(
        std::fs::read(out.join("checkpoint.nic")).unwrap(),
        std::fs::read(again.join("checkpoint.nic")).unwrap()
    );

    let o = nicomp(&["eval", "--out", out.to_str().unwrap(), "--by-length", "10,20,30"], SMALL);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = stdout(&o);
    for bucket in ["1-10", "11-20", "21-30", "31+"] {
        assert!(table.contains(bucket), "{table}");
    }
}

#[test]
fn verify_passes_and_rank_violation_exits_4() {
    let o = nicomp(&["verify"], &[]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(!stdout(&o).contains("FAIL"));

    let o = nicomp(&["verify", "--rank", "65", "--head-comp", "ni", "--suite", "oracle"], &[]);
    assert_eq!(code(&o), 4);
    let lines = stdout(&o);
    let fail = lines.lines().find(|l| l.starts_with("FAIL")).expect("a failing line");
    assert!(fail.contains("65") && fail.contains("64"), "{fail}");
}

#[test]
fn rank_sweep_tabulates_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = nicomp(
            &["sweep", "--out", out.to_str().unwrap(), "--axis", "rank", "--values", "4,8,16,32", "--head-comp", "ni", "--steps", "3", "--jobs", "2"],
            SMALL,
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        text(&out.join("summary.csv"))
    };
    let (a, b) = (run("a"), run("b"));
    let rows = stable_rows(&a);
    assert_eq!(rows.len(), 5);
    let ranks: Vec<&str> = rows[1..].iter().map(|r| r.split(',').nth(4).unwrap()).collect();
    assert_eq!(ranks, ["4", "8", "16", "32"]);
    assert!(rows[1..].iter().all(|r| r.split(',').nth(1) == Some("ok")));
    assert_eq!(rows, stable_rows(&b));
}

#[test]
fn first_order_sweep_changes_parameter_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fo");
    let o = nicomp(
        &["sweep", "--out", out.to_str().unwrap(), "--axis", "first-order", "--head-comp", "ni", "--layer-comp", "ni", "--steps", "2"],
        SMALL,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = stable_rows(&text(&out.join("summary.csv")));
    assert_eq!(rows.len(), 3);
    let params: Vec<usize> = rows[1..].iter().map(|r| r.split(',').nth(8).unwrap().parse().unwrap()).collect();
    assert!(params[0] > params[1], "{params:?}");
}

#[test]
fn probe_runs_on_untrained_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    let o = nicomp(&["probe", "--out", out.to_str().unwrap()], SMALL);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = stdout(&o);
    for kind in ["seq-length-bucket", "token-content", "bigram-shift"] {
        assert!(s.contains(kind), "{s}");
    }
    assert!(s.contains("unchanged"));
}
