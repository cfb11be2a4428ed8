use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nicomp::checkpoint;
use nicomp::data::{self, Dataset, ProbeDataset, ProbeKind};
use nicomp::eval::{self, BucketMetrics, Metrics};
use nicomp::probe;
use nicomp::report::{self, RunReport};
use nicomp::rng::{rng, stream};
use nicomp::train::{self, Pair};
use nicomp::transformer::{HeadComposition, LayerComposition, ModelConfig, TransformerModel};
use nicomp::verify::{self, CheckResult, Suite};
use nicomp::{Error, Result};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Overrides};

pub const CHECKPOINT: &str = "checkpoint.nic";
pub const MODEL_CONFIG: &str = "model.toml";
pub const REPORT: &str = "report.jsonl";
pub const SUMMARY: &str = "summary.csv";
pub const MANIFEST: &str = "manifest.txt";

/// Exit status for verification failures.
pub const EXIT_VERIFY: u8 = 4;

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        io(dir, std::fs::create_dir_all(dir))?;
    }
    io(path, std::fs::write(path, contents))
}

fn read(path: &Path) -> Result<String> {
    io(path, std::fs::read_to_string(path))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// `key: value` lines followed by `sha256  file` lines for `files` in `dir`.
fn write_manifest(dir: &Path, header: &[(&str, String)], files: &[&str]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in header {
        let _ = writeln!(text, "{k}: {v}");
    }
    for f in files {
        let bytes = io(&dir.join(f), std::fs::read(dir.join(f)))?;
        let _ = writeln!(text, "sha256 {}  {}", sha256_hex(&bytes), f);
    }
    write(&dir.join(MANIFEST), text)
}

fn split_files(prefix: &str) -> [String; 3] {
    ["train", "dev", "test"].map(|s| format!("{prefix}{s}.txt"))
}

fn probe_prefix(kind: ProbeKind) -> String {
    format!("probe-{kind}-")
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data {
        Some(dir) => {
            let [tr, dv, te] = split_files("");
            Ok(Dataset {
                train: data::pairs_from_text(&read(&dir.join(tr))?)?,
                dev: data::pairs_from_text(&read(&dir.join(dv))?)?,
                test: data::pairs_from_text(&read(&dir.join(te))?)?,
            })
        }
        None => data::generate_task(&cfg.task),
    }
}

fn load_probe(cfg: &ExperimentConfig, kind: ProbeKind) -> Result<ProbeDataset> {
    let spec = cfg.probe_spec(kind);
    match &cfg.data {
        Some(dir) if dir.join(format!("{}train.txt", probe_prefix(kind))).exists() => {
            let [tr, dv, te] = split_files(&probe_prefix(kind));
            Ok(ProbeDataset {
                kind,
                classes: spec.classes,
                train: data::labeled_from_text(&read(&dir.join(tr))?)?,
                dev: data::labeled_from_text(&read(&dir.join(dv))?)?,
                test: data::labeled_from_text(&read(&dir.join(te))?)?,
            })
        }
        _ => data::generate_probe(&spec),
    }
}

pub fn fresh_model(cfg: &ExperimentConfig) -> Result<TransformerModel> {
    TransformerModel::new(cfg.model.clone(), &mut rng(cfg.model_seed(), stream::INIT))
}

/// Loads a checkpoint together with the `model.toml` stored beside it.
pub fn load_model(path: &Path) -> Result<TransformerModel> {
    let cfg_path = path.with_file_name(MODEL_CONFIG);
    let config = ModelConfig::from_text(&read(&cfg_path)?)?;
    let mut model = TransformerModel::new(config, &mut rng(0, stream::INIT))?;
    model.load_exact(&checkpoint::load(path)?)?;
    Ok(model)
}

fn save_model(dir: &Path, model: &TransformerModel) -> Result<()> {
    let path = dir.join(CHECKPOINT);
    if let Some(d) = path.parent() {
        io(d, std::fs::create_dir_all(d))?;
    }
    checkpoint::save(&path, model.named_params())?;
    write(&dir.join(MODEL_CONFIG), model.config().to_text())
}

fn checkpoint_path(cfg: &ExperimentConfig, given: Option<&Path>) -> PathBuf {
    given.map(Path::to_path_buf).unwrap_or_else(|| cfg.out.join(CHECKPOINT))
}

fn subset<'a>(items: &'a [Pair], n: usize) -> &'a [Pair] {
    if n == 0 || n >= items.len() {
        items
    } else {
        &items[..n]
    }
}

pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<u8> {
    let out = &cfg.out;
    let ds = data::generate_task(&cfg.task)?;
    let mut files = Vec::new();
    for (name, split) in split_files("").iter().zip([&ds.train, &ds.dev, &ds.test]) {
        write(&out.join(name), data::pairs_to_text(split))?;
        files.push(name.clone());
    }
    for kind in ProbeKind::ALL {
        let p = data::generate_probe(&cfg.probe_spec(kind))?;
        for (name, split) in split_files(&probe_prefix(kind)).iter().zip([&p.train, &p.dev, &p.test]) {
            write(&out.join(name), data::labeled_to_text(split))?;
            files.push(name.clone());
        }
    }
    let names: Vec<&str> = files.iter().map(String::as_str).collect();
    write_manifest(
        out,
        &[
            ("command", "gen".into()),
            ("config_hash", cfg.hash()),
            ("seed", cfg.seed.to_string()),
            ("task", cfg.task.kind.to_string()),
            ("task_seed", cfg.task.seed.to_string()),
            ("probe_seed", cfg.probe.seed.to_string()),
            ("counts", format!("{}/{}/{}", ds.train.len(), ds.dev.len(), ds.test.len())),
        ],
        &names,
    )?;
    println!(
        "wrote {} train / {} dev / {} test {} pairs and 3 probe sets to {}",
        ds.train.len(),
        ds.dev.len(),
        ds.test.len(),
        cfg.task.kind,
        out.display()
    );
    Ok(0)
}

pub const SUMMARY_HEADER: [&str; 16] = [
    "label",
    "status",
    "head_comp",
    "layer_comp",
    "rank",
    "first_order",
    "seed",
    "steps",
    "param_count",
    "train_loss",
    "dev_loss",
    "token_accuracy",
    "sequence_accuracy",
    "bleu",
    "train_steps_per_sec",
    "decode_sentences_per_sec",
];

fn summary_row(label: &str, cfg: &ExperimentConfig, status: &str, report: Option<&RunReport>) -> Vec<String> {
    let m = &cfg.model;
    let mut row = vec![
        label.to_string(),
        status.to_string(),
        m.head_composition.to_string(),
        m.layer_composition.to_string(),
        m.rank.to_string(),
        m.first_order.to_string(),
        cfg.seed.to_string(),
    ];
    match report {
        Some(r) => {
            let last = r.last();
            let f = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v}"));
            row.extend([
                r.steps.to_string(),
                r.param_count.to_string(),
                f(last.map(|l| l.train_loss)),
                f(last.map(|l| l.dev_loss)),
                f(last.map(|l| l.token_accuracy)),
                f(last.map(|l| l.sequence_accuracy)),
                f(last.map(|l| l.bleu)),
                format!("{}", r.train_steps_per_sec),
                format!("{}", r.decode_sentences_per_sec),
            ]);
        }
        None => row.extend(std::iter::repeat(String::new()).take(SUMMARY_HEADER.len() - row.len())),
    }
    row
}

fn run_report_jsonl(cfg: &ExperimentConfig, r: &RunReport) -> String {
    let mut out = String::new();
    for rec in &r.records {
        let mut v = serde_json::to_value(rec).expect("record serialises");
        v["record"] = json!("eval");
        out.push_str(&v.to_string());
        out.push('\n');
    }
    let config: serde_json::Map<String, serde_json::Value> =
        r.config.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    let summary = json!({
        "record": "summary",
        "config_hash": cfg.hash(),
        "steps": r.steps,
        "train_steps_per_sec": r.train_steps_per_sec,
        "decode_sentences_per_sec": r.decode_sentences_per_sec,
        "param_count": r.param_count,
        "config": config,
    });
    out.push_str(&summary.to_string());
    out.push('\n');
    out
}

/// Trains one configuration and writes its artifacts into `cfg.out`.
pub fn train_one(cfg: &ExperimentConfig, ds: &Dataset) -> Result<RunReport> {
    let mut model = fresh_model(cfg)?;
    let mut report = train::train(&mut model, &ds.train, &ds.dev, &cfg.train)?;
    report.config = cfg.echo();
    let out = &cfg.out;
    save_model(out, &model)?;
    write(&out.join("config.toml"), cfg.to_text())?;
    write(&out.join(REPORT), run_report_jsonl(cfg, &report))?;
    write(
        &out.join(SUMMARY),
        report::to_csv(&SUMMARY_HEADER, &[summary_row("train", cfg, "ok", Some(&report))]),
    )?;
    write_manifest(
        out,
        &[
            ("command", "train".into()),
            ("config_hash", cfg.hash()),
            ("seed", cfg.seed.to_string()),
            ("steps", report.steps.to_string()),
        ],
        &[CHECKPOINT, MODEL_CONFIG, "config.toml", REPORT, SUMMARY],
    )?;
    Ok(report)
}

fn print_record(prefix: &str, r: &RunReport) {
    if let Some(l) = r.last() {
        println!(
            "{prefix}step {:>5}  train_loss {:.4}  dev_loss {:.4}  tok_acc {:.4}  seq_acc {:.4}  bleu {:.2}  ({:.1} steps/s, {} params)",
            l.step, l.train_loss, l.dev_loss, l.token_accuracy, l.sequence_accuracy, l.bleu, r.train_steps_per_sec, r.param_count
        );
    }
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<u8> {
    let ds = load_dataset(cfg)?;
    let report = train_one(cfg, &ds)?;
    print_record("", &report);
    println!("artifacts in {}", cfg.out.display());
    Ok(0)
}

fn metrics_row(label: &str, m: &Metrics) -> Vec<String> {
    vec![
        label.to_string(),
        m.count.to_string(),
        format!("{}", m.token_accuracy),
        format!("{}", m.sequence_accuracy),
        format!("{}", m.bleu),
    ]
}

fn bucket_label(b: &BucketMetrics) -> String {
    match b.max_len {
        Some(m) => format!("{}-{}", b.min_len, m),
        None => format!("{}+", b.min_len),
    }
}

pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<u8> {
    let model = load_model(&checkpoint_path(cfg, checkpoint))?;
    let ds = load_dataset(cfg)?;
    let split = if cfg.eval.split == "dev" { &ds.dev } else { &ds.test };
    let split = subset(split, cfg.eval.samples);
    let out = cfg.out.join("eval");
    let m = eval::evaluate(&model, split)?;
    let mut jsonl = String::new();
    let mut v = serde_json::to_value(&m).expect("metrics serialise");
    v["record"] = json!("eval");
    v["split"] = json!(cfg.eval.split);
    jsonl.push_str(&format!("{v}\n"));
    let mut rows = vec![metrics_row("all", &m)];
    println!(
        "{}: {} sentences  tok_acc {:.4}  seq_acc {:.4}  bleu {:.2}",
        cfg.eval.split, m.count, m.token_accuracy, m.sequence_accuracy, m.bleu
    );
    if !cfg.eval.by_length.is_empty() {
        let buckets = eval::evaluate_by_length(&model, split, &cfg.eval.by_length)?;
        println!("{:>10} {:>6} {:>8} {:>8} {:>7}", "src_len", "count", "tok_acc", "seq_acc", "bleu");
        for b in &buckets {
            let label = bucket_label(b);
            match &b.metrics {
                Some(m) => {
                    println!(
                        "{:>10} {:>6} {:>8.4} {:>8.4} {:>7.2}",
                        label, b.count, m.token_accuracy, m.sequence_accuracy, m.bleu
                    );
                    rows.push(metrics_row(&label, m));
                }
                None => {
                    println!("{:>10} {:>6} {:>8} {:>8} {:>7}", label, 0, "-", "-", "-");
                    rows.push(vec![label.clone(), "0".into(), String::new(), String::new(), String::new()]);
                }
            }
            let mut v = serde_json::to_value(b).expect("bucket serialises");
            v["record"] = json!("bucket");
            jsonl.push_str(&format!("{v}\n"));
        }
    }
    write(&out.join(REPORT), jsonl)?;
    write(
        &out.join(SUMMARY),
        report::to_csv(&["bucket", "count", "token_accuracy", "sequence_accuracy", "bleu"], &rows),
    )?;
    Ok(0)
}

pub fn cmd_bench(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<u8> {
    let model = match checkpoint {
        Some(p) => load_model(p)?,
        None => fresh_model(cfg)?,
    };
    let ds = load_dataset(cfg)?;
    let b = eval::benchmark(&model, &ds.train, &cfg.train, cfg.eval.bench_repetitions)?;
    println!(
        "({},{}) {:.2} train steps/s  {:.1} decoded sentences/s  (median of {})",
        model.config().head_composition,
        model.config().layer_composition,
        b.train_steps_per_sec,
        b.decode_sentences_per_sec,
        b.repetitions
    );
    let out = cfg.out.join("bench");
    let mut v = serde_json::to_value(&b).expect("benchmark serialises");
    v["record"] = json!("bench");
    v["param_count"] = json!(model.param_count());
    write(&out.join(REPORT), format!("{v}\n"))?;
    write(
        &out.join(SUMMARY),
        report::to_csv(
            &["head_comp", "layer_comp", "train_steps_per_sec", "decode_sentences_per_sec", "repetitions"],
            &[vec![
                model.config().head_composition.to_string(),
                model.config().layer_composition.to_string(),
                format!("{}", b.train_steps_per_sec),
                format!("{}", b.decode_sentences_per_sec),
                b.repetitions.to_string(),
            ]],
        ),
    )?;
    Ok(0)
}

pub fn cmd_probe(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<u8> {
    let path = checkpoint_path(cfg, checkpoint);
    let model = if checkpoint.is_some() || path.exists() {
        load_model(&path)?
    } else {
        println!("no checkpoint at {}; probing an untrained encoder", path.display());
        fresh_model(cfg)?
    };
    let datasets = ProbeKind::ALL
        .iter()
        .map(|&k| load_probe(cfg, k))
        .collect::<Result<Vec<_>>>()?;
    let rep = probe::probe(&model, &datasets, &cfg.probe_config())?;
    println!("encoder checksum {} (unchanged)", &rep.encoder_checksum_after[..16]);
    let mut rows = Vec::new();
    let mut jsonl = String::new();
    for r in &rep.results {
        println!(
            "{:<18} accuracy {:.4}  majority {:.4}  (train {}, test {})",
            r.task, r.accuracy, r.majority_baseline, r.train_size, r.test_size
        );
        rows.push(vec![
            r.task.clone(),
            format!("{}", r.accuracy),
            format!("{}", r.majority_baseline),
            r.train_size.to_string(),
            r.test_size.to_string(),
        ]);
        let mut v = serde_json::to_value(r).expect("probe result serialises");
        v["record"] = json!("probe");
        jsonl.push_str(&format!("{v}\n"));
    }
    jsonl.push_str(&format!(
        "{}\n",
        json!({
            "record": "checksum",
            "encoder_checksum_before": rep.encoder_checksum_before,
            "encoder_checksum_after": rep.encoder_checksum_after,
        })
    ));
    let out = cfg.out.join("probe");
    write(&out.join(REPORT), jsonl)?;
    write(
        &out.join(SUMMARY),
        report::to_csv(&["task", "accuracy", "majority_baseline", "train_size", "test_size"], &rows),
    )?;
    Ok(0)
}

pub fn cmd_verify(file: Option<&Path>, ov: &Overrides, suites: &[Suite]) -> Result<u8> {
    let mut results: Vec<CheckResult> = Vec::new();
    let seed = ov.seed.unwrap_or(1);
    // configuration errors (such as a rank above Nd) count as failed checks
    let config_check = match ExperimentConfig::load(file, ov) {
        Ok(_) => CheckResult {
            name: "config".into(),
            passed: true,
            instances: 1,
            max_error: 0.0,
            detail: "experiment configuration is valid".into(),
            failing_seed: None,
        },
        Err(e) => CheckResult {
            name: "config".into(),
            passed: false,
            instances: 1,
            max_error: 0.0,
            detail: e.to_string(),
            failing_seed: None,
        },
    };
    results.push(config_check);
    let suites = if suites.is_empty() { &Suite::ALL[..] } else { suites };
    results.extend(verify::run_all(suites, seed));
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed", results.len(), failed);
    if let Some(out) = &ov.out {
        write(&out.join("verify.jsonl"), report::to_jsonl(&results))?;
    }
    Ok(if failed == 0 { 0 } else { EXIT_VERIFY })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rank,
    FirstOrder,
    CompositionMode,
}

impl std::str::FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(Axis::Rank),
            "first-order" => Ok(Axis::FirstOrder),
            "composition-mode" => Ok(Axis::CompositionMode),
            _ => Err(Error::Config(format!(
                "unknown sweep axis '{s}' (expected rank, first-order or composition-mode)"
            ))),
        }
    }
}

/// Expands an axis and its values into labelled cell configurations.
pub fn sweep_cells(base: &ExperimentConfig, axis: Axis, values: Option<&str>) -> Result<Vec<(String, ExperimentConfig)>> {
    let items: Vec<String> = match values {
        Some(v) => v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => match axis {
            Axis::Rank => return Err(Error::Config("a rank sweep needs --values".into())),
            Axis::FirstOrder => vec!["true".into(), "false".into()],
            Axis::CompositionMode => ["linear:top", "linear:linear", "linear:ni", "ni:top", "ni:linear", "ni:ni"]
                .map(String::from)
                .to_vec(),
        },
    };
    if items.is_empty() {
        return Err(Error::Config("empty sweep value list".into()));
    }
    items
        .into_iter()
        .map(|v| {
            let mut cfg = base.clone();
            let label = match axis {
                Axis::Rank => {
                    cfg.model.rank = v
                        .parse()
                        .map_err(|_| Error::Config(format!("rank value '{v}' is not an integer")))?;
                    format!("rank-{v}")
                }
                Axis::FirstOrder => {
                    cfg.model.first_order = v
                        .parse()
                        .map_err(|_| Error::Config(format!("first-order value '{v}' is not true/false")))?;
                    format!("first-order-{v}")
                }
                Axis::CompositionMode => {
                    let (h, l) = v
                        .split_once(':')
                        .ok_or_else(|| Error::Config(format!("composition mode '{v}' should look like ni:linear")))?;
                    cfg.model.head_composition = h.parse::<HeadComposition>()?;
                    cfg.model.layer_composition = l.parse::<LayerComposition>()?;
                    format!("{h}-{l}")
                }
            };
            cfg.out = base.out.join(&label);
            Ok((label, cfg))
        })
        .collect()
}

pub fn cmd_sweep(base: &ExperimentConfig, axis: Axis, values: Option<&str>, jobs: usize) -> Result<u8> {
    let cells = sweep_cells(base, axis, values)?;
    let ds = load_dataset(base)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<(String, Option<RunReport>)>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, cells.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((label, cfg)) = cells.get(i) else { break };
                let outcome = cfg.validate().and_then(|_| train_one(cfg, &ds));
                let entry = match outcome {
                    Ok(r) => {
                        print_record(&format!("[{label}] "), &r);
                        ("ok".to_string(), Some(r))
                    }
                    Err(e) => {
                        eprintln!("[{label}] failed: {e}");
                        (format!("error: {e}"), None)
                    }
                };
                results.lock().expect("no panics while holding the lock")[i] = Some(entry);
            });
        }
    });
    let results = results.into_inner().expect("workers finished");
    let mut rows = Vec::new();
    let mut jsonl = String::new();
    for ((label, cfg), res) in cells.iter().zip(results) {
        let (status, report) = res.expect("every cell ran");
        rows.push(summary_row(label, cfg, &status, report.as_ref()));
        let mut v = json!({
            "record": "sweep-cell",
            "label": label,
            "status": status,
            "config_hash": cfg.hash(),
        });
        if let Some(r) = &report {
            v["param_count"] = json!(r.param_count);
            v["steps"] = json!(r.steps);
            v["final"] = serde_json::to_value(r.last()).expect("record serialises");
            v["train_steps_per_sec"] = json!(r.train_steps_per_sec);
        }
        jsonl.push_str(&format!("{v}\n"));
    }
    write(&base.out.join(REPORT), jsonl)?;
    write(&base.out.join(SUMMARY), report::to_csv(&SUMMARY_HEADER, &rows))?;
    write_manifest(
        &base.out,
        &[
            ("command", "sweep".into()),
            ("config_hash", base.hash()),
            ("seed", base.seed.to_string()),
            ("cells", cells.len().to_string()),
        ],
        &[REPORT, SUMMARY],
    )?;
    println!("{} cells; table in {}", cells.len(), base.out.join(SUMMARY).display());
    Ok(0)
}
