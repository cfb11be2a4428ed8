//! Experiment configuration: one TOML document with `[model]`, `[train]`,
//! `[task]`, `[probe]` and `[eval]` sections, plus command-line overrides.

use std::path::{Path, PathBuf};

use nicomp::data::{ProbeKind, ProbeSpec, TaskSpec};
use nicomp::probe::ProbeConfig;
use nicomp::rng::{child_seed, stream};
use nicomp::train::TrainConfig;
use nicomp::transformer::{HeadComposition, LayerComposition, ModelConfig};
use nicomp::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// Number of length buckets for the sequence-length probe.
    pub length_buckets: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
    pub hidden: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let spec = ProbeSpec::default();
        let cls = ProbeConfig::default();
        ProbeSection {
            length_buckets: 4,
            train: spec.train,
            dev: spec.dev,
            test: spec.test,
            seed: spec.seed,
            hidden: cls.hidden,
            lr: cls.lr,
            steps: cls.steps,
            batch_size: cls.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Split used by `eval`: "dev" or "test".
    pub split: String,
    /// Sentences evaluated; 0 means the whole split.
    pub samples: usize,
    pub by_length: Vec<usize>,
    pub bench_repetitions: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            split: "test".into(),
            samples: 0,
            by_length: Vec::new(),
            bench_repetitions: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed. Model init, batching and dropout derive from it, and so do
    /// the dataset seeds unless `[task]`/`[probe]` set them explicitly.
    pub seed: u64,
    pub out: PathBuf,
    /// Directory written by `gen`; when absent, data is generated in memory.
    pub data: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSpec,
    pub probe: ProbeSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            out: PathBuf::from("runs/default"),
            data: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            task: TaskSpec::default(),
            probe: ProbeSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub layer_comp: Option<LayerComposition>,
    pub head_comp: Option<HeadComposition>,
    pub rank: Option<usize>,
    pub no_first_order: bool,
    pub warm_start: Option<PathBuf>,
    pub steps: Option<usize>,
    pub by_length: Option<Vec<usize>>,
    /// Generic `section.key=value` assignments.
    pub set: Vec<String>,
}

fn parse_value(raw: &str) -> toml::Value {
    // accept any TOML literal; fall back to a bare string
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn assign(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("empty key in '{path}'")))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{p}' in '{path}' is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Child seed kept within TOML's signed 64-bit integer range.
fn derived_seed(seed: u64, index: u64) -> u64 {
    child_seed(seed, index) >> 1
}

fn has_key(table: &toml::Table, section: &str, key: &str) -> bool {
    table
        .get(section)
        .and_then(toml::Value::as_table)
        .is_some_and(|t| t.contains_key(key))
}

impl ExperimentConfig {
    /// Reads `path` (or defaults), applies overrides, derives seeds and
    /// validates everything.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.display().to_string(),
                    source: e,
                })?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for s in &ov.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{s}'")))?;
            assign(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let explicit_task_seed = has_key(&table, "task", "seed");
        let explicit_probe_seed = has_key(&table, "probe", "seed");
        let explicit_train_seed = has_key(&table, "train", "seed");
        let mut cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;

        if let Some(s) = ov.seed {
            cfg.seed = s;
        }
        if let Some(o) = &ov.out {
            cfg.out = o.clone();
        }
        if let Some(l) = ov.layer_comp {
            cfg.model.layer_composition = l;
        }
        if let Some(h) = ov.head_comp {
            cfg.model.head_composition = h;
        }
        if let Some(r) = ov.rank {
            cfg.model.rank = r;
        }
        if ov.no_first_order {
            cfg.model.first_order = false;
        }
        if let Some(w) = &ov.warm_start {
            cfg.train.warm_start = Some(w.clone());
        }
        if let Some(n) = ov.steps {
            cfg.train.max_steps = n;
        }
        if let Some(b) = &ov.by_length {
            cfg.eval.by_length = b.clone();
        }
        if ov.seed.is_some() || !explicit_train_seed {
            cfg.train.seed = cfg.seed;
        }
        if ov.seed.is_some() || !explicit_task_seed {
            cfg.task.seed = derived_seed(cfg.seed, stream::DATA);
        }
        if ov.seed.is_some() || !explicit_probe_seed {
            cfg.probe.seed = derived_seed(cfg.seed, stream::PROBE);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.task.vocab_size != self.model.vocab_size {
            return Err(Error::Config(format!(
                "task.vocab_size ({}) differs from model.vocab_size ({})",
                self.task.vocab_size, self.model.vocab_size
            )));
        }
        if self.task.max_len > self.model.max_len {
            return Err(Error::Config(format!(
                "task.max_len ({}) exceeds model.max_len ({})",
                self.task.max_len, self.model.max_len
            )));
        }
        if self.eval.split != "dev" && self.eval.split != "test" {
            return Err(Error::Config(format!("eval.split must be \"dev\" or \"test\", got \"{}\"", self.eval.split)));
        }
        if self.eval.bench_repetitions < 3 {
            return Err(Error::Config("eval.bench_repetitions must be at least 3".into()));
        }
        if self.probe.length_buckets < 2 {
            return Err(Error::Config("probe.length_buckets must be at least 2".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Short SHA-256 of the resolved configuration, ignoring `out`.
    pub fn hash(&self) -> String {
        let key = ExperimentConfig { out: PathBuf::new(), ..self.clone() };
        let digest = Sha256::digest(key.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn model_seed(&self) -> u64 {
        self.seed
    }

    pub fn probe_spec(&self, kind: ProbeKind) -> ProbeSpec {
        ProbeSpec {
            kind,
            classes: if kind == ProbeKind::SeqLengthBucket { self.probe.length_buckets } else { 2 },
            vocab_size: self.task.vocab_size,
            min_len: self.task.min_len,
            max_len: self.task.max_len,
            train: self.probe.train,
            dev: self.probe.dev,
            test: self.probe.test,
            seed: derived_seed(self.probe.seed, kind as u64),
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            hidden: self.probe.hidden,
            lr: self.probe.lr,
            steps: self.probe.steps,
            batch_size: self.probe.batch_size,
            seed: self.probe.seed,
        }
    }

    /// Flattened `section.key = value` pairs for report echoes.
    pub fn echo(&self) -> Vec<(String, String)> {
        let value = toml::Value::try_from(self).expect("config serialises");
        let mut out = Vec::new();
        flatten("", &value, &mut out);
        out
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        toml::Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}
