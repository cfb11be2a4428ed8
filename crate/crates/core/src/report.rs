//! Run and probe reports, emitted as JSON lines plus a summary CSV.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metrics at one evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub token_accuracy: f64,
    pub sequence_accuracy: f64,
    pub bleu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub records: Vec<EvalRecord>,
    /// Per-step training losses, in step order.
    pub train_losses: Vec<f64>,
    pub steps: usize,
    pub train_steps_per_sec: f64,
    pub decode_sentences_per_sec: f64,
    pub param_count: usize,
    /// Flattened `key = value` echo of the run configuration.
    pub config: Vec<(String, String)>,
}

impl RunReport {
    pub fn last(&self) -> Option<&EvalRecord> {
        self.records.last()
    }

    /// The metric part of the report, i.e. everything but wall-clock timings.
    pub fn metrics_fingerprint(&self) -> (Vec<EvalRecord>, Vec<f64>, usize) {
        (self.records.clone(), self.train_losses.clone(), self.param_count)
    }

    /// Every step index increases and every metric is finite.
    pub fn is_well_formed(&self) -> bool {
        let monotone = self.records.windows(2).all(|w| w[0].step < w[1].step);
        let finite = self.records.iter().all(|r| {
            [r.train_loss, r.dev_loss, r.token_accuracy, r.sequence_accuracy, r.bleu]
                .iter()
                .all(|x| x.is_finite())
        }) && self.train_losses.iter().all(|x| x.is_finite());
        monotone && finite
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub task: String,
    pub accuracy: f64,
    pub majority_baseline: f64,
    pub train_size: usize,
    pub test_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub results: Vec<ProbeResult>,
    pub encoder_checksum_before: String,
    pub encoder_checksum_after: String,
}

/// Serialises each value on its own line.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).expect("report types serialise"));
        out.push('\n');
    }
    out
}

pub fn append_jsonl<T: Serialize>(path: &Path, item: &T) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(item).expect("report types serialise");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Header plus rows as CSV text.
pub fn to_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV of UTF-8 fields")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_quotes_special_fields() {
        let s = to_csv(&["a", "b"], &[vec!["1".into(), "x,y".into()]]);
        assert_eq!(s, "a,b\n1,\"x,y\"\n");
    }

    #[test]
    fn jsonl_one_object_per_line() {
        let r = EvalRecord {
            step: 3,
            train_loss: 1.0,
            dev_loss: 2.0,
            token_accuracy: 0.5,
            sequence_accuracy: 0.25,
            bleu: 10.0,
        };
        let s = to_jsonl(&[r.clone(), r]);
        assert_eq!(s.lines().count(), 2);
        let back: EvalRecord = serde_json::from_str(s.lines().next().unwrap()).unwrap();
        assert_eq!(back.step, 3);
    }
}
