//! Greedy-decoding evaluation: token / sequence accuracy, corpus BLEU-4,
//! length-bucketed breakdowns and throughput benchmarks.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{Pair, TrainConfig, Trainer};
use crate::transformer::TransformerModel;

/// Numerator used for an n-gram order with no matches.
pub const BLEU_EPSILON: f64 = 1e-9;

const DECODE_BATCH: usize = 64;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Fraction of reference positions (EOS included) predicted exactly.
    pub token_accuracy: f64,
    /// Fraction of hypotheses equal to their reference.
    pub sequence_accuracy: f64,
    /// Corpus BLEU-4 on a 0–100 scale.
    pub bleu: f64,
    pub count: usize,
}

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 with brevity penalty over token-id sequences.
///
/// Clipped n-gram matches and hypothesis n-gram totals are summed over
/// the corpus. An order with zero matches uses `BLEU_EPSILON` as its
/// numerator; an order with zero hypothesis n-grams uses a denominator of 1.
pub fn corpus_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Input("BLEU needs at least one hypothesis".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Input(format!("{} hypotheses vs {} references", hyps.len(), refs.len())));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (g, c) in &hc {
                matches[n - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let log_p: f64 = (0..4)
        .map(|i| {
            let num = if matches[i] == 0 { BLEU_EPSILON } else { matches[i] as f64 };
            (num / totals[i].max(1) as f64).ln()
        })
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len >= ref_len {
        1.0
    } else if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

/// Accuracy and BLEU of already-decoded hypotheses.
pub fn score(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<Metrics> {
    let bleu = corpus_bleu(hyps, refs)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut exact = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        // positions include the closing EOS: hypothesis must stop where the
        // reference stops
        let h_eos = h.len();
        for (i, &t) in r.iter().enumerate() {
            if h.get(i) == Some(&t) {
                correct += 1;
            }
        }
        if h_eos == r.len() {
            correct += 1;
        }
        total += r.len() + 1;
        if h == r {
            exact += 1;
        }
    }
    Ok(Metrics {
        token_accuracy: correct as f64 / total as f64,
        sequence_accuracy: exact as f64 / hyps.len() as f64,
        bleu,
        count: hyps.len(),
    })
}

pub fn decode_all(model: &TransformerModel, data: &[Pair]) -> Result<Vec<Vec<usize>>> {
    let mut hyps = Vec::with_capacity(data.len());
    for chunk in data.chunks(DECODE_BATCH) {
        let sources: Vec<Vec<usize>> = chunk.iter().map(|(s, _)| s.clone()).collect();
        hyps.extend(model.greedy_decode(&sources)?);
    }
    Ok(hyps)
}

pub fn evaluate(model: &TransformerModel, data: &[Pair]) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate an empty dataset".into()));
    }
    let hyps = decode_all(model, data)?;
    let refs: Vec<Vec<usize>> = data.iter().map(|(_, t)| t.clone()).collect();
    score(&hyps, &refs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    /// Inclusive source-length range.
    pub min_len: usize,
    pub max_len: Option<usize>,
    pub count: usize,
    /// `None` for empty buckets.
    pub metrics: Option<Metrics>,
}

/// Buckets by source length: `[1, b₀]`, `[b₀+1, b₁]`, …, then an open
/// bucket above the last boundary.
pub fn evaluate_by_length(model: &TransformerModel, data: &[Pair], boundaries: &[usize]) -> Result<Vec<BucketMetrics>> {
    if boundaries.is_empty() || boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "bucket boundaries must be non-empty and strictly ascending, got {:?}",
            boundaries
        )));
    }
    let hyps = decode_all(model, data)?;
    let mut ranges: Vec<(usize, Option<usize>)> = Vec::new();
    let mut lo = 1;
    for &b in boundaries {
        ranges.push((lo, Some(b)));
        lo = b + 1;
    }
    ranges.push((lo, None));
    ranges
        .into_iter()
        .map(|(min_len, max_len)| {
            let idx: Vec<usize> = (0..data.len())
                .filter(|&i| {
                    let l = data[i].0.len();
                    l >= min_len && max_len.is_none_or(|m| l <= m)
                })
                .collect();
            let metrics = if idx.is_empty() {
                None
            } else {
                let h: Vec<Vec<usize>> = idx.iter().map(|&i| hyps[i].clone()).collect();
                let r: Vec<Vec<usize>> = idx.iter().map(|&i| data[i].1.clone()).collect();
                Some(score(&h, &r)?)
            };
            Ok(BucketMetrics {
                min_len,
                max_len,
                count: idx.len(),
                metrics,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub train_steps_per_sec: f64,
    pub decode_sentences_per_sec: f64,
    pub repetitions: usize,
}

/// Steps timed per repetition.
pub const BENCH_STEPS: usize = 5;

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median training and decoding throughput over `repetitions` timed runs,
/// after one untimed warmup run. Training runs on a scratch copy of the
/// model; the caller's model is not modified.
pub fn benchmark(model: &TransformerModel, data: &[Pair], cfg: &TrainConfig, repetitions: usize) -> Result<Benchmark> {
    if repetitions < 3 {
        return Err(Error::Config(format!("benchmark needs at least 3 repetitions, got {repetitions}")));
    }
    if data.is_empty() {
        return Err(Error::Input("benchmark needs data".into()));
    }
    let decode_set = &data[..data.len().min(DECODE_BATCH)];
    let mut scratch = model.clone();
    let mut trainer = Trainer::new(&scratch, data, cfg.clone())?;
    let mut train_rates = Vec::with_capacity(repetitions);
    let mut decode_rates = Vec::with_capacity(repetitions);
    for rep in 0..=repetitions {
        let t0 = Instant::now();
        for _ in 0..BENCH_STEPS {
            trainer.step(&mut scratch)?;
        }
        let train_secs = t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        decode_all(model, decode_set)?;
        let decode_secs = t0.elapsed().as_secs_f64();
        if rep > 0 {
            train_rates.push(BENCH_STEPS as f64 / train_secs.max(1e-12));
            decode_rates.push(decode_set.len() as f64 / decode_secs.max(1e-12));
        }
    }
    Ok(Benchmark {
        train_steps_per_sec: median(&mut train_rates),
        decode_sentences_per_sec: median(&mut decode_rates),
        repetitions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_match_scores_full_marks() {
        let refs = vec![vec![3, 4, 5, 6, 7], vec![8, 9, 10, 11]];
        let m = score(&refs, &refs).unwrap();
        assert_eq!(m.bleu, 100.0);
        assert_eq!(m.sequence_accuracy, 1.0);
        assert_eq!(m.token_accuracy, 1.0);
    }

    #[test]
    fn empty_hypothesis_set_rejected() {
        assert!(corpus_bleu(&[], &[]).is_err());
    }

    #[test]
    fn brevity_penalty_applies() {
        let hyp = vec![vec![3, 4, 5, 6]];
        let refs = vec![vec![3, 4, 5, 6, 7, 8, 9, 10]];
        let bleu = corpus_bleu(&hyp, &refs).unwrap();
        // all precisions are 1; BP = exp(1 - 8/4)
        assert!((bleu - 100.0 * (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn token_accuracy_counts_eos_position() {
        let m = score(&[vec![3, 4]], &[vec![3, 4, 5]]).unwrap();
        // positions: 3 ✓, 4 ✓, 5 ✗, EOS ✗
        assert_eq!(m.token_accuracy, 0.5);
        assert_eq!(m.sequence_accuracy, 0.0);
    }

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
