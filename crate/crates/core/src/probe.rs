//! Probing classifiers over frozen encoder sentence vectors.
//!
//! The sentence vector is the mean of the (composed) encoder output over
//! the non-padding positions. A one-hidden-layer ReLU classifier is trained
//! on top; the encoder is only ever read.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Labeled, ProbeDataset};
use crate::error::{Error, Result};
use crate::report::{ProbeReport, ProbeResult};
use crate::rng::{self, stream, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::Adam;
use crate::transformer::{argmax, with_eos, TransformerModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 64,
            lr: 3e-3,
            steps: 600,
            batch_size: 64,
            seed: 1,
        }
    }
}

/// SHA-256 over the names and little-endian bytes of every encoder-side
/// parameter, in model order.
pub fn encoder_checksum(model: &TransformerModel) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.named_params() {
        if !TransformerModel::is_encoder_param(name) {
            continue;
        }
        h.update(name.as_bytes());
        for x in t.data() {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Mean-pooled encoder output for each sequence (EOS appended as in training).
pub fn sentence_vectors(model: &TransformerModel, seqs: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    let d = model.config().d_model;
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(64) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let src: Vec<Vec<usize>> = chunk.iter().map(|s| with_eos(s)).collect();
        let enc = model.encode(&mut tape, &bound, &src, None)?;
        let mem = tape.value(enc.memory);
        for (b, &len) in enc.src_lens.iter().enumerate() {
            let mut v = vec![0.0; d];
            for p in 0..len {
                let row = &mem[(b * enc.src_len + p) * d..][..d];
                v.iter_mut().zip(row).for_each(|(a, x)| *a += x);
            }
            v.iter_mut().for_each(|a| *a /= len as f64);
            out.push(v);
        }
    }
    Ok(out)
}

/// Accuracy of always predicting the most frequent training label.
pub fn majority_baseline(train: &[Labeled], test: &[Labeled], classes: usize) -> f64 {
    let mut counts = vec![0usize; classes];
    for (l, _) in train {
        counts[*l] += 1;
    }
    let majority = (0..classes).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap_or(0);
    test.iter().filter(|(l, _)| *l == majority).count() as f64 / test.len().max(1) as f64
}

/// One-hidden-layer ReLU classifier.
#[derive(Clone, Debug)]
pub struct Mlp {
    params: Vec<Tensor>,
}

impl Mlp {
    pub fn new(input: usize, hidden: usize, classes: usize, rng: &mut Rng) -> Self {
        Mlp {
            params: vec![
                Tensor::randn(&[input, hidden], (2.0 / input as f64).sqrt(), rng).with_grad(),
                Tensor::zeros(&[hidden]).with_grad(),
                Tensor::randn(&[hidden, classes], (1.0 / hidden as f64).sqrt(), rng).with_grad(),
                Tensor::zeros(&[classes]).with_grad(),
            ],
        }
    }

    fn logits(&self, tape: &mut Tape, x: &[Vec<f64>]) -> Result<(Var, Vec<Var>)> {
        let d = self.params[0].shape()[0];
        let input = tape.constant(&[x.len(), d], x.concat())?;
        let p: Vec<Var> = self.params.iter().map(|t| tape.leaf(t)).collect();
        let h = tape.matmul(input, p[0])?;
        let h = tape.add_row(h, p[1])?;
        let h = tape.relu(h);
        let o = tape.matmul(h, p[2])?;
        Ok((tape.add_row(o, p[3])?, p))
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let (logits, _) = self.logits(&mut tape, x)?;
        let classes = self.params[3].len();
        Ok(tape.value(logits).chunks(classes).map(argmax).collect())
    }

    /// Mini-batch Adam on cross-entropy.
    pub fn fit(&mut self, x: &[Vec<f64>], y: &[usize], cfg: &ProbeConfig, rng: &mut Rng) -> Result<()> {
        if x.is_empty() {
            return Err(Error::Input("probe training set is empty".into()));
        }
        let mut adam = Adam::new(&self.params, 0.9, 0.999, 1e-8);
        let mut order: Vec<usize> = (0..x.len()).collect();
        let mut cursor = order.len();
        let batch = cfg.batch_size.min(x.len());
        for _ in 0..cfg.steps {
            let mut bx = Vec::with_capacity(batch);
            let mut by = Vec::with_capacity(batch);
            while bx.len() < batch {
                if cursor == order.len() {
                    order.shuffle(rng);
                    cursor = 0;
                }
                bx.push(x[order[cursor]].clone());
                by.push(Some(y[order[cursor]]));
                cursor += 1;
            }
            let mut tape = Tape::new();
            let (logits, vars) = self.logits(&mut tape, &bx)?;
            let loss = tape.cross_entropy(logits, &by)?;
            tape.backward(loss)?;
            for (p, v) in self.params.iter_mut().zip(vars) {
                p.zero_grad();
                if let Some(g) = tape.grad(v) {
                    p.accumulate_grad(g);
                }
            }
            adam.step(&mut self.params, cfg.lr);
        }
        Ok(())
    }
}

/// Trains and scores one probe classifier on frozen sentence vectors.
pub fn run_probe(model: &TransformerModel, data: &ProbeDataset, cfg: &ProbeConfig) -> Result<ProbeResult> {
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Input(format!("probe {} needs train and test examples", data.kind)));
    }
    if let Some((l, _)) = data.train.iter().chain(&data.test).find(|(l, _)| *l >= data.classes) {
        return Err(Error::Input(format!("label {l} out of range for {} classes", data.classes)));
    }
    let seqs = |items: &[Labeled]| items.iter().map(|(_, s)| s.clone()).collect::<Vec<_>>();
    let train_x = sentence_vectors(model, &seqs(&data.train))?;
    let test_x = sentence_vectors(model, &seqs(&data.test))?;
    let train_y: Vec<usize> = data.train.iter().map(|(l, _)| *l).collect();
    let mut r = rng::rng(cfg.seed, stream::PROBE);
    let mut mlp = Mlp::new(model.config().d_model, cfg.hidden, data.classes, &mut r);
    mlp.fit(&train_x, &train_y, cfg, &mut r)?;
    let pred = mlp.predict(&test_x)?;
    let correct = pred.iter().zip(&data.test).filter(|(p, (l, _))| *p == l).count();
    Ok(ProbeResult {
        task: data.kind.to_string(),
        accuracy: correct as f64 / data.test.len() as f64,
        majority_baseline: majority_baseline(&data.train, &data.test, data.classes),
        train_size: data.train.len(),
        test_size: data.test.len(),
    })
}

/// Runs every probe against the same frozen encoder and verifies that the
/// encoder parameters are byte-for-byte unchanged afterwards.
pub fn probe(model: &TransformerModel, datasets: &[ProbeDataset], cfg: &ProbeConfig) -> Result<ProbeReport> {
    let before = encoder_checksum(model);
    let results = datasets
        .iter()
        .map(|d| run_probe(model, d, cfg))
        .collect::<Result<Vec<_>>>()?;
    let after = encoder_checksum(model);
    if before != after {
        return Err(Error::ChecksumChanged { before, after });
    }
    Ok(ProbeReport {
        results,
        encoder_checksum_before: before,
        encoder_checksum_after: after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_probe, ProbeKind, ProbeSpec};
    use crate::transformer::ModelConfig;

    fn tiny_model() -> TransformerModel {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            rank: 8,
            ..ModelConfig::default()
        };
        TransformerModel::new(cfg, &mut rng::rng(3, stream::INIT)).unwrap()
    }

    #[test]
    fn untrained_encoder_probe_runs_and_is_frozen() {
        let model = tiny_model();
        let spec = ProbeSpec {
            kind: ProbeKind::TokenContent,
            train: 200,
            dev: 0,
            test: 100,
            ..ProbeSpec::default()
        };
        let data = generate_probe(&spec).unwrap();
        let cfg = ProbeConfig {
            steps: 50,
            ..ProbeConfig::default()
        };
        let report = probe(&model, &[data], &cfg).unwrap();
        assert_eq!(report.encoder_checksum_before, report.encoder_checksum_after);
        let r = &report.results[0];
        assert!((0.0..=1.0).contains(&r.accuracy));
        assert!((r.majority_baseline - 0.5).abs() <= 0.01);
    }

    #[test]
    fn checksum_sees_encoder_but_not_decoder_changes() {
        let mut model = tiny_model();
        let c0 = encoder_checksum(&model);
        model.param_by_name_mut("out.b").unwrap().data_mut()[0] += 1.0;
        assert_eq!(encoder_checksum(&model), c0);
        model.param_by_name_mut("src_embed").unwrap().data_mut()[0] += 1.0;
        assert_ne!(encoder_checksum(&model), c0);
    }

    #[test]
    fn majority_baseline_counts_train_mode() {
        let train = vec![(1, vec![3]), (1, vec![4]), (0, vec![5])];
        let test = vec![(1, vec![3]), (0, vec![4])];
        assert_eq!(majority_baseline(&train, &test, 2), 0.5);
    }
}
