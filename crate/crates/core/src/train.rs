//! Teacher-forced training with Adam, warmup + inverse-sqrt decay, and
//! global gradient-norm clipping.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::eval::{self, Metrics};
use crate::report::{EvalRecord, RunReport};
use crate::rng::{self, stream, Rng};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::transformer::TransformerModel;

pub type Pair = (Vec<usize>, Vec<usize>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak step size, reached at the end of warmup.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Target tokens (including EOS) per batch.
    pub batch_tokens: usize,
    pub max_steps: usize,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Evaluate on the dev split every this many steps (and at the end).
    pub eval_interval: usize,
    /// Dev sentences used per evaluation; 0 means all.
    pub eval_samples: usize,
    /// Stop early once dev token accuracy reaches this value.
    pub stop_at_token_accuracy: Option<f64>,
    /// Baseline checkpoint to initialise matching parameters from.
    pub warm_start: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            batch_tokens: 256,
            max_steps: 3000,
            warmup_steps: 200,
            clip_norm: 1.0,
            seed: 1,
            eval_interval: 250,
            eval_samples: 200,
            stop_at_token_accuracy: None,
            warm_start: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be > 0, got {}", self.clip_norm)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and eps must be > 0".into()));
        }
        if self.batch_tokens == 0 || self.eval_interval == 0 {
            return Err(Error::Config("batch_tokens and eval_interval must be positive".into()));
        }
        Ok(())
    }

    /// Step size for 1-based `step`: linear warmup to `lr`, then
    /// `lr·√(warmup/step)`. Without warmup the rate stays at `lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.max(1) as f64;
        if self.warmup_steps == 0 {
            return self.lr;
        }
        let w = self.warmup_steps as f64;
        self.lr * (step / w).min((w / step).sqrt())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else { continue };
            let data = p.data_mut();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

pub fn global_grad_norm(params: &[Tensor]) -> f64 {
    params
        .iter()
        .filter_map(Tensor::grad)
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_grad_norm(params);
    if norm > max_norm {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

/// Shuffled, token-budgeted batches that cycle over the data forever.
pub struct Batcher<'a> {
    data: &'a [Pair],
    order: Vec<usize>,
    pos: usize,
    budget: usize,
    rng: Rng,
}

impl<'a> Batcher<'a> {
    pub fn new(data: &'a [Pair], batch_tokens: usize, seed: u64) -> Self {
        let mut b = Batcher {
            data,
            order: (0..data.len()).collect(),
            pos: 0,
            budget: batch_tokens,
            rng: rng::rng(seed, stream::SHUFFLE),
        };
        b.order.shuffle(&mut b.rng);
        b
    }

    pub fn next_batch(&mut self) -> Vec<Pair> {
        let mut batch = Vec::new();
        let mut tokens = 0;
        while tokens < self.budget {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let pair = &self.data[self.order[self.pos]];
            self.pos += 1;
            tokens += pair.1.len() + 1;
            batch.push(pair.clone());
            if batch.len() == self.data.len() && tokens < self.budget {
                break;
            }
        }
        batch
    }
}

/// Mutable training state: optimizer moments, batch cursor and dropout
/// stream. Lets callers run steps one at a time.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    adam: Adam,
    batcher: Batcher<'a>,
    dropout_rng: Rng,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &TransformerModel, train: &'a [Pair], cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        Ok(Trainer {
            adam: Adam::new(model.params(), cfg.beta1, cfg.beta2, cfg.eps),
            batcher: Batcher::new(train, cfg.batch_tokens, cfg.seed),
            dropout_rng: rng::rng(cfg.seed, stream::DROPOUT),
            step: 0,
            cfg,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One optimisation step on the next batch; returns the batch loss.
    pub fn step(&mut self, model: &mut TransformerModel) -> Result<f64> {
        let batch = self.batcher.next_batch();
        self.step_on(model, &batch)
    }

    /// One optimisation step on a caller-chosen batch.
    pub fn step_on(&mut self, model: &mut TransformerModel, batch: &[Pair]) -> Result<f64> {
        self.step += 1;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let (loss, _) = model.batch_loss(&mut tape, &bound, batch, Some(&mut self.dropout_rng))?;
        let value = tape.value(loss)[0];
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                loss: value,
            });
        }
        tape.backward(loss)?;
        model.zero_grads();
        model.accumulate_grads(&tape, &bound);
        clip_grad_norm(model.params_mut(), self.cfg.clip_norm);
        let lr = self.cfg.lr_at(self.step);
        self.adam.step(model.params_mut(), lr);
        Ok(value)
    }
}

/// Teacher-forced loss on `data` without dropout, averaged per token.
pub fn dev_loss(model: &TransformerModel, data: &[Pair]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for chunk in data.chunks(64) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let (loss, _) = model.batch_loss(&mut tape, &bound, chunk, None)?;
        let n: usize = chunk.iter().map(|(_, t)| t.len() + 1).sum();
        total += tape.value(loss)[0] * n as f64;
        tokens += n;
    }
    Ok(total / tokens.max(1) as f64)
}

fn eval_subset<'d>(dev: &'d [Pair], cfg: &TrainConfig) -> &'d [Pair] {
    if cfg.eval_samples == 0 || cfg.eval_samples >= dev.len() {
        dev
    } else {
        &dev[..cfg.eval_samples]
    }
}

/// Copies every checkpoint tensor whose name and shape match a model
/// parameter; composition parameters absent from the checkpoint keep their
/// fresh initialisation. Returns the number of tensors copied.
pub fn warm_start(model: &mut TransformerModel, path: &Path) -> Result<usize> {
    let entries = checkpoint::load(path)?;
    let copied = model.load_matching(&entries);
    if copied == 0 {
        return Err(Error::Input(format!(
            "warm-start checkpoint {} shares no parameters with the model",
            path.display()
        )));
    }
    Ok(copied)
}

/// Trains `model` for `cfg.max_steps` steps (or until the early-stop
/// accuracy is reached), evaluating on `dev` every `eval_interval` steps.
pub fn train(model: &mut TransformerModel, train: &[Pair], dev: &[Pair], cfg: &TrainConfig) -> Result<RunReport> {
    if let Some(path) = &cfg.warm_start {
        warm_start(model, path)?;
    }
    let mut trainer = Trainer::new(model, train, cfg.clone())?;
    let subset = eval_subset(dev, cfg);
    let mut records = Vec::new();
    let mut losses = Vec::with_capacity(cfg.max_steps);
    let mut train_secs = 0.0;
    let mut decode_secs = 0.0;
    let mut decoded = 0usize;
    let mut window = Vec::new();

    let mut evaluate = |model: &TransformerModel, step: usize, window: &mut Vec<f64>| -> Result<EvalRecord> {
        let t0 = Instant::now();
        let m: Metrics = if subset.is_empty() {
            Metrics::default()
        } else {
            eval::evaluate(model, subset)?
        };
        decode_secs += t0.elapsed().as_secs_f64();
        decoded += subset.len();
        let dev_loss = if subset.is_empty() { f64::NAN } else { dev_loss(model, subset)? };
        let train_loss = if window.is_empty() {
            dev_loss
        } else {
            window.iter().sum::<f64>() / window.len() as f64
        };
        window.clear();
        Ok(EvalRecord {
            step,
            train_loss,
            dev_loss,
            token_accuracy: m.token_accuracy,
            sequence_accuracy: m.sequence_accuracy,
            bleu: m.bleu,
        })
    };

    for step in 1..=cfg.max_steps {
        let t0 = Instant::now();
        let loss = trainer.step(model)?;
        train_secs += t0.elapsed().as_secs_f64();
        losses.push(loss);
        window.push(loss);
        let last = step == cfg.max_steps;
        if step % cfg.eval_interval == 0 || last {
            let rec = evaluate(model, step, &mut window)?;
            let stop = cfg
                .stop_at_token_accuracy
                .is_some_and(|target| rec.token_accuracy >= target);
            records.push(rec);
            if stop {
                break;
            }
        }
    }
    if cfg.max_steps == 0 && !subset.is_empty() {
        records.push(evaluate(model, 0, &mut window)?);
    }
    let steps = losses.len();
    Ok(RunReport {
        records,
        train_losses: losses,
        steps,
        train_steps_per_sec: if train_secs > 0.0 { steps as f64 / train_secs } else { 0.0 },
        decode_sentences_per_sec: if decode_secs > 0.0 { decoded as f64 / decode_secs } else { 0.0 },
        param_count: model.param_count(),
        config: echo_config(model, cfg),
    })
}

fn echo_config(model: &TransformerModel, cfg: &TrainConfig) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let flatten = |prefix: &str, v: toml::Value, out: &mut Vec<(String, String)>| {
        if let toml::Value::Table(t) = v {
            for (k, v) in t {
                out.push((format!("{prefix}.{k}"), v.to_string()));
            }
        }
    };
    flatten("model", toml::Value::try_from(model.config()).expect("config serialises"), &mut out);
    flatten("train", toml::Value::try_from(cfg).expect("config serialises"), &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = TrainConfig {
            lr: 1.0,
            warmup_steps: 100,
            ..TrainConfig::default()
        };
        assert!((cfg.lr_at(1) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(100) - 1.0).abs() < 1e-15);
        assert!((cfg.lr_at(400) - 0.5).abs() < 1e-15);
        let flat = TrainConfig {
            warmup_steps: 0,
            ..cfg
        };
        assert_eq!(flat.lr_at(1000), 1.0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut params = vec![Tensor::zeros(&[3]).with_grad(), Tensor::zeros(&[2]).with_grad()];
        params[0].accumulate_grad(&[3.0, 4.0, 0.0]);
        params[1].accumulate_grad(&[12.0, 0.0]);
        let before = clip_grad_norm(&mut params, 1.0);
        assert!((before - 13.0).abs() < 1e-12);
        assert!(global_grad_norm(&params) <= 1.0 + 1e-9);
        // under the bound: untouched
        let before = clip_grad_norm(&mut params, 5.0);
        assert!((before - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0, -1.0]).unwrap().with_grad()];
        p[0].accumulate_grad(&[0.5, -2.0]);
        let mut adam = Adam::new(&p, 0.9, 0.98, 1e-9);
        adam.step(&mut p, 0.1);
        // bias-corrected first step is lr·sign(g)
        assert!((p[0].data()[0] - 0.9).abs() < 1e-8);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-8);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { clip_norm: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn batcher_respects_budget_and_cycles() {
        let data: Vec<Pair> = (0..5).map(|i| (vec![3; i + 1], vec![4; i + 1])).collect();
        let mut b = Batcher::new(&data, 6, 9);
        for _ in 0..10 {
            let batch = b.next_batch();
            let tokens: usize = batch.iter().map(|p| p.1.len() + 1).sum();
            assert!(tokens >= 6);
            assert!(tokens - (batch.last().unwrap().1.len() + 1) < 6);
        }
    }
}
