//! Self-check suites: oracle equivalence, gradients, algebraic properties
//! of the composition, attention invariants and parameter accounting.
//!
//! Every randomised instance draws from its own seed (derived from the run
//! seed) and failures report that seed so the instance can be replayed.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::composition::{
    self, concat_reps, expand_to_full, full_bilinear, linear_combine, ni_compose, CompositionParams, CompositionVars,
    ConcatenatedRep,
};
use crate::error::{Error, Result};
use crate::gradcheck::{self, FD_STEP};
use crate::rng::{self, child_seed, stream, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{teacher_forcing, Bound, HeadComposition, LayerComposition, ModelConfig, TransformerModel, FIRST_CONTENT};

pub const ORACLE_INSTANCES: usize = 100;
pub const ORACLE_TOL: f64 = 1e-10;
pub const PROPERTY_TRIALS: usize = 50;
pub const PROPERTY_TOL: f64 = 1e-9;
pub const GRAD_TOL: f64 = 1e-5;
pub const GRAD_SAMPLES: usize = 10;
pub const ATTENTION_INSTANCES: usize = 20;
pub const NORMALIZATION_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Oracle,
    Gradient,
    Homogeneity,
    Evenness,
    OddLinearity,
    Causality,
    AttentionNormalization,
    ParamAudit,
    RankGuard,
}

impl Suite {
    pub const ALL: [Suite; 9] = [
        Suite::Oracle,
        Suite::Gradient,
        Suite::Homogeneity,
        Suite::Evenness,
        Suite::OddLinearity,
        Suite::Causality,
        Suite::AttentionNormalization,
        Suite::ParamAudit,
        Suite::RankGuard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Oracle => "oracle",
            Suite::Gradient => "gradient",
            Suite::Homogeneity => "homogeneity",
            Suite::Evenness => "evenness",
            Suite::OddLinearity => "odd-linearity",
            Suite::Causality => "causality",
            Suite::AttentionNormalization => "attention-normalization",
            Suite::ParamAudit => "param-audit",
            Suite::RankGuard => "rank-guard",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown verification suite '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub instances: usize,
    /// Largest observed error (absolute or relative, per check).
    pub max_error: f64,
    pub detail: String,
    /// Seed of the first failing instance.
    pub failing_seed: Option<u64>,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<24} instances={:<4} max_err={:.3e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.max_error,
            self.detail
        )?;
        if let Some(s) = self.failing_seed {
            write!(f, " (replay seed {s})")?;
        }
        Ok(())
    }
}

/// Accumulates per-instance outcomes into a [`CheckResult`].
struct Tally {
    name: String,
    instances: usize,
    max_error: f64,
    failing_seed: Option<u64>,
    failure: Option<String>,
}

impl Tally {
    fn new(name: impl Into<String>) -> Self {
        Tally {
            name: name.into(),
            instances: 0,
            max_error: 0.0,
            failing_seed: None,
            failure: None,
        }
    }

    fn record(&mut self, seed: u64, err: f64, ok: bool, what: impl FnOnce() -> String) {
        self.instances += 1;
        if err.is_nan() {
            self.max_error = f64::NAN;
        } else if !self.max_error.is_nan() {
            self.max_error = self.max_error.max(err);
        }
        if !ok && self.failure.is_none() {
            self.failing_seed = Some(seed);
            self.failure = Some(what());
        }
    }

    fn error(&mut self, seed: u64, e: Error) {
        self.record(seed, f64::NAN, false, || e.to_string());
    }

    fn finish(self, summary: String) -> CheckResult {
        CheckResult {
            passed: self.failure.is_none() && self.instances > 0,
            detail: self.failure.unwrap_or(summary),
            name: self.name,
            instances: self.instances,
            max_error: self.max_error,
            failing_seed: self.failing_seed,
        }
    }
}

pub fn run(suite: Suite, seed: u64) -> Vec<CheckResult> {
    let seed = child_seed(seed, stream::VERIFY);
    match suite {
        Suite::Oracle => vec![oracle(seed)],
        Suite::Gradient => gradients(seed),
        Suite::Homogeneity => vec![homogeneity(seed)],
        Suite::Evenness => vec![evenness(seed)],
        Suite::OddLinearity => vec![odd_linearity(seed)],
        Suite::Causality => vec![causality(seed)],
        Suite::AttentionNormalization => vec![attention_normalization(seed)],
        Suite::ParamAudit => vec![param_audit(seed)],
        Suite::RankGuard => vec![rank_guard()],
    }
}

pub fn run_all(suites: &[Suite], seed: u64) -> Vec<CheckResult> {
    suites.iter().flat_map(|&s| run(s, seed)).collect()
}

/// A random composition instance with `Nd ≤ max_width`.
pub struct Instance {
    pub params: CompositionParams,
    /// `positions × Nd`.
    pub rep: Tensor,
}

pub fn random_instance(seed: u64, max_width: usize, extended: bool) -> Instance {
    let mut r = rng::rng(seed, stream::VERIFY);
    let n_parts = r.gen_range(1..=3.min(max_width));
    let part_width = r.gen_range(1..=max_width / n_parts);
    let nd = n_parts * part_width;
    let rank = r.gen_range(1..=nd);
    let d_out = r.gen_range(1..=4);
    let positions = r.gen_range(1..=4);
    let mut params = CompositionParams::init(n_parts, part_width, rank, d_out, extended, &mut r)
        .expect("rank drawn within bound");
    params.p = Tensor::randn(params.p.shape(), 1.0, &mut r);
    let rep = Tensor::randn(&[positions, nd], 1.0, &mut r);
    Instance { params, rep }
}

fn compose(rep: &Tensor, params: &CompositionParams) -> Result<Tensor> {
    composition::compose_values(rep, params)
}

fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    let scale = b.max_abs().max(a.max_abs());
    if scale == 0.0 {
        a.max_abs_diff(b)
    } else {
        a.max_abs_diff(b) / scale
    }
}

fn oracle(seed: u64) -> CheckResult {
    let mut t = Tally::new("oracle-equivalence");
    for i in 0..ORACLE_INSTANCES {
        let s = child_seed(seed, i as u64);
        let inst = random_instance(s, 12, false);
        let outcome = (|| {
            let low = compose(&inst.rep, &inst.params)?;
            let full = expand_to_full(&inst.params)?;
            let high = composition::full_bilinear_values(&inst.rep, inst.params.n_parts, &full)?;
            Ok::<_, Error>(low.max_abs_diff(&high))
        })();
        match outcome {
            Ok(err) => t.record(s, err, err < ORACLE_TOL, || format!("|low-rank - full| = {err:.3e}")),
            Err(e) => t.error(s, e),
        }
    }
    let n = t.instances;
    t.finish(format!("{n} instances with Nd <= 12, tolerance {ORACLE_TOL:e}"))
}

fn homogeneity(seed: u64) -> CheckResult {
    let mut t = Tally::new("degree-2-homogeneity");
    for i in 0..PROPERTY_TRIALS {
        let s = child_seed(seed, i as u64);
        let inst = random_instance(s, 12, false);
        for alpha in [-2.0, -1.0, 0.5, 3.0] {
            let outcome = (|| {
                let base = compose(&inst.rep, &inst.params)?;
                let scaled = compose(&inst.rep.map(|x| alpha * x), &inst.params)?;
                Ok::<_, Error>(rel_diff(&scaled, &base.map(|x| alpha * alpha * x)))
            })();
            match outcome {
                Ok(err) => t.record(s, err, err < PROPERTY_TOL, || format!("alpha {alpha}: relative error {err:.3e}")),
                Err(e) => t.error(s, e),
            }
        }
    }
    t.finish(format!("{PROPERTY_TRIALS} trials x alpha in {{-2,-1,0.5,3}}"))
}

fn evenness(seed: u64) -> CheckResult {
    let mut t = Tally::new("evenness");
    for i in 0..PROPERTY_TRIALS {
        let s = child_seed(seed, i as u64);
        let inst = random_instance(s, 12, false);
        let outcome = (|| {
            let a = compose(&inst.rep, &inst.params)?;
            let b = compose(&inst.rep.map(|x| -x), &inst.params)?;
            Ok::<_, Error>(a.max_abs_diff(&b))
        })();
        match outcome {
            Ok(err) => t.record(s, err, err == 0.0, || format!("f(-R) differs from f(R) by {err:.3e}")),
            Err(e) => t.error(s, e),
        }
    }
    t.finish(format!("{PROPERTY_TRIALS} trials, exact equality"))
}

/// `(f(R) − f(−R)) / 2`.
pub fn odd_part(rep: &Tensor, params: &CompositionParams) -> Result<Tensor> {
    let a = compose(rep, params)?;
    let b = compose(&rep.map(|x| -x), params)?;
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * (x - y)).collect(),
    )
}

fn odd_linearity(seed: u64) -> CheckResult {
    let mut t = Tally::new("odd-part-linearity");
    for i in 0..PROPERTY_TRIALS {
        let s = child_seed(seed, i as u64);
        let inst = random_instance(s, 12, true);
        let mut r = rng::rng(s, stream::VERIFY + 1);
        let y = Tensor::randn(inst.rep.shape(), 1.0, &mut r);
        let (alpha, beta): (f64, f64) = (r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0));
        let outcome = (|| {
            let mixed = Tensor::new(
                y.shape().to_vec(),
                inst.rep.data().iter().zip(y.data()).map(|(a, b)| alpha * a + beta * b).collect(),
            )?;
            let lhs = odd_part(&mixed, &inst.params)?;
            let gx = odd_part(&inst.rep, &inst.params)?;
            let gy = odd_part(&y, &inst.params)?;
            let rhs = Tensor::new(
                gx.shape().to_vec(),
                gx.data().iter().zip(gy.data()).map(|(a, b)| alpha * a + beta * b).collect(),
            )?;
            Ok::<_, Error>(rel_diff(&lhs, &rhs))
        })();
        match outcome {
            Ok(err) => t.record(s, err, err < PROPERTY_TOL, || format!("relative error {err:.3e}")),
            Err(e) => t.error(s, e),
        }
    }
    t.finish(format!("{PROPERTY_TRIALS} trials, extended composition"))
}

/// Scalar probe `Σ out ⊙ C` for a fixed random `C`, so that every output
/// element contributes with its own weight.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut r = rng::rng(seed, stream::VERIFY + 2);
    let c = Tensor::randn(&shape, 1.0, &mut r);
    let c = tape.constant(&shape, c.into_data())?;
    let m = tape.mul(out, c)?;
    Ok(tape.sum(m))
}

fn grad_result(name: &str, seed: u64, report: Result<gradcheck::GradReport>) -> CheckResult {
    let mut t = Tally::new(name);
    match report {
        Ok(rep) => {
            for smp in &rep.samples {
                let err = smp.rel_error();
                t.record(seed, err, err < GRAD_TOL, || {
                    format!(
                        "input {} index {}: analytic {:.6e} vs numeric {:.6e}",
                        smp.input, smp.index, smp.analytic, smp.numeric
                    )
                });
            }
        }
        Err(e) => t.error(seed, e),
    }
    t.finish(format!("relative tolerance {GRAD_TOL:e}"))
}

fn composition_grad(seed: u64, extended: bool) -> CheckResult {
    let inst = random_instance(seed, 12, extended);
    let p = &inst.params;
    let inputs = vec![inst.rep.clone(), p.u.clone(), p.v.clone(), p.p.clone()];
    let mut r = rng::rng(seed, stream::VERIFY + 3);
    let coords = gradcheck::sample_coords(&inputs, GRAD_SAMPLES.max(inputs.len() * 4), &mut r);
    let (n_parts, part_width) = (p.n_parts, p.part_width);
    let report = gradcheck::check(&inputs, &coords, FD_STEP, |tape, v| {
        let rep = ConcatenatedRep::from_concatenated(tape, v[0], n_parts, part_width)?;
        let vars = CompositionVars::new(tape, v[1], v[2], v[3], n_parts * part_width, extended)?;
        let out = ni_compose(tape, &rep, &vars)?;
        weighted_sum(tape, out, seed)
    });
    let name = if extended { "grad:ni-compose-extended" } else { "grad:ni-compose" };
    grad_result(name, seed, report)
}

fn full_bilinear_grad(seed: u64) -> CheckResult {
    let inst = random_instance(seed, 6, false);
    let full = match expand_to_full(&inst.params) {
        Ok(f) => f,
        Err(e) => return grad_result("grad:full-bilinear", seed, Err(e)),
    };
    let inputs = vec![inst.rep.clone(), full.weight.clone()];
    let mut r = rng::rng(seed, stream::VERIFY + 3);
    let coords = gradcheck::sample_coords(&inputs, GRAD_SAMPLES * 2, &mut r);
    let (n, w) = (inst.params.n_parts, inst.params.part_width);
    let report = gradcheck::check(&inputs, &coords, FD_STEP, |tape, v| {
        let rep = ConcatenatedRep::from_concatenated(tape, v[0], n, w)?;
        let out = full_bilinear(tape, &rep, v[1])?;
        weighted_sum(tape, out, seed)
    });
    grad_result("grad:full-bilinear", seed, report)
}

fn linear_grad(seed: u64) -> CheckResult {
    let mut r = rng::rng(seed, stream::VERIFY + 4);
    let (n, d, d_out, pos) = (3, 4, 4, 3);
    let mut inputs = Vec::new();
    for _ in 0..n {
        inputs.push(Tensor::randn(&[pos, d], 1.0, &mut r));
    }
    for _ in 0..n {
        inputs.push(Tensor::randn(&[d, d_out], 1.0, &mut r));
    }
    let coords = gradcheck::sample_coords(&inputs, GRAD_SAMPLES * 2, &mut r);
    let report = gradcheck::check(&inputs, &coords, FD_STEP, |tape, v| {
        let out = linear_combine(tape, &v[..n], &v[n..])?;
        // route through concat/slice as well
        let rep = concat_reps(tape, &[out, v[0]])?;
        let back = rep.part(tape, 0)?;
        weighted_sum(tape, back, seed)
    });
    grad_result("grad:linear-combine", seed, report)
}

/// Model dimensions used by the model-level checks.
pub fn toy_model_config(head: HeadComposition, layer: LayerComposition) -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_heads: 4,
        n_layers: 2,
        d_ff: 64,
        rank: 16,
        head_composition: head,
        layer_composition: layer,
        first_order: true,
        vocab_size: 16,
        max_len: 12,
        dropout_rate: 0.0,
    }
}

/// Random source/target pairs of varying length, so batches are padded.
pub fn random_pairs(r: &mut Rng, vocab: usize, max_len: usize, count: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    (0..count)
        .map(|_| {
            let ls = r.gen_range(1..=max_len);
            let lt = r.gen_range(1..=max_len);
            (
                (0..ls).map(|_| r.gen_range(FIRST_CONTENT..vocab)).collect(),
                (0..lt).map(|_| r.gen_range(FIRST_CONTENT..vocab)).collect(),
            )
        })
        .collect()
}

/// Finite-difference check of the teacher-forced loss with respect to
/// `GRAD_SAMPLES` parameter coordinates, each from a different tensor.
pub fn model_grad(seed: u64, head: HeadComposition, layer: LayerComposition) -> CheckResult {
    let name = format!("grad:model({head},{layer})");
    let mut r = rng::rng(seed, stream::VERIFY + 5);
    let cfg = toy_model_config(head, layer);
    let model = match TransformerModel::new(cfg.clone(), &mut r) {
        Ok(m) => m,
        Err(e) => return grad_result(&name, seed, Err(e)),
    };
    let pairs = random_pairs(&mut r, cfg.vocab_size, 6, 3);
    let inputs = model.params().to_vec();
    // one coordinate in each of GRAD_SAMPLES distinct tensors, restricted to
    // embedding rows that actually occur in the batch
    let (src, tgt_in, _) = teacher_forcing(&pairs);
    let used_src: Vec<usize> = src.concat();
    let used_tgt: Vec<usize> = tgt_in.concat();
    let d = cfg.d_model;
    let tensors = rand::seq::index::sample(&mut r, inputs.len(), GRAD_SAMPLES.min(inputs.len()));
    let coords: Vec<(usize, usize)> = tensors
        .into_iter()
        .map(|i| {
            let idx = match model.names()[i].as_str() {
                "src_embed" => used_src[r.gen_range(0..used_src.len())] * d + r.gen_range(0..d),
                "tgt_embed" => used_tgt[r.gen_range(0..used_tgt.len())] * d + r.gen_range(0..d),
                _ => r.gen_range(0..inputs[i].len()),
            };
            (i, idx)
        })
        .collect();
    let report = gradcheck::check(&inputs, &coords, FD_STEP, |tape, vars| {
        let bound = Bound::from_vars(vars.to_vec());
        let (loss, _) = model.batch_loss(tape, &bound, &pairs, None)?;
        Ok(loss)
    });
    grad_result(&name, seed, report)
}

fn gradients(seed: u64) -> Vec<CheckResult> {
    vec![
        composition_grad(child_seed(seed, 1), false),
        composition_grad(child_seed(seed, 2), true),
        full_bilinear_grad(child_seed(seed, 3)),
        linear_grad(child_seed(seed, 4)),
        model_grad(child_seed(seed, 5), HeadComposition::Linear, LayerComposition::Top),
        model_grad(child_seed(seed, 6), HeadComposition::Ni, LayerComposition::Ni),
        model_grad(child_seed(seed, 7), HeadComposition::Linear, LayerComposition::Linear),
    ]
}

const MODES: [(HeadComposition, LayerComposition); 6] = [
    (HeadComposition::Linear, LayerComposition::Top),
    (HeadComposition::Linear, LayerComposition::Linear),
    (HeadComposition::Linear, LayerComposition::Ni),
    (HeadComposition::Ni, LayerComposition::Top),
    (HeadComposition::Ni, LayerComposition::Linear),
    (HeadComposition::Ni, LayerComposition::Ni),
];

/// Small model plus a padded batch for the masking checks.
fn masked_instance(seed: u64) -> Result<(TransformerModel, Vec<(Vec<usize>, Vec<usize>)>)> {
    let mut r = rng::rng(seed, stream::VERIFY + 6);
    let (head, layer) = MODES[r.gen_range(0..MODES.len())];
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        rank: 8,
        ..toy_model_config(head, layer)
    };
    let model = TransformerModel::new(cfg.clone(), &mut r)?;
    let count = r.gen_range(1..=3);
    Ok((model, random_pairs(&mut r, cfg.vocab_size, 8, count)))
}

fn decoder_logits(model: &TransformerModel, src: &[Vec<usize>], tgt_in: &[Vec<usize>]) -> Result<(Vec<f64>, usize)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let enc = model.encode(&mut tape, &bound, src, None)?;
    let dec = model.decode(&mut tape, &bound, &enc, tgt_in, None)?;
    Ok((tape.value(dec.logits).to_vec(), dec.tgt_len))
}

/// Decoder outputs at position `t` must not move, bit for bit, when any
/// target token after `t` changes.
fn causality(seed: u64) -> CheckResult {
    let mut tally = Tally::new("decoder-causality");
    for i in 0..ATTENTION_INSTANCES {
        let s = child_seed(seed, i as u64);
        let outcome = (|| {
            let (model, pairs) = masked_instance(s)?;
            let vocab = model.config().vocab_size;
            let (src, tgt_in, _) = teacher_forcing(&pairs);
            let (base, len) = decoder_logits(&model, &src, &tgt_in)?;
            let mut r = rng::rng(s, stream::VERIFY + 7);
            let mut worst = 0.0f64;
            let mut checks = 0usize;
            for t in 0..len {
                let mut perturbed = tgt_in.clone();
                for row in &mut perturbed {
                    for tok in row.iter_mut().skip(t + 1) {
                        *tok = FIRST_CONTENT + (*tok - FIRST_CONTENT + r.gen_range(1..vocab - FIRST_CONTENT)) % (vocab - FIRST_CONTENT);
                    }
                }
                let (out, _) = decoder_logits(&model, &src, &perturbed)?;
                for b in 0..pairs.len() {
                    for p in 0..=t {
                        let at = (b * len + p) * vocab;
                        for k in at..at + vocab {
                            worst = worst.max((out[k] - base[k]).abs());
                            checks += 1;
                        }
                    }
                }
            }
            Ok::<_, Error>((worst, checks))
        })();
        match outcome {
            Ok((err, _)) => tally.record(s, err, err == 0.0, || format!("past logits moved by {err:.3e}")),
            Err(e) => tally.error(s, e),
        }
    }
    tally.finish(format!("{ATTENTION_INSTANCES} padded instances, bit-exact over every prefix"))
}

/// Checks rows of saved attention weights: masked keys are exactly zero and
/// each row sums to one.
pub fn check_attention_rows(
    probs: &[f64],
    batch: usize,
    heads: usize,
    q_len: usize,
    k_len: usize,
    key_lens: &[usize],
    causal: bool,
) -> (f64, bool) {
    let mut worst = 0.0f64;
    let mut masked_ok = true;
    for b in 0..batch {
        for h in 0..heads {
            for q in 0..q_len {
                let row = &probs[((b * heads + h) * q_len + q) * k_len..][..k_len];
                let limit = if causal { key_lens[b].min(q + 1) } else { key_lens[b] };
                // a causal query past its row's length still sees keys up to
                // the row length
                let limit = limit.max(1);
                let sum: f64 = row.iter().sum();
                worst = worst.max((sum - 1.0).abs());
                if row[limit..].iter().any(|&p| p != 0.0) {
                    masked_ok = false;
                }
            }
        }
    }
    (worst, masked_ok)
}

fn attention_normalization(seed: u64) -> CheckResult {
    let mut tally = Tally::new("attention-normalization");
    for i in 0..ATTENTION_INSTANCES {
        let s = child_seed(seed, i as u64);
        let outcome = (|| {
            let (model, pairs) = masked_instance(s)?;
            let heads = model.config().n_heads;
            let (src, tgt_in, _) = teacher_forcing(&pairs);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let enc = model.encode(&mut tape, &bound, &src, None)?;
            let dec = model.decode(&mut tape, &bound, &enc, &tgt_in, None)?;
            let tgt_lens: Vec<usize> = tgt_in.iter().map(Vec::len).collect();
            let b = pairs.len();
            let mut worst = 0.0f64;
            let mut masked_ok = true;
            let mut visit = |v: Var, q: usize, k: usize, lens: &[usize], causal: bool| {
                let probs = tape.attention_weights(v).expect("attention node");
                let (w, ok) = check_attention_rows(probs, b, heads, q, k, lens, causal);
                worst = worst.max(w);
                masked_ok &= ok;
            };
            for &a in &enc.attention {
                visit(a, enc.src_len, enc.src_len, &enc.src_lens, false);
            }
            for (j, &a) in dec.attention.iter().enumerate() {
                if j % 2 == 0 {
                    visit(a, dec.tgt_len, dec.tgt_len, &tgt_lens, true);
                } else {
                    visit(a, dec.tgt_len, enc.src_len, &enc.src_lens, false);
                }
            }
            Ok::<_, Error>((worst, masked_ok))
        })();
        match outcome {
            Ok((err, masked_ok)) => tally.record(s, err, err <= NORMALIZATION_TOL && masked_ok, || {
                if masked_ok {
                    format!("row sum off by {err:.3e}")
                } else {
                    "masked position received nonzero weight".into()
                }
            }),
            Err(e) => tally.error(s, e),
        }
    }
    tally.finish(format!("{ATTENTION_INSTANCES} padded instances, all attention blocks"))
}

/// Parameter total of a vanilla encoder–decoder Transformer with biased
/// feed-forward layers, unbiased attention projections and post-norm.
pub fn vanilla_param_count(d: usize, d_ff: usize, layers: usize, vocab: usize) -> usize {
    let attention = 4 * d * d;
    let ffn = 2 * d * d_ff + d_ff + d;
    let norm = 2 * d;
    let enc_layer = attention + ffn + 2 * norm;
    let dec_layer = 2 * attention + ffn + 3 * norm;
    2 * vocab * d + layers * (enc_layer + dec_layer) + d * vocab + vocab
}

fn param_audit(seed: u64) -> CheckResult {
    let mut tally = Tally::new("param-audit");
    let mut r = rng::rng(seed, stream::VERIFY + 8);
    for (i, &(head, layer)) in MODES.iter().enumerate() {
        for first_order in [true, false] {
            let s = child_seed(seed, (i * 2 + first_order as usize) as u64);
            let cfg = ModelConfig {
                first_order,
                ..toy_model_config(head, layer)
            };
            match TransformerModel::new(cfg.clone(), &mut r) {
                Ok(model) => {
                    let materialised: usize = model.params().iter().map(Tensor::len).sum();
                    let closed = cfg.param_count();
                    let diff = materialised.abs_diff(closed) as f64;
                    tally.record(s, diff, diff == 0.0, || {
                        format!("({head},{layer},first_order={first_order}): {materialised} materialised vs {closed} closed form")
                    });
                    if head == HeadComposition::Linear && layer == LayerComposition::Top {
                        let vanilla = vanilla_param_count(cfg.d_model, cfg.d_ff, cfg.n_layers, cfg.vocab_size);
                        let diff = materialised.abs_diff(vanilla) as f64;
                        tally.record(s, diff, diff == 0.0, || {
                            format!("baseline has {materialised} parameters, vanilla audit says {vanilla}")
                        });
                    }
                }
                Err(e) => tally.error(s, e),
            }
        }
    }
    for i in 0..PROPERTY_TRIALS {
        let s = child_seed(seed, 100 + i as u64);
        let extended = i % 2 == 0;
        let inst = random_instance(s, 24, extended);
        let p = &inst.params;
        let formula = 2 * (p.input_width() + extended as usize) * p.rank + p.rank * p.d_out();
        let ok = p.count_params() == formula && p.materialized_len() == formula;
        tally.record(s, p.count_params().abs_diff(formula) as f64, ok, || {
            format!("count_params {} vs closed form {formula} vs materialised {}", p.count_params(), p.materialized_len())
        });
    }
    tally.finish("every mode: materialised = closed form; baseline = vanilla".into())
}

/// Injects `r = Nd + 1` at each site and expects a configuration error.
fn rank_guard() -> CheckResult {
    let mut tally = Tally::new("rank-guard");
    let mut expect_config_error = |what: &str, res: Result<()>| {
        let ok = matches!(res, Err(Error::Config(_)));
        tally.record(0, 0.0, ok, || format!("{what} accepted a rank above Nd"));
    };
    expect_config_error("check_rank", composition::check_rank(7, 6));
    expect_config_error("check_rank(r=0)", composition::check_rank(0, 6));
    expect_config_error(
        "CompositionParams",
        CompositionParams::zeros(2, 3, 7, 4, true).map(|_| ()),
    );
    let base = toy_model_config(HeadComposition::Ni, LayerComposition::Top);
    expect_config_error(
        "head site",
        ModelConfig {
            rank: base.d_model + 1,
            ..base.clone()
        }
        .validate(),
    );
    let layer = toy_model_config(HeadComposition::Linear, LayerComposition::Ni);
    expect_config_error(
        "layer site",
        ModelConfig {
            rank: layer.n_layers * layer.d_model + 1,
            ..layer.clone()
        }
        .validate(),
    );
    let accepted = ModelConfig {
        rank: layer.n_layers * layer.d_model,
        ..layer
    }
    .validate()
    .is_ok();
    tally.record(0, 0.0, accepted, || "rank = Nd at the layer site was rejected".into());
    tally.finish("r = Nd + 1 rejected at every site; r = Nd accepted".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_suites_pass() {
        for suite in [
            Suite::Oracle,
            Suite::Homogeneity,
            Suite::Evenness,
            Suite::OddLinearity,
            Suite::ParamAudit,
            Suite::RankGuard,
        ] {
            for r in run(suite, 11) {
                assert!(r.passed, "{r}");
            }
        }
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn vanilla_count_by_hand() {
        // d=2, f=3, L=1, V=4: attention 16, ffn 17, norms 4
        // enc 16+17+8 = 41, dec 32+17+12 = 61, embeddings 16, output 12
        assert_eq!(vanilla_param_count(2, 3, 1, 4), 41 + 61 + 16 + 12);
    }

    #[test]
    fn tally_reports_first_failing_seed() {
        let mut t = Tally::new("x");
        t.record(5, 0.1, true, String::new);
        t.record(6, 0.2, false, || "bad".into());
        t.record(7, 0.3, false, || "worse".into());
        let r = t.finish("ok".into());
        assert!(!r.passed);
        assert_eq!(r.failing_seed, Some(6));
        assert_eq!(r.detail, "bad");
        assert_eq!(r.max_error, 0.3);
    }
}
