//! Encoder–decoder Transformer with pluggable representation composition.
//!
//! Composition happens at two sites:
//!
//! * **multi-head**: inside every attention block (encoder self, decoder
//!   self and decoder cross), the per-head outputs `O_1..O_H` are either
//!   concatenated and projected by `W^O`, or fused by [`ni_compose`] over
//!   their concatenation.
//! * **multi-layer**: atop each stack, the layer outputs `H^1..H^L` are
//!   reduced to one representation: the top layer alone, a learned linear
//!   combination, or [`ni_compose`] over their concatenation followed by a
//!   layer norm. The embedding layer never takes part.
//!
//! The composed encoder output is the decoder's cross-attention memory.
//! Sublayers use post-norm residuals: `LN(x + Sublayer(x))`.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::composition::{self, concat_reps, linear_combine, ni_compose, CompositionVars, ConcatenatedRep};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{AttentionSpec, Tape, Var};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First id available for content tokens.
pub const FIRST_CONTENT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadComposition {
    Linear,
    Ni,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerComposition {
    Top,
    Linear,
    Ni,
}

impl fmt::Display for HeadComposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadComposition::Linear => "linear",
            HeadComposition::Ni => "ni",
        })
    }
}

impl fmt::Display for LayerComposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerComposition::Top => "top",
            LayerComposition::Linear => "linear",
            LayerComposition::Ni => "ni",
        })
    }
}

impl FromStr for HeadComposition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(HeadComposition::Linear),
            "ni" => Ok(HeadComposition::Ni),
            _ => Err(Error::Config(format!("unknown head composition '{s}' (linear | ni)"))),
        }
    }
}

impl FromStr for LayerComposition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(LayerComposition::Top),
            "linear" => Ok(LayerComposition::Linear),
            "ni" => Ok(LayerComposition::Ni),
            _ => Err(Error::Config(format!("unknown layer composition '{s}' (top | linear | ni)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Low-rank dimensionality shared by every NI site.
    pub rank: usize,
    pub head_composition: HeadComposition,
    pub layer_composition: LayerComposition,
    /// Append the constant 1 (extended bilinear pooling) at NI sites.
    pub first_order: bool,
    pub vocab_size: usize,
    /// Longest content sequence; inputs may add one BOS/EOS on top.
    pub max_len: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            rank: 64,
            head_composition: HeadComposition::Linear,
            layer_composition: LayerComposition::Top,
            first_order: true,
            vocab_size: 64,
            max_len: 20,
            dropout_rate: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model < 2 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return fail(format!(
                "d_model ({}) must be >= 2 and n_heads ({}), n_layers ({}), d_ff ({}) >= 1",
                self.d_model, self.n_heads, self.n_layers, self.d_ff
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size <= FIRST_CONTENT {
            return fail(format!("vocab_size {} leaves no content tokens", self.vocab_size));
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.head_composition == HeadComposition::Ni {
            composition::check_rank(self.rank, self.head_site_width())
                .map_err(|e| Error::Config(format!("multi-head site: {e}")))?;
        }
        if self.layer_composition == LayerComposition::Ni {
            composition::check_rank(self.rank, self.layer_site_width())
                .map_err(|e| Error::Config(format!("multi-layer site: {e}")))?;
        }
        Ok(())
    }

    /// `Nd` at the multi-head site: `H · d/H = d`.
    pub fn head_site_width(&self) -> usize {
        self.d_model
    }

    /// `Nd` at the multi-layer site: `L · d`.
    pub fn layer_site_width(&self) -> usize {
        self.n_layers * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `key = value` text, one field per line.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_text(s: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Closed-form trainable parameter total.
    pub fn param_count(&self) -> usize {
        let (d, f, v, l) = (self.d_model, self.d_ff, self.vocab_size, self.n_layers);
        let head_out = match self.head_composition {
            HeadComposition::Linear => d * d,
            HeadComposition::Ni => composition::count_params(d, self.rank, d, self.first_order),
        };
        let attn = 3 * d * d + head_out;
        let norm = 2 * d;
        let ffn = d * f + f + f * d + d;
        let layer_comp = match self.layer_composition {
            LayerComposition::Top => 0,
            LayerComposition::Linear => l * d * d,
            LayerComposition::Ni => composition::count_params(l * d, self.rank, d, self.first_order) + norm,
        };
        let embeddings = 2 * v * d;
        let encoder = l * (attn + norm + ffn + norm) + layer_comp;
        let decoder = l * (2 * attn + 3 * norm + ffn) + layer_comp;
        let output = d * v + v;
        embeddings + encoder + decoder + output
    }
}

/// Index into a model's parameter list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
enum HeadOut {
    Linear(ParamId),
    Ni { u: ParamId, v: ParamId, p: ParamId },
}

/// Per-head projections (stored side by side: head `h` owns columns
/// `h·d/H..(h+1)·d/H` of each `d × d` matrix) plus the head composition.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    out: HeadOut,
}

#[derive(Clone, Debug)]
struct Ffn {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: AttentionBlock,
    ln1: Norm,
    ffn: Ffn,
    ln2: Norm,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: AttentionBlock,
    ln1: Norm,
    cross_attn: AttentionBlock,
    ln2: Norm,
    ffn: Ffn,
    ln3: Norm,
}

/// Multi-layer composition parameters for one stack.
#[derive(Clone, Debug)]
pub enum LayerCompParams {
    Top,
    Linear(Vec<ParamId>),
    Ni { u: ParamId, v: ParamId, p: ParamId, norm_gain: ParamId, norm_bias: ParamId },
}

#[derive(Clone, Debug)]
struct Layout {
    src_embed: ParamId,
    tgt_embed: ParamId,
    enc: Vec<EncoderLayer>,
    dec: Vec<DecoderLayer>,
    enc_comp: LayerCompParams,
    dec_comp: LayerCompParams,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct TransformerModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
    positional: Vec<f64>,
}

struct Builder<'r> {
    d: usize,
    names: Vec<String>,
    params: Vec<Tensor>,
    rng: &'r mut Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, t: Tensor) -> ParamId {
        self.names.push(name);
        self.params.push(t.with_grad());
        ParamId(self.params.len() - 1)
    }

    fn randn(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng);
        self.add(name, t)
    }

    fn xavier(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        self.randn(name, &[fan_in, fan_out], (2.0 / (fan_in + fan_out) as f64).sqrt())
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    fn norm(&mut self, prefix: &str) -> Norm {
        let gain = self.add(format!("{prefix}.gain"), Tensor::ones(&[self.d]));
        let bias = self.zeros(format!("{prefix}.bias"), &[self.d]);
        Norm { gain, bias }
    }

    fn ni(&mut self, site: &str, input_width: usize, rank: usize, d_out: usize, extended: bool) -> (ParamId, ParamId, ParamId) {
        let (uv_std, p_std) = composition::init_stds(input_width, rank);
        let rows = input_width + extended as usize;
        let u = self.randn(format!("comp.{site}.U"), &[rows, rank], uv_std);
        let v = self.randn(format!("comp.{site}.V"), &[rows, rank], uv_std);
        let p = self.randn(format!("comp.{site}.P"), &[rank, d_out], p_std);
        (u, v, p)
    }

    fn attention(&mut self, cfg: &ModelConfig, prefix: &str) -> AttentionBlock {
        let d = cfg.d_model;
        let wq = self.xavier(format!("{prefix}.wq"), d, d);
        let wk = self.xavier(format!("{prefix}.wk"), d, d);
        let wv = self.xavier(format!("{prefix}.wv"), d, d);
        let out = match cfg.head_composition {
            HeadComposition::Linear => HeadOut::Linear(self.xavier(format!("{prefix}.wo"), d, d)),
            HeadComposition::Ni => {
                let (u, v, p) = self.ni(prefix, d, cfg.rank, d, cfg.first_order);
                HeadOut::Ni { u, v, p }
            }
        };
        AttentionBlock { wq, wk, wv, out }
    }

    fn ffn(&mut self, cfg: &ModelConfig, prefix: &str) -> Ffn {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        Ffn {
            w1: self.xavier(format!("{prefix}.w1"), d, f),
            b1: self.zeros(format!("{prefix}.b1"), &[f]),
            w2: self.xavier(format!("{prefix}.w2"), f, d),
            b2: self.zeros(format!("{prefix}.b2"), &[d]),
        }
    }

    fn layer_comp(&mut self, cfg: &ModelConfig, stack: &str) -> LayerCompParams {
        let (d, l) = (cfg.d_model, cfg.n_layers);
        match cfg.layer_composition {
            LayerComposition::Top => LayerCompParams::Top,
            LayerComposition::Linear => LayerCompParams::Linear(
                (0..l)
                    .map(|i| self.randn(format!("{stack}_layers.linear.{i}"), &[d, d], 1.0 / ((l * d) as f64).sqrt()))
                    .collect(),
            ),
            LayerComposition::Ni => {
                let (u, v, p) = self.ni(&format!("{stack}_layers"), l * d, cfg.rank, d, cfg.first_order);
                let norm = self.norm(&format!("{stack}_layers.ln"));
                LayerCompParams::Ni {
                    u,
                    v,
                    p,
                    norm_gain: norm.gain,
                    norm_bias: norm.bias,
                }
            }
        }
    }
}

fn sinusoidal_table(positions: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; positions * d];
    for pos in 0..positions {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Parameters recorded on a tape for one forward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps vars already recorded on a tape, one per model parameter in
    /// model order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Encoder result shared by teacher-forced and greedy decoding.
pub struct Encoded {
    /// Composed encoder output, `batch·src_len × d`.
    pub memory: Var,
    /// `H^1..H^L`.
    pub layers: Vec<Var>,
    pub src_lens: Vec<usize>,
    pub src_len: usize,
    pub batch: usize,
    /// Attention nodes, for inspecting weights.
    pub attention: Vec<Var>,
}

pub struct Decoded {
    /// `batch·tgt_len × vocab`.
    pub logits: Var,
    pub layers: Vec<Var>,
    pub tgt_len: usize,
    pub attention: Vec<Var>,
}

/// Dropout source for a training forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut Rng,
}

impl TransformerModel {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            d: config.d_model,
            names: Vec::new(),
            params: Vec::new(),
            rng,
        };
        let (d, v) = (config.d_model, config.vocab_size);
        let emb_std = 1.0 / (d as f64).sqrt();
        let src_embed = b.randn("src_embed".into(), &[v, d], emb_std);
        let tgt_embed = b.randn("tgt_embed".into(), &[v, d], emb_std);
        let enc = (0..config.n_layers)
            .map(|l| EncoderLayer {
                attn: b.attention(&config, &format!("enc.{l}.self_attn")),
                ln1: b.norm(&format!("enc.{l}.ln1")),
                ffn: b.ffn(&config, &format!("enc.{l}.ffn")),
                ln2: b.norm(&format!("enc.{l}.ln2")),
            })
            .collect();
        let enc_comp = b.layer_comp(&config, "enc");
        let dec = (0..config.n_layers)
            .map(|l| DecoderLayer {
                self_attn: b.attention(&config, &format!("dec.{l}.self_attn")),
                ln1: b.norm(&format!("dec.{l}.ln1")),
                cross_attn: b.attention(&config, &format!("dec.{l}.cross_attn")),
                ln2: b.norm(&format!("dec.{l}.ln2")),
                ffn: b.ffn(&config, &format!("dec.{l}.ffn")),
                ln3: b.norm(&format!("dec.{l}.ln3")),
            })
            .collect();
        let dec_comp = b.layer_comp(&config, "dec");
        let out_w = b.randn("out.w".into(), &[d, v], 0.02);
        let out_b = b.zeros("out.b".into(), &[v]);
        let layout = Layout {
            src_embed,
            tgt_embed,
            enc,
            dec,
            enc_comp,
            dec_comp,
            out_w,
            out_b,
        };
        let positional = sinusoidal_table(config.max_len + 1, d);
        Ok(TransformerModel {
            config,
            names: b.names,
            params: b.params,
            layout,
            positional,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Every attention block with its site name, e.g. `dec.1.cross_attn`.
    pub fn attention_blocks(&self) -> Vec<(String, &AttentionBlock)> {
        let mut out = Vec::new();
        for (l, layer) in self.layout.enc.iter().enumerate() {
            out.push((format!("enc.{l}.self_attn"), &layer.attn));
        }
        for (l, layer) in self.layout.dec.iter().enumerate() {
            out.push((format!("dec.{l}.self_attn"), &layer.self_attn));
            out.push((format!("dec.{l}.cross_attn"), &layer.cross_attn));
        }
        out
    }

    /// Position of a named parameter in [`TransformerModel::params`].
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn layer_comp_params(&self, encoder: bool) -> &LayerCompParams {
        if encoder {
            &self.layout.enc_comp
        } else {
            &self.layout.dec_comp
        }
    }

    /// Whether a parameter belongs to the encoder side (source embeddings,
    /// encoder layers, encoder layer composition).
    pub fn is_encoder_param(name: &str) -> bool {
        name == "src_embed"
            || name.starts_with("enc.")
            || name.starts_with("enc_layers.")
            || name.starts_with("comp.enc.")
            || name.starts_with("comp.enc_layers.")
    }

    /// Overwrites parameters from a checkpoint. Entries that match by name
    /// and shape are copied; the count of copied entries is returned, the
    /// rest keep their current values.
    pub fn load_matching(&mut self, entries: &[(String, Tensor)]) -> usize {
        let mut loaded = 0;
        for (name, t) in entries {
            if let Some(p) = self.param_by_name_mut(name) {
                if p.shape() == t.shape() {
                    p.data_mut().copy_from_slice(t.data());
                    loaded += 1;
                }
            }
        }
        loaded
    }

    /// Strict load: every parameter must be present with its shape.
    pub fn load_exact(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                entries.len(),
                self.params.len()
            )));
        }
        for name in &self.names {
            let found = entries.iter().find(|(n, _)| n == name);
            match found {
                Some((_, t)) if Some(t.shape()) == self.param_by_name(name).map(Tensor::shape) => {}
                _ => return Err(Error::Format(format!("checkpoint lacks a matching '{name}'"))),
            }
        }
        self.load_matching(entries);
        Ok(())
    }

    /// Records every parameter on `tape`; `trainable = false` records them
    /// as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable && p.requires_grad() {
                    tape.leaf(p)
                } else {
                    tape.constant(p.shape(), p.data().to_vec()).expect("parameter shape is consistent")
                }
            })
            .collect();
        Bound { vars }
    }

    /// Copies leaf gradients from the tape into the parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(v) {
                p.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    fn check_tokens(&self, seqs: &[Vec<usize>], what: &str) -> Result<usize> {
        if seqs.is_empty() {
            return Err(Error::Input(format!("empty {what} batch")));
        }
        let mut longest = 0;
        for s in seqs {
            if s.is_empty() {
                return Err(Error::Input(format!("empty {what} sequence")));
            }
            if s.len() > self.config.max_len + 1 {
                return Err(Error::Input(format!(
                    "{what} length {} exceeds max_len + 1 = {}",
                    s.len(),
                    self.config.max_len + 1
                )));
            }
            if let Some(&t) = s.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::Input(format!(
                    "{what} token {t} out of range for vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            longest = longest.max(s.len());
        }
        Ok(longest)
    }

    /// Token embeddings scaled by `√d` plus sinusoidal positions, for a
    /// right-padded batch.
    fn embed(&self, tape: &mut Tape, table: Var, seqs: &[Vec<usize>], len: usize) -> Result<Var> {
        let d = self.config.d_model;
        let ids: Vec<usize> = seqs
            .iter()
            .flat_map(|s| (0..len).map(move |i| s.get(i).copied().unwrap_or(PAD)))
            .collect();
        let e = tape.gather(table, &ids)?;
        let e = tape.scale(e, (d as f64).sqrt());
        let mut pos = Vec::with_capacity(ids.len() * d);
        for _ in seqs {
            pos.extend_from_slice(&self.positional[..len * d]);
        }
        let pos = tape.constant(&[ids.len(), d], pos)?;
        tape.add(e, pos)
    }

    /// Multi-head attention returning the per-head outputs `O_1..O_H` as
    /// their concatenation.
    #[allow(clippy::too_many_arguments)]
    pub fn self_attention(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        block: &AttentionBlock,
        q_in: Var,
        kv_in: Var,
        spec: &AttentionSpec,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<(ConcatenatedRep, Var)> {
        let q = tape.matmul(q_in, bound.var(block.wq))?;
        let k = tape.matmul(kv_in, bound.var(block.wk))?;
        let v = tape.matmul(kv_in, bound.var(block.wv))?;
        let keep = match dropout {
            Some(dr) if dr.rate > 0.0 => {
                let n = spec.batch * spec.heads * spec.q_len * spec.k_len;
                Some(keep_mask(n, dr.rate, dr.rng))
            }
            _ => None,
        };
        let o = tape.attention(q, k, v, spec, keep)?;
        let rep = ConcatenatedRep::from_concatenated(tape, o, self.config.n_heads, self.config.head_dim())?;
        Ok((rep, o))
    }

    /// Fuses per-head outputs into one `len × d` representation.
    pub fn compose_heads(&self, tape: &mut Tape, bound: &Bound, heads: &ConcatenatedRep, block: &AttentionBlock) -> Result<Var> {
        match block.out {
            HeadOut::Linear(wo) => tape.matmul(heads.values, bound.var(wo)),
            HeadOut::Ni { u, v, p } => {
                let vars = CompositionVars::new(
                    tape,
                    bound.var(u),
                    bound.var(v),
                    bound.var(p),
                    self.config.head_site_width(),
                    self.config.first_order,
                )?;
                ni_compose(tape, heads, &vars)
            }
        }
    }

    /// Reduces `H^1..H^L` to the stack's final representation.
    pub fn compose_layers(&self, tape: &mut Tape, bound: &Bound, outputs: &[Var], comp: &LayerCompParams) -> Result<Var> {
        let top = *outputs
            .last()
            .ok_or_else(|| Error::dim("compose_layers", "no layer outputs"))?;
        match comp {
            LayerCompParams::Top => Ok(top),
            LayerCompParams::Linear(maps) => {
                let w: Vec<Var> = maps.iter().map(|&m| bound.var(m)).collect();
                linear_combine(tape, outputs, &w)
            }
            LayerCompParams::Ni {
                u,
                v,
                p,
                norm_gain,
                norm_bias,
            } => {
                let rep = concat_reps(tape, outputs)?;
                let vars = CompositionVars::new(
                    tape,
                    bound.var(*u),
                    bound.var(*v),
                    bound.var(*p),
                    rep.width(),
                    self.config.first_order,
                )?;
                let fused = ni_compose(tape, &rep, &vars)?;
                tape.layer_norm(fused, bound.var(*norm_gain), bound.var(*norm_bias))
            }
        }
    }

    fn dropout(&self, tape: &mut Tape, x: Var, dropout: &mut Option<Dropout<'_>>) -> Result<Var> {
        match dropout {
            Some(dr) if dr.rate > 0.0 => {
                let n = tape.value(x).len();
                let mask = keep_mask(n, dr.rate, dr.rng);
                let shape = tape.shape(x).to_vec();
                let m = tape.constant(&shape, mask)?;
                tape.mul(x, m)
            }
            _ => Ok(x),
        }
    }

    fn residual_norm(&self, tape: &mut Tape, bound: &Bound, x: Var, sub: Var, norm: &Norm, dropout: &mut Option<Dropout<'_>>) -> Result<Var> {
        let sub = self.dropout(tape, sub, dropout)?;
        let sum = tape.add(x, sub)?;
        tape.layer_norm(sum, bound.var(norm.gain), bound.var(norm.bias))
    }

    fn feed_forward(&self, tape: &mut Tape, bound: &Bound, x: Var, ffn: &Ffn) -> Result<Var> {
        let h = tape.matmul(x, bound.var(ffn.w1))?;
        let h = tape.add_row(h, bound.var(ffn.b1))?;
        let h = tape.relu(h);
        let o = tape.matmul(h, bound.var(ffn.w2))?;
        tape.add_row(o, bound.var(ffn.b2))
    }

    /// Runs the encoder over a batch of source sequences (already carrying
    /// any EOS the caller wants).
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, src: &[Vec<usize>], mut dropout: Option<Dropout<'_>>) -> Result<Encoded> {
        let src_len = self.check_tokens(src, "source")?;
        let batch = src.len();
        let src_lens: Vec<usize> = src.iter().map(Vec::len).collect();
        let mut x = self.embed(tape, bound.var(self.layout.src_embed), src, src_len)?;
        x = self.dropout(tape, x, &mut dropout)?;
        let spec = AttentionSpec {
            batch,
            q_len: src_len,
            k_len: src_len,
            heads: self.config.n_heads,
            causal: false,
            key_lens: Some(src_lens.clone()),
        };
        let mut layers = Vec::with_capacity(self.config.n_layers);
        let mut attention = Vec::new();
        for layer in &self.layout.enc {
            let (heads, att) = self.self_attention(tape, bound, &layer.attn, x, x, &spec, &mut dropout)?;
            attention.push(att);
            let a = self.compose_heads(tape, bound, &heads, &layer.attn)?;
            x = self.residual_norm(tape, bound, x, a, &layer.ln1, &mut dropout)?;
            let f = self.feed_forward(tape, bound, x, &layer.ffn)?;
            x = self.residual_norm(tape, bound, x, f, &layer.ln2, &mut dropout)?;
            layers.push(x);
        }
        let memory = self.compose_layers(tape, bound, &layers, &self.layout.enc_comp)?;
        Ok(Encoded {
            memory,
            layers,
            src_lens,
            src_len,
            batch,
            attention,
        })
    }

    /// Runs the decoder on decoder inputs (BOS-prefixed) against an
    /// encoded batch, producing next-token logits for every position.
    pub fn decode(&self, tape: &mut Tape, bound: &Bound, enc: &Encoded, tgt_in: &[Vec<usize>], mut dropout: Option<Dropout<'_>>) -> Result<Decoded> {
        let tgt_len = self.check_tokens(tgt_in, "target")?;
        if tgt_in.len() != enc.batch {
            return Err(Error::dim(
                "decode",
                format!("{} target sequences for {} sources", tgt_in.len(), enc.batch),
            ));
        }
        let tgt_lens: Vec<usize> = tgt_in.iter().map(Vec::len).collect();
        let mut x = self.embed(tape, bound.var(self.layout.tgt_embed), tgt_in, tgt_len)?;
        x = self.dropout(tape, x, &mut dropout)?;
        let self_spec = AttentionSpec {
            batch: enc.batch,
            q_len: tgt_len,
            k_len: tgt_len,
            heads: self.config.n_heads,
            causal: true,
            key_lens: Some(tgt_lens),
        };
        let cross_spec = AttentionSpec {
            batch: enc.batch,
            q_len: tgt_len,
            k_len: enc.src_len,
            heads: self.config.n_heads,
            causal: false,
            key_lens: Some(enc.src_lens.clone()),
        };
        let mut layers = Vec::with_capacity(self.config.n_layers);
        let mut attention = Vec::new();
        for layer in &self.layout.dec {
            let (heads, att) = self.self_attention(tape, bound, &layer.self_attn, x, x, &self_spec, &mut dropout)?;
            attention.push(att);
            let a = self.compose_heads(tape, bound, &heads, &layer.self_attn)?;
            x = self.residual_norm(tape, bound, x, a, &layer.ln1, &mut dropout)?;
            let (heads, att) = self.self_attention(tape, bound, &layer.cross_attn, x, enc.memory, &cross_spec, &mut dropout)?;
            attention.push(att);
            let c = self.compose_heads(tape, bound, &heads, &layer.cross_attn)?;
            x = self.residual_norm(tape, bound, x, c, &layer.ln2, &mut dropout)?;
            let f = self.feed_forward(tape, bound, x, &layer.ffn)?;
            x = self.residual_norm(tape, bound, x, f, &layer.ln3, &mut dropout)?;
            layers.push(x);
        }
        let top = self.compose_layers(tape, bound, &layers, &self.layout.dec_comp)?;
        let logits = tape.matmul(top, bound.var(self.layout.out_w))?;
        let logits = tape.add_row(logits, bound.var(self.layout.out_b))?;
        Ok(Decoded {
            logits,
            layers,
            tgt_len,
            attention,
        })
    }

    /// Logits for a single pair, `tgt_in.len() × vocab`, without dropout.
    pub fn forward(&self, src: &[usize], tgt_in: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let src = [src.to_vec()];
        let enc = self.encode(&mut tape, &bound, &src, None)?;
        let dec = self.decode(&mut tape, &bound, &enc, &[tgt_in.to_vec()], None)?;
        Ok(tape.to_tensor(dec.logits))
    }

    /// Teacher-forced mean cross-entropy over a batch. Sources get EOS
    /// appended; decoder inputs are BOS-prefixed; targets are EOS-suffixed.
    pub fn batch_loss(&self, tape: &mut Tape, bound: &Bound, pairs: &[(Vec<usize>, Vec<usize>)], dropout: Option<&mut Rng>) -> Result<(Var, Decoded)> {
        let (src, tgt_in, targets) = teacher_forcing(pairs);
        let rate = self.config.dropout_rate;
        let (enc, dec) = match dropout {
            Some(rng) => {
                let enc = self.encode(tape, bound, &src, Some(Dropout { rate, rng: &mut *rng }))?;
                let dec = self.decode(tape, bound, &enc, &tgt_in, Some(Dropout { rate, rng }))?;
                (enc, dec)
            }
            None => {
                let enc = self.encode(tape, bound, &src, None)?;
                let dec = self.decode(tape, bound, &enc, &tgt_in, None)?;
                (enc, dec)
            }
        };
        drop(enc);
        let padded: Vec<Option<usize>> = targets
            .iter()
            .flat_map(|t| (0..dec.tgt_len).map(move |i| t.get(i).copied()))
            .collect();
        let loss = tape.cross_entropy(dec.logits, &padded)?;
        Ok((loss, dec))
    }

    /// Greedy decoding, up to `max_len + 1` steps per sentence. Returned
    /// sequences exclude BOS and EOS.
    pub fn greedy_decode(&self, sources: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let src: Vec<Vec<usize>> = sources.iter().map(|s| with_eos(s)).collect();
        let enc = self.encode(&mut tape, &bound, &src, None)?;
        let vocab = self.config.vocab_size;
        let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; sources.len()];
        let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); sources.len()];
        let mut done = vec![false; sources.len()];
        for step in 0..=self.config.max_len {
            let dec = self.decode(&mut tape, &bound, &enc, &prefixes, None)?;
            let logits = tape.value(dec.logits);
            for b in 0..sources.len() {
                // Finished rows keep receiving a filler token so the batch
                // stays rectangular; their logits are never read.
                let mut next = PAD;
                if !done[b] {
                    let at = (b * dec.tgt_len + step) * vocab;
                    next = argmax(&logits[at..at + vocab]);
                    if next == EOS || step == self.config.max_len {
                        done[b] = true;
                    }
                    // the last step is the EOS slot of a max-length target
                    if next != EOS && step < self.config.max_len {
                        outputs[b].push(next);
                    }
                }
                prefixes[b].push(next);
            }
            if done.iter().all(|&x| x) {
                break;
            }
        }
        Ok(outputs)
    }
}

pub fn with_eos(s: &[usize]) -> Vec<usize> {
    let mut v = s.to_vec();
    v.push(EOS);
    v
}

/// Splits pairs into (EOS-suffixed sources, BOS-prefixed decoder inputs,
/// EOS-suffixed targets).
pub fn teacher_forcing(pairs: &[(Vec<usize>, Vec<usize>)]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let src = pairs.iter().map(|(s, _)| with_eos(s)).collect();
    let tgt_in = pairs
        .iter()
        .map(|(_, t)| std::iter::once(BOS).chain(t.iter().copied()).collect())
        .collect();
    let targets = pairs.iter().map(|(_, t)| with_eos(t)).collect();
    (src, tgt_in, targets)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Inverted-dropout multipliers: `0` with probability `rate`, else `1/(1−rate)`.
fn keep_mask(n: usize, rate: f64, rng: &mut Rng) -> Vec<f64> {
    let scale = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
        .collect()
}
