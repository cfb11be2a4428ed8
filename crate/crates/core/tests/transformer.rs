use nicomp::composition::{ni_compose, CompositionVars, ConcatenatedRep};
use nicomp::rng::{rng, stream};
use nicomp::tape::AttentionSpec;
use nicomp::transformer::{
    with_eos, HeadComposition, LayerComposition, ModelConfig, TransformerModel, BOS,
};
use nicomp::{Error, Tape, Tensor};

const MODES: [(HeadComposition, LayerComposition); 6] = [
    (HeadComposition::Linear, LayerComposition::Top),
    (HeadComposition::Linear, LayerComposition::Linear),
    (HeadComposition::Linear, LayerComposition::Ni),
    (HeadComposition::Ni, LayerComposition::Top),
    (HeadComposition::Ni, LayerComposition::Linear),
    (HeadComposition::Ni, LayerComposition::Ni),
];

fn config(head: HeadComposition, layer: LayerComposition) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 4,
        n_layers: 2,
        d_ff: 24,
        rank: 8,
        head_composition: head,
        layer_composition: layer,
        vocab_size: 12,
        max_len: 10,
        dropout_rate: 0.0,
        ..ModelConfig::default()
    }
}

fn model(head: HeadComposition, layer: LayerComposition, seed: u64) -> TransformerModel {
    TransformerModel::new(config(head, layer), &mut rng(seed, stream::INIT)).unwrap()
}

// ---- plain-loop reference implementation of the baseline model ----

fn p<'a>(m: &'a TransformerModel, name: &str) -> &'a [f64] {
    m.param_by_name(name).unwrap_or_else(|| panic!("no parameter {name}")).data()
}

fn matmul(a: &[f64], rows: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    for i in 0..rows {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    out
}

fn add_bias(x: &mut [f64], b: &[f64]) {
    let n = b.len();
    for (i, v) in x.iter_mut().enumerate() {
        *v += b[i % n];
    }
}

fn layer_norm(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|row| {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let s = (var + 1e-6).sqrt();
            row.iter().enumerate().map(move |(j, v)| (v - mean) / s * g[j] + b[j]).collect::<Vec<_>>()
        })
        .collect()
}

fn embed(m: &TransformerModel, table: &str, ids: &[usize]) -> Vec<f64> {
    let d = m.config().d_model;
    let e = p(m, table);
    let mut out = Vec::new();
    for (pos, &t) in ids.iter().enumerate() {
        for i in 0..d {
            let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let pe = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            out.push(e[t * d + i] * (d as f64).sqrt() + pe);
        }
    }
    out
}

fn attention(m: &TransformerModel, site: &str, x: &[f64], mem: &[f64], causal: bool) -> Vec<f64> {
    let c = m.config();
    let (d, h) = (c.d_model, c.n_heads);
    let dh = d / h;
    let (lq, lk) = (x.len() / d, mem.len() / d);
    let q = matmul(x, lq, d, p(m, &format!("{site}.wq")), d);
    let k = matmul(mem, lk, d, p(m, &format!("{site}.wk")), d);
    let v = matmul(mem, lk, d, p(m, &format!("{site}.wv")), d);
    let mut concat = vec![0.0; lq * d];
    for head in 0..h {
        for i in 0..lq {
            let visible = if causal { i + 1 } else { lk };
            let scores: Vec<f64> = (0..visible)
                .map(|j| (0..dh).map(|t| q[i * d + head * dh + t] * k[j * d + head * dh + t]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..dh {
                concat[i * d + head * dh + t] = (0..visible).map(|j| e[j] / z * v[j * d + head * dh + t]).sum();
            }
        }
    }
    matmul(&concat, lq, d, p(m, &format!("{site}.wo")), d)
}

fn ffn(m: &TransformerModel, site: &str, x: &[f64]) -> Vec<f64> {
    let c = m.config();
    let rows = x.len() / c.d_model;
    let mut h = matmul(x, rows, c.d_model, p(m, &format!("{site}.w1")), c.d_ff);
    add_bias(&mut h, p(m, &format!("{site}.b1")));
    h.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut o = matmul(&h, rows, c.d_ff, p(m, &format!("{site}.w2")), c.d_model);
    add_bias(&mut o, p(m, &format!("{site}.b2")));
    o
}

fn residual_norm(m: &TransformerModel, x: &[f64], sub: &[f64], ln: &str) -> Vec<f64> {
    let sum: Vec<f64> = x.iter().zip(sub).map(|(a, b)| a + b).collect();
    layer_norm(&sum, m.config().d_model, p(m, &format!("{ln}.gain")), p(m, &format!("{ln}.bias")))
}

fn reference_forward(m: &TransformerModel, src: &[usize], tgt_in: &[usize]) -> Vec<f64> {
    let c = m.config();
    let mut x = embed(m, "src_embed", src);
    for l in 0..c.n_layers {
        let a = attention(m, &format!("enc.{l}.self_attn"), &x, &x, false);
        x = residual_norm(m, &x, &a, &format!("enc.{l}.ln1"));
        let f = ffn(m, &format!("enc.{l}.ffn"), &x);
        x = residual_norm(m, &x, &f, &format!("enc.{l}.ln2"));
    }
    let memory = x;
    let mut y = embed(m, "tgt_embed", tgt_in);
    for l in 0..c.n_layers {
        let a = attention(m, &format!("dec.{l}.self_attn"), &y, &y, true);
        y = residual_norm(m, &y, &a, &format!("dec.{l}.ln1"));
        let a = attention(m, &format!("dec.{l}.cross_attn"), &y, &memory, false);
        y = residual_norm(m, &y, &a, &format!("dec.{l}.ln2"));
        let f = ffn(m, &format!("dec.{l}.ffn"), &y);
        y = residual_norm(m, &y, &f, &format!("dec.{l}.ln3"));
    }
    let mut logits = matmul(&y, tgt_in.len(), c.d_model, p(m, "out.w"), c.vocab_size);
    add_bias(&mut logits, p(m, "out.b"));
    logits
}

#[test]
fn baseline_matches_plain_loop_reference() {
    let m = model(HeadComposition::Linear, LayerComposition::Top, 5);
    let src = with_eos(&[3, 7, 4, 9, 11]);
    let tgt_in = [BOS, 5, 6, 3];
    let got = m.forward(&src, &tgt_in).unwrap();
    let want = reference_forward(&m, &src, &tgt_in);
    let err = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-10, "max deviation {err}");
}

#[test]
fn top_mode_memory_is_the_last_layer() {
    let m = model(HeadComposition::Linear, LayerComposition::Top, 1);
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, false);
    let enc = m.encode(&mut tape, &bound, &[vec![3, 4, 5]], None).unwrap();
    assert_eq!(enc.memory, *enc.layers.last().unwrap());
    assert_eq!(enc.layers.len(), 2);
}

#[test]
fn single_layer_top_is_passthrough() {
    let cfg = ModelConfig {
        n_layers: 1,
        ..config(HeadComposition::Ni, LayerComposition::Top)
    };
    let m = TransformerModel::new(cfg, &mut rng(2, stream::INIT)).unwrap();
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, false);
    let enc = m.encode(&mut tape, &bound, &[vec![3, 4]], None).unwrap();
    assert_eq!(enc.memory, enc.layers[0]);
}

#[test]
fn logits_shape_for_every_mode() {
    for (head, layer) in MODES {
        for first_order in [true, false] {
            let cfg = ModelConfig {
                first_order,
                ..config(head, layer)
            };
            let m = TransformerModel::new(cfg, &mut rng(3, stream::INIT)).unwrap();
            let logits = m.forward(&[3, 4, 5, 2], &[BOS, 7, 8]).unwrap();
            assert_eq!(logits.shape(), &[3, 12], "({head},{layer})");
            assert!(logits.is_finite());
        }
    }
}

#[test]
fn ni_head_composition_equals_direct_ni_compose() {
    let m = model(HeadComposition::Ni, LayerComposition::Top, 4);
    let d = m.config().d_model;
    let blocks = m.attention_blocks();
    assert_eq!(blocks.len(), 6);
    for (site, block) in blocks {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false);
        let x = Tensor::randn(&[5, d], 1.0, &mut rng(9, stream::VERIFY));
        let x = tape.leaf(&x);
        let spec = AttentionSpec {
            batch: 1,
            q_len: 5,
            k_len: 5,
            heads: 4,
            causal: false,
            key_lens: None,
        };
        let (heads, att) = m.self_attention(&mut tape, &bound, block, x, x, &spec, &mut None).unwrap();
        let via_model = m.compose_heads(&mut tape, &bound, &heads, block).unwrap();

        let var = |name: &str| bound.vars()[m.param_index(&format!("comp.{site}.{name}")).unwrap()];
        let rep = ConcatenatedRep::from_concatenated(&tape, att, 4, d / 4).unwrap();
        let vars = CompositionVars::new(&tape, var("U"), var("V"), var("P"), d, true).unwrap();
        let direct = ni_compose(&mut tape, &rep, &vars).unwrap();
        assert_eq!(tape.value(via_model), tape.value(direct), "{site}");
    }
}

#[test]
fn zeroed_u_makes_layer_composition_constant() {
    let mut m = model(HeadComposition::Linear, LayerComposition::Ni, 6);
    m.param_by_name_mut("comp.enc_layers.U").unwrap().data_mut().fill(0.0);
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, false);
    let enc = m.encode(&mut tape, &bound, &[vec![3, 4, 5, 6], vec![7, 8]], None).unwrap();
    let d = m.config().d_model;
    let mem = tape.value(enc.memory);
    let first = &mem[..d];
    for row in mem.chunks(d) {
        assert_eq!(row, first);
    }
}

#[test]
fn zero_sublayers_leave_only_the_norms() {
    let mut m = model(HeadComposition::Linear, LayerComposition::Top, 7);
    for name in ["enc.0.self_attn.wo", "enc.0.ffn.w2", "enc.0.ffn.b2"] {
        m.param_by_name_mut(name).unwrap().data_mut().fill(0.0);
    }
    let src = vec![3, 9, 4];
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, false);
    let enc = m.encode(&mut tape, &bound, &[src.clone()], None).unwrap();
    let d = m.config().d_model;
    let x = embed(&m, "src_embed", &src);
    let once = layer_norm(&x, d, p(&m, "enc.0.ln1.gain"), p(&m, "enc.0.ln1.bias"));
    let twice = layer_norm(&once, d, p(&m, "enc.0.ln2.gain"), p(&m, "enc.0.ln2.bias"));
    let got = tape.value(enc.layers[0]);
    let err = got.iter().zip(&twice).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
}

#[test]
fn param_count_matches_materialised_tensors() {
    for (head, layer) in MODES {
        for first_order in [true, false] {
            let cfg = ModelConfig {
                first_order,
                ..config(head, layer)
            };
            let m = TransformerModel::new(cfg.clone(), &mut rng(1, stream::INIT)).unwrap();
            let total: usize = m.params().iter().map(Tensor::len).sum();
            assert_eq!(total, cfg.param_count());
            assert_eq!(m.param_count(), total);
        }
    }
}

#[test]
fn rank_above_site_width_is_a_config_error() {
    let cfg = ModelConfig {
        rank: 17,
        ..config(HeadComposition::Ni, LayerComposition::Top)
    };
    match TransformerModel::new(cfg, &mut rng(1, stream::INIT)) {
        Err(Error::Config(msg)) => assert!(msg.contains("r <= Nd = 16"), "{msg}"),
        other => panic!("expected config error, got {:?}", other.map(|_| ())),
    }
    let ok = ModelConfig {
        rank: 32,
        ..config(HeadComposition::Linear, LayerComposition::Ni)
    };
    assert!(ok.validate().is_ok());
}

#[test]
fn out_of_range_token_is_an_input_error() {
    let m = model(HeadComposition::Linear, LayerComposition::Top, 1);
    assert!(matches!(m.forward(&[3, 12], &[BOS]), Err(Error::Input(_))));
    let too_long: Vec<usize> = vec![3; 12];
    assert!(matches!(m.forward(&too_long, &[BOS]), Err(Error::Input(_))));
}

#[test]
fn config_text_round_trip() {
    let cfg = config(HeadComposition::Ni, LayerComposition::Linear);
    let text = cfg.to_text();
    assert!(text.contains("head_composition = \"ni\""), "{text}");
    assert_eq!(ModelConfig::from_text(&text).unwrap(), cfg);
    assert!(matches!(ModelConfig::from_text("d_modl = 4"), Err(Error::Config(_))));
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let m = model(HeadComposition::Ni, LayerComposition::Ni, 8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.nic");
    nicomp::checkpoint::save(&path, m.named_params()).unwrap();
    let mut fresh = model(HeadComposition::Ni, LayerComposition::Ni, 99);
    fresh.load_exact(&nicomp::checkpoint::load(&path).unwrap()).unwrap();
    let a = m.forward(&[3, 4, 2], &[BOS, 5]).unwrap();
    let b = fresh.forward(&[3, 4, 2], &[BOS, 5]).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn greedy_decode_respects_length_limit() {
    let m = model(HeadComposition::Linear, LayerComposition::Top, 2);
    let out = m.greedy_decode(&[vec![3, 4, 5], vec![6]]).unwrap();
    assert_eq!(out.len(), 2);
    for o in out {
        assert!(o.len() <= m.config().max_len);
        assert!(o.iter().all(|&t| t < 12 && t != 2));
    }
}
