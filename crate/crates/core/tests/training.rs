use std::collections::HashMap;

use nicomp::data::{generate_task, TaskKind, TaskSpec};
use nicomp::eval::{benchmark, corpus_bleu, evaluate, evaluate_by_length, score, BLEU_EPSILON};
use nicomp::rng::{rng, stream};
use nicomp::train::{global_grad_norm, train, Pair, TrainConfig, Trainer};
use nicomp::transformer::{HeadComposition, LayerComposition, ModelConfig, TransformerModel};
use nicomp::Error;

const MODES: [(HeadComposition, LayerComposition); 6] = [
    (HeadComposition::Linear, LayerComposition::Top),
    (HeadComposition::Linear, LayerComposition::Linear),
    (HeadComposition::Linear, LayerComposition::Ni),
    (HeadComposition::Ni, LayerComposition::Top),
    (HeadComposition::Ni, LayerComposition::Linear),
    (HeadComposition::Ni, LayerComposition::Ni),
];

fn small_config(head: HeadComposition, layer: LayerComposition) -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        rank: 32,
        head_composition: head,
        layer_composition: layer,
        dropout_rate: 0.0,
        ..ModelConfig::default()
    }
}

fn new_model(cfg: ModelConfig, seed: u64) -> TransformerModel {
    TransformerModel::new(cfg, &mut rng(seed, stream::INIT)).unwrap()
}

fn copy_data(train: usize, dev: usize) -> (Vec<Pair>, Vec<Pair>) {
    let d = generate_task(&TaskSpec {
        kind: TaskKind::Copy,
        train,
        dev,
        test: 0,
        ..TaskSpec::default()
    })
    .unwrap();
    (d.train, d.dev)
}

#[test]
fn overfits_a_single_batch_in_every_mode() {
    let (data, _) = copy_data(8, 0);
    for (head, layer) in MODES {
        let mut model = new_model(small_config(head, layer), 1);
        let cfg = TrainConfig {
            lr: 3e-3,
            warmup_steps: 30,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(&model, &data, cfg).unwrap();
        let mut loss = f64::INFINITY;
        for _ in 0..500 {
            loss = trainer.step_on(&mut model, &data).unwrap();
            if loss < 0.01 {
                break;
            }
        }
        assert!(loss < 0.01, "({head},{layer}) loss {loss} after 500 steps");
    }
}

#[test]
fn first_step_loss_is_near_uniform() {
    let (data, _) = copy_data(64, 0);
    for (head, layer) in MODES {
        let cfg = ModelConfig {
            dropout_rate: 0.1,
            ..ModelConfig::default()
        };
        let mut model = new_model(
            ModelConfig {
                head_composition: head,
                layer_composition: layer,
                ..cfg
            },
            2,
        );
        let mut trainer = Trainer::new(&model, &data, TrainConfig::default()).unwrap();
        let loss = trainer.step(&mut model).unwrap();
        let uniform = (64f64).ln();
        assert!((loss - uniform).abs() <= 0.1 * uniform, "({head},{layer}) first loss {loss}");
    }
}

#[test]
fn zero_steps_leaves_model_unchanged() {
    let (train_set, dev) = copy_data(32, 8);
    let mut model = new_model(small_config(HeadComposition::Ni, LayerComposition::Ni), 3);
    let before = model.params().to_vec();
    let cfg = TrainConfig {
        max_steps: 0,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &train_set, &dev, &cfg).unwrap();
    for (a, b) in before.iter().zip(model.params()) {
        assert_eq!(a.data(), b.data());
    }
    assert_eq!(report.steps, 0);
    assert_eq!(report.records.len(), 1);
    assert!(report.is_well_formed());
}

#[test]
fn same_seed_same_trajectory() {
    let (train_set, dev) = copy_data(64, 16);
    let run = || {
        let mut model = new_model(
            ModelConfig {
                dropout_rate: 0.1,
                ..small_config(HeadComposition::Ni, LayerComposition::Linear)
            },
            4,
        );
        let cfg = TrainConfig {
            max_steps: 20,
            eval_interval: 10,
            ..TrainConfig::default()
        };
        train(&mut model, &train_set, &dev, &cfg).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.metrics_fingerprint(), b.metrics_fingerprint());
    assert_eq!(a.train_losses.len(), 20);
    assert!(a.is_well_formed());
}

#[test]
fn non_finite_loss_names_the_step() {
    let (data, _) = copy_data(8, 0);
    let mut model = new_model(small_config(HeadComposition::Linear, LayerComposition::Top), 5);
    model.param_by_name_mut("out.b").unwrap().data_mut()[3] = f64::NAN;
    let mut trainer = Trainer::new(&model, &data, TrainConfig::default()).unwrap();
    match trainer.step(&mut model) {
        Err(Error::NonFinite { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn clipping_holds_after_each_step() {
    let (data, _) = copy_data(16, 0);
    let mut model = new_model(small_config(HeadComposition::Ni, LayerComposition::Ni), 6);
    let cfg = TrainConfig {
        clip_norm: 0.05,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&model, &data, cfg).unwrap();
    for _ in 0..3 {
        trainer.step(&mut model).unwrap();
        assert!(global_grad_norm(model.params()) <= 0.05 + 1e-9);
    }
}

#[test]
fn warm_start_copies_shared_parameters_only() {
    let (train_set, dev) = copy_data(32, 8);
    let mut base = new_model(small_config(HeadComposition::Linear, LayerComposition::Top), 7);
    let cfg = TrainConfig {
        max_steps: 5,
        ..TrainConfig::default()
    };
    train(&mut base, &train_set, &dev, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.nic");
    nicomp::checkpoint::save(&path, base.named_params()).unwrap();

    let mut ni = new_model(small_config(HeadComposition::Ni, LayerComposition::Ni), 8);
    let fresh_u = ni.param_by_name("comp.enc.0.self_attn.U").unwrap().clone();
    let copied = nicomp::train::warm_start(&mut ni, &path).unwrap();
    assert!(copied > 0);
    assert_eq!(
        ni.param_by_name("enc.0.ffn.w1").unwrap().data(),
        base.param_by_name("enc.0.ffn.w1").unwrap().data()
    );
    assert_eq!(ni.param_by_name("comp.enc.0.self_attn.U").unwrap().data(), fresh_u.data());
}

/// Clipped n-gram precision counted independently of the library.
fn naive_precision(hyp: &[usize], reference: &[usize], n: usize) -> (usize, usize) {
    let grams = |s: &[usize]| {
        let mut m: HashMap<Vec<usize>, usize> = HashMap::new();
        for i in 0..(s.len() + 1).saturating_sub(n) {
            *m.entry(s[i..i + n].to_vec()).or_default() += 1;
        }
        m
    };
    let (h, r) = (grams(hyp), grams(reference));
    let matched = h.iter().map(|(g, c)| (*c).min(*r.get(g).unwrap_or(&0))).sum();
    (matched, h.values().sum())
}

#[test]
fn bleu_matches_independent_counting() {
    let hyp = vec![3, 4, 5, 6];
    let reference = vec![3, 4, 5, 7];
    let precisions: Vec<(usize, usize)> = (1..=4).map(|n| naive_precision(&hyp, &reference, n)).collect();
    assert_eq!(precisions, vec![(3, 4), (2, 3), (1, 2), (0, 1)]);
    let log_mean = precisions
        .iter()
        .map(|&(m, t)| (if m == 0 { BLEU_EPSILON } else { m as f64 } / t as f64).ln())
        .sum::<f64>()
        / 4.0;
    let expected = 100.0 * log_mean.exp();
    let got = corpus_bleu(&[hyp], &[reference]).unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn bleu_of_identical_corpus_is_100() {
    let refs = vec![vec![3, 4, 5, 6, 7, 8], vec![9, 10, 11, 12]];
    let m = score(&refs, &refs).unwrap();
    assert_eq!((m.bleu, m.sequence_accuracy), (100.0, 1.0));
    assert!(matches!(corpus_bleu(&[], &[]), Err(Error::Input(_))));
}

#[test]
fn length_buckets_partition_the_dataset() {
    let (_, dev) = copy_data(0, 60);
    let model = new_model(small_config(HeadComposition::Linear, LayerComposition::Top), 9);
    let whole = evaluate(&model, &dev).unwrap();

    let single = evaluate_by_length(&model, &dev, &[100]).unwrap();
    assert_eq!(single[0].metrics.as_ref().unwrap(), &whole);
    assert_eq!(single[1].count, 0);
    assert!(single[1].metrics.is_none());

    let buckets = evaluate_by_length(&model, &dev, &[8, 12, 16]).unwrap();
    assert_eq!(buckets.iter().map(|b| b.count).sum::<usize>(), dev.len());
    for b in &buckets {
        let filtered: Vec<Pair> = dev
            .iter()
            .filter(|(s, _)| s.len() >= b.min_len && b.max_len.map_or(true, |m| s.len() <= m))
            .cloned()
            .collect();
        match &b.metrics {
            Some(m) => assert_eq!(m, &evaluate(&model, &filtered).unwrap()),
            None => assert!(filtered.is_empty()),
        }
    }
    assert!(evaluate_by_length(&model, &dev, &[10, 5]).is_err());
}

#[test]
fn benchmark_reports_positive_rates() {
    let (train_set, _) = copy_data(32, 0);
    let model = new_model(small_config(HeadComposition::Ni, LayerComposition::Top), 10);
    let before = model.params().to_vec();
    let b = benchmark(&model, &train_set, &TrainConfig::default(), 3).unwrap();
    assert!(b.train_steps_per_sec.is_finite() && b.train_steps_per_sec > 0.0);
    assert!(b.decode_sentences_per_sec.is_finite() && b.decode_sentences_per_sec > 0.0);
    assert_eq!(model.params(), &before[..]);
    assert!(matches!(
        benchmark(&model, &train_set, &TrainConfig::default(), 2),
        Err(Error::Config(_))
    ));
}
