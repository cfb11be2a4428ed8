//! Deterministic synthetic corpora.
//!
//! Token ids 0, 1, 2 are reserved for PAD, BOS and EOS; content tokens
//! start at 3. All splits of a dataset are mutually disjoint: every
//! generated source sequence is unique across train, dev and test.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream, Rng};
use crate::train::Pair;
use crate::transformer::FIRST_CONTENT;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    ToyTranslation,
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "toy-translation" => Ok(TaskKind::ToyTranslation),
            _ => Err(Error::Config(format!("unknown task kind '{s}'"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::ToyTranslation => "toy-translation",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::Copy,
            vocab_size: 64,
            min_len: 5,
            max_len: 20,
            train: 10_000,
            dev: 1_000,
            test: 1_000,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Pair>,
    pub dev: Vec<Pair>,
    pub test: Vec<Pair>,
}

fn check_lengths(vocab_size: usize, min_len: usize, max_len: usize) -> Result<()> {
    if vocab_size < FIRST_CONTENT + 1 {
        return Err(Error::Config(format!("vocab_size must be at least 4, got {vocab_size}")));
    }
    if min_len == 0 || min_len > max_len {
        return Err(Error::Config(format!("invalid length range [{min_len}, {max_len}]")));
    }
    Ok(())
}

/// Number of distinct content sequences with lengths in `[min_len, max_len]`,
/// saturating.
pub fn sequence_space(content_tokens: usize, min_len: usize, max_len: usize) -> u128 {
    (min_len..=max_len).fold(0u128, |acc, len| {
        let mut n: u128 = 1;
        for _ in 0..len {
            n = n.saturating_mul(content_tokens as u128);
        }
        acc.saturating_add(n)
    })
}

fn random_sequence(rng: &mut Rng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(FIRST_CONTENT..vocab)).collect()
}

/// Draws `counts.iter().sum()` unique sequences from `draw` and splits them.
fn unique_splits<T, F>(counts: [usize; 3], space: u128, mut draw: F) -> Result<[Vec<T>; 3]>
where
    F: FnMut() -> (Vec<usize>, T),
{
    let total: usize = counts.iter().sum();
    if total as u128 > space {
        return Err(Error::Generation(format!(
            "requested {total} distinct sequences but only {space} exist for this vocabulary and length range"
        )));
    }
    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(total);
    let budget = total.saturating_mul(200).max(10_000);
    let mut attempts = 0usize;
    let mut out: [Vec<T>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (split, &n) in counts.iter().enumerate() {
        while out[split].len() < n {
            attempts += 1;
            if attempts > budget {
                return Err(Error::Generation(format!(
                    "could not find {total} distinct sequences after {budget} draws"
                )));
            }
            let (key, item) = draw();
            if seen.insert(key) {
                out[split].push(item);
            }
        }
    }
    Ok(out)
}

/// Fixed random bijection over content tokens for toy translation.
pub fn token_map(vocab_size: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::rng(seed, stream::DATA ^ 0x7a);
    let mut content: Vec<usize> = (FIRST_CONTENT..vocab_size).collect();
    content.shuffle(&mut r);
    let mut map: Vec<usize> = (0..vocab_size).collect();
    for (i, t) in (FIRST_CONTENT..vocab_size).zip(content) {
        map[i] = t;
    }
    map
}

/// Swaps positions (0,1), (2,3), … leaving an odd trailing token in place.
pub fn swap_pairs(seq: &mut [usize]) {
    for pair in seq.chunks_exact_mut(2) {
        pair.swap(0, 1);
    }
}

pub fn transduce(kind: TaskKind, src: &[usize], map: &[usize]) -> Vec<usize> {
    match kind {
        TaskKind::Copy => src.to_vec(),
        TaskKind::Reverse => src.iter().rev().copied().collect(),
        TaskKind::ToyTranslation => {
            let mut t: Vec<usize> = src.iter().map(|&x| map[x]).collect();
            swap_pairs(&mut t);
            t
        }
    }
}

pub fn generate_task(spec: &TaskSpec) -> Result<Dataset> {
    check_lengths(spec.vocab_size, spec.min_len, spec.max_len)?;
    let map = token_map(spec.vocab_size, spec.seed);
    let mut r = rng::rng(spec.seed, stream::DATA);
    let space = sequence_space(spec.vocab_size - FIRST_CONTENT, spec.min_len, spec.max_len);
    let [train, dev, test] = unique_splits([spec.train, spec.dev, spec.test], space, || {
        let len = r.gen_range(spec.min_len..=spec.max_len);
        let src = random_sequence(&mut r, spec.vocab_size, len);
        let tgt = transduce(spec.kind, &src, &map);
        (src.clone(), (src, tgt))
    })?;
    Ok(Dataset { train, dev, test })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeKind {
    /// Label is the length bucket of the sequence.
    SeqLengthBucket,
    /// Label is whether the designated token occurs.
    TokenContent,
    /// Label is whether one adjacent pair was swapped.
    BigramShift,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 3] = [ProbeKind::SeqLengthBucket, ProbeKind::TokenContent, ProbeKind::BigramShift];
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeKind::SeqLengthBucket => "seq-length-bucket",
            ProbeKind::TokenContent => "token-content",
            ProbeKind::BigramShift => "bigram-shift",
        })
    }
}

impl FromStr for ProbeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq-length-bucket" => Ok(ProbeKind::SeqLengthBucket),
            "token-content" => Ok(ProbeKind::TokenContent),
            "bigram-shift" => Ok(ProbeKind::BigramShift),
            _ => Err(Error::Config(format!("unknown probe kind '{s}'"))),
        }
    }
}

/// Designated token for the token-content probe.
pub const PROBE_TOKEN: usize = FIRST_CONTENT;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSpec {
    pub kind: ProbeKind,
    pub classes: usize,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec {
            kind: ProbeKind::BigramShift,
            classes: 2,
            vocab_size: 64,
            min_len: 5,
            max_len: 20,
            train: 2_000,
            dev: 200,
            test: 500,
            seed: 1,
        }
    }
}

pub type Labeled = (usize, Vec<usize>);

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDataset {
    pub kind: ProbeKind,
    pub classes: usize,
    pub train: Vec<Labeled>,
    pub dev: Vec<Labeled>,
    pub test: Vec<Labeled>,
}

/// Inclusive length ranges of the `classes` length buckets.
pub fn length_buckets(min_len: usize, max_len: usize, classes: usize) -> Vec<(usize, usize)> {
    let span = max_len - min_len + 1;
    (0..classes)
        .map(|c| (min_len + c * span / classes, min_len + (c + 1) * span / classes - 1))
        .collect()
}

pub fn generate_probe(spec: &ProbeSpec) -> Result<ProbeDataset> {
    check_lengths(spec.vocab_size, spec.min_len, spec.max_len)?;
    if spec.classes < 2 {
        return Err(Error::Config(format!("a probe needs at least 2 classes, got {}", spec.classes)));
    }
    let vocab = spec.vocab_size;
    match spec.kind {
        ProbeKind::SeqLengthBucket => {
            if spec.max_len - spec.min_len + 1 < spec.classes {
                return Err(Error::Config(format!(
                    "{} length buckets do not fit lengths {}..={}",
                    spec.classes, spec.min_len, spec.max_len
                )));
            }
        }
        ProbeKind::TokenContent | ProbeKind::BigramShift => {
            if spec.classes != 2 {
                return Err(Error::Config(format!("{} is a binary probe", spec.kind)));
            }
            if spec.kind == ProbeKind::TokenContent && vocab < FIRST_CONTENT + 2 {
                return Err(Error::Config("token-content needs at least two content tokens".into()));
            }
            if spec.kind == ProbeKind::BigramShift && (spec.min_len < 2 || vocab < FIRST_CONTENT + 2) {
                return Err(Error::Config("bigram-shift needs length >= 2 and two content tokens".into()));
            }
        }
    }
    let buckets = length_buckets(spec.min_len, spec.max_len, spec.classes);
    let mut r = rng::rng(spec.seed, stream::DATA);
    let mut counter = 0usize;
    let space = sequence_space(vocab - FIRST_CONTENT, spec.min_len, spec.max_len);
    let splits = unique_splits([spec.train, spec.dev, spec.test], space, || {
        // labels cycle so every split is balanced to within one example
        let label = counter % spec.classes;
        counter += 1;
        let seq = match spec.kind {
            ProbeKind::SeqLengthBucket => {
                let (lo, hi) = buckets[label];
                let len = r.gen_range(lo..=hi);
                random_sequence(&mut r, vocab, len)
            }
            ProbeKind::TokenContent => {
                let len = r.gen_range(spec.min_len..=spec.max_len);
                let mut s: Vec<usize> = (0..len).map(|_| r.gen_range(PROBE_TOKEN + 1..vocab)).collect();
                if label == 1 {
                    let at = r.gen_range(0..len);
                    s[at] = PROBE_TOKEN;
                }
                s
            }
            ProbeKind::BigramShift => {
                let len = r.gen_range(spec.min_len..=spec.max_len);
                let mut s = random_sequence(&mut r, vocab, len);
                if label == 1 {
                    let at = r.gen_range(0..len - 1);
                    if s[at] == s[at + 1] {
                        // make the swap observable
                        s[at + 1] = FIRST_CONTENT + (s[at] - FIRST_CONTENT + 1) % (vocab - FIRST_CONTENT);
                    }
                    s.swap(at, at + 1);
                }
                s
            }
        };
        (seq.clone(), (label, seq))
    })?;
    let [mut train, mut dev, mut test] = splits;
    for split in [&mut train, &mut dev, &mut test] {
        split.shuffle(&mut r);
    }
    Ok(ProbeDataset {
        kind: spec.kind,
        classes: spec.classes,
        train,
        dev,
        test,
    })
}

fn join(seq: &[usize]) -> String {
    seq.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

fn parse_ids(s: &str, line: usize) -> Result<Vec<usize>> {
    s.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Input(format!("line {line}: '{t}' is not a token id")))
        })
        .collect()
}

/// One `src ||| tgt` line per pair.
pub fn pairs_to_text(pairs: &[Pair]) -> String {
    pairs
        .iter()
        .map(|(s, t)| format!("{} ||| {}\n", join(s), join(t)))
        .collect()
}

pub fn pairs_from_text(text: &str) -> Result<Vec<Pair>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (s, t) = l
                .split_once("|||")
                .ok_or_else(|| Error::Input(format!("line {}: missing '|||'", i + 1)))?;
            Ok((parse_ids(s, i + 1)?, parse_ids(t, i + 1)?))
        })
        .collect()
}

/// One `label ||| sequence` line per example.
pub fn labeled_to_text(items: &[Labeled]) -> String {
    items
        .iter()
        .map(|(l, s)| format!("{} ||| {}\n", l, join(s)))
        .collect()
}

pub fn labeled_from_text(text: &str) -> Result<Vec<Labeled>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (lab, s) = l
                .split_once("|||")
                .ok_or_else(|| Error::Input(format!("line {}: missing '|||'", i + 1)))?;
            let label = lab
                .trim()
                .parse()
                .map_err(|_| Error::Input(format!("line {}: bad label '{}'", i + 1, lab.trim())))?;
            Ok((label, parse_ids(s, i + 1)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            train: 300,
            dev: 50,
            test: 50,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn copy_and_reverse_definitions() {
        let map = token_map(64, 1);
        assert_eq!(transduce(TaskKind::Copy, &[3, 4, 5], &map), vec![3, 4, 5]);
        assert_eq!(transduce(TaskKind::Reverse, &[3, 4, 5], &map), vec![5, 4, 3]);
        for (s, t) in generate_task(&small(TaskKind::Reverse)).unwrap().train {
            assert_eq!(t, s.iter().rev().copied().collect::<Vec<_>>());
        }
    }

    #[test]
    fn toy_translation_maps_then_swaps() {
        let map = token_map(10, 4);
        let mut image: Vec<usize> = map[FIRST_CONTENT..].to_vec();
        image.sort();
        assert_eq!(image, (FIRST_CONTENT..10).collect::<Vec<_>>());
        let src = [3, 4, 5, 6, 7];
        let t = transduce(TaskKind::ToyTranslation, &src, &map);
        assert_eq!(t, vec![map[4], map[3], map[6], map[5], map[7]]);
    }

    #[test]
    fn same_seed_same_data() {
        let spec = small(TaskKind::ToyTranslation);
        let a = generate_task(&spec).unwrap();
        let b = generate_task(&spec).unwrap();
        assert_eq!(pairs_to_text(&a.train), pairs_to_text(&b.train));
        assert_eq!(a, b);
        let c = generate_task(&TaskSpec { seed: 2, ..spec }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let d = generate_task(&small(TaskKind::Copy)).unwrap();
        assert_eq!((d.train.len(), d.dev.len(), d.test.len()), (300, 50, 50));
        let train: HashSet<_> = d.train.iter().map(|p| &p.0).collect();
        assert!(d.dev.iter().chain(&d.test).all(|p| !train.contains(&p.0)));
        for (s, _) in d.train.iter().chain(&d.dev) {
            assert!((5..=20).contains(&s.len()));
            assert!(s.iter().all(|&t| (FIRST_CONTENT..64).contains(&t)));
        }
    }

    #[test]
    fn infeasible_split_sizes_rejected() {
        let spec = TaskSpec {
            vocab_size: 5,
            min_len: 1,
            max_len: 2,
            train: 5,
            dev: 1,
            test: 1,
            ..TaskSpec::default()
        };
        // 2 + 4 = 6 sequences exist
        assert!(matches!(generate_task(&spec), Err(Error::Generation(_))));
        assert!(generate_task(&TaskSpec { train: 4, ..spec }).is_ok());
    }

    #[test]
    fn bigram_shift_swaps_exactly_one_pair() {
        let spec = ProbeSpec {
            kind: ProbeKind::BigramShift,
            train: 400,
            dev: 0,
            test: 0,
            ..ProbeSpec::default()
        };
        let d = generate_probe(&spec).unwrap();
        let ones = d.train.iter().filter(|(l, _)| *l == 1).count();
        assert_eq!(ones, 200);
    }

    #[test]
    fn probe_balance_and_labels() {
        for kind in ProbeKind::ALL {
            let classes = if kind == ProbeKind::SeqLengthBucket { 4 } else { 2 };
            let spec = ProbeSpec {
                kind,
                classes,
                train: 1000,
                dev: 100,
                test: 200,
                ..ProbeSpec::default()
            };
            let d = generate_probe(&spec).unwrap();
            for split in [&d.train, &d.dev, &d.test] {
                for c in 0..classes {
                    let frac = split.iter().filter(|(l, _)| *l == c).count() as f64 / split.len() as f64;
                    assert!((frac - 1.0 / classes as f64).abs() <= 0.01, "{kind} class {c}: {frac}");
                }
            }
            match kind {
                ProbeKind::TokenContent => {
                    for (l, s) in &d.train {
                        assert_eq!(*l == 1, s.contains(&PROBE_TOKEN));
                    }
                }
                ProbeKind::SeqLengthBucket => {
                    let b = length_buckets(5, 20, 4);
                    for (l, s) in &d.train {
                        assert!((b[*l].0..=b[*l].1).contains(&s.len()));
                    }
                }
                ProbeKind::BigramShift => {}
            }
        }
    }

    #[test]
    fn text_round_trip() {
        let d = generate_task(&small(TaskKind::Copy)).unwrap();
        assert_eq!(pairs_from_text(&pairs_to_text(&d.dev)).unwrap(), d.dev);
        let p = generate_probe(&ProbeSpec {
            train: 20,
            dev: 2,
            test: 2,
            ..ProbeSpec::default()
        })
        .unwrap();
        assert_eq!(labeled_from_text(&labeled_to_text(&p.train)).unwrap(), p.train);
        assert!(pairs_from_text("3 4 5\n").is_err());
    }

    #[test]
    fn length_buckets_cover_range() {
        assert_eq!(length_buckets(5, 20, 4), vec![(5, 8), (9, 12), (13, 16), (17, 20)]);
        assert_eq!(length_buckets(1, 3, 3), vec![(1, 1), (2, 2), (3, 3)]);
    }
}
