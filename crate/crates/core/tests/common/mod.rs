//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use ehtl::tensor::{Rng, Tensor};

/// Row-wise log-softmax of random logits: a valid `[T x K]` CTC input.
pub fn random_log_probs(t: usize, k: usize, rng: &mut Rng) -> Tensor {
    let mut data = Vec::with_capacity(t * k);
    for _ in 0..t {
        let row: Vec<f64> = (0..k).map(|_| rng.normal(0.0, 1.5)).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        data.extend(row.iter().map(|x| x - lse));
    }
    Tensor::new(vec![t, k], data).unwrap()
}

/// Removes repeats, then blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != blank {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// `-ln p(labels)` by summing over every length-T path (K^T of them).
pub fn ctc_brute_force(log_probs: &Tensor, labels: &[usize], blank: usize) -> f64 {
    let (t, k) = (log_probs.shape()[0], log_probs.shape()[1]);
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    for code in 0..k.pow(t as u32) {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % k;
            c /= k;
        }
        if collapse(&path, blank) == labels {
            let lp: f64 = path.iter().enumerate().map(|(i, &s)| log_probs.at2(i, s)).sum();
            total += lp.exp();
        }
    }
    -total.ln()
}

/// Plain recursive Levenshtein distance with memoization.
pub fn levenshtein(a: &[char], b: &[char]) -> usize {
    fn go(a: &[char], b: &[char], memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if let Some(v) = memo[a.len()][b.len()] {
            return v;
        }
        let v = if a.is_empty() {
            b.len()
        } else if b.is_empty() {
            a.len()
        } else {
            let (ra, rb) = (&a[..a.len() - 1], &b[..b.len() - 1]);
            let sub = go(ra, rb, memo) + usize::from(a[a.len() - 1] != b[b.len() - 1]);
            sub.min(go(ra, b, memo) + 1).min(go(a, rb, memo) + 1)
        };
        memo[a.len()][b.len()] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
    go(a, b, &mut memo)
}

pub fn random_string(rng: &mut Rng, max_len: usize, alphabet: &[char]) -> String {
    let n = rng.int_range(0, max_len);
    (0..n).map(|_| alphabet[rng.int_range(0, alphabet.len() - 1)]).collect()
}

/// Scores drawn from a coarse grid so ties are common; both classes present.
pub fn tied_scored_set(rng: &mut Rng, n: usize, levels: usize) -> (Vec<f64>, Vec<bool>) {
    loop {
        let labels: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.4).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            let scores = labels
                .iter()
                .map(|&l| {
                    let shift = if l { 1.0 } else { 0.0 };
                    (rng.normal(shift, 1.0) * levels as f64 / 4.0).round() / levels as f64
                })
                .collect();
            return (scores, labels);
        }
    }
}

/// A correlated pair of score vectors for paired comparisons.
pub fn paired_scores(rng: &mut Rng, n_pos: usize, n_neg: usize, sep_a: f64, sep_b: f64) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n_pos + n_neg {
        let pos = i < n_pos;
        let shared = rng.normal(0.0, 1.0);
        let (ma, mb) = if pos { (sep_a, sep_b) } else { (0.0, 0.0) };
        a.push(ma + 0.7 * shared + 0.7 * rng.normal(0.0, 1.0));
        b.push(mb + 0.7 * shared + 0.7 * rng.normal(0.0, 1.0));
        labels.push(pos);
    }
    (a, b, labels)
}

/// A fast end-to-end configuration: a few dozen speakers, micro networks.
pub fn tiny_experiment() -> ehtl::trainer::ExperimentConfig {
    use ehtl::model::*;
    use ehtl::trainer::{ExperimentConfig, TrainConfig};
    let n_mels = 8;
    let base = ExperimentConfig::default();
    ExperimentConfig {
        corpus: ehtl::corpus::SyntheticCorpusConfig {
            n_speakers: 24,
            sessions_per_speaker: (1, 2),
            responses_per_session: (1, 2),
            response_seconds: (1.2, 1.8),
            seed: 1,
            ..base.corpus.clone()
        },
        features: ehtl::dsp::FeatureConfig {
            n_mels,
            ..base.features.clone()
        },
        model: ModelConfig {
            encoder: EncoderConfig {
                n_mels,
                conv_channels: vec![2, 2],
                lstm_layers: 1,
                hidden: 6,
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig {
                embed: 3,
                hidden: 6,
                attention: 4,
            },
            head: RcnnConfig {
                context: 3,
                projection: 4,
                embedding: 3,
            },
            fusion: FusionConfig { hidden: 3 },
            baseline: LstmBaselineConfig {
                frame_stack: 4,
                hidden: 4,
                embedding: 3,
            },
        },
        pretrain: TrainConfig {
            max_epochs: 2,
            patience: 1,
            ..base.pretrain.clone()
        },
        downstream: TrainConfig {
            max_epochs: 2,
            patience: 1,
            fusion_epochs: 3,
            ..base.downstream.clone()
        },
        arms: base.arms.clone(),
        seeds: vec![1, 2, 3],
    }
}
