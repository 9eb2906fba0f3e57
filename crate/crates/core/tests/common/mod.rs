#![allow(dead_code)]

use std::collections::BTreeMap;

use evprobe::trace::{Condition, GenerationTrace, Matrix};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// P(s+ > s-) + ½ P(s+ = s-) over every positive/negative pair.
pub fn brute_force_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Two Gaussian blobs in 2-D, centers at (±3, ±3), noise sd 0.5.
pub fn blobs(n: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let pos = i % 2 == 0;
        let c = if pos { 3.0 } else { -3.0 };
        x.push(vec![c + 0.5 * normal(rng), c + 0.5 * normal(rng)]);
        y.push(pos);
    }
    (x, y)
}

/// A random trace with arbitrary but valid contents.
pub fn random_trace(rng: &mut ChaCha8Rng, k_store: usize, layers: &[u32], d: usize, qid: &str, sample: u32) -> GenerationTrace {
    let t = rng.gen_range(1..=12);
    let mut logits = Vec::with_capacity(t * k_store);
    for _ in 0..t {
        let mut row: Vec<f32> = (0..k_store).map(|_| (normal(rng) * 5.0) as f32).collect();
        row.sort_by(|a, b| b.total_cmp(a));
        logits.extend(row);
    }
    let mut hidden = BTreeMap::new();
    for &l in layers {
        let data: Vec<f32> = (0..t * d).map(|_| rng.gen::<f32>() * 200.0 - 100.0).collect();
        hidden.insert(l, Matrix::new(t, d, data).unwrap());
    }
    let condition = match rng.gen_range(0..3) {
        0 => Condition::Woc,
        1 => Condition::Wcc,
        _ => Condition::Wic,
    };
    let text_len = rng.gen_range(0..40);
    let response_text: String = (0..text_len)
        .map(|_| ['a', 'é', ' ', '字', '"', '\n', 'Z'][rng.gen_range(0..7)])
        .collect();
    GenerationTrace {
        question_id: qid.to_owned(),
        condition,
        sample_index: sample,
        response_token_ids: (0..t).map(|_| rng.gen()).collect(),
        chosen_logprobs: (0..t).map(|_| -(rng.gen::<f32>() * 10.0)).collect(),
        topk_token_ids: (0..t * k_store).map(|_| rng.gen()).collect(),
        topk_logits: Matrix::new(t, k_store, logits).unwrap(),
        hidden_states: hidden,
        p_true: if rng.gen_bool(0.5) { Some(rng.gen::<f64>()) } else { None },
        response_text,
    }
}
