//! Evaluation metrics over labeled samples and run histories.
//!
//! Diversity and performance@128 are analogs of the Design-Bench style
//! numbers: mean pairwise Hamming distance (fixed length) or normalized
//! Levenshtein distance (variable length), and the best normalized score.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqcore::TokenSeq;

/// Unique sequences with their best score, sorted descending (ties by token order).
pub fn unique_ranked(samples: &[(TokenSeq, f64)]) -> Vec<(TokenSeq, f64)> {
    let mut best: HashMap<&TokenSeq, f64> = HashMap::new();
    for (x, s) in samples {
        let e = best.entry(x).or_insert(*s);
        if *s > *e {
            *e = *s;
        }
    }
    let mut v: Vec<(TokenSeq, f64)> = best.into_iter().map(|(x, s)| (x.clone(), s)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub mean: f64,
    pub sd: f64,
    pub scores: Vec<f64>,
}

/// Mean and (population) standard deviation of the top-k unique scores.
pub fn eval_topk(samples: &[(TokenSeq, f64)], k: usize) -> Result<TopK> {
    let ranked = unique_ranked(samples);
    if k == 0 || ranked.len() < k {
        return Err(Error::NotEnoughUnique { k, have: ranked.len() });
    }
    let scores: Vec<f64> = ranked[..k].iter().map(|r| r.1).collect();
    let mean = scores.iter().sum::<f64>() / k as f64;
    let sd = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / k as f64).sqrt();
    Ok(TopK { mean, sd, scores })
}

pub fn hamming(a: &TokenSeq, b: &TokenSeq) -> f64 {
    let (a, b) = (a.tokens(), b.tokens());
    let diff = a.iter().zip(b).filter(|(x, y)| x != y).count();
    (diff + a.len().abs_diff(b.len())) as f64
}

pub fn levenshtein(a: &TokenSeq, b: &TokenSeq) -> usize {
    let (a, b) = (a.tokens(), b.tokens());
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean pairwise distance over the top-k unique sequences: Hamming when all
/// have equal length, otherwise Levenshtein divided by the longer length.
pub fn eval_diversity(samples: &[(TokenSeq, f64)], k: usize) -> Result<f64> {
    let ranked = unique_ranked(samples);
    if ranked.len() < k || k == 0 {
        return Err(Error::NotEnoughUnique { k, have: ranked.len() });
    }
    let top: Vec<&TokenSeq> = ranked[..k].iter().map(|r| &r.0).collect();
    if k == 1 {
        return Ok(0.0);
    }
    let fixed = top.iter().all(|x| x.len() == top[0].len());
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in i + 1..k {
            total += if fixed {
                hamming(top[i], top[j])
            } else {
                levenshtein(top[i], top[j]) as f64 / top[i].len().max(top[j].len()) as f64
            };
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Area under the best-so-far top-10 mean curve, one step per query and held
/// flat from the last query to `budget`, divided by `budget`. `history`
/// holds normalized scores in query order; while fewer than ten queries
/// exist the mean is over those available.
pub fn eval_auc_top10(history: &[f64], budget: usize) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let budget = budget.max(history.len());
    let mut top: Vec<f64> = Vec::with_capacity(11);
    let mut area = 0.0;
    let mut current = 0.0;
    for &s in history {
        let pos = top.partition_point(|&v| v >= s);
        top.insert(pos, s);
        top.truncate(10);
        current = top.iter().sum::<f64>() / top.len() as f64;
        area += current;
    }
    area += current * (budget - history.len()) as f64;
    Ok(area / budget as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top2: f64,
    pub top3: f64,
    pub top50: Option<TopK>,
    pub top100: Option<TopK>,
    /// Best normalized score among the top 128 unique samples (analog).
    pub performance_at_128: Option<f64>,
    /// Mean pairwise distance among the top 128 unique samples (analog).
    pub diversity_at_128: Option<f64>,
    pub auc_top10: Option<f64>,
    pub queries_used: Option<u64>,
}

/// Builds the report; `range` normalizes scores for performance and AUC.
pub fn evaluate(
    samples: &[(TokenSeq, f64)],
    range: Option<(f64, f64)>,
    history: Option<(&[f64], usize)>,
    queries_used: Option<u64>,
) -> Result<EvalReport> {
    let ranked = unique_ranked(samples);
    if ranked.is_empty() {
        return Err(Error::NotEnoughUnique { k: 1, have: 0 });
    }
    let at = |i: usize| ranked.get(i).map_or(f64::NAN, |r| r.1);
    let norm = |s: f64| range.map_or(s, |(lo, hi)| (s - lo) / (hi - lo));
    let auc = match history {
        Some((h, budget)) if !h.is_empty() => {
            let normed: Vec<f64> = h.iter().map(|&s| norm(s)).collect();
            Some(eval_auc_top10(&normed, budget)?)
        }
        _ => None,
    };
    Ok(EvalReport {
        top1: at(0),
        top2: at(1),
        top3: at(2),
        top50: eval_topk(samples, 50).ok(),
        top100: eval_topk(samples, 100).ok(),
        performance_at_128: (ranked.len() >= 128).then(|| norm(ranked[0].1)),
        diversity_at_128: eval_diversity(samples, 128).ok(),
        auc_top10: auc,
        queries_used,
    })
}
