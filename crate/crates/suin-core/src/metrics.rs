//! Evaluation metrics: tie-aware AUC, logloss, and the grouping buckets used
//! by per-segment reports.

use crate::error::{Error, Result};

/// Probability floor/ceiling applied before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// AUC by the rank statistic: probability a random positive outranks a random
/// negative, with ties contributing one half. Errors when labels are all one
/// class.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            op: "auc",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(Error::AucUndefined(0));
    }
    if neg == 0 {
        return Err(Error::AucUndefined(1));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Average 1-based ranks over tie groups, then sum positive ranks.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Mean binary cross-entropy with predictions clamped away from {0, 1}.
pub fn logloss(predictions: &[f64], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Dimension {
            op: "logloss",
            lhs: vec![predictions.len()],
            rhs: vec![labels.len()],
        });
    }
    if predictions.is_empty() {
        return Err(Error::Config("logloss of an empty batch".into()));
    }
    let mut total = 0.0;
    for (&p, &y) in predictions.iter().zip(labels) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / predictions.len() as f64)
}

/// Power-of-two sequence-length buckets: "1", "2", "3-4", "5-8", "9-16", …
pub fn seq_length_bucket(len: usize) -> String {
    match len {
        0 => "0".to_string(),
        1 => "1".to_string(),
        2 => "2".to_string(),
        _ => {
            let hi = len.next_power_of_two();
            let hi = if hi == len { len } else { hi };
            let lo = hi / 2 + 1;
            format!("{lo}-{hi}")
        }
    }
}

/// Unit-width augmentation-ratio buckets: ratio r lands in "⌊r⌋-⌊r⌋+1".
pub fn aug_ratio_bucket(ratio: f64) -> String {
    let lo = ratio.floor().max(0.0) as u64;
    format!("{lo}-{}", lo + 1)
}

/// Numeric sort key for bucket labels ("3-4" sorts by 3).
pub fn bucket_sort_key(label: &str) -> u64 {
    label
        .split('-')
        .next()
        .and_then(|s| s.parse().ok())
        .unwrap_or(u64::MAX)
}
