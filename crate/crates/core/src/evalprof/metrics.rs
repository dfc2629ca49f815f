use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::binary_cross_entropy;
use crate::error::{Error, Result};

/// Largest partition size `cluster_accuracy` accepts.
pub const MAX_MATCH_CLUSTERS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub logloss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nmi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cluster_accuracy: Option<f64>,
    pub samples: usize,
}

fn check_lengths(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(what, format!("{a} values against {b} labels")));
    }
    Ok(())
}

/// Mann-Whitney AUC with ties counted ½, via average ranks.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths("auc", scores.len(), labels.len())?;
    let pos = labels.iter().filter(|&&y| y > 0.5).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of (doubled) ranks of positives; doubling keeps tie ranks integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let doubled_rank = (i + 1 + j + 1) as u128;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] > 0.5).count() as u128;
        rank_sum2 += doubled_rank * tied_pos;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let wins2 = rank_sum2 - p * (p + 1);
    Ok(wins2 as f64 / (2 * p * n) as f64)
}

/// Mean binary cross-entropy; the same definition as the training loss.
pub fn logloss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths("logloss", probs.len(), labels.len())?;
    if probs.is_empty() {
        return Err(Error::UndefinedMetric("logloss of an empty set".into()));
    }
    Ok(binary_cross_entropy(probs, labels))
}

/// Joint counts of two labelings, with both sides relabelled densely in
/// ascending label order.
pub struct Contingency {
    pub counts: Vec<Vec<u64>>,
    pub total: u64,
}

impl Contingency {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        check_lengths("contingency", a.len(), b.len())?;
        let dense = |xs: &[usize]| -> BTreeMap<usize, usize> {
            let mut m = BTreeMap::new();
            for &x in xs {
                m.entry(x).or_insert(0);
            }
            m.values_mut().enumerate().for_each(|(i, v)| *v = i);
            m
        };
        let (da, db) = (dense(a), dense(b));
        let mut counts = vec![vec![0u64; db.len()]; da.len()];
        for (x, y) in a.iter().zip(b) {
            counts[da[x]][db[y]] += 1;
        }
        Ok(Contingency {
            counts,
            total: a.len() as u64,
        })
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        let cols = self.counts.first().map_or(0, Vec::len);
        (0..cols).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }
}

fn entropy(sums: &[u64], n: f64) -> f64 {
    sums.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information, `I(A;B) / ((H(A)+H(B))/2)`; 0 when either
/// partition is constant.
pub fn nmi(assignments: &[usize], truth: &[usize]) -> Result<f64> {
    let t = Contingency::new(assignments, truth)?;
    if t.total == 0 {
        return Err(Error::UndefinedMetric("nmi of an empty set".into()));
    }
    let n = t.total as f64;
    let (rows, cols) = (t.row_sums(), t.col_sums());
    let (ha, hb) = (entropy(&rows, n), entropy(&cols, n));
    if rows.len() < 2 || cols.len() < 2 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in t.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (n * c / (rows[i] as f64 * cols[j] as f64)).ln();
            }
        }
    }
    Ok((mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0))
}

/// Best fraction of samples labelled correctly under an injective mapping
/// from clusters to truth labels.
pub fn cluster_accuracy(assignments: &[usize], truth: &[usize]) -> Result<f64> {
    let t = Contingency::new(assignments, truth)?;
    if t.total == 0 {
        return Err(Error::UndefinedMetric("cluster accuracy of an empty set".into()));
    }
    let (k, c) = (t.counts.len(), t.counts.first().map_or(0, Vec::len));
    if k > MAX_MATCH_CLUSTERS || c > MAX_MATCH_CLUSTERS {
        return Err(Error::Contract(format!(
            "cluster accuracy supports at most {MAX_MATCH_CLUSTERS} labels per side, got {k} and {c}"
        )));
    }
    // best[mask] = most matches using exactly the truth labels in `mask`.
    let mut best = vec![None::<u64>; 1 << c];
    best[0] = Some(0);
    for row in &t.counts {
        let prev = best.clone();
        for (mask, v) in prev.iter().enumerate() {
            let Some(v) = *v else { continue };
            for (j, &cnt) in row.iter().enumerate() {
                if mask & (1 << j) == 0 {
                    let slot = &mut best[mask | (1 << j)];
                    *slot = Some(slot.map_or(v + cnt, |s| s.max(v + cnt)));
                }
            }
        }
    }
    let matched = best.iter().flatten().max().copied().unwrap_or(0);
    Ok(matched as f64 / t.total as f64)
}
