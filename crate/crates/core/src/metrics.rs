//! Partition-agreement scores: NMI, Rand index and adjusted Rand index.
//!
//! Pair statistics are integer counts taken from the contingency table,
//! so RI is exact and ARI suffers a single rounding.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

/// Cluster ids `0..k`, one per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    labels: Vec<usize>,
    k: usize,
}

impl Partition {
    /// Relabels arbitrary ids to `0..k` in increasing order of the original
    /// id; the grouping is unchanged.
    pub fn new(raw: &[usize]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Data("partition is empty".into()));
        }
        let mut ids = BTreeMap::new();
        for &l in raw {
            ids.entry(l).or_insert(0);
        }
        for (next, v) in ids.values_mut().enumerate() {
            *v = next;
        }
        Ok(Partition { labels: raw.iter().map(|l| ids[l]).collect(), k: ids.len() })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `table[i][j]` counts samples in true cluster `i` and predicted cluster `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Contingency {
    pub table: Vec<Vec<u64>>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub n: u64,
}

pub fn contingency(truth: &Partition, pred: &Partition) -> Result<Contingency> {
    if truth.len() != pred.len() {
        return Err(Error::Data(format!("partition lengths differ: {} vs {}", truth.len(), pred.len())));
    }
    let mut table = vec![vec![0u64; pred.k]; truth.k];
    for (&a, &b) in truth.labels.iter().zip(&pred.labels) {
        table[a][b] += 1;
    }
    let row_sums = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums = (0..pred.k).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    Ok(Contingency { table, row_sums, col_sums, n: truth.len() as u64 })
}

fn pairs(m: u64) -> u128 {
    let m = u128::from(m);
    m * m.saturating_sub(1) / 2
}

/// Pair counts derived from a contingency table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PairCounts {
    /// `C(n, 2)`.
    pub total: u128,
    /// Pairs together in both partitions.
    pub together: u128,
    /// Pairs together in the true partition.
    pub together_true: u128,
    /// Pairs together in the predicted partition.
    pub together_pred: u128,
}

impl PairCounts {
    pub fn from_contingency(c: &Contingency) -> Self {
        PairCounts {
            total: pairs(c.n),
            together: c.table.iter().flatten().map(|&v| pairs(v)).sum(),
            together_true: c.row_sums.iter().map(|&v| pairs(v)).sum(),
            together_pred: c.col_sums.iter().map(|&v| pairs(v)).sum(),
        }
    }

    /// Pairs apart in both partitions.
    pub fn apart(&self) -> u128 {
        self.total + self.together - self.together_true - self.together_pred
    }

    pub fn rand_index(&self) -> f64 {
        (self.together + self.apart()) as f64 / self.total as f64
    }

    /// Permutation-model expectation of the Rand index.
    pub fn expected_rand_index(&self) -> f64 {
        let (t, a, b) = (self.total as f64, self.together_true as f64, self.together_pred as f64);
        let expected_together = a * b / t;
        (t - a - b + 2.0 * expected_together) / t
    }

    /// Upper bound of the Rand index used by the adjustment.
    pub fn max_rand_index(&self) -> f64 {
        let (t, a, b) = (self.total as f64, self.together_true as f64, self.together_pred as f64);
        (t - a - b + (a + b)) / t
    }

    pub fn ari(&self) -> f64 {
        // Both terms scaled by 2 * total to stay in integers.
        let (t, s, a, b) = (self.total as i128, self.together as i128, self.together_true as i128, self.together_pred as i128);
        let num = 2 * (s * t - a * b);
        let den = (a + b) * t - 2 * a * b;
        if den == 0 {
            return 1.0;
        }
        num as f64 / den as f64
    }
}

/// Sums in a fixed order, so relabeling or swapping the partitions cannot
/// change the rounding.
fn ordered_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.into_iter().sum()
}

fn entropy(sums: &[u64], n: f64) -> f64 {
    -ordered_sum(sums.iter().filter(|&&v| v > 0).map(|&v| (v as f64 / n) * (v as f64 / n).ln()).collect())
}

fn is_bijection(c: &Contingency) -> bool {
    c.table.len() == c.col_sums.len() && c.table.iter().all(|r| r.iter().filter(|&&v| v > 0).count() == 1)
}

/// Everything computed from one contingency table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusteringEvaluation {
    pub contingency: Contingency,
    pub n: u64,
    pub c1: u128,
    pub c2: u128,
    pub ri: f64,
    pub expected_ri: f64,
    pub max_ri: f64,
    pub ari: f64,
    pub mutual_information: f64,
    pub h_true: f64,
    pub h_pred: f64,
    pub nmi: f64,
}

pub fn evaluate(truth: &Partition, pred: &Partition) -> Result<ClusteringEvaluation> {
    let c = contingency(truth, pred)?;
    if c.n < 2 {
        return Err(Error::Data("pair-counting scores need at least 2 samples".into()));
    }
    let p = PairCounts::from_contingency(&c);
    let n = c.n as f64;
    let h_true = entropy(&c.row_sums, n);
    let h_pred = entropy(&c.col_sums, n);
    let mi = mutual_information(&c);
    Ok(ClusteringEvaluation {
        n: c.n,
        c1: p.together,
        c2: p.apart(),
        ri: p.rand_index(),
        expected_ri: p.expected_rand_index(),
        max_ri: p.max_rand_index(),
        ari: p.ari(),
        mutual_information: mi,
        h_true,
        h_pred,
        nmi: nmi_from(&c, mi, h_true, h_pred),
        contingency: c,
    })
}

fn mutual_information(c: &Contingency) -> f64 {
    let n = c.n as f64;
    let mut terms = Vec::new();
    for (i, row) in c.table.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v > 0 {
                let v = v as f64;
                terms.push((v / n) * (n * v / (c.row_sums[i] as f64 * c.col_sums[j] as f64)).ln());
            }
        }
    }
    ordered_sum(terms)
}

fn nmi_from(c: &Contingency, mi: f64, h_true: f64, h_pred: f64) -> f64 {
    match (h_true > 0.0, h_pred > 0.0) {
        (false, false) => 1.0,
        (true, true) if is_bijection(c) => 1.0,
        (true, true) => (mi / (h_true * h_pred).sqrt()).clamp(0.0, 1.0),
        _ => 0.0,
    }
}

/// `I(Z; Ẑ) / sqrt(H(Z) H(Ẑ))` with natural logarithms.
pub fn nmi(truth: &Partition, pred: &Partition) -> Result<f64> {
    let c = contingency(truth, pred)?;
    let n = c.n as f64;
    let (ht, hp) = (entropy(&c.row_sums, n), entropy(&c.col_sums, n));
    Ok(nmi_from(&c, mutual_information(&c), ht, hp))
}

pub fn rand_index(truth: &Partition, pred: &Partition) -> Result<f64> {
    Ok(evaluate(truth, pred)?.ri)
}

pub fn ari(truth: &Partition, pred: &Partition) -> Result<f64> {
    Ok(evaluate(truth, pred)?.ari)
}
