//! Full-catalog ranking metrics and true/false-positive diagnostics.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::backbones::{BatchContext, Model};
use crate::error::{contract, Result};
use crate::ingest::InteractionDataset;
use crate::weighting::{LossRecordSet, WeightTable};

/// Cutoffs reported by default.
pub const DEFAULT_KS: [usize; 2] = [50, 100];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankingMetric {
    Recall,
    Ndcg,
}

impl fmt::Display for RankingMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankingMetric::Recall => "recall",
            RankingMetric::Ndcg => "ndcg",
        })
    }
}

/// Descending score, ties by ascending item index.
#[inline]
fn rank_order(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// The `k` best items by score, skipping items flagged in `excluded`.
pub fn top_k(scores: &[f64], k: usize, excluded: &[bool]) -> Vec<u32> {
    let mut cand: Vec<(f64, u32)> = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| !excluded.get(*i).copied().unwrap_or(false))
        .map(|(i, &s)| (s, i as u32))
        .collect();
    if k == 0 {
        return Vec::new();
    }
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, rank_order);
        cand.truncate(k);
    }
    cand.sort_unstable_by(rank_order);
    cand.into_iter().map(|(_, i)| i).collect()
}

/// `|top-k ∩ relevant| / |relevant|`; `None` when nothing is relevant.
pub fn recall_at_k(ranked: &[u32], relevant: &FxHashSet<u32>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = ranked.iter().take(k).filter(|i| relevant.contains(i)).count();
    Some(hits as f64 / relevant.len() as f64)
}

/// Binary-relevance NDCG with a `log2(p + 1)` discount and the ideal DCG
/// truncated at `min(|relevant|, k)`.
pub fn ndcg_at_k(ranked: &[u32], relevant: &FxHashSet<u32>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(p, _)| 1.0 / ((p + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..relevant.len().min(k)).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
    Some(if idcg > 0.0 { dcg / idcg } else { 0.0 })
}

/// Averaged metrics at each cutoff plus the per-user values behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    /// Users with a nonempty relevance set, ascending.
    pub users: Vec<u32>,
    /// `per_user_recall[k][j]` is user `users[j]` at cutoff `ks[k]`.
    pub per_user_recall: Vec<Vec<f64>>,
    pub per_user_ndcg: Vec<Vec<f64>>,
}

impl MetricsReport {
    pub fn get(&self, metric: RankingMetric, k: usize) -> Option<f64> {
        let pos = self.ks.iter().position(|&x| x == k)?;
        Some(match metric {
            RankingMetric::Recall => self.recall[pos],
            RankingMetric::Ndcg => self.ndcg[pos],
        })
    }

    pub fn empty(ks: &[usize]) -> Self {
        Self {
            ks: ks.to_vec(),
            recall: vec![0.0; ks.len()],
            ndcg: vec![0.0; ks.len()],
            users: Vec::new(),
            per_user_recall: vec![Vec::new(); ks.len()],
            per_user_ndcg: vec![Vec::new(); ks.len()],
        }
    }

    /// `metric,K,value` rows (recall first, then ndcg).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "metric,K,value")?;
        for (metric, vals) in [("recall", &self.recall), ("ndcg", &self.ndcg)] {
            for (k, v) in self.ks.iter().zip(vals.iter()) {
                writeln!(out, "{metric},{k},{v}")?;
            }
        }
        Ok(())
    }
}

/// Ranks every non-excluded item for each user holding relevant items and
/// scores the top of that ranking against them.
///
/// `excluded` lists datasets whose interactions are removed from each user's
/// candidate set (training interactions at minimum).
pub fn evaluate(
    model: &Model,
    ctx: &BatchContext<'_>,
    relevant: &InteractionDataset,
    excluded: &[&InteractionDataset],
    ks: &[usize],
) -> Result<MetricsReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(contract("cutoffs must be positive"));
    }
    let (m, n, _) = model.shape();
    if relevant.num_users() != m || relevant.num_items() != n {
        return Err(contract("evaluation set does not match model dimensions"));
    }
    let rel_rows = relevant.items_by_user();
    let mut excl_rows: Vec<Vec<u32>> = vec![Vec::new(); m];
    for ds in excluded {
        for it in ds.interactions() {
            excl_rows[it.user as usize].push(it.item);
        }
    }
    let users: Vec<u32> = (0..m as u32).filter(|&u| !rel_rows[u as usize].is_empty()).collect();
    let k_max = *ks.iter().max().expect("nonempty");

    let per_user: Vec<(Vec<f64>, Vec<f64>)> = users
        .par_iter()
        .map(|&u| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut scores = vec![0.0; n];
            model.score_items(u, ctx, &mut scores)?;
            let mut mask = vec![false; n];
            for &i in &excl_rows[u as usize] {
                mask[i as usize] = true;
            }
            let ranked = top_k(&scores, k_max, &mask);
            let rel: FxHashSet<u32> = rel_rows[u as usize].iter().copied().collect();
            let r = ks.iter().map(|&k| recall_at_k(&ranked, &rel, k).unwrap_or(0.0)).collect();
            let d = ks.iter().map(|&k| ndcg_at_k(&ranked, &rel, k).unwrap_or(0.0)).collect();
            Ok((r, d))
        })
        .collect::<Result<_>>()?;

    let mut report = MetricsReport::empty(ks);
    report.users = users;
    for k in 0..ks.len() {
        report.per_user_recall[k] = per_user.iter().map(|p| p.0[k]).collect();
        report.per_user_ndcg[k] = per_user.iter().map(|p| p.1[k]).collect();
        if !per_user.is_empty() {
            let cnt = per_user.len() as f64;
            report.recall[k] = report.per_user_recall[k].iter().sum::<f64>() / cnt;
            report.ndcg[k] = report.per_user_ndcg[k].iter().sum::<f64>() / cnt;
        }
    }
    Ok(report)
}

/// Mean loss and mean weight of clean vs. noisy positive training samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseDiagnostics {
    pub tp_loss: Option<f64>,
    pub fp_loss: Option<f64>,
    pub tp_weight: Option<f64>,
    pub fp_weight: Option<f64>,
}

/// Group means over records whose pair appears in `noise_flags` (the positive
/// training pairs, mapped to their noise flag). Other records are ignored.
pub fn tp_fp_diagnostics(
    records: &LossRecordSet,
    table: &WeightTable,
    noise_flags: &FxHashMap<u64, bool>,
) -> NoiseDiagnostics {
    let mut sums = [[0.0f64; 2]; 2]; // [clean, noisy] x [loss, weight]
    let mut counts = [0usize; 2];
    for r in records.entries() {
        let Some(&noisy) = noise_flags.get(&crate::ingest::pair_key(r.user, r.item)) else {
            continue;
        };
        let g = noisy as usize;
        sums[g][0] += r.loss;
        sums[g][1] += table.get(r.user, r.item);
        counts[g] += 1;
    }
    let mean = |g: usize, f: usize| (counts[g] > 0).then(|| sums[g][f] / counts[g] as f64);
    NoiseDiagnostics {
        tp_loss: mean(0, 0),
        fp_loss: mean(1, 0),
        tp_weight: mean(0, 1),
        fp_weight: mean(1, 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::pair_key;
    use crate::weighting::LossRecord;

    fn set(items: &[u32]) -> FxHashSet<u32> {
        items.iter().copied().collect()
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&[3, 1, 2], &set(&[1, 3]), 2), Some(1.0));
        // relevant {a, b}, top-2 {a, c}
        assert_eq!(recall_at_k(&[0, 2, 1], &set(&[0, 1]), 2), Some(0.5));
        assert_eq!(recall_at_k(&[0], &set(&[]), 1), None);
    }

    #[test]
    fn ndcg_examples() {
        assert!((ndcg_at_k(&[4, 7, 1], &set(&[4, 7]), 3).unwrap() - 1.0).abs() < 1e-15);
        let second = ndcg_at_k(&[9, 5, 1], &set(&[5]), 2).unwrap();
        assert!((second - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((second - 0.6309297535714575).abs() < 1e-12);
        assert_eq!(ndcg_at_k(&[1, 2, 3], &set(&[8]), 3), Some(0.0));
    }

    #[test]
    fn top_k_breaks_ties_by_index_and_skips_excluded() {
        let scores = [0.5, 0.9, 0.5, 0.1, 0.9];
        assert_eq!(top_k(&scores, 3, &[]), vec![1, 4, 0]);
        let mask = [false, true, false, false, false];
        assert_eq!(top_k(&scores, 10, &mask), vec![4, 0, 2, 3]);
    }

    #[test]
    fn diagnostics_split_by_flag() {
        let recs = LossRecordSet::from_entries(vec![
            LossRecord { user: 0, item: 0, loss: 0.2 },
            LossRecord { user: 0, item: 1, loss: 0.8 },
            LossRecord { user: 1, item: 1, loss: 5.0 },
        ])
        .unwrap();
        let mut flags = FxHashMap::default();
        flags.insert(pair_key(0, 0), false);
        flags.insert(pair_key(0, 1), true);
        let mut table = WeightTable::ones();
        table.insert(0, 1, 0.25).unwrap();
        let d = tp_fp_diagnostics(&recs, &table, &flags);
        assert_eq!(d.tp_loss, Some(0.2));
        assert_eq!(d.fp_loss, Some(0.8));
        assert_eq!(d.tp_weight, Some(1.0));
        assert_eq!(d.fp_weight, Some(0.25));

        flags.insert(pair_key(0, 1), false);
        let d = tp_fp_diagnostics(&recs, &table, &flags);
        assert_eq!((d.fp_loss, d.fp_weight), (None, None));
    }

    #[test]
    fn metrics_csv_layout() {
        let mut r = MetricsReport::empty(&[50]);
        r.recall[0] = 0.25;
        r.ndcg[0] = 0.5;
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "metric,K,value\nrecall,50,0.25\nndcg,50,0.5\n");
    }
}
