//! Per-epoch sample weighting.
//!
//! At the end of every epoch the losses observed for each training sample are
//! turned into next-epoch confidence weights in three steps:
//!
//! 1. a base weight per sample from the epoch's loss distribution (ECDF with
//!    Hazen plotting positions by default, or one of the comparison
//!    strategies: uniform, 2-component GMM, hard top-k, linear scaling);
//! 2. a reputation factor per user and per item, obtained by ranking their
//!    average loss and mapping ranks linearly onto `[alpha, beta]` so that the
//!    lowest-loss entity gets `beta`;
//! 3. the product `base * user_factor * item_factor`.
//!
//! Every strategy receives raw, nonnegative losses; lower loss always means
//! higher weight.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Loss observed for one training-sample occurrence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub user: u32,
    pub item: u32,
    pub loss: f64,
}

/// All sample losses of one epoch, in the order they were produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossRecordSet {
    entries: Vec<LossRecord>,
}

impl LossRecordSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            entries: Vec::with_capacity(n),
        }
    }

    pub fn from_entries(entries: Vec<LossRecord>) -> Result<Self> {
        let set = Self { entries };
        set.validate()?;
        Ok(set)
    }

    pub fn push(&mut self, user: u32, item: u32, loss: f64) -> Result<()> {
        if !(loss >= 0.0) || !loss.is_finite() {
            return Err(contract(format!("loss {loss} for ({user}, {item}) is not finite and nonnegative")));
        }
        self.entries.push(LossRecord { user, item, loss });
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        match self.entries.iter().find(|r| !(r.loss >= 0.0) || !r.loss.is_finite()) {
            Some(r) => Err(contract(format!(
                "loss {} for ({}, {}) is not finite and nonnegative",
                r.loss, r.user, r.item
            ))),
            None => Ok(()),
        }
    }

    pub fn entries(&self) -> &[LossRecord] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|r| r.loss).collect()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Running per-user and per-item loss sums and counts.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityLossStats {
    pub user_loss_sum: Vec<f64>,
    pub user_count: Vec<u64>,
    pub item_loss_sum: Vec<f64>,
    pub item_count: Vec<u64>,
}

impl EntityLossStats {
    pub fn new(num_users: usize, num_items: usize) -> Self {
        Self {
            user_loss_sum: vec![0.0; num_users],
            user_count: vec![0; num_users],
            item_loss_sum: vec![0.0; num_items],
            item_count: vec![0; num_items],
        }
    }

    pub fn reset(&mut self) {
        self.user_loss_sum.fill(0.0);
        self.user_count.fill(0);
        self.item_loss_sum.fill(0.0);
        self.item_count.fill(0);
    }

    pub fn add(&mut self, user: u32, item: u32, loss: f64) -> Result<()> {
        if !(loss >= 0.0) || !loss.is_finite() {
            return Err(contract(format!("cannot accumulate loss {loss}")));
        }
        let (u, i) = (user as usize, item as usize);
        if u >= self.user_count.len() || i >= self.item_count.len() {
            return Err(contract(format!("record ({user}, {item}) out of range")));
        }
        self.user_loss_sum[u] += loss;
        self.user_count[u] += 1;
        self.item_loss_sum[i] += loss;
        self.item_count[i] += 1;
        Ok(())
    }

    pub fn accumulate(&mut self, records: &LossRecordSet) -> Result<()> {
        for r in records.entries() {
            self.add(r.user, r.item, r.loss)?;
        }
        Ok(())
    }

    /// Average loss per entity; `None` where the entity had no samples.
    pub fn mean_entity_loss(&self) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
        let avg = |sums: &[f64], counts: &[u64]| -> Vec<Option<f64>> {
            sums.iter()
                .zip(counts)
                .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
                .collect()
        };
        (
            avg(&self.user_loss_sum, &self.user_count),
            avg(&self.item_loss_sum, &self.item_count),
        )
    }
}

/// Reputation scores for all users (or all items), each in `[alpha, beta]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReputationVector {
    pub scores: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl ReputationVector {
    pub fn constant(len: usize, value: f64) -> Self {
        Self {
            scores: vec![value; len],
            alpha: value,
            beta: value,
        }
    }
}

/// Linear rank map. Present entities are ranked ascending by average loss
/// (ties by entity index); rank `r` of `k` maps to
/// `alpha + (beta - alpha) * (k - r) / (k - 1)`. Absent entities, and the lone
/// entity when `k == 1`, get the midpoint.
pub fn rank_map(avg_losses: &[Option<f64>], alpha: f64, beta: f64) -> Result<ReputationVector> {
    if !(alpha >= 0.0 && alpha <= beta && beta.is_finite()) {
        return Err(contract(format!("need 0 <= alpha <= beta, got alpha={alpha} beta={beta}")));
    }
    let mid = (alpha + beta) / 2.0;
    let mut scores = vec![mid; avg_losses.len()];
    let mut present: Vec<(f64, usize)> = avg_losses
        .iter()
        .enumerate()
        .filter_map(|(k, l)| l.map(|v| (v, k)))
        .collect();
    let k = present.len();
    if k >= 2 {
        present.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let span = beta - alpha;
        let denom = (k - 1) as f64;
        for (pos, &(_, idx)) in present.iter().enumerate() {
            // pos is rank - 1; endpoints are pinned since alpha + (beta - alpha)
            // need not round back to beta.
            scores[idx] = if pos == 0 {
                beta
            } else if pos == k - 1 {
                alpha
            } else {
                (alpha + span * (k - 1 - pos) as f64 / denom).clamp(alpha, beta)
            };
        }
    }
    Ok(ReputationVector {
        scores,
        alpha,
        beta,
    })
}

/// ECDF of the negated losses with Hazen plotting positions: a sample's rank
/// is the number of negated losses `<=` its own, and its weight is
/// `(rank - 0.5) / n`. Tied losses share a weight.
pub fn ecdf_base_weights(losses: &[f64]) -> Vec<f64> {
    let n = losses.len();
    if n == 0 {
        return Vec::new();
    }
    // Sort once by an order-preserving integer key, then walk tie groups.
    let mut keyed: Vec<(u64, u32)> = losses
        .iter()
        .enumerate()
        .map(|(k, l)| (ordered_bits(-l), k as u32))
        .collect();
    keyed.sort_unstable_by_key(|e| e.0);
    let nf = n as f64;
    let mut weights = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let v = -losses[keyed[start].1 as usize];
        let mut end = start + 1;
        while end < n && -losses[keyed[end].1 as usize] == v {
            end += 1;
        }
        let w = (end as f64 - 0.5) / nf;
        for e in &keyed[start..end] {
            weights[e.1 as usize] = w;
        }
        start = end;
    }
    weights
}

/// Maps `f64` to `u64` so that integer order matches `f64::total_cmp`.
#[inline]
fn ordered_bits(x: f64) -> u64 {
    let b = x.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

pub fn uniform_base_weights(losses: &[f64]) -> Vec<f64> {
    vec![1.0; losses.len()]
}

/// Hard selection: the `floor((1 - rho) * n)` highest-loss samples get 0 and
/// the rest get 1. Ties at the cut are resolved by sample order.
pub fn topk_base_weights(losses: &[f64], remember_rate: f64) -> Result<Vec<f64>> {
    if !(remember_rate > 0.0 && remember_rate <= 1.0) {
        return Err(contract(format!("remember rate {remember_rate} outside (0, 1]")));
    }
    let n = losses.len();
    let discard = ((1.0 - remember_rate) * n as f64).floor() as usize;
    if discard == 0 {
        return Ok(vec![1.0; n]);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]));
    let mut weights = vec![0.0; n];
    for &k in &order[..n - discard] {
        weights[k] = 1.0;
    }
    Ok(weights)
}

/// Min-max scaling of the negated losses: lowest loss gets 1, highest 0.
/// Fewer than two samples or a zero range yields all ones.
pub fn linear_base_weights(losses: &[f64]) -> Vec<f64> {
    let n = losses.len();
    if n <= 1 {
        return vec![1.0; n];
    }
    let negated: Vec<f64> = losses.iter().map(|l| -l).collect();
    let lo = negated.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = negated.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return vec![1.0; n];
    }
    negated.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Result of the two-component mixture fit.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    /// Posterior probability of the clean component per sample.
    pub weights: Vec<f64>,
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub mixing: [f64; 2],
    pub clean_component: usize,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub variance_floor: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            variance_floor: 1e-6,
        }
    }
}

fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Fits a 2-component 1-D Gaussian mixture by EM on the negated losses and
/// weights each sample by its posterior for the component with the larger
/// mean. Initialized at the 25th/75th percentiles with equal mixing weights
/// and the pooled variance. Non-convergence returns the last iterate with
/// `converged == false`.
pub fn gmm_base_weights(losses: &[f64], cfg: &GmmConfig) -> GmmFit {
    let n = losses.len();
    if n <= 1 {
        return GmmFit {
            weights: vec![1.0; n],
            means: [0.0; 2],
            variances: [1.0; 2],
            mixing: [0.5; 2],
            clean_component: 0,
            iterations: 0,
            converged: true,
        };
    }
    let x: Vec<f64> = losses.iter().map(|l| -l).collect();
    let mut sorted = x.clone();
    sorted.sort_unstable_by(f64::total_cmp);
    let nf = n as f64;
    let mean_all = x.iter().sum::<f64>() / nf;
    let var_all = (x.iter().map(|v| (v - mean_all).powi(2)).sum::<f64>() / nf).max(cfg.variance_floor);

    let mut mu = [percentile_sorted(&sorted, 0.25), percentile_sorted(&sorted, 0.75)];
    let mut var = [var_all, var_all];
    let mut pi = [0.5f64, 0.5];
    let mut resp = vec![[0.5, 0.5]; n];
    let mut prev_ll = f64::NEG_INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();

    loop {
        // E-step
        let mut ll = 0.0;
        for (r, &v) in resp.iter_mut().zip(&x) {
            let mut lp = [0.0f64; 2];
            for c in 0..2 {
                lp[c] = pi[c].ln() - 0.5 * (ln_2pi + var[c].ln() + (v - mu[c]).powi(2) / var[c]);
            }
            let m = lp[0].max(lp[1]);
            let lse = m + ((lp[0] - m).exp() + (lp[1] - m).exp()).ln();
            r[0] = (lp[0] - lse).exp();
            r[1] = (lp[1] - lse).exp();
            ll += lse;
        }
        if (ll - prev_ll).abs() < cfg.tol {
            converged = true;
            break;
        }
        if iterations >= cfg.max_iters {
            break;
        }
        prev_ll = ll;
        iterations += 1;

        // M-step
        for c in 0..2 {
            let nk: f64 = resp.iter().map(|r| r[c]).sum();
            if nk <= f64::MIN_POSITIVE {
                continue;
            }
            mu[c] = resp.iter().zip(&x).map(|(r, v)| r[c] * v).sum::<f64>() / nk;
            var[c] = (resp.iter().zip(&x).map(|(r, v)| r[c] * (v - mu[c]).powi(2)).sum::<f64>() / nk)
                .max(cfg.variance_floor);
            pi[c] = nk / nf;
        }
    }

    let clean = if mu[1] > mu[0] { 1 } else { 0 };
    GmmFit {
        weights: resp.iter().map(|r| r[clean]).collect(),
        means: mu,
        variances: var,
        mixing: pi,
        clean_component: clean,
        iterations,
        converged,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Ecdf,
    Uniform,
    Gmm,
    Topk,
    Linear,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Ecdf => "ecdf",
            Strategy::Uniform => "uniform",
            Strategy::Gmm => "gmm",
            Strategy::Topk => "topk",
            Strategy::Linear => "linear",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ecdf" => Ok(Strategy::Ecdf),
            "uniform" => Ok(Strategy::Uniform),
            "gmm" => Ok(Strategy::Gmm),
            "topk" => Ok(Strategy::Topk),
            "linear" => Ok(Strategy::Linear),
            other => Err(contract(format!("unknown weighting strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightStrategyConfig {
    pub strategy: Strategy,
    /// Share of lowest-loss samples kept by `topk`.
    pub remember_rate: f64,
    pub gmm: GmmConfig,
}

impl Default for WeightStrategyConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Ecdf,
            remember_rate: 0.7,
            gmm: GmmConfig::default(),
        }
    }
}

impl WeightStrategyConfig {
    pub fn uniform() -> Self {
        Self {
            strategy: Strategy::Uniform,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.remember_rate > 0.0 && self.remember_rate <= 1.0) {
            return Err(contract("remember_rate must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Per-sample base weights under the configured strategy. The second value
/// is the mixture fit when the strategy is `gmm`.
pub fn base_weights(losses: &[f64], cfg: &WeightStrategyConfig) -> Result<(Vec<f64>, Option<GmmFit>)> {
    Ok(match cfg.strategy {
        Strategy::Ecdf => (ecdf_base_weights(losses), None),
        Strategy::Uniform => (uniform_base_weights(losses), None),
        Strategy::Topk => (topk_base_weights(losses, cfg.remember_rate)?, None),
        Strategy::Linear => (linear_base_weights(losses), None),
        Strategy::Gmm => {
            let fit = gmm_base_weights(losses, &cfg.gmm);
            (fit.weights.clone(), Some(fit))
        }
    })
}

/// Which factors take part in the fused weight; a disabled factor is 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Components {
    pub base: bool,
    pub item: bool,
    pub user: bool,
}

impl Components {
    pub const NONE: Components = Components {
        base: false,
        item: false,
        user: false,
    };
    pub const ALL: Components = Components {
        base: true,
        item: true,
        user: true,
    };

    /// The five ablation rows: none, BW, BW+IF, BW+UF, BW+IF+UF.
    pub fn ablation_rows() -> [Components; 5] {
        let c = |base, item, user| Components { base, item, user };
        [
            c(false, false, false),
            c(true, false, false),
            c(true, true, false),
            c(true, false, true),
            c(true, true, true),
        ]
    }

    pub fn is_none(&self) -> bool {
        !self.base && !self.item && !self.user
    }
}

impl fmt::Display for Components {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.base {
            parts.push("bw");
        }
        if self.item {
            parts.push("if");
        }
        if self.user {
            parts.push("uf");
        }
        f.write_str(&parts.join(","))
    }
}

impl FromStr for Components {
    type Err = Error;

    /// Comma- or plus-separated subset of `bw`, `if`, `uf`; empty or `none`
    /// disables everything.
    fn from_str(s: &str) -> Result<Self> {
        let mut c = Components::NONE;
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "bw" => c.base = true,
                "if" => c.item = true,
                "uf" => c.user = true,
                "none" => {}
                other => return Err(contract(format!("unknown component {other:?}"))),
            }
        }
        Ok(c)
    }
}

impl TryFrom<String> for Components {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Components> for String {
    fn from(c: Components) -> String {
        c.to_string()
    }
}

/// Sparse `(user, item) -> weight` map; pairs not present weigh 1.
///
/// Stored as one item-sorted row per user, which keeps both the epoch-end
/// build and per-sample lookups cache friendly.
#[derive(Debug, Clone, Default)]
pub struct WeightTable {
    rows: Vec<Vec<(u32, f64)>>,
    len: usize,
}

impl PartialEq for WeightTable {
    fn eq(&self, other: &Self) -> bool {
        self.len == other.len && self.sorted_entries() == other.sorted_entries()
    }
}

impl WeightTable {
    /// Table with no entries: every lookup returns 1.
    pub fn ones() -> Self {
        Self::default()
    }

    /// Builds from pairs in order; a repeated pair keeps its last weight.
    fn from_ordered(num_users: usize, pairs: impl Iterator<Item = (u32, u32, f64)>) -> Self {
        let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); num_users];
        for (u, i, w) in pairs {
            let u = u as usize;
            if u >= rows.len() {
                rows.resize_with(u + 1, Vec::new);
            }
            rows[u].push((i, w));
        }
        let mut len = 0;
        for row in &mut rows {
            // Stable, so equal items stay in arrival order and the last wins.
            row.sort_by_key(|e| e.0);
            let mut out = 0;
            for k in 0..row.len() {
                if out > 0 && row[out - 1].0 == row[k].0 {
                    row[out - 1] = row[k];
                } else {
                    row[out] = row[k];
                    out += 1;
                }
            }
            row.truncate(out);
            len += out;
        }
        Self { rows, len }
    }

    #[inline]
    fn find(&self, user: u32, item: u32) -> Option<f64> {
        let row = self.rows.get(user as usize)?;
        row.binary_search_by_key(&item, |e| e.0).ok().map(|k| row[k].1)
    }

    #[inline]
    pub fn get(&self, user: u32, item: u32) -> f64 {
        self.find(user, item).unwrap_or(1.0)
    }

    pub fn contains(&self, user: u32, item: u32) -> bool {
        self.find(user, item).is_some()
    }

    pub fn insert(&mut self, user: u32, item: u32, weight: f64) -> Result<()> {
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(contract(format!("weight {weight} is not finite and nonnegative")));
        }
        let u = user as usize;
        if u >= self.rows.len() {
            self.rows.resize_with(u + 1, Vec::new);
        }
        let row = &mut self.rows[u];
        match row.binary_search_by_key(&item, |e| e.0) {
            Ok(k) => row[k].1 = weight,
            Err(k) => {
                row.insert(k, (item, weight));
                self.len += 1;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Entries sorted by `(user, item)`.
    pub fn sorted_entries(&self) -> Vec<(u32, u32, f64)> {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(u, row)| row.iter().map(move |&(i, w)| (u as u32, i, w)))
            .collect()
    }

    /// `u<TAB>i<TAB>weight` lines sorted by pair, 17 significant digits.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        for (u, i, w) in self.sorted_entries() {
            writeln!(out, "{u}\t{i}\t{w:.16e}")?;
        }
        Ok(())
    }
}

/// `weight(u, i) = base * w_u[u] * w_i[i]` for every record, with disabled
/// factors replaced by 1. A pair recorded more than once keeps its last
/// record's weight.
pub fn fuse(
    records: &LossRecordSet,
    base: &[f64],
    user_rep: &ReputationVector,
    item_rep: &ReputationVector,
    components: Components,
) -> Result<WeightTable> {
    if base.len() != records.len() {
        return Err(contract(format!(
            "{} base weights for {} records",
            base.len(),
            records.len()
        )));
    }
    let mut fused = Vec::with_capacity(records.len());
    for (r, &b) in records.entries().iter().zip(base) {
        let wb = if components.base { b } else { 1.0 };
        let wu = if components.user {
            *user_rep
                .scores
                .get(r.user as usize)
                .ok_or_else(|| contract(format!("no reputation for user {}", r.user)))?
        } else {
            1.0
        };
        let wi = if components.item {
            *item_rep
                .scores
                .get(r.item as usize)
                .ok_or_else(|| contract(format!("no reputation for item {}", r.item)))?
        } else {
            1.0
        };
        let w = wb * wu * wi;
        if !(w >= 0.0) || !w.is_finite() {
            return Err(contract(format!("fused weight {w} for ({}, {})", r.user, r.item)));
        }
        fused.push((r.user, r.item, w));
    }
    Ok(WeightTable::from_ordered(user_rep.scores.len(), fused.into_iter()))
}

/// Everything needed to derive next-epoch weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateConfig {
    pub alpha: f64,
    pub beta: f64,
    pub strategy: WeightStrategyConfig,
    pub components: Components,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochWeights {
    pub table: WeightTable,
    pub user_reputation: ReputationVector,
    pub item_reputation: ReputationVector,
    pub gmm: Option<GmmFit>,
}

/// The epoch-end update: entity averages, rank maps, base weights, fusion.
/// `stats` must already hold this epoch's accumulated records.
pub fn epoch_end_update(
    records: &LossRecordSet,
    stats: &EntityLossStats,
    cfg: &UpdateConfig,
) -> Result<EpochWeights> {
    cfg.strategy.validate()?;
    let (user_avg, item_avg) = stats.mean_entity_loss();
    let user_reputation = rank_map(&user_avg, cfg.alpha, cfg.beta)?;
    let item_reputation = rank_map(&item_avg, cfg.alpha, cfg.beta)?;
    let (base, gmm) = if cfg.components.base {
        base_weights(&records.losses(), &cfg.strategy)?
    } else {
        (vec![1.0; records.len()], None)
    };
    let table = fuse(records, &base, &user_reputation, &item_reputation, cfg.components)?;
    Ok(EpochWeights {
        table,
        user_reputation,
        item_reputation,
        gmm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    /// Direct count of losses >= own loss, i.e. negated losses <= own.
    fn ecdf_oracle(losses: &[f64]) -> Vec<f64> {
        let n = losses.len() as f64;
        losses
            .iter()
            .map(|l| {
                let r = losses.iter().filter(|m| *m >= l).count() as f64;
                (r - 0.5) / n
            })
            .collect()
    }

    #[test]
    fn accumulate_sums_and_counts() {
        let mut st = EntityLossStats::new(2, 3);
        let recs = LossRecordSet::from_entries(vec![
            LossRecord { user: 0, item: 0, loss: 0.2 },
            LossRecord { user: 0, item: 1, loss: 0.4 },
        ])
        .unwrap();
        st.accumulate(&recs).unwrap();
        assert!((st.user_loss_sum[0] - 0.6).abs() < 1e-15);
        assert_eq!(st.user_count[0], 2);

        let before = st.clone();
        st.accumulate(&LossRecordSet::new()).unwrap();
        assert_eq!(st, before);

        let mut st = EntityLossStats::new(1, 2);
        for _ in 0..3 {
            st.add(0, 1, 0.1).unwrap();
        }
        assert!((st.item_loss_sum[1] - 0.3).abs() < 1e-15);
        assert_eq!(st.item_count[1], 3);
        assert!(st.add(0, 0, -1.0).is_err());
    }

    #[test]
    fn mean_loss_marks_unseen_entities() {
        let mut st = EntityLossStats::new(2, 1);
        st.add(0, 0, 0.2).unwrap();
        st.add(0, 0, 0.4).unwrap();
        let (users, items) = st.mean_entity_loss();
        assert!((users[0].unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(users[1], None);
        assert!((items[0].unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn rank_map_examples() {
        let r = rank_map(&[Some(0.2), Some(0.5), Some(0.9)], 1.0, 2.0).unwrap();
        assert_eq!(r.scores, vec![2.0, 1.5, 1.0]);
        let r = rank_map(&[Some(0.4), None, Some(0.1)], 0.0, 1.0).unwrap();
        assert_eq!(r.scores, vec![0.0, 0.5, 1.0]);
        let r = rank_map(&[Some(0.3), Some(0.1), Some(0.9)], 1.7, 1.7).unwrap();
        assert_eq!(r.scores, vec![1.7; 3]);
        let r = rank_map(&[Some(0.3)], 1.0, 3.0).unwrap();
        assert_eq!(r.scores, vec![2.0]);
        assert!(rank_map(&[Some(0.1)], 2.0, 1.0).is_err());
    }

    #[test]
    fn rank_map_ties_follow_index_order() {
        let r = rank_map(&[Some(0.5), Some(0.5), Some(0.1)], 0.0, 2.0).unwrap();
        assert_eq!(r.scores, vec![1.0, 0.0, 2.0]);
    }

    #[test]
    fn ecdf_examples() {
        assert_eq!(ecdf_base_weights(&[0.7]), vec![0.5]);
        assert!(close(&ecdf_base_weights(&[0.1, 0.5, 0.9]), &[2.5 / 3.0, 1.5 / 3.0, 0.5 / 3.0]));
        assert_eq!(ecdf_base_weights(&[0.3, 0.3]), vec![0.75, 0.75]);
        assert!(ecdf_base_weights(&[]).is_empty());
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_base_weights(&[0.1, 0.5, 0.9, 0.7], 0.5).unwrap(), vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(topk_base_weights(&[0.1, 0.5, 0.9], 1.0).unwrap(), vec![1.0; 3]);
        assert_eq!(topk_base_weights(&[0.4], 0.5).unwrap(), vec![1.0]);
        // Ties at the cut keep the earlier record.
        assert_eq!(topk_base_weights(&[0.5, 0.5, 0.1, 0.5], 0.5).unwrap(), vec![1.0, 0.0, 1.0, 0.0]);
        assert!(topk_base_weights(&[0.1], 0.0).is_err());
    }

    #[test]
    fn linear_examples() {
        assert!(close(&linear_base_weights(&[0.1, 0.5, 0.9]), &[1.0, 0.5, 0.0]));
        assert_eq!(linear_base_weights(&[0.4, 0.4, 0.4]), vec![1.0; 3]);
        assert_eq!(linear_base_weights(&[0.4]), vec![1.0]);
    }

    #[test]
    fn uniform_examples() {
        assert_eq!(uniform_base_weights(&[0.1, 0.2, 3.0]), vec![1.0; 3]);
        assert!(uniform_base_weights(&[]).is_empty());
    }

    #[test]
    fn gmm_separates_two_wells() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let lo = Normal::new(0.1, 0.02).unwrap();
        let hi = Normal::new(2.0, 0.02).unwrap();
        let mut losses: Vec<f64> = (0..100).map(|_| f64::max(lo.sample(&mut rng), 0.0)).collect();
        losses.extend((0..100).map(|_| hi.sample(&mut rng)));
        let fit = gmm_base_weights(&losses, &GmmConfig::default());
        assert!(fit.converged);
        assert!(fit.weights[..100].iter().all(|w| *w > 0.99));
        assert!(fit.weights[100..].iter().all(|w| *w < 0.01));
    }

    #[test]
    fn gmm_degenerate_and_guard_paths() {
        let fit = gmm_base_weights(&[0.4; 10], &GmmConfig::default());
        assert!(fit.weights.iter().all(|w| *w == fit.weights[0]));
        assert_eq!(gmm_base_weights(&[0.4], &GmmConfig::default()).weights, vec![1.0]);
        let capped = gmm_base_weights(
            &[0.1, 0.2, 0.9, 1.1, 0.15, 1.0],
            &GmmConfig { max_iters: 1, ..GmmConfig::default() },
        );
        assert!(!capped.converged);
        assert_eq!(capped.weights.len(), 6);
    }

    #[test]
    fn fuse_examples() {
        let recs = LossRecordSet::from_entries(vec![LossRecord { user: 0, item: 1, loss: 0.3 }]).unwrap();
        let wu = ReputationVector { scores: vec![2.0], alpha: 1.0, beta: 2.0 };
        let wi = ReputationVector { scores: vec![1.0, 1.5], alpha: 1.0, beta: 2.0 };
        let t = fuse(&recs, &[0.5], &wu, &wi, Components::ALL).unwrap();
        assert_eq!(t.get(0, 1), 1.5);
        let base_only = Components { base: true, item: false, user: false };
        assert_eq!(fuse(&recs, &[0.5], &wu, &wi, base_only).unwrap().get(0, 1), 0.5);
        assert_eq!(t.get(0, 0), 1.0, "absent pairs default to 1");
        let short = ReputationVector { scores: vec![], alpha: 1.0, beta: 1.0 };
        assert!(fuse(&recs, &[0.5], &short, &wi, Components::ALL).is_err());
    }

    #[test]
    fn fuse_duplicate_pairs_keep_last() {
        let recs = LossRecordSet::from_entries(vec![
            LossRecord { user: 0, item: 0, loss: 0.3 },
            LossRecord { user: 0, item: 0, loss: 0.9 },
        ])
        .unwrap();
        let ones = ReputationVector::constant(1, 1.0);
        let t = fuse(&recs, &[0.8, 0.2], &ones, &ones, Components::ALL).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.get(0, 0), 0.2);
    }

    #[test]
    fn components_parse_and_print() {
        assert_eq!("bw,if,uf".parse::<Components>().unwrap(), Components::ALL);
        assert_eq!("".parse::<Components>().unwrap(), Components::NONE);
        assert_eq!(Components::ALL.to_string(), "bw,if,uf");
        assert!("bw,xx".parse::<Components>().is_err());
    }

    #[test]
    fn weight_table_dump_is_sorted() {
        let mut t = WeightTable::ones();
        t.insert(1, 0, 0.25).unwrap();
        t.insert(0, 2, 1.0 / 3.0).unwrap();
        let mut buf = Vec::new();
        t.write_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "0\t2\t3.3333333333333331e-1\n1\t0\t2.5000000000000000e-1\n");
    }

    proptest! {
        #[test]
        fn ecdf_matches_counting_oracle(losses in prop::collection::vec(0u32..40, 1..200)) {
            let losses: Vec<f64> = losses.into_iter().map(|v| v as f64 / 8.0).collect();
            prop_assert!(close(&ecdf_base_weights(&losses), &ecdf_oracle(&losses)));
        }

        #[test]
        fn ecdf_depends_on_ranks_only(losses in prop::collection::vec(0.0f64..5.0, 1..100)) {
            let transformed: Vec<f64> = losses.iter().map(|l| (l * 3.0).exp()).collect();
            prop_assert_eq!(ecdf_base_weights(&losses), ecdf_base_weights(&transformed));
        }

        #[test]
        fn ecdf_distinct_is_hazen_permutation(n in 1usize..150) {
            let losses: Vec<f64> = (0..n).map(|k| (k as f64 * 1.7).sin() + 2.0).collect();
            let mut w = ecdf_base_weights(&losses);
            let mean = w.iter().sum::<f64>() / n as f64;
            prop_assert!((mean - 0.5).abs() < 1e-12);
            w.sort_by(f64::total_cmp);
            for (r, x) in w.iter().enumerate() {
                prop_assert!((x - (r as f64 + 0.5) / n as f64).abs() < 1e-15);
            }
        }

        #[test]
        fn weights_nonincreasing_in_loss(losses in prop::collection::vec(0.0f64..5.0, 2..80), rho in 0.05f64..1.0) {
            let mut order: Vec<usize> = (0..losses.len()).collect();
            order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]));
            for w in [ecdf_base_weights(&losses), linear_base_weights(&losses), topk_base_weights(&losses, rho).unwrap()] {
                for pair in order.windows(2) {
                    prop_assert!(w[pair[0]] >= w[pair[1]]);
                }
            }
        }

        #[test]
        fn rank_map_bounds_and_shift(
            raw in prop::collection::vec(prop::option::of(0u32..1000), 1..60),
            a in 0.0f64..5.0, span in 0.0f64..5.0, shift in 0u32..100,
        ) {
            let avg: Vec<Option<f64>> = raw.iter().map(|o| o.map(|v| v as f64 / 64.0)).collect();
            let shifted: Vec<Option<f64>> = raw.iter().map(|o| o.map(|v| (v + 64 * shift) as f64 / 64.0)).collect();
            let b = a + span;
            let r = rank_map(&avg, a, b).unwrap();
            for s in &r.scores {
                prop_assert!(*s >= a && *s <= b);
            }
            prop_assert_eq!(&r, &rank_map(&shifted, a, b).unwrap());
        }
    }
}
